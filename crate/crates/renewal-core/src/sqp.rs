//! Sequential quadratic programming for the smooth nonconvex cases.
//!
//! All problems share one structure: a separable objective
//! `f(d) = sum_i f_i(d_i)`, a single separable constraint
//! `g(d) = sum_i g_i(d_i) + const <= 0`, and a per-coordinate box. At each
//! iterate a quadratic model of the Lagrangian is minimised subject to the
//! linearised constraint and the (already linear) box, the multiplier is
//! pulled toward the subproblem's, and a backtracking line search on the
//! exact-penalty merit `f + r * max(g, 0)` with `r > |lambda|` globalises the
//! step. The Hessian is either the dense BFGS quasi-Newton approximation
//! (kept positive definite by Powell damping) or the exact diagonal of the
//! Lagrangian Hessian, which separability makes available at any size.
//!
//! Builders normalise objectives and constraints to O(1) scale (volumes by
//! the total premium, retention by the policy count), so the KKT tolerances
//! are scale-free. Reported objective values elsewhere are always recomputed
//! from the raw definitions in [`crate::objectives`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::objectives::{Constraints, DeltaVector, VarianceMode};
use crate::portfolio::{PolicyParams, Portfolio};
use crate::qp::{kkt_residuals, solve_box_qp_active_set, solve_box_qp_diag, HessView, KktCertificate};

/// Closed-form per-policy response with two derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ScalarModel {
    Ma { pi: f64, a: f64, b: f64 },
    Mb { t: f64, c: f64 },
    Quad { q2: f64, q1: f64, q0: f64 },
}

impl ScalarModel {
    /// `(psi, psi', psi'')` at change fraction `d`.
    #[inline]
    fn psi012(&self, d: f64) -> (f64, f64, f64) {
        match *self {
            ScalarModel::Ma { pi, a, b } => {
                (pi * (1.0 + a * d + b * d * d), pi * (a + 2.0 * b * d), 2.0 * pi * b)
            }
            ScalarModel::Mb { t, c } => {
                let p = 1.0 / (1.0 + (-t * d).exp() / c);
                let d1 = t * p * (1.0 - p);
                (p, d1, t * d1 * (1.0 - 2.0 * p))
            }
            ScalarModel::Quad { q2, q1, q0 } => {
                (q2 * d * d + q1 * d + q0, 2.0 * q2 * d + q1, 2.0 * q2)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ObjKind {
    /// `-scale * sum P_i (1+d_i) psi_i`
    Volume,
    /// `-scale * sum P_i d_i psi_i`
    Difference,
    /// `-(1/N) sum psi_i`
    Retention,
    /// `-scale * sum [P_i (1+d_i) psi_i - weight * var_i]`
    VolumeVariance { weight: f64, corrected: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ConKind {
    /// `floor - (1/N) sum psi_i <= 0`
    RetentionFloor,
    /// `(E + C - sum P_i (1+d_i) psi_i) / E <= 0`
    VolumeFloor,
}

/// A separable smooth problem `min f(d)` s.t. `g(d) <= 0`, `lo <= d <= hi`.
#[derive(Debug, Clone)]
pub struct SmoothProblem {
    premiums: Vec<f64>,
    models: Vec<ScalarModel>,
    obj: ObjKind,
    con: ConKind,
    obj_scale: f64,
    con_scale: f64,
    g_const: f64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

#[derive(Clone, Copy, Default)]
struct TermEval {
    f: f64,
    f1: f64,
    f2: f64,
    g: f64,
    g1: f64,
    g2: f64,
}

impl SmoothProblem {
    pub fn dim(&self) -> usize {
        self.premiums.len()
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    #[inline]
    fn term(&self, i: usize, d: f64) -> TermEval {
        let p = self.premiums[i];
        let (psi, psi1, psi2) = self.models[i].psi012(d);
        let w = 1.0 + d;
        // Volume piece and derivatives, reused by several kinds.
        let v = p * w * psi;
        let v1 = p * (psi + w * psi1);
        let v2 = p * (2.0 * psi1 + w * psi2);
        let (f, f1, f2) = match self.obj {
            ObjKind::Volume => (-v, -v1, -v2),
            ObjKind::Difference => {
                let u = p * d * psi;
                let u1 = p * (psi + d * psi1);
                let u2 = p * (2.0 * psi1 + d * psi2);
                (-u, -u1, -u2)
            }
            ObjKind::Retention => (-psi, -psi1, -psi2),
            ObjKind::VolumeVariance { weight, corrected } => {
                let k = psi * (1.0 - psi);
                let k1 = psi1 * (1.0 - 2.0 * psi);
                let k2 = psi2 * (1.0 - 2.0 * psi) - 2.0 * psi1 * psi1;
                let (z, z1, z2) = if corrected {
                    let pw = p * w;
                    (
                        pw * pw * k,
                        p * p * (2.0 * w * k + w * w * k1),
                        p * p * (2.0 * k + 4.0 * w * k1 + w * w * k2),
                    )
                } else {
                    (p * w * k, p * (k + w * k1), p * (2.0 * k1 + w * k2))
                };
                (-(v - weight * z), -(v1 - weight * z1), -(v2 - weight * z2))
            }
        };
        let (g, g1, g2) = match self.con {
            ConKind::RetentionFloor => (-psi, -psi1, -psi2),
            ConKind::VolumeFloor => (-v, -v1, -v2),
        };
        TermEval {
            f: self.obj_scale * f,
            f1: self.obj_scale * f1,
            f2: self.obj_scale * f2,
            g: self.con_scale * g,
            g1: self.con_scale * g1,
            g2: self.con_scale * g2,
        }
    }

    pub fn objective(&self, d: &[f64]) -> f64 {
        exec::sum_indexed(self.dim(), |i| self.term(i, d[i]).f)
    }

    pub fn gradient(&self, d: &[f64]) -> Vec<f64> {
        exec::map_indexed(self.dim(), |i| self.term(i, d[i]).f1)
    }

    /// `g(d)`; feasible points satisfy `g <= 0`.
    pub fn constraint(&self, d: &[f64]) -> f64 {
        exec::sum_indexed(self.dim(), |i| self.term(i, d[i]).g) + self.g_const
    }

    pub fn constraint_gradient(&self, d: &[f64]) -> Vec<f64> {
        exec::map_indexed(self.dim(), |i| self.term(i, d[i]).g1)
    }

    fn eval_fg(&self, d: &[f64]) -> (f64, f64) {
        let (f, g) = exec::sum2_indexed(self.dim(), |i| {
            let t = self.term(i, d[i]);
            (t.f, t.g)
        });
        (f, g + self.g_const)
    }

    /// Objective/constraint values and gradients in one pass.
    fn eval_full(&self, d: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let evals = exec::map_indexed(self.dim(), |i| self.term(i, d[i]));
        let mut f = 0.0;
        let mut g = self.g_const;
        let mut gf = Vec::with_capacity(evals.len());
        let mut gg = Vec::with_capacity(evals.len());
        for t in &evals {
            f += t.f;
            g += t.g;
            gf.push(t.f1);
            gg.push(t.g1);
        }
        (f, g, gf, gg)
    }

    fn lagrangian_hess_diag(&self, d: &[f64], lambda: f64) -> Vec<f64> {
        exec::map_indexed(self.dim(), |i| {
            let t = self.term(i, d[i]);
            (t.f2 + lambda * t.g2).max(1e-8)
        })
    }

    /// Internal constructor for the discrete solver's continuous surrogate:
    /// a fitted quadratic response per policy under a retention floor.
    pub(crate) fn quad_volume(
        premiums: Vec<f64>,
        fits: Vec<(f64, f64, f64)>,
        retention_floor: f64,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Self {
        let n = premiums.len();
        let total: f64 = premiums.iter().sum();
        SmoothProblem {
            premiums,
            models: fits
                .into_iter()
                .map(|(q2, q1, q0)| ScalarModel::Quad { q2, q1, q0 })
                .collect(),
            obj: ObjKind::Volume,
            con: ConKind::RetentionFloor,
            obj_scale: 1.0 / total,
            con_scale: 1.0 / n as f64,
            g_const: retention_floor,
            lo,
            hi,
        }
    }
}

/// Per-policy box plus validity of the response on it.
fn boxes_and_models(
    pf: &Portfolio,
    cons: &Constraints,
    require_monotone: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<ScalarModel>)> {
    let n = pf.len();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    let mut models = Vec::with_capacity(n);
    for p in pf.policies() {
        let (l, h) = cons.delta_box(p.premium);
        if l > h {
            return Err(Error::InvalidPolicy {
                id: p.id.clone(),
                msg: format!("empty change box [{l}, {h}] after absolute bounds"),
            });
        }
        let model = match p.params {
            PolicyParams::Ma { a, b } => {
                // psi extremes on the box sit at the ends or at the vertex.
                let mut candidates = vec![l, h];
                if b != 0.0 {
                    let vertex = -a / (2.0 * b);
                    if vertex > l && vertex < h {
                        if require_monotone {
                            return Err(Error::InvalidPolicy {
                                id: p.id.clone(),
                                msg: format!(
                                    "response is not monotone on [{l}, {h}]: vertex at {vertex}"
                                ),
                            });
                        }
                        candidates.push(vertex);
                    }
                }
                for d in candidates {
                    let psi = p.pi0 * (1.0 + a * d + b * d * d);
                    if psi <= 0.0 || psi >= 1.0 {
                        return Err(Error::InvalidPolicy {
                            id: p.id.clone(),
                            msg: format!(
                                "renewal probability {psi} leaves (0,1) at delta {d} on the box"
                            ),
                        });
                    }
                }
                ScalarModel::Ma { pi: p.pi0, a, b }
            }
            PolicyParams::Mb { t } => ScalarModel::Mb { t, c: p.pi0 / (1.0 - p.pi0) },
            PolicyParams::Mc { .. } => {
                return Err(Error::InvalidPolicy {
                    id: p.id.clone(),
                    msg: "table model has no smooth problem; use the discrete solver".into(),
                })
            }
        };
        lo.push(l);
        hi.push(h);
        models.push(model);
    }
    Ok((lo, hi, models))
}

fn premiums(pf: &Portfolio) -> Vec<f64> {
    pf.policies().iter().map(|p| p.premium).collect()
}

/// Volume maximisation for polynomial elasticities (any `b` in the validity
/// window); `b = 0` collapses to the quadratic program's objective.
pub fn build_problem_ma_cubic(pf: &Portfolio, cons: &Constraints) -> Result<SmoothProblem> {
    if pf.kind() != crate::portfolio::ModelKind::Ma {
        return Err(Error::config("cubic builder requires the polynomial model"));
    }
    build_volume(pf, cons, ObjKind::Volume)
}

/// Volume maximisation for logit elasticities.
pub fn build_problem_mb(pf: &Portfolio, cons: &Constraints) -> Result<SmoothProblem> {
    if pf.kind() != crate::portfolio::ModelKind::Mb {
        return Err(Error::config("logit builder requires the logit model"));
    }
    build_volume(pf, cons, ObjKind::Volume)
}

/// Premium-difference maximisation for either smooth family.
pub fn build_problem_difference(pf: &Portfolio, cons: &Constraints) -> Result<SmoothProblem> {
    build_volume(pf, cons, ObjKind::Difference)
}

fn build_volume(pf: &Portfolio, cons: &Constraints, obj: ObjKind) -> Result<SmoothProblem> {
    let (lo, hi, models) = boxes_and_models(pf, cons, true)?;
    let prem = premiums(pf);
    let total: f64 = prem.iter().sum();
    Ok(SmoothProblem {
        premiums: prem,
        models,
        obj,
        con: ConKind::RetentionFloor,
        obj_scale: 1.0 / total,
        con_scale: 1.0 / pf.len() as f64,
        g_const: cons.retention_floor,
        lo,
        hi,
    })
}

/// Retention maximisation subject to growing the expected volume by at least
/// `loading_c` over its no-change value.
pub fn build_problem_retention_max(
    pf: &Portfolio,
    cons: &Constraints,
    loading_c: f64,
) -> Result<SmoothProblem> {
    if !(loading_c >= 0.0) {
        return Err(Error::config("loading must be non-negative"));
    }
    let (lo, hi, models) = boxes_and_models(pf, cons, true)?;
    let prem = premiums(pf);
    let baseline = crate::objectives::baseline_volume(pf);

    // Structural feasibility: the best attainable volume on the box (fine
    // scan per policy; the per-policy terms are smooth and one-dimensional).
    let max_volume = exec::sum_indexed(pf.len(), |i| {
        let mut best = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let d = lo[i] + (hi[i] - lo[i]) * k as f64 / 1000.0;
            let (psi, _, _) = models[i].psi012(d);
            best = best.max(prem[i] * (1.0 + d) * psi);
        }
        best
    });
    if max_volume < baseline + loading_c {
        return Err(Error::infeasible(format!(
            "volume floor unattainable: requested {:.3} but the box attains at most {:.3}",
            baseline + loading_c,
            max_volume
        )));
    }

    Ok(SmoothProblem {
        premiums: prem,
        models,
        obj: ObjKind::Retention,
        con: ConKind::VolumeFloor,
        obj_scale: 1.0 / pf.len() as f64,
        con_scale: 1.0 / baseline,
        g_const: (baseline + loading_c) / baseline,
        lo,
        hi,
    })
}

/// Scalarised volume/variance trade-off for the linear-elasticity model.
pub fn build_problem_volume_variance(
    pf: &Portfolio,
    cons: &Constraints,
    risk_weight: f64,
    mode: VarianceMode,
) -> Result<SmoothProblem> {
    for p in pf.policies() {
        let PolicyParams::Ma { b, .. } = p.params else {
            return Err(Error::InvalidPolicy {
                id: p.id.clone(),
                msg: "volume/variance trade-off requires the polynomial model".into(),
            });
        };
        if b != 0.0 {
            return Err(Error::InvalidPolicy {
                id: p.id.clone(),
                msg: "volume/variance trade-off requires b = 0".into(),
            });
        }
    }
    let (lo, hi, models) = boxes_and_models(pf, cons, true)?;
    let prem = premiums(pf);
    let total: f64 = prem.iter().sum();
    Ok(SmoothProblem {
        premiums: prem,
        models,
        obj: ObjKind::VolumeVariance {
            weight: risk_weight,
            corrected: mode == VarianceMode::Corrected,
        },
        con: ConKind::RetentionFloor,
        obj_scale: 1.0 / total,
        con_scale: 1.0 / pf.len() as f64,
        g_const: cons.retention_floor,
        lo,
        hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianScheme {
    /// Dense BFGS for small problems, exact diagonal above 200 variables.
    #[default]
    Auto,
    BfgsDense,
    DiagonalExact,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SqpConfig {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    /// Floor for the merit penalty; the effective penalty each iteration is
    /// `max(merit_penalty_r, 2|lambda| + 1)`.
    pub merit_penalty_r: f64,
    pub armijo_constant: f64,
    pub step_shrink_factor: f64,
    pub hessian_scheme: HessianScheme,
}

impl Default for SqpConfig {
    fn default() -> Self {
        SqpConfig {
            max_iterations: 300,
            kkt_tolerance: 1e-8,
            merit_penalty_r: 1.0,
            armijo_constant: 1e-4,
            step_shrink_factor: 0.5,
            hessian_scheme: HessianScheme::Auto,
        }
    }
}

impl SqpConfig {
    fn validate(&self) -> Result<()> {
        if !(self.kkt_tolerance > 0.0) {
            return Err(Error::config("kkt_tolerance must be positive"));
        }
        if !(self.step_shrink_factor > 0.0 && self.step_shrink_factor < 1.0) {
            return Err(Error::config("step_shrink_factor must lie in (0,1)"));
        }
        if !(self.armijo_constant > 0.0 && self.armijo_constant < 1.0) {
            return Err(Error::config("armijo_constant must lie in (0,1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpTraceRow {
    pub iter: usize,
    pub merit: f64,
    pub kkt_residual: f64,
    pub step_norm: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub delta: DeltaVector,
    pub certificate: KktCertificate,
    pub termination: Termination,
    pub iterations: usize,
    pub lambda: f64,
    pub trace: Vec<SqpTraceRow>,
}

impl SqpResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

/// Write an iteration trace as `iter,merit,kkt_residual,step_norm,lambda`.
pub fn write_trace_csv(path: impl AsRef<std::path::Path>, trace: &[SqpTraceRow]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iter,merit,kkt_residual,step_norm,lambda")?;
    for r in trace {
        writeln!(out, "{},{},{},{},{}", r.iter, r.merit, r.kkt_residual, r.step_norm, r.lambda)?;
    }
    Ok(())
}

struct DenseBfgs {
    h: Vec<f64>,
    n: usize,
}

impl DenseBfgs {
    fn identity(n: usize) -> Self {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        DenseBfgs { h, n }
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for j in 0..self.n {
                s += self.h[i * self.n + j] * x[j];
            }
            out[i] = s;
        }
    }

    /// Damped BFGS update keeping the matrix positive definite.
    fn update(&mut self, s: &[f64], y: &[f64]) {
        let n = self.n;
        let mut hs = vec![0.0; n];
        self.mul(s, &mut hs);
        let shs: f64 = s.iter().zip(&hs).map(|(a, b)| a * b).sum();
        if shs <= 1e-16 {
            return;
        }
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let (yv, sy) = if sy < 0.2 * shs {
            let theta = 0.8 * shs / (shs - sy);
            let yv: Vec<f64> =
                y.iter().zip(&hs).map(|(yi, hi)| theta * yi + (1.0 - theta) * hi).collect();
            let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
            (yv, sy)
        } else {
            (y.to_vec(), sy)
        };
        if sy.abs() < 1e-12 * shs.max(1.0) {
            return;
        }
        for i in 0..n {
            for j in 0..n {
                self.h[i * n + j] += -hs[i] * hs[j] / shs + yv[i] * yv[j] / sy;
            }
        }
    }
}

/// Solve the separable problem starting from `start` (clipped to the box).
/// The start need not satisfy the constraint. Terminates when the KKT
/// residuals drop below `cfg.kkt_tolerance` or on the iteration cap, which
/// the result distinguishes.
pub fn sqp_solve(
    problem: &SmoothProblem,
    start: &DeltaVector,
    cfg: &SqpConfig,
) -> Result<SqpResult> {
    cfg.validate()?;
    let n = problem.dim();
    if start.len() != n {
        return Err(Error::Alignment { got: start.len(), expected: n });
    }
    let (lo, hi) = problem.bounds();
    let mut x: Vec<f64> =
        (0..n).map(|i| start[i].clamp(lo[i], hi[i])).collect();
    let mut lambda: f64 = 1.0;

    let use_bfgs = match cfg.hessian_scheme {
        HessianScheme::BfgsDense => true,
        HessianScheme::DiagonalExact => false,
        HessianScheme::Auto => n <= 200,
    };
    let mut bfgs = use_bfgs.then(|| DenseBfgs::identity(n));

    let mut trace = Vec::new();
    let mut restorations_without_progress = 0usize;
    let mut last_g_violation = f64::INFINITY;

    for iter in 0..cfg.max_iterations {
        let (f, g, grad_f, grad_g) = problem.eval_full(&x);
        let cert = kkt_residuals(&grad_f, &grad_g, g, &x, lambda, lo, hi);
        if cert.within(cfg.kkt_tolerance, cfg.kkt_tolerance) {
            return Ok(SqpResult {
                delta: DeltaVector(x),
                certificate: cert,
                termination: Termination::Converged,
                iterations: iter,
                lambda,
                trace,
            });
        }

        // Subproblem box in step coordinates.
        let slo: Vec<f64> = (0..n).map(|i| lo[i] - x[i]).collect();
        let shi: Vec<f64> = (0..n).map(|i| hi[i] - x[i]).collect();

        // Linearised feasibility on the box.
        let lin_min: f64 = (0..n)
            .map(|i| (grad_g[i] * slo[i]).min(grad_g[i] * shi[i]))
            .sum::<f64>()
            + g;

        let (step, lambda_qp) = if lin_min > 0.0 {
            // The linearised constraint cannot be met inside the box: take a
            // pure feasibility-restoration step toward the constraint's
            // steepest box descent.
            let grad_norm = grad_g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if grad_norm <= 1e-14 {
                return Err(Error::infeasible(format!(
                    "linearised constraint infeasible at iteration {iter}: g = {g:.6e} \
                     with a vanishing constraint gradient"
                )));
            }
            if g >= last_g_violation - 1e-14 {
                restorations_without_progress += 1;
                if restorations_without_progress >= 5 {
                    return Err(Error::infeasible(format!(
                        "constraint violation stopped improving during restoration at \
                         iteration {iter}: g = {g:.6e}"
                    )));
                }
            } else {
                restorations_without_progress = 0;
            }
            last_g_violation = g;
            let s: Vec<f64> = (0..n)
                .map(|i| {
                    0.5 * if grad_g[i] * slo[i] < grad_g[i] * shi[i] { slo[i] } else { shi[i] }
                })
                .collect();
            (s, lambda)
        } else {
            restorations_without_progress = 0;
            last_g_violation = f64::INFINITY;
            let solved = match &bfgs {
                Some(b) => solve_box_qp_active_set(
                    HessView::Dense(&b.h),
                    &grad_f,
                    &grad_g,
                    g,
                    &slo,
                    &shi,
                ),
                None => {
                    let h = problem.lagrangian_hess_diag(&x, lambda);
                    solve_box_qp_diag(&h, &grad_f, &grad_g, g, &slo, &shi)
                }
            };
            match solved {
                Ok(sol) => (sol.x, sol.lambda),
                Err(Error::Infeasible(msg)) => {
                    return Err(Error::infeasible(format!(
                        "QP subproblem infeasible at iteration {iter}: {msg}"
                    )))
                }
                Err(e) => return Err(e),
            }
        };

        let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d_lambda = lambda_qp - lambda;

        // Exact-penalty line search.
        let r = cfg.merit_penalty_r.max(2.0 * lambda_qp.abs() + 1.0);
        let merit0 = f + r * g.max(0.0);
        let dir_deriv: f64 = {
            let gf_s: f64 = grad_f.iter().zip(&step).map(|(a, b)| a * b).sum();
            gf_s - r * g.max(0.0)
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= 1e-14 {
            let xt: Vec<f64> =
                (0..n).map(|i| (x[i] + alpha * step[i]).clamp(lo[i], hi[i])).collect();
            let (ft, gt) = problem.eval_fg(&xt);
            let merit_t = ft + r * gt.max(0.0);
            if merit_t <= merit0 + cfg.armijo_constant * alpha * dir_deriv.min(0.0)
                || merit_t <= merit0 - 1e-16 * merit0.abs()
            {
                accepted = Some((xt, merit_t));
                break;
            }
            alpha *= cfg.step_shrink_factor;
        }
        let Some((x_new, merit_new)) = accepted else {
            // No acceptable step: either we are at a stationary point the
            // residual check has not caught (loose multiplier), or the model
            // is stuck. Re-certify with the subproblem multiplier, then err.
            let cert2 = kkt_residuals(&grad_f, &grad_g, g, &x, lambda_qp, lo, hi);
            if cert2.within(cfg.kkt_tolerance, cfg.kkt_tolerance) {
                return Ok(SqpResult {
                    delta: DeltaVector(x),
                    certificate: cert2,
                    termination: Termination::Converged,
                    iterations: iter,
                    lambda: lambda_qp,
                    trace,
                });
            }
            return Err(Error::solver(format!(
                "line search stalled at iteration {iter} (step below 1e-14, \
                 kkt residual {:.3e})",
                cert.stationarity_residual
            )));
        };

        let lambda_new = (lambda + alpha * d_lambda).max(0.0);
        trace.push(SqpTraceRow {
            iter,
            merit: merit_new,
            kkt_residual: cert.stationarity_residual.max(cert.primal_violation),
            step_norm: alpha * step_norm,
            lambda: lambda_new,
        });

        if let Some(b) = bfgs.as_mut() {
            let s_vec: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
            if s_vec.iter().any(|v| v.abs() > 0.0) {
                let grad_f_new = problem.gradient(&x_new);
                let grad_g_new = problem.constraint_gradient(&x_new);
                let y: Vec<f64> = (0..n)
                    .map(|i| {
                        grad_f_new[i] + lambda_new * grad_g_new[i]
                            - (grad_f[i] + lambda_new * grad_g[i])
                    })
                    .collect();
                b.update(&s_vec, &y);
            }
        }

        x = x_new;
        lambda = lambda_new;
    }

    let (_, g, grad_f, grad_g) = problem.eval_full(&x);
    let cert = kkt_residuals(&grad_f, &grad_g, g, &x, lambda, lo, hi);
    Ok(SqpResult {
        delta: DeltaVector(x),
        certificate: cert,
        termination: Termination::MaxIterations,
        iterations: cfg.max_iterations,
        lambda,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio::{Policy, Portfolio};
    use approx::assert_abs_diff_eq;

    fn ma_portfolio(rows: &[(f64, f64, f64, f64)]) -> Portfolio {
        let policies = rows
            .iter()
            .enumerate()
            .map(|(i, &(p, pi, a, b))| {
                Policy::new(format!("p{i}"), p, pi, PolicyParams::Ma { a, b }).unwrap()
            })
            .collect();
        Portfolio::new(policies).unwrap()
    }

    fn mb_portfolio(rows: &[(f64, f64, f64)]) -> Portfolio {
        let policies = rows
            .iter()
            .enumerate()
            .map(|(i, &(p, pi, t))| {
                Policy::new(format!("p{i}"), p, pi, PolicyParams::Mb { t }).unwrap()
            })
            .collect();
        Portfolio::new(policies).unwrap()
    }

    #[test]
    fn cubic_builder_gradient_at_zero() {
        // Single-policy objective derivative at 0 is -scale * P*pi*(1+a).
        let pf = ma_portfolio(&[(100.0, 0.9, -0.08, -0.02)]);
        let cons = Constraints::new(0.85, (-0.10, 0.20)).unwrap();
        let prob = build_problem_ma_cubic(&pf, &cons).unwrap();
        let grad = prob.gradient(&[0.0]);
        assert_abs_diff_eq!(grad[0] * 100.0, -(100.0 * 0.9 * (1.0 - 0.08)), epsilon = 1e-9);
    }

    #[test]
    fn cubic_builder_rejects_nonmonotone_box() {
        // Vertex -a/(2b) = -0.05 sits strictly inside [-0.10, 0.20].
        let pf = ma_portfolio(&[(100.0, 0.9, -0.02, -0.2)]);
        let cons = Constraints::new(0.85, (-0.10, 0.20)).unwrap();
        let err = build_problem_ma_cubic(&pf, &cons).unwrap_err();
        assert!(err.to_string().contains("not monotone"), "{err}");
    }

    #[test]
    fn builders_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::single(23);
        let h = 1e-6;
        for trial in 0..60 {
            let n = rng.gen_range(1..6);
            let cons = Constraints::new(rng.gen_range(0.7..0.9), (-0.10, 0.20)).unwrap();
            let which = trial % 4;
            let (pf, prob) = match which {
                0 => {
                    let rows: Vec<_> = (0..n)
                        .map(|_| {
                            let pi: f64 = rng.gen_range(0.86..0.97);
                            let b: f64 = rng.gen_range(-0.25..-0.02);
                            let a = (0.2 * b) * rng.gen_range(1.0..1.4);
                            (rng.gen_range(50.0..500.0), pi, a, b)
                        })
                        .collect();
                    let pf = ma_portfolio(&rows);
                    let prob = build_problem_ma_cubic(&pf, &cons).unwrap();
                    (pf, prob)
                }
                1 => {
                    let rows: Vec<_> = (0..n)
                        .map(|_| {
                            (
                                rng.gen_range(50.0..500.0),
                                rng.gen_range(0.86..0.97),
                                rng.gen_range(-8.0..-1.0),
                            )
                        })
                        .collect();
                    let pf = mb_portfolio(&rows);
                    let prob = build_problem_mb(&pf, &cons).unwrap();
                    (pf, prob)
                }
                2 => {
                    let rows: Vec<_> = (0..n)
                        .map(|_| {
                            (
                                rng.gen_range(50.0..500.0),
                                rng.gen_range(0.86..0.97),
                                rng.gen_range(-8.0..-1.0),
                            )
                        })
                        .collect();
                    let pf = mb_portfolio(&rows);
                    let prob = build_problem_retention_max(&pf, &cons, 0.0).unwrap();
                    (pf, prob)
                }
                _ => {
                    let rows: Vec<_> = (0..n)
                        .map(|_| {
                            let pi: f64 = rng.gen_range(0.86..0.97);
                            let a = 3.0 * (1.0 - 1.0 / pi) * rng.gen_range(0.3..0.95);
                            (rng.gen_range(50.0..500.0), pi, a, 0.0)
                        })
                        .collect();
                    let pf = ma_portfolio(&rows);
                    let prob = build_problem_volume_variance(
                        &pf,
                        &cons,
                        1e-3,
                        VarianceMode::Corrected,
                    )
                    .unwrap();
                    (pf, prob)
                }
            };
            let _ = pf;
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.08..0.18)).collect();
            let grad = prob.gradient(&d);
            let ggrad = prob.constraint_gradient(&d);
            for i in 0..n {
                let mut dp = d.clone();
                let mut dm = d.clone();
                dp[i] += h;
                dm[i] -= h;
                let fd_f = (prob.objective(&dp) - prob.objective(&dm)) / (2.0 * h);
                let fd_g = (prob.constraint(&dp) - prob.constraint(&dm)) / (2.0 * h);
                assert!((grad[i] - fd_f).abs() <= 1e-6, "obj grad {} vs {}", grad[i], fd_f);
                assert!((ggrad[i] - fd_g).abs() <= 1e-6, "con grad {} vs {}", ggrad[i], fd_g);
            }
        }
    }

    #[test]
    fn convex_case_matches_qp() {
        use rand::Rng;
        let mut rng = crate::rng::single(41);
        for scheme in [HessianScheme::BfgsDense, HessianScheme::DiagonalExact] {
            for _ in 0..10 {
                let n = rng.gen_range(1..25);
                let rows: Vec<_> = (0..n)
                    .map(|_| {
                        let pi: f64 = rng.gen_range(0.86..0.97);
                        let a = 6.0 * (1.0 - 1.0 / pi) * rng.gen_range(0.1..0.9);
                        (rng.gen_range(100.0..3000.0), pi, a, 0.0)
                    })
                    .collect();
                let pf = ma_portfolio(&rows);
                let cons = Constraints::new(rng.gen_range(0.85..0.93), (-0.10, 0.20)).unwrap();
                let qp = crate::qp::assemble_qp(&pf, &cons).unwrap();
                let Ok((d_qp, _)) = crate::qp::solve_qp(&qp) else {
                    continue;
                };
                let prob = build_problem_ma_cubic(&pf, &cons).unwrap();
                let cfg = SqpConfig { hessian_scheme: scheme, ..SqpConfig::default() };
                let res = sqp_solve(&prob, &DeltaVector::zeros(n), &cfg).unwrap();
                assert!(res.converged(), "{:?}", res.certificate);
                let v_qp = crate::objectives::q_vol(&pf, &d_qp).unwrap();
                let v_sqp = crate::objectives::q_vol(&pf, &res.delta).unwrap();
                assert!(
                    (v_qp - v_sqp).abs() <= 1e-6 * v_qp.abs(),
                    "scheme {scheme:?}: {v_qp} vs {v_sqp}"
                );
            }
        }
    }

    #[test]
    fn single_logit_policy_binding_floor() {
        // psi(d) = 0.93 binds at d = ln((1/0.93 - 1) * 19) / 5.
        let pf = mb_portfolio(&[(100.0, 0.95, -5.0)]);
        let cons = Constraints::new(0.93, (-0.10, 0.20)).unwrap();
        let prob = build_problem_mb(&pf, &cons).unwrap();
        let res = sqp_solve(&prob, &DeltaVector::zeros(1), &SqpConfig::default()).unwrap();
        assert!(res.converged());
        let expect = ((1.0f64 / 0.93 - 1.0) * 19.0).ln() / 5.0;
        assert_abs_diff_eq!(res.delta[0], expect, epsilon = 1e-6);
    }

    #[test]
    fn start_at_optimum_stops_immediately() {
        let pf = mb_portfolio(&[(100.0, 0.95, -5.0)]);
        let cons = Constraints::new(0.93, (-0.10, 0.20)).unwrap();
        let prob = build_problem_mb(&pf, &cons).unwrap();
        let first = sqp_solve(&prob, &DeltaVector::zeros(1), &SqpConfig::default()).unwrap();
        let again = sqp_solve(&prob, &first.delta, &SqpConfig::default()).unwrap();
        assert!(again.converged());
        assert!(again.iterations <= 1, "iterations {}", again.iterations);
        let moved = (again.delta[0] - first.delta[0]).abs();
        assert!(moved <= 1e-9, "moved {moved}");
    }

    #[test]
    fn merit_is_monotone_along_accepted_steps() {
        let pf = mb_portfolio(&[
            (100.0, 0.95, -5.0),
            (400.0, 0.90, -3.0),
            (250.0, 0.93, -6.5),
        ]);
        let cons = Constraints::new(0.94, (-0.10, 0.20)).unwrap();
        let prob = build_problem_mb(&pf, &cons).unwrap();
        let res = sqp_solve(&prob, &DeltaVector::zeros(3), &SqpConfig::default()).unwrap();
        assert!(res.converged());
        for w in res.trace.windows(2) {
            assert!(w[1].merit <= w[0].merit + 1e-12 * w[0].merit.abs().max(1.0));
        }
    }

    #[test]
    fn retention_max_zero_loading_dominates_no_action() {
        let pf = mb_portfolio(&[(120.0, 0.92, -4.0), (300.0, 0.9, -2.5)]);
        let cons = Constraints::new(0.0, (-0.10, 0.20)).unwrap();
        let prob = build_problem_retention_max(&pf, &cons, 0.0).unwrap();
        let res = sqp_solve(&prob, &DeltaVector::zeros(2), &SqpConfig::default()).unwrap();
        assert!(res.converged());
        let r_opt = crate::objectives::retention(&pf, &res.delta).unwrap();
        let r_zero = crate::objectives::retention(&pf, &DeltaVector::zeros(2)).unwrap();
        assert!(r_opt >= r_zero - 1e-9, "{r_opt} vs {r_zero}");
    }

    #[test]
    fn retention_max_detects_unattainable_loading() {
        let pf = mb_portfolio(&[(100.0, 0.95, -5.0)]);
        let cons = Constraints::new(0.0, (-0.10, 0.20)).unwrap();
        let baseline = crate::objectives::baseline_volume(&pf);
        let err = build_problem_retention_max(&pf, &cons, baseline).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
        assert!(err.to_string().contains("attains at most"));
    }

    #[test]
    fn hessian_schemes_agree() {
        let pf = mb_portfolio(&[
            (100.0, 0.95, -5.0),
            (220.0, 0.9, -3.3),
            (90.0, 0.88, -6.0),
            (500.0, 0.93, -2.0),
        ]);
        let cons = Constraints::new(0.92, (-0.10, 0.20)).unwrap();
        let prob = build_problem_mb(&pf, &cons).unwrap();
        let dense = sqp_solve(
            &prob,
            &DeltaVector::zeros(4),
            &SqpConfig { hessian_scheme: HessianScheme::BfgsDense, ..SqpConfig::default() },
        )
        .unwrap();
        let diag = sqp_solve(
            &prob,
            &DeltaVector::zeros(4),
            &SqpConfig { hessian_scheme: HessianScheme::DiagonalExact, ..SqpConfig::default() },
        )
        .unwrap();
        assert!(dense.converged() && diag.converged());
        let vd = crate::objectives::q_vol(&pf, &dense.delta).unwrap();
        let vg = crate::objectives::q_vol(&pf, &diag.delta).unwrap();
        assert!((vd - vg).abs() <= 1e-6 * vd.abs(), "{vd} vs {vg}");
    }

    #[test]
    fn trace_csv_round_trip() {
        let rows = vec![
            SqpTraceRow { iter: 0, merit: 1.5, kkt_residual: 0.1, step_norm: 0.2, lambda: 1.0 },
            SqpTraceRow { iter: 1, merit: 1.2, kkt_residual: 0.01, step_norm: 0.05, lambda: 0.8 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,merit,kkt_residual,step_norm,lambda\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
