//! Market-tariff structure recovery.
//!
//! A tariff maps risk factors `(x, y)` to a premium through a capped
//! max-of-branches form:
//!
//! ```text
//! f(x, y) = min(M0, max(exp(a*x + b*arg), m0 + m1*x + m2*y))
//! ```
//!
//! where `arg` is `x` in the reference form (the two exponential
//! coefficients then act only through their sum) and can be switched to `y`.
//! Given optimised premiums at known risk points, `fit_tariff` recovers the
//! coefficients by derivative-free least squares — the min/max kinks make
//! gradients unreliable, so a restarted Nelder-Mead simplex does the search,
//! followed by an exact linear regression whenever every point ends up on
//! the linear branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::rng;

/// Which risk factor multiplies the second exponential coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpArg {
    /// The reference form: the exponent is `a*x + b*x`.
    #[default]
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TariffStructure {
    /// Premium cap `M0`.
    pub cap: f64,
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub exp_second_arg: ExpArg,
}

impl TariffStructure {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.cap, self.m0, self.m1, self.m2, self.a, self.b];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("tariff coefficients must be finite"));
        }
        if !(self.cap > 0.0) {
            return Err(Error::config("tariff cap must be positive"));
        }
        Ok(())
    }

    /// Flat `key = value` block used by the CLI output.
    pub fn to_key_value_block(&self) -> String {
        format!(
            "M0 = {}\nm0 = {}\nm1 = {}\nm2 = {}\na = {}\nb = {}\nexp_second_arg = {}\n",
            self.cap,
            self.m0,
            self.m1,
            self.m2,
            self.a,
            self.b,
            match self.exp_second_arg {
                ExpArg::X => "x",
                ExpArg::Y => "y",
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub x: f64,
    pub y: f64,
    pub target_premium: f64,
}

impl RiskPoint {
    pub fn new(x: f64, y: f64, target_premium: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::config("risk coordinates must be finite"));
        }
        if !(target_premium > 0.0) {
            return Err(Error::config("target premium must be positive"));
        }
        Ok(RiskPoint { x, y, target_premium })
    }

    /// Read `x,y,premium` rows (header required).
    pub fn from_csv_reader<R: std::io::Read>(rdr: R) -> Result<Vec<RiskPoint>> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
        let mut out = Vec::new();
        for (k, rec) in csv.records().enumerate() {
            let row = k + 2;
            let rec = rec?;
            let field = |j: usize, name: &str| -> Result<f64> {
                rec.get(j)
                    .ok_or_else(|| Error::CsvRow { row, msg: format!("missing {name}") })?
                    .parse()
                    .map_err(|e| Error::CsvRow { row, msg: format!("bad {name}: {e}") })
            };
            out.push(RiskPoint::new(field(0, "x")?, field(1, "y")?, field(2, "premium")?)?);
        }
        Ok(out)
    }
}

/// Evaluate the tariff. An overflowing exponential saturates to infinity and
/// is absorbed by the cap, so the result is always finite.
pub fn evaluate_tariff(t: &TariffStructure, x: f64, y: f64) -> f64 {
    let arg = match t.exp_second_arg {
        ExpArg::X => x,
        ExpArg::Y => y,
    };
    let e = t.a * x + t.b * arg;
    let exp_branch = if e > 700.0 { f64::INFINITY } else { e.exp() };
    let linear = t.m0 + t.m1 * x + t.m2 * y;
    t.cap.min(exp_branch.max(linear))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rss: f64,
    pub max_abs_residual: f64,
    pub max_rel_residual: f64,
    /// `fitted - target` per point.
    pub residuals: Vec<f64>,
    /// Every point sits on the cap: the sub-cap coefficients are
    /// unidentifiable and returned as-is.
    pub degenerate_cap: bool,
    pub evaluations: u64,
    /// Best residual sum after each accepted simplex improvement
    /// (non-increasing by construction).
    pub rss_history: Vec<f64>,
}

const DIM: usize = 6;

fn pack(t: &TariffStructure) -> [f64; DIM] {
    [t.cap, t.m0, t.m1, t.m2, t.a, t.b]
}

fn unpack(p: &[f64; DIM], arg: ExpArg) -> TariffStructure {
    TariffStructure {
        cap: p[0],
        m0: p[1],
        m1: p[2],
        m2: p[3],
        a: p[4],
        b: p[5],
        exp_second_arg: arg,
    }
}

fn rss(points: &[RiskPoint], t: &TariffStructure) -> f64 {
    if !(t.cap > 0.0) {
        return f64::INFINITY;
    }
    points
        .iter()
        .map(|p| {
            let r = evaluate_tariff(t, p.x, p.y) - p.target_premium;
            r * r
        })
        .sum()
}

struct NmOutcome {
    best: [f64; DIM],
    best_f: f64,
    evaluations: u64,
    history: Vec<f64>,
}

/// Standard Nelder-Mead (reflect/expand/contract/shrink) on the packed
/// coefficient vector.
fn nelder_mead(
    points: &[RiskPoint],
    arg: ExpArg,
    start: [f64; DIM],
    rel_step: f64,
    max_evals: u64,
) -> NmOutcome {
    let f = |p: &[f64; DIM]| rss(points, &unpack(p, arg));
    let mut evals = 0u64;
    let mut history = Vec::new();

    let mut simplex: Vec<([f64; DIM], f64)> = Vec::with_capacity(DIM + 1);
    simplex.push((start, f(&start)));
    evals += 1;
    for i in 0..DIM {
        let mut v = start;
        let h = rel_step * v[i].abs() + 1e-4;
        v[i] += h;
        simplex.push((v, f(&v)));
        evals += 1;
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    history.push(simplex[0].1);

    while evals < max_evals {
        let spread = simplex[DIM].1 - simplex[0].1;
        if spread <= 1e-15 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        // Centroid of all but the worst.
        let mut centroid = [0.0; DIM];
        for v in simplex.iter().take(DIM) {
            for k in 0..DIM {
                centroid[k] += v.0[k] / DIM as f64;
            }
        }
        let worst = simplex[DIM];
        let mut reflect = [0.0; DIM];
        for k in 0..DIM {
            reflect[k] = centroid[k] + (centroid[k] - worst.0[k]);
        }
        let f_r = f(&reflect);
        evals += 1;

        if f_r < simplex[0].1 {
            // Try expanding.
            let mut expand = [0.0; DIM];
            for k in 0..DIM {
                expand[k] = centroid[k] + 2.0 * (centroid[k] - worst.0[k]);
            }
            let f_e = f(&expand);
            evals += 1;
            simplex[DIM] = if f_e < f_r { (expand, f_e) } else { (reflect, f_r) };
        } else if f_r < simplex[DIM - 1].1 {
            simplex[DIM] = (reflect, f_r);
        } else {
            // Contract toward the better of worst/reflected.
            let (toward, f_t) =
                if f_r < worst.1 { (reflect, f_r) } else { (worst.0, worst.1) };
            let mut contract = [0.0; DIM];
            for k in 0..DIM {
                contract[k] = centroid[k] + 0.5 * (toward[k] - centroid[k]);
            }
            let f_c = f(&contract);
            evals += 1;
            if f_c < f_t {
                simplex[DIM] = (contract, f_c);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    for k in 0..DIM {
                        v.0[k] = best[k] + 0.5 * (v.0[k] - best[k]);
                    }
                    v.1 = f(&v.0);
                    evals += 1;
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if history.last().is_none_or(|&h| simplex[0].1 < h) {
            history.push(simplex[0].1);
        }
    }
    NmOutcome { best: simplex[0].0, best_f: simplex[0].1, evaluations: evals, history }
}

/// Least-squares fit of the tariff coefficients to optimised premiums.
/// Restarts from five jittered copies of `init`, refines the winner, and
/// never returns a structure with a worse residual than `init`.
pub fn fit_tariff(
    points: &[RiskPoint],
    init: &TariffStructure,
) -> Result<(TariffStructure, FitReport)> {
    init.validate()?;
    if points.len() < DIM {
        return Err(Error::config(format!(
            "need at least {DIM} points to identify {DIM} coefficients, got {}",
            points.len()
        )));
    }
    let arg = init.exp_second_arg;
    let start = pack(init);

    // Jittered restarts, run independently and ranked by (rss, index).
    const RESTARTS: usize = 6; // index 0 is the unjittered init
    let outcomes = exec::map_indexed(RESTARTS, |r| {
        let mut s = start;
        if r > 0 {
            let mut rng = rng::stream(0x7a71, r as u64);
            for v in s.iter_mut() {
                let jitter: f64 = rng.gen_range(-0.10..0.10);
                *v += jitter * (v.abs() + 1e-3);
            }
        }
        nelder_mead(points, arg, s, 0.10, 30_000)
    });
    let mut evaluations: u64 = outcomes.iter().map(|o| o.evaluations).sum();
    let mut best = &outcomes[0];
    for o in &outcomes[1..] {
        if o.best_f < best.best_f {
            best = o;
        }
    }

    // Refinement rounds from the incumbent with shrinking simplex sizes.
    let mut current = best.best;
    let mut current_f = best.best_f;
    let mut history = best.history.clone();
    for step in [0.02, 0.003] {
        let refined = nelder_mead(points, arg, current, step, 20_000);
        evaluations += refined.evaluations;
        if refined.best_f < current_f {
            current = refined.best;
            current_f = refined.best_f;
            history.extend(refined.history.into_iter().filter(|&h| h < current_f * 1.0 + 0.0));
        }
    }
    history.push(current_f);

    let mut fitted = unpack(&current, arg);

    // Branch classification at the fitted point.
    let mut all_linear = true;
    let mut all_cap = true;
    for p in points {
        let e = fitted.a * p.x
            + fitted.b * match arg {
                ExpArg::X => p.x,
                ExpArg::Y => p.y,
            };
        let exp_branch = if e > 700.0 { f64::INFINITY } else { e.exp() };
        let linear = fitted.m0 + fitted.m1 * p.x + fitted.m2 * p.y;
        let inner = exp_branch.max(linear);
        if inner >= fitted.cap {
            all_linear = false;
        } else {
            all_cap = false;
            if exp_branch > linear {
                all_linear = false;
            }
        }
    }

    if all_linear {
        // Pure linear regime: solve the normal equations exactly.
        if let Some((m0, m1, m2)) = linear_ls(points) {
            let candidate = TariffStructure { m0, m1, m2, ..fitted };
            let cand_rss = rss(points, &candidate);
            if cand_rss <= current_f {
                fitted = candidate;
                current_f = cand_rss;
                history.push(current_f);
            }
        }
    }

    // Guarantee: never worse than the initial structure.
    let init_rss = rss(points, init);
    if init_rss < current_f {
        fitted = *init;
        current_f = init_rss;
        history.push(current_f);
    }

    let mut residuals = Vec::with_capacity(points.len());
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    for p in points {
        let r = evaluate_tariff(&fitted, p.x, p.y) - p.target_premium;
        max_abs = max_abs.max(r.abs());
        max_rel = max_rel.max(r.abs() / p.target_premium);
        residuals.push(r);
    }
    Ok((
        fitted,
        FitReport {
            rss: current_f,
            max_abs_residual: max_abs,
            max_rel_residual: max_rel,
            residuals,
            degenerate_cap: all_cap,
            evaluations,
            rss_history: history,
        },
    ))
}

/// Exact least squares for `m0 + m1 x + m2 y` against the targets.
fn linear_ls(points: &[RiskPoint]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut st, mut sxt, mut syt) = (0.0, 0.0, 0.0);
    for p in points {
        sx += p.x;
        sy += p.y;
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
        st += p.target_premium;
        sxt += p.x * p.target_premium;
        syt += p.y * p.target_premium;
    }
    let mut m = [[n, sx, sy, st], [sx, sxx, sxy, sxt], [sy, sxy, syy, syt]];
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        m.swap(col, piv);
        if m[col][col].abs() < 1e-300 {
            return None;
        }
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some((m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]))
}
