//! Mixed-discrete optimisation over a grid of admissible changes.
//!
//! For table-specified policies the change fractions live on a finite grid
//! `D`, so volume maximisation under the retention floor is a discrete
//! program. The solve follows a relax-round-repair scheme:
//!
//! 1. fit a least-squares quadratic to each policy's table and solve the
//!    continuous surrogate problem with the sequential solver;
//! 2. round the continuous solution to the nearest grid values (ties toward
//!    the smaller, retention-friendlier change);
//! 3. while the rounded point violates the true (table) constraint, solve a
//!    linearisation — a mixed-discrete linear program with one constraint —
//!    exactly by branch and bound, and iterate until the point is feasible
//!    and stops moving on the grid.
//!
//! The best feasible point seen anywhere along the way is kept as the
//! incumbent and optionally improved by single-coordinate sweeps; the
//! incumbent is what is returned, flagged `local` when the outer loop hit a
//! limit instead of settling. `enumerate_exact` provides the brute-force
//! oracle for small instances.
//!
//! The single-constraint structure makes each branch-and-bound relaxation a
//! fractional knapsack: at most one coordinate is fractional, so the tree
//! stays tiny.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::fit_quadratic_to_table;
use crate::objectives::{
    feasible, q_vol, Constraints, DeltaVector, DiscreteGrid, FeasibilityReport, RETENTION_TOL,
};
use crate::portfolio::{PolicyParams, Portfolio};
use crate::sqp::{sqp_solve, SmoothProblem, SqpConfig};

/// Where the continuous relaxation comes from.
#[derive(Debug, Clone, Default)]
pub enum RelaxationSource {
    /// Least-squares quadratic per distinct table (the default).
    #[default]
    FittedQuadratic,
    /// A caller-supplied smooth problem over the same coordinates.
    ProvidedSmooth(Arc<SmoothProblem>),
}

#[derive(Debug, Clone)]
pub struct MdnlpConfig {
    /// Outer-loop stopping threshold on the max-norm change between grid
    /// iterates; defaults to half the minimum grid spacing (i.e. "stopped
    /// moving on the grid").
    pub epsilon: Option<f64>,
    pub max_outer_iterations: usize,
    pub bnb_node_limit: usize,
    pub relaxation_source: RelaxationSource,
    /// Improve the incumbent by single-coordinate sweeps before returning.
    pub polish: bool,
}

impl Default for MdnlpConfig {
    fn default() -> Self {
        MdnlpConfig {
            epsilon: None,
            max_outer_iterations: 50,
            bnb_node_limit: 200_000,
            relaxation_source: RelaxationSource::FittedQuadratic,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdnlpTraceStep {
    pub iter: usize,
    pub feasible: bool,
    pub objective: f64,
    pub max_change: f64,
}

#[derive(Debug, Clone)]
pub struct MdnlpResult {
    pub delta: DeltaVector,
    /// Expected renewed volume at `delta`.
    pub objective: f64,
    pub report: FeasibilityReport,
    pub trace: Vec<MdnlpTraceStep>,
    pub outer_iterations: usize,
    /// The outer loop settled (feasible iterate that stopped moving).
    pub converged: bool,
    /// Incumbent returned under a node/iteration limit or after cycling.
    pub local: bool,
    pub bnb_nodes: usize,
}

/// Precomputed per-policy view of the grid.
struct GridView {
    /// Grid values.
    values: Vec<f64>,
    /// Allowed contiguous index range `(lo, hi)` per policy after the box.
    allowed: Vec<(u32, u32)>,
    /// `psi[i][j]`: renewal probability of policy `i` at grid index `j`.
    psi: Vec<Vec<f64>>,
    /// `P_i (1 + d_j) psi_ij`.
    obj: Vec<Vec<f64>>,
    retention_rhs: f64, // N * floor
}

impl GridView {
    fn build(pf: &Portfolio, cons: &Constraints) -> Result<Self> {
        let grid = cons
            .grid
            .as_ref()
            .ok_or_else(|| Error::config("the discrete solver requires a grid"))?;
        let gv = grid.values().to_vec();
        let n = pf.len();
        let mut allowed = Vec::with_capacity(n);
        let mut psi = Vec::with_capacity(n);
        let mut obj = Vec::with_capacity(n);
        for p in pf.policies() {
            let PolicyParams::Mc { table, .. } = &p.params else {
                return Err(Error::InvalidPolicy {
                    id: p.id.clone(),
                    msg: "the discrete solver requires table-specified policies".into(),
                });
            };
            let (lo, hi) = cons.delta_box(p.premium);
            let start = gv.partition_point(|&v| v < lo - 1e-12);
            let end = gv.partition_point(|&v| v <= hi + 1e-12);
            if start >= end {
                return Err(Error::InvalidPolicy {
                    id: p.id.clone(),
                    msg: format!("no grid value inside the change box [{lo}, {hi}]"),
                });
            }
            let mut psi_row = Vec::with_capacity(gv.len());
            let mut obj_row = Vec::with_capacity(gv.len());
            for &d in &gv {
                let pr = table.prob_at(d)?;
                psi_row.push(pr);
                obj_row.push(p.premium * (1.0 + d) * pr);
            }
            allowed.push((start as u32, (end - 1) as u32));
            psi.push(psi_row);
            obj.push(obj_row);
        }
        Ok(GridView {
            values: gv,
            allowed,
            psi,
            obj,
            retention_rhs: n as f64 * cons.retention_floor,
        })
    }

    fn n(&self) -> usize {
        self.allowed.len()
    }

    fn deltas(&self, idx: &[u32]) -> DeltaVector {
        DeltaVector(idx.iter().map(|&j| self.values[j as usize]).collect())
    }

    fn psi_sum(&self, idx: &[u32]) -> f64 {
        idx.iter().enumerate().map(|(i, &j)| self.psi[i][j as usize]).sum()
    }

    fn objective(&self, idx: &[u32]) -> f64 {
        idx.iter().enumerate().map(|(i, &j)| self.obj[i][j as usize]).sum()
    }

    fn is_feasible(&self, idx: &[u32]) -> bool {
        self.psi_sum(idx) >= self.retention_rhs - RETENTION_TOL * self.n() as f64
    }

    /// The retention-maximising corner: tables are non-increasing in the
    /// change, so the smallest allowed index per policy.
    fn max_retention_point(&self) -> Vec<u32> {
        self.allowed.iter().map(|&(lo, _)| lo).collect()
    }

    /// Nearest allowed grid index; ties toward the smaller change.
    fn round_to_allowed(&self, i: usize, x: f64) -> u32 {
        let (lo, hi) = self.allowed[i];
        let mut best = lo;
        let mut best_dist = f64::INFINITY;
        for j in lo..=hi {
            let d = (self.values[j as usize] - x).abs();
            if d + 1e-15 < best_dist {
                best = j;
                best_dist = d;
            }
        }
        best
    }
}

/// Statistics from one branch-and-bound solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BnbStats {
    pub nodes: usize,
    pub exhausted: bool,
}

#[derive(Debug)]
enum LpOutcome {
    Infeasible,
    Integral {
        idx: Vec<u32>,
        value: f64,
    },
    Fractional {
        value: f64,
        coord: usize,
        split: (u32, u32),
        rounded: Vec<u32>,
    },
}

/// Continuous relaxation of one node. The single constraint makes it a
/// fractional knapsack: start from the per-coordinate preferred ends and buy
/// constraint reduction in order of cost per unit until the budget is met;
/// at most one coordinate ends up between its ends.
fn node_lp(
    weights: &[f64],
    con: &[f64],
    rhs: f64,
    values: &[f64],
    ranges: &[(u32, u32)],
) -> LpOutcome {
    let n = weights.len();
    let mut idx: Vec<u32> = Vec::with_capacity(n);
    let mut base_con = 0.0;
    let mut base_obj = 0.0;
    // (i, reduction, cost)
    let mut candidates: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..n {
        let (lo, hi) = ranges[i];
        let (lv, hv) = (values[lo as usize], values[hi as usize]);
        let w = weights[i];
        let u = con[i];
        let (pref_idx, pref_v, other_idx, other_v) = if w > 0.0 {
            (lo, lv, hi, hv)
        } else if w < 0.0 {
            (hi, hv, lo, lv)
        } else if u * lv <= u * hv {
            (lo, lv, hi, hv)
        } else {
            (hi, hv, lo, lv)
        };
        idx.push(pref_idx);
        base_con += u * pref_v;
        base_obj += w * pref_v;
        if lo != hi {
            let red = u * pref_v - u * other_v;
            if red > 0.0 {
                let cost = w * (other_v - pref_v);
                candidates.push((i, red, cost));
                let _ = other_idx;
            }
        }
    }
    let scale = rhs.abs().max(base_con.abs()).max(1.0);
    let mut need = base_con - rhs;
    if need <= 1e-12 * scale {
        return LpOutcome::Integral { idx, value: base_obj };
    }
    // Cheapest reduction first; index breaks ties deterministically.
    candidates.sort_by(|a, b| (a.2 * b.1).total_cmp(&(b.2 * a.1)).then(a.0.cmp(&b.0)));

    let mut value = base_obj;
    for (i, red, cost) in candidates {
        let (lo, hi) = ranges[i];
        let pref = idx[i];
        let other = if pref == lo { hi } else { lo };
        if red >= need - 1e-12 * scale {
            let theta = (need / red).clamp(0.0, 1.0);
            value += theta * cost;
            let pref_v = values[pref as usize];
            let other_v = values[other as usize];
            let x = pref_v + theta * (other_v - pref_v);

            // Feasible integral candidate: snap the fractional coordinate to
            // the reduction side.
            let mut rounded = idx.clone();
            let (jlo, jhi) = ranges[i];
            let snap = if other_v > pref_v {
                // smallest grid value >= x inside the range
                let mut j = jlo;
                while (j as usize) < jhi as usize && values[j as usize] < x - 1e-12 {
                    j += 1;
                }
                j
            } else {
                let mut j = jhi;
                while j > jlo && values[j as usize] > x + 1e-12 {
                    j -= 1;
                }
                j
            };
            rounded[i] = snap;

            // Exactly on a grid value: the relaxation is integral.
            if (values[snap as usize] - x).abs() <= 1e-12 {
                idx[i] = snap;
                return LpOutcome::Integral { idx, value };
            }
            // Adjacent pair around x for the dichotomy.
            let mut j = jlo;
            while j < jhi && values[(j + 1) as usize] < x {
                j += 1;
            }
            let split = (j, j + 1);
            return LpOutcome::Fractional { value, coord: i, split, rounded };
        }
        need -= red;
        value += cost;
        idx[i] = other;
    }
    LpOutcome::Infeasible
}

/// Exact minimiser of `sum w_i d_i` subject to `sum u_i d_i <= rhs`, each
/// `d_i` ranging over the grid values indexed by `allowed[i]`. Deterministic
/// best-first branch and bound with dichotomy branching on the single
/// fractional coordinate of each relaxation.
pub fn bnb_solve_mdlp(
    weights: &[f64],
    con: &[f64],
    rhs: f64,
    grid: &DiscreteGrid,
    allowed: &[(u32, u32)],
    node_limit: usize,
) -> Result<(Vec<u32>, BnbStats)> {
    let values = grid.values();
    #[derive(PartialEq)]
    struct Key(f64, u64);
    impl Eq for Key {}
    impl PartialOrd for Key {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Key {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
        }
    }

    let mut stats = BnbStats::default();
    let mut incumbent: Option<(Vec<u32>, f64)> = None;
    let mut heap: BinaryHeap<Reverse<(Key, Vec<(u32, u32)>)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let eval_obj = |idx: &[u32]| -> f64 {
        idx.iter().enumerate().map(|(i, &j)| weights[i] * values[j as usize]).sum()
    };

    heap.push(Reverse((Key(f64::NEG_INFINITY, seq), allowed.to_vec())));
    while let Some(Reverse((Key(bound, _), ranges))) = heap.pop() {
        if stats.nodes >= node_limit {
            stats.exhausted = true;
            break;
        }
        if let Some((_, best)) = &incumbent {
            if bound > f64::NEG_INFINITY && bound >= best - 1e-12 * best.abs().max(1.0) {
                // Best-first: nothing left can improve.
                break;
            }
        }
        stats.nodes += 1;
        match node_lp(weights, con, rhs, values, &ranges) {
            LpOutcome::Infeasible => {}
            LpOutcome::Integral { idx, value } => {
                if incumbent.as_ref().is_none_or(|(_, b)| value < *b) {
                    incumbent = Some((idx, value));
                }
            }
            LpOutcome::Fractional { value, coord, split, rounded } => {
                let rounded_value = eval_obj(&rounded);
                if incumbent.as_ref().is_none_or(|(_, b)| rounded_value < *b) {
                    incumbent = Some((rounded, rounded_value));
                }
                if let Some((_, best)) = &incumbent {
                    if value >= best - 1e-12 * best.abs().max(1.0) {
                        continue;
                    }
                }
                let (lo, hi) = ranges[coord];
                let mut left = ranges.clone();
                left[coord] = (lo, split.0);
                let mut right = ranges;
                right[coord] = (split.1, hi);
                seq += 1;
                heap.push(Reverse((Key(value, seq), left)));
                seq += 1;
                heap.push(Reverse((Key(value, seq), right)));
            }
        }
    }
    match incumbent {
        Some((idx, _)) => Ok((idx, stats)),
        None if stats.exhausted => Err(Error::solver("node limit hit before any feasible point")),
        None => Err(Error::infeasible("linearised subproblem admits no grid point")),
    }
}

/// Full enumeration for small instances; the test oracle.
pub fn enumerate_exact(pf: &Portfolio, cons: &Constraints) -> Result<(DeltaVector, f64)> {
    let view = GridView::build(pf, cons)?;
    let n = view.n();
    let mut size = 1f64;
    for &(lo, hi) in &view.allowed {
        size *= (hi - lo + 1) as f64;
        if size > 1e8 {
            return Err(Error::InstanceTooLarge(format!(
                "{size:.3e} grid combinations exceed the enumeration budget"
            )));
        }
    }

    // Suffix bounds for pruning.
    let mut max_psi_suffix = vec![0.0; n + 1];
    let mut max_obj_suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let (lo, hi) = view.allowed[i];
        let best_psi =
            (lo..=hi).map(|j| view.psi[i][j as usize]).fold(f64::NEG_INFINITY, f64::max);
        let best_obj =
            (lo..=hi).map(|j| view.obj[i][j as usize]).fold(f64::NEG_INFINITY, f64::max);
        max_psi_suffix[i] = max_psi_suffix[i + 1] + best_psi;
        max_obj_suffix[i] = max_obj_suffix[i + 1] + best_obj;
    }
    let rhs = view.retention_rhs - RETENTION_TOL * n as f64;

    struct Dfs<'a> {
        view: &'a GridView,
        max_psi_suffix: Vec<f64>,
        max_obj_suffix: Vec<f64>,
        rhs: f64,
        best: f64,
        best_idx: Option<Vec<u32>>,
        current: Vec<u32>,
    }
    impl Dfs<'_> {
        fn go(&mut self, i: usize, psi: f64, obj: f64) {
            if psi + self.max_psi_suffix[i] < self.rhs {
                return;
            }
            if obj + self.max_obj_suffix[i] <= self.best {
                return;
            }
            if i == self.view.n() {
                // psi >= rhs guaranteed by the suffix check at i == n.
                self.best = obj;
                self.best_idx = Some(self.current.clone());
                return;
            }
            let (lo, hi) = self.view.allowed[i];
            for j in lo..=hi {
                self.current[i] = j;
                self.go(i + 1, psi + self.view.psi[i][j as usize], obj + self.view.obj[i][j as usize]);
            }
        }
    }
    let mut dfs = Dfs {
        max_psi_suffix,
        max_obj_suffix,
        rhs,
        best: f64::NEG_INFINITY,
        best_idx: None,
        current: vec![0; n],
        view: &view,
    };
    dfs.go(0, 0.0, 0.0);
    match dfs.best_idx {
        Some(idx) => {
            let d = view.deltas(&idx);
            let v = dfs.best;
            Ok((d, v))
        }
        None => Err(Error::infeasible("no grid point satisfies the retention floor")),
    }
}

/// Solve the discrete volume-maximisation problem. Returns the best feasible
/// incumbent (errors only when no feasible grid point exists at all, which
/// is certified against the maximum-retention corner).
pub fn mdnlp_solve(pf: &Portfolio, cons: &Constraints, cfg: &MdnlpConfig) -> Result<MdnlpResult> {
    let view = GridView::build(pf, cons)?;
    let n = view.n();
    let grid = cons.grid.as_ref().unwrap();
    let epsilon = cfg.epsilon.unwrap_or_else(|| 0.5 * grid.min_spacing());
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    if cfg.max_outer_iterations == 0 || cfg.bnb_node_limit == 0 {
        return Err(Error::config("iteration and node limits must be at least 1"));
    }

    // Structural feasibility at the maximum-retention corner.
    let seed = view.max_retention_point();
    if !view.is_feasible(&seed) {
        return Err(Error::infeasible(format!(
            "retention floor {:.4} exceeds the maximum attainable {:.4}",
            cons.retention_floor,
            view.psi_sum(&seed) / n as f64
        )));
    }
    let mut incumbent = seed.clone();
    let mut incumbent_obj = view.objective(&incumbent);

    // Continuous relaxation.
    let smooth = match &cfg.relaxation_source {
        RelaxationSource::ProvidedSmooth(p) => {
            if p.dim() != n {
                return Err(Error::Alignment { got: p.dim(), expected: n });
            }
            (**p).clone()
        }
        RelaxationSource::FittedQuadratic => {
            // One fit per distinct table.
            let mut fits: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
            let mut cache: std::collections::HashMap<usize, (f64, f64, f64)> =
                std::collections::HashMap::new();
            for p in pf.policies() {
                let PolicyParams::Mc { table, .. } = &p.params else { unreachable!() };
                let key = Arc::as_ptr(table) as usize;
                let fit = match cache.get(&key) {
                    Some(f) => *f,
                    None => {
                        let f = fit_quadratic_to_table(table)?;
                        cache.insert(key, f);
                        f
                    }
                };
                fits.push(fit);
            }
            let lo: Vec<f64> =
                view.allowed.iter().map(|&(l, _)| view.values[l as usize]).collect();
            let hi: Vec<f64> =
                view.allowed.iter().map(|&(_, h)| view.values[h as usize]).collect();
            SmoothProblem::quad_volume(
                pf.policies().iter().map(|p| p.premium).collect(),
                fits,
                cons.retention_floor,
                lo,
                hi,
            )
        }
    };

    let relaxed = sqp_solve(&smooth, &DeltaVector::zeros(n), &SqpConfig::default())
        .map(|r| r.delta)
        .unwrap_or_else(|_| view.deltas(&seed));

    // Round to the grid.
    let mut current: Vec<u32> =
        (0..n).map(|i| view.round_to_allowed(i, relaxed[i])).collect();

    let mut trace = Vec::new();
    let mut bnb_nodes = 0usize;
    let mut converged = false;
    let mut exhausted = false;

    let mut record = |iter: usize, idx: &[u32], max_change: f64, view: &GridView| -> (bool, f64) {
        let feas = view.is_feasible(idx);
        let obj = view.objective(idx);
        trace.push(MdnlpTraceStep { iter, feasible: feas, objective: obj, max_change });
        (feas, obj)
    };

    let (mut feas, obj) = record(0, &current, f64::INFINITY, &view);
    if feas && obj > incumbent_obj {
        incumbent = current.clone();
        incumbent_obj = obj;
    }

    let mut outer = 0;
    if feas {
        // The rounded relaxation is already feasible: accept it.
        converged = true;
    } else {
        // Surrogate gradients for the linearisation.
        let (slo, shi) = smooth.bounds();
        let clamp_to_box =
            |i: usize, v: f64| -> f64 { v.clamp(slo[i], shi[i]) };
        while outer < cfg.max_outer_iterations {
            outer += 1;
            let d_prev = view.deltas(&current);
            let d_for_grad: Vec<f64> =
                (0..n).map(|i| clamp_to_box(i, d_prev[i])).collect();
            let w = smooth.gradient(&d_for_grad);
            let u = smooth.constraint_gradient(&d_for_grad);
            // True constraint value at the current point; the linearised
            // constraint is  g0 + u . (d - d_prev) <= 0.
            let g0 = view.retention_rhs - view.psi_sum(&current);
            let g0_scaled = g0 / n as f64; // same scale as the surrogate gradient
            let rhs: f64 =
                (0..n).map(|i| u[i] * d_prev[i]).sum::<f64>() - g0_scaled;

            let next = match bnb_solve_mdlp(&w, &u, rhs, grid, &view.allowed, cfg.bnb_node_limit) {
                Ok((idx, st)) => {
                    bnb_nodes += st.nodes;
                    exhausted |= st.exhausted;
                    idx
                }
                Err(Error::Infeasible(_)) => seed.clone(),
                Err(e) => return Err(e),
            };

            let max_change: f64 = next
                .iter()
                .zip(&current)
                .map(|(&a, &b)| (view.values[a as usize] - view.values[b as usize]).abs())
                .fold(0.0, f64::max);
            let (f_next, o_next) = record(outer, &next, max_change, &view);
            if f_next && o_next > incumbent_obj {
                incumbent = next.clone();
                incumbent_obj = o_next;
            }
            let stalled = max_change < epsilon;
            current = next;
            feas = f_next;
            if feas && stalled {
                converged = true;
                break;
            }
            if !feas && stalled {
                // Fixed point that is still infeasible: give up on the
                // iteration and fall back to the incumbent.
                break;
            }
        }
    }

    if cfg.polish {
        polish(&view, &mut incumbent, &mut incumbent_obj);
    }

    let delta = view.deltas(&incumbent);
    let report = feasible(pf, &delta, cons)?;
    let objective = q_vol(pf, &delta)?;
    Ok(MdnlpResult {
        delta,
        objective,
        report,
        trace,
        outer_iterations: outer,
        converged,
        local: !converged || exhausted,
        bnb_nodes,
    })
}

/// Single-coordinate improvement sweeps; keeps feasibility, only ever
/// increases the objective.
fn polish(view: &GridView, idx: &mut Vec<u32>, obj: &mut f64) {
    let n = view.n();
    let mut psi_sum = view.psi_sum(idx);
    let rhs = view.retention_rhs - RETENTION_TOL * n as f64;
    for _pass in 0..8 {
        let mut improved = false;
        for i in 0..n {
            let (lo, hi) = view.allowed[i];
            let cur = idx[i] as usize;
            let mut best_j = idx[i];
            let mut best_gain = 1e-12 * obj.abs().max(1.0);
            for j in lo..=hi {
                if j == idx[i] {
                    continue;
                }
                let gain = view.obj[i][j as usize] - view.obj[i][cur];
                if gain > best_gain
                    && psi_sum - view.psi[i][cur] + view.psi[i][j as usize] >= rhs
                {
                    best_gain = gain;
                    best_j = j;
                }
            }
            if best_j != idx[i] {
                psi_sum += view.psi[i][best_j as usize] - view.psi[i][cur];
                *obj += best_gain;
                idx[i] = best_j;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    *obj = view.objective(idx);
}
