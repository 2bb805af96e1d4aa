//! Objective and constraint evaluation over a portfolio and a vector of
//! premium-change fractions.
//!
//! With `w_i = P_i (1 + delta_i)` and `psi_i` the renewal probability at
//! `delta_i`:
//!
//! * expected renewed volume `q_vol = sum w_i psi_i`;
//! * its variance — `corrected` mode is the true variance of a sum of
//!   independent Bernoulli payouts, `sum w_i^2 psi_i (1 - psi_i)`;
//!   `unsquared` mode drops the square on `w_i` and exists only to
//!   reproduce externally published figures term by term;
//! * expected premium difference `q_dif = sum P_i delta_i psi_i`;
//! * retention — the unweighted mean of the `psi_i` (policies, not
//!   premiums).
//!
//! `mc_oracle` simulates the Bernoulli renewals directly and is the
//! independent check for the closed forms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::portfolio::{Policy, PolicyParams, Portfolio};
use crate::rng;

/// Per-policy premium-change fractions, aligned with portfolio order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector(pub Vec<f64>);

impl DeltaVector {
    pub fn zeros(n: usize) -> Self {
        DeltaVector(vec![0.0; n])
    }

    pub fn uniform(n: usize, delta: f64) -> Self {
        DeltaVector(vec![delta; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }
}

impl From<Vec<f64>> for DeltaVector {
    fn from(v: Vec<f64>) -> Self {
        DeltaVector(v)
    }
}

impl std::ops::Index<usize> for DeltaVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Ascending set of admissible change fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGrid {
    values: Vec<f64>,
}

const GRID_MATCH_TOL: f64 = 1e-9;

impl DiscreteGrid {
    /// Requires ascending distinct values including 0.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let g = Self::allowing_missing_zero(values)?;
        if !g.contains(0.0) {
            return Err(Error::config("grid must contain 0 (use allowing_missing_zero to override)"));
        }
        Ok(g)
    }

    /// Explicit override for grids that deliberately exclude "no change".
    pub fn allowing_missing_zero(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("grid must be non-empty"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("grid values must be strictly ascending"));
        }
        Ok(DiscreteGrid { values })
    }

    /// The default nine-point grid: -20% to +20% in 5% steps.
    pub fn default_motor() -> Self {
        Self::new(vec![-0.20, -0.15, -0.10, -0.05, 0.0, 0.05, 0.10, 0.15, 0.20]).unwrap()
    }

    /// The lattice `[a, b] ∩ (1/c1)·Z`.
    pub fn lattice(a: f64, b: f64, c1: f64) -> Result<Self> {
        if !(c1 > 0.0) {
            return Err(Error::config("lattice granularity must be positive"));
        }
        if a > b {
            return Err(Error::config("lattice needs a <= b"));
        }
        let k_lo = (a * c1 - 1e-9).ceil() as i64;
        let k_hi = (b * c1 + 1e-9).floor() as i64;
        if k_lo > k_hi {
            return Err(Error::config("lattice is empty on [a, b]"));
        }
        let values = (k_lo..=k_hi).map(|k| k as f64 / c1).collect();
        Self::allowing_missing_zero(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Smallest gap between adjacent values.
    pub fn min_spacing(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, delta: f64) -> bool {
        self.index_of(delta).is_some()
    }

    pub fn index_of(&self, delta: f64) -> Option<usize> {
        let i = self.values.partition_point(|&v| v < delta - GRID_MATCH_TOL);
        (i < self.values.len() && (self.values[i] - delta).abs() <= GRID_MATCH_TOL).then_some(i)
    }

    /// Nearest grid value; ties go to the smaller (more retention-friendly)
    /// value.
    pub fn round(&self, delta: f64) -> f64 {
        self.values[self.round_index(delta)]
    }

    pub fn round_index(&self, delta: f64) -> usize {
        let i = self.values.partition_point(|&v| v < delta);
        if i == 0 {
            return 0;
        }
        if i == self.values.len() {
            return self.values.len() - 1;
        }
        let below = delta - self.values[i - 1];
        let above = self.values[i] - delta;
        if below <= above {
            i - 1
        } else {
            i
        }
    }
}

/// Money granularity for reporting objective values on a coarse scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingConfig {
    /// Objective flooring unit, e.g. 1000.
    pub c: f64,
    /// Grid granularity for changes (the lattice denominator), e.g. 100.
    pub c1: f64,
}

impl RoundingConfig {
    pub fn new(c: f64, c1: f64) -> Result<Self> {
        if !(c > 0.0 && c1 > 0.0) {
            return Err(Error::config("rounding granularities must be positive"));
        }
        Ok(RoundingConfig { c, c1 })
    }
}

/// Floor `value` to the grid `c·Z`: `c * floor(value / c)`.
pub fn rounded(value: f64, cfg: &RoundingConfig) -> f64 {
    cfg.c * (value / cfg.c).floor()
}

/// Which variance formula `q_var` evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// True variance of the renewed volume: `sum w_i^2 psi_i (1-psi_i)`.
    #[default]
    Corrected,
    /// The same with `w_i` unsquared; reproduces published figures.
    Unsquared,
}

/// Retention floor plus relative/absolute bound box and optional grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// Lower bound on the expected fraction of the portfolio renewing.
    pub retention_floor: f64,
    /// Bounds `[a, b]` on each change fraction.
    pub rel_bounds: (f64, f64),
    /// Bounds `[A, B]` on each absolute change `tau_i = P_i * delta_i`.
    pub abs_bounds: (f64, f64),
    /// Optional set of admissible change fractions.
    pub grid: Option<DiscreteGrid>,
}

impl Constraints {
    /// Standard construction: the box must contain "no change".
    pub fn new(retention_floor: f64, rel_bounds: (f64, f64)) -> Result<Self> {
        if !(rel_bounds.0 <= 0.0 && 0.0 <= rel_bounds.1) {
            return Err(Error::config(
                "rel_bounds must contain 0 (use excluding_zero for a deliberate override)",
            ));
        }
        Self::excluding_zero(retention_floor, rel_bounds)
    }

    /// Explicit override for a change box that excludes 0.
    pub fn excluding_zero(retention_floor: f64, rel_bounds: (f64, f64)) -> Result<Self> {
        if !(0.0..=1.0).contains(&retention_floor) {
            return Err(Error::config("retention_floor must lie in [0,1]"));
        }
        if rel_bounds.0 > rel_bounds.1 {
            return Err(Error::config("rel_bounds must satisfy a <= b"));
        }
        Ok(Constraints {
            retention_floor,
            rel_bounds,
            abs_bounds: (f64::NEG_INFINITY, f64::INFINITY),
            grid: None,
        })
    }

    pub fn with_abs_bounds(mut self, abs_bounds: (f64, f64)) -> Result<Self> {
        if abs_bounds.0 > abs_bounds.1 {
            return Err(Error::config("abs_bounds must satisfy A <= B"));
        }
        self.abs_bounds = abs_bounds;
        Ok(self)
    }

    pub fn with_grid(mut self, grid: DiscreteGrid) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn with_retention_floor(mut self, floor: f64) -> Self {
        self.retention_floor = floor;
        self
    }

    /// Per-policy change box: relative bounds intersected with the absolute
    /// bounds scaled by the premium.
    pub fn delta_box(&self, premium: f64) -> (f64, f64) {
        let lo = self.rel_bounds.0.max(self.abs_bounds.0 / premium);
        let hi = self.rel_bounds.1.min(self.abs_bounds.1 / premium);
        (lo, hi)
    }
}

/// Renewal probability of one policy at a change fraction.
pub(crate) fn policy_psi(p: &Policy, delta: f64) -> Result<f64> {
    match &p.params {
        PolicyParams::Ma { a, b } => {
            let v = p.pi0 * (1.0 + a * delta + b * delta * delta);
            if v <= 0.0 || v >= 1.0 {
                return Err(Error::PsiOutOfRange { value: v, delta });
            }
            Ok(v)
        }
        PolicyParams::Mb { t } => {
            let c = p.pi0 / (1.0 - p.pi0);
            Ok(1.0 / (1.0 + (-t * delta).exp() / c))
        }
        PolicyParams::Mc { table, .. } => table.prob_at(delta),
    }
}

fn check_alignment(pf: &Portfolio, d: &DeltaVector) -> Result<()> {
    if d.len() != pf.len() {
        return Err(Error::Alignment { got: d.len(), expected: pf.len() });
    }
    Ok(())
}

/// Expected renewed premium volume.
pub fn q_vol(pf: &Portfolio, d: &DeltaVector) -> Result<f64> {
    check_alignment(pf, d)?;
    exec::try_sum_indexed(pf.len(), |i| {
        let p = pf.policy(i);
        Ok(p.premium * (1.0 + d[i]) * policy_psi(p, d[i])?)
    })
}

/// Variance of the renewed premium volume in the selected mode.
pub fn q_var(pf: &Portfolio, d: &DeltaVector, mode: VarianceMode) -> Result<f64> {
    check_alignment(pf, d)?;
    exec::try_sum_indexed(pf.len(), |i| {
        let p = pf.policy(i);
        let w = p.premium * (1.0 + d[i]);
        let psi = policy_psi(p, d[i])?;
        let bern = psi * (1.0 - psi);
        Ok(match mode {
            VarianceMode::Corrected => w * w * bern,
            VarianceMode::Unsquared => w * bern,
        })
    })
}

/// Expected premium difference.
pub fn q_dif(pf: &Portfolio, d: &DeltaVector) -> Result<f64> {
    check_alignment(pf, d)?;
    exec::try_sum_indexed(pf.len(), |i| {
        let p = pf.policy(i);
        Ok(p.premium * d[i] * policy_psi(p, d[i])?)
    })
}

/// Expected fraction of the portfolio renewing: the unweighted mean of the
/// per-policy renewal probabilities.
pub fn retention(pf: &Portfolio, d: &DeltaVector) -> Result<f64> {
    Ok(expected_count(pf, d)? / pf.len() as f64)
}

/// Expected number of renewing policies.
pub fn expected_count(pf: &Portfolio, d: &DeltaVector) -> Result<f64> {
    check_alignment(pf, d)?;
    exec::try_sum_indexed(pf.len(), |i| policy_psi(pf.policy(i), d[i]))
}

/// Expected volume at unchanged premiums.
pub fn baseline_volume(pf: &Portfolio) -> f64 {
    exec::sum_indexed(pf.len(), |i| {
        let p = pf.policy(i);
        p.premium * p.pi0
    })
}

/// Expected renewing count at unchanged premiums.
pub fn baseline_count(pf: &Portfolio) -> f64 {
    exec::sum_indexed(pf.len(), |i| pf.policy(i).pi0)
}

/// One violated constraint clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "clause")]
pub enum Violation {
    Retention { actual: f64, floor: f64 },
    RelBound { index: usize, delta: f64, lo: f64, hi: f64 },
    AbsBound { index: usize, tau: f64, lo: f64, hi: f64 },
    OffGrid { index: usize, delta: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Retention { actual, floor } => {
                write!(f, "retention {actual:.6} below floor {floor:.6}")
            }
            Violation::RelBound { index, delta, lo, hi } => {
                write!(f, "relative bound: delta[{index}] = {delta} outside [{lo}, {hi}]")
            }
            Violation::AbsBound { index, tau, lo, hi } => {
                write!(f, "absolute bound: tau[{index}] = {tau} outside [{lo}, {hi}]")
            }
            Violation::OffGrid { index, delta } => {
                write!(f, "grid: delta[{index}] = {delta} is not an admissible value")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub retention: f64,
    pub violations: Vec<Violation>,
}

/// Feasibility slack on the retention constraint (absolute, on the mean).
pub(crate) const RETENTION_TOL: f64 = 1e-9;
/// Feasibility slack on box bounds.
pub(crate) const BOUND_TOL: f64 = 1e-12;

/// Check every constraint clause; infeasibility is a value, not an error.
pub fn feasible(pf: &Portfolio, d: &DeltaVector, cons: &Constraints) -> Result<FeasibilityReport> {
    check_alignment(pf, d)?;
    let mut violations = Vec::new();
    let (a, b) = cons.rel_bounds;
    let (ta, tb) = cons.abs_bounds;
    for i in 0..pf.len() {
        let delta = d[i];
        if delta < a - BOUND_TOL || delta > b + BOUND_TOL {
            violations.push(Violation::RelBound { index: i, delta, lo: a, hi: b });
        }
        let tau = pf.policy(i).premium * delta;
        if tau < ta - BOUND_TOL || tau > tb + BOUND_TOL {
            violations.push(Violation::AbsBound { index: i, tau, lo: ta, hi: tb });
        }
        if let Some(grid) = &cons.grid {
            if !grid.contains(delta) {
                violations.push(Violation::OffGrid { index: i, delta });
            }
        }
    }
    let ret = retention(pf, d)?;
    if ret < cons.retention_floor - RETENTION_TOL {
        violations.push(Violation::Retention { actual: ret, floor: cons.retention_floor });
    }
    Ok(FeasibilityReport { feasible: violations.is_empty(), retention: ret, violations })
}

/// Monte Carlo estimates of the renewed volume and count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStats {
    pub replications: u64,
    pub mean_volume: f64,
    /// Sample variance of the renewed volume across replications.
    pub var_volume: f64,
    pub mean_count: f64,
    /// Standard error of `mean_volume`.
    pub se_mean_volume: f64,
    /// Approximate standard error of `var_volume` (normal theory).
    pub se_var_volume: f64,
}

/// Simulate independent Bernoulli renewals. One random stream per
/// replication keyed by `(seed, replication)`, so the result does not depend
/// on the parallel schedule.
pub fn mc_oracle(pf: &Portfolio, d: &DeltaVector, replications: u64, seed: u64) -> Result<McStats> {
    check_alignment(pf, d)?;
    if replications == 0 {
        return Err(Error::config("replications must be at least 1"));
    }
    let n = pf.len();
    let mut weights = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for i in 0..n {
        let p = pf.policy(i);
        weights.push(p.premium * (1.0 + d[i]));
        probs.push(policy_psi(p, d[i])?);
    }

    // Per-chunk Welford accumulators combined in chunk order.
    struct Acc {
        n: f64,
        mean: f64,
        m2: f64,
        count_sum: f64,
    }
    let m = replications as usize;
    let partials = exec::map_chunks(m, |range| {
        let mut acc = Acc { n: 0.0, mean: 0.0, m2: 0.0, count_sum: 0.0 };
        for r in range {
            let mut rng = rng::stream(seed, r as u64);
            let mut vol = 0.0;
            let mut count = 0u64;
            for i in 0..n {
                if rng.gen::<f64>() < probs[i] {
                    vol += weights[i];
                    count += 1;
                }
            }
            acc.n += 1.0;
            let delta = vol - acc.mean;
            acc.mean += delta / acc.n;
            acc.m2 += delta * (vol - acc.mean);
            acc.count_sum += count as f64;
        }
        acc
    });

    let mut total = Acc { n: 0.0, mean: 0.0, m2: 0.0, count_sum: 0.0 };
    for p in partials {
        if p.n == 0.0 {
            continue;
        }
        if total.n == 0.0 {
            total = p;
            continue;
        }
        let n1 = total.n;
        let n2 = p.n;
        let gap = p.mean - total.mean;
        let n12 = n1 + n2;
        total.mean += gap * n2 / n12;
        total.m2 += p.m2 + gap * gap * n1 * n2 / n12;
        total.n = n12;
        total.count_sum += p.count_sum;
    }

    let mf = replications as f64;
    let var = if replications > 1 { total.m2 / (mf - 1.0) } else { 0.0 };
    Ok(McStats {
        replications,
        mean_volume: total.mean,
        var_volume: var,
        mean_count: total.count_sum / mf,
        se_mean_volume: (var / mf).sqrt(),
        se_var_volume: var * (2.0 / (mf - 1.0).max(1.0)).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiscreteProbTable;
    use crate::portfolio::{Policy, PolicyParams};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    /// Table-backed policy whose psi at `delta` is pinned by hand.
    fn mc_policy(id: &str, premium: f64, pairs: &[(f64, f64)]) -> Policy {
        let table = DiscreteProbTable::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
        .unwrap();
        let pi0 = table.zero_prob();
        Policy::new(
            id,
            premium,
            pi0,
            PolicyParams::Mc { table_name: "t".into(), table: Arc::new(table) },
        )
        .unwrap()
    }

    fn motor_policy(id: &str, premium: f64) -> Policy {
        Policy::new(
            id,
            premium,
            0.95,
            PolicyParams::Mc { table_name: "motor".into(), table: Arc::new(DiscreteProbTable::motor()) },
        )
        .unwrap()
    }

    #[test]
    fn q_vol_hand_value() {
        let pf = Portfolio::new(vec![
            mc_policy("a", 100.0, &[(0.0, 0.92), (0.10, 0.90)]),
            mc_policy("b", 200.0, &[(0.0, 0.95), (0.10, 0.90)]),
        ])
        .unwrap();
        let d = DeltaVector(vec![0.10, 0.0]);
        assert_abs_diff_eq!(q_vol(&pf, &d).unwrap(), 289.0, epsilon = 1e-12);
    }

    #[test]
    fn q_vol_zero_change_is_baseline() {
        let pf = crate::portfolio::generate_synthetic(
            500,
            3,
            &crate::portfolio::Calibration::motor_defaults(),
        )
        .unwrap();
        let d = DeltaVector::zeros(pf.len());
        assert_eq!(q_vol(&pf, &d).unwrap().to_bits(), baseline_volume(&pf).to_bits());
    }

    #[test]
    fn q_vol_single_policy_on_grid() {
        let pf = Portfolio::new(vec![motor_policy("a", 100.0)]).unwrap();
        let d = DeltaVector(vec![0.15]);
        assert_abs_diff_eq!(q_vol(&pf, &d).unwrap(), 100.625, epsilon = 1e-12);
    }

    #[test]
    fn q_var_modes_hand_values() {
        let pf = Portfolio::new(vec![mc_policy("a", 100.0, &[(0.0, 0.92), (0.10, 0.90)])]).unwrap();
        let d = DeltaVector(vec![0.10]);
        assert_abs_diff_eq!(
            q_var(&pf, &d, VarianceMode::Corrected).unwrap(),
            110.0 * 110.0 * 0.09,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            q_var(&pf, &d, VarianceMode::Unsquared).unwrap(),
            110.0 * 0.09,
            epsilon = 1e-12
        );
    }

    #[test]
    fn q_var_degenerate_bernoulli_is_zero() {
        let pf = Portfolio::new(vec![mc_policy("a", 100.0, &[(0.0, 1.0), (0.10, 1.0)])]).unwrap();
        let d = DeltaVector(vec![0.10]);
        assert_eq!(q_var(&pf, &d, VarianceMode::Corrected).unwrap(), 0.0);
        assert_eq!(q_var(&pf, &d, VarianceMode::Unsquared).unwrap(), 0.0);
    }

    #[test]
    fn q_dif_hand_values() {
        let pf = Portfolio::new(vec![mc_policy("a", 100.0, &[(0.0, 0.92), (0.10, 0.90)])]).unwrap();
        assert_abs_diff_eq!(q_dif(&pf, &DeltaVector(vec![0.10])).unwrap(), 9.0, epsilon = 1e-12);
        assert_eq!(q_dif(&pf, &DeltaVector(vec![0.0])).unwrap(), 0.0);
    }

    #[test]
    fn q_dif_is_not_antisymmetric() {
        // Mirroring the change uses the mirrored renewal probability, so the
        // value is not simply negated.
        let pf = Portfolio::new(vec![
            mc_policy("a", 100.0, &[(-0.10, 0.99), (0.0, 0.95), (0.10, 0.80)]),
            mc_policy("b", 300.0, &[(-0.10, 0.96), (0.0, 0.95), (0.10, 0.94)]),
        ])
        .unwrap();
        let plus = q_dif(&pf, &DeltaVector(vec![0.10, 0.10])).unwrap();
        let minus = q_dif(&pf, &DeltaVector(vec![-0.10, -0.10])).unwrap();
        assert!((plus + minus).abs() > 1e-6, "mirrored values should not cancel");
    }

    #[test]
    fn retention_examples() {
        let pf = Portfolio::new(vec![
            mc_policy("a", 100.0, &[(0.0, 0.90), (0.10, 0.90)]),
            mc_policy("b", 100.0, &[(0.0, 0.80), (0.10, 0.80)]),
        ])
        .unwrap();
        assert_abs_diff_eq!(
            retention(&pf, &DeltaVector::zeros(2)).unwrap(),
            0.85,
            epsilon = 1e-15
        );

        let homog = Portfolio::new((0..40).map(|i| motor_policy(&format!("p{i}"), 100.0)).collect())
            .unwrap();
        let d = DeltaVector::uniform(40, 0.15);
        assert_abs_diff_eq!(retention(&homog, &d).unwrap(), 0.875, epsilon = 1e-12);
    }

    #[test]
    fn rounding_examples() {
        let cfg = RoundingConfig::new(1000.0, 100.0).unwrap();
        assert_eq!(rounded(289.0, &cfg), 0.0);
        let cfg = RoundingConfig::new(100.0, 100.0).unwrap();
        assert_eq!(rounded(289.0, &cfg), 200.0);
        assert_eq!(rounded(300.0, &cfg), 300.0);
        // Floor bracketing.
        for x in [-1234.5, -0.01, 0.0, 17.2, 99.999, 100.0, 1e7] {
            let r = rounded(x, &cfg);
            assert!(r <= x && x < r + cfg.c, "x={x} r={r}");
        }
    }

    #[test]
    fn feasible_clauses() {
        let homog: Vec<Policy> =
            (0..40).map(|i| motor_policy(&format!("p{i}"), 100.0)).collect();
        let pf = Portfolio::new(homog).unwrap();
        let cons = Constraints::new(0.85, (-0.20, 0.20))
            .unwrap()
            .with_grid(DiscreteGrid::default_motor());

        let ok = feasible(&pf, &DeltaVector::uniform(40, 0.15), &cons).unwrap();
        assert!(ok.feasible, "{:?}", ok.violations);

        let bad = feasible(&pf, &DeltaVector::uniform(40, 0.20), &cons).unwrap();
        assert!(!bad.feasible);
        assert!(bad
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Retention { actual, .. } if (*actual - 0.825).abs() < 1e-12)));

        // Absolute bound violation after tau conversion.
        let cons_abs = Constraints::new(0.0, (-0.20, 0.20))
            .unwrap()
            .with_abs_bounds((-5.0, 5.0))
            .unwrap();
        let rep = feasible(&pf, &DeltaVector::uniform(40, 0.10), &cons_abs).unwrap();
        assert!(!rep.feasible);
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::AbsBound { .. })));
    }

    #[test]
    fn feasible_monotone_in_floor() {
        let pf = Portfolio::new(
            (0..8).map(|i| motor_policy(&format!("p{i}"), 50.0 + 10.0 * i as f64)).collect(),
        )
        .unwrap();
        let d = DeltaVector(vec![0.0, 0.05, -0.05, 0.10, 0.15, 0.0, -0.10, 0.05]);
        let mut last = true;
        for floor in [0.0, 0.5, 0.9, 0.93, 0.96, 0.99, 1.0] {
            let cons = Constraints::new(floor, (-0.20, 0.20)).unwrap();
            let now = feasible(&pf, &d, &cons).unwrap().feasible;
            assert!(last || !now, "raising the floor cannot restore feasibility");
            last = now;
        }
    }

    #[test]
    fn grid_round_prefers_smaller_on_ties() {
        let g = DiscreteGrid::default_motor();
        assert_eq!(g.round(0.025), 0.0); // tie between 0 and 0.05
        assert_eq!(g.round(0.0251), 0.05);
        assert_eq!(g.round(0.9), 0.20);
        assert_eq!(g.round(-0.9), -0.20);
    }

    #[test]
    fn lattice_construction() {
        let g = DiscreteGrid::lattice(-0.05, 0.10, 20.0).unwrap();
        assert_eq!(g.values(), &[-0.05, 0.0, 0.05, 0.10]);
    }

    #[test]
    fn mc_oracle_degenerate() {
        let pf = Portfolio::new(vec![
            mc_policy("a", 100.0, &[(0.0, 1.0), (0.10, 1.0)]),
            mc_policy("b", 50.0, &[(0.0, 1.0), (0.10, 1.0)]),
        ])
        .unwrap();
        let d = DeltaVector(vec![0.10, 0.0]);
        let stats = mc_oracle(&pf, &d, 500, 9).unwrap();
        assert_eq!(stats.var_volume, 0.0);
        assert_abs_diff_eq!(stats.mean_volume, 160.0, epsilon = 1e-9);
        assert_abs_diff_eq!(stats.mean_count, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn mc_oracle_deterministic_per_seed() {
        let pf = Portfolio::new(
            (0..10).map(|i| motor_policy(&format!("p{i}"), 100.0 + i as f64)).collect(),
        )
        .unwrap();
        let d = DeltaVector::uniform(10, 0.05);
        let s1 = mc_oracle(&pf, &d, 2000, 5).unwrap();
        let s2 = mc_oracle(&pf, &d, 2000, 5).unwrap();
        assert_eq!(s1, s2);
        let s3 = mc_oracle(&pf, &d, 2000, 6).unwrap();
        assert_ne!(s1.mean_volume.to_bits(), s3.mean_volume.to_bits());
    }

    #[test]
    fn mc_oracle_mean_within_three_standard_errors() {
        let pf = Portfolio::new(
            (0..20).map(|i| motor_policy(&format!("p{i}"), 80.0 + 7.0 * i as f64)).collect(),
        )
        .unwrap();
        let d = DeltaVector::uniform(20, 0.10);
        let stats = mc_oracle(&pf, &d, 100_000, 11).unwrap();
        let expect = q_vol(&pf, &d).unwrap();
        assert!(
            (stats.mean_volume - expect).abs() <= 3.0 * stats.se_mean_volume,
            "mean {} vs {} (se {})",
            stats.mean_volume,
            expect,
            stats.se_mean_volume
        );
    }

    #[test]
    fn alignment_errors() {
        let pf = Portfolio::new(vec![motor_policy("a", 100.0)]).unwrap();
        let d = DeltaVector(vec![0.0, 0.0]);
        assert!(matches!(q_vol(&pf, &d), Err(Error::Alignment { .. })));
    }
}
