//! Renewal-probability models.
//!
//! A policyholder offered a premium change by fraction `delta` renews with
//! probability `psi(delta)`. Three families are supported:
//!
//! * `Ma` — polynomial response `psi = pi * (1 + a*delta + b*delta^2)`,
//!   with `pi` the renewal probability at an unchanged premium. `b = 0`
//!   gives the linear-elasticity case used by the quadratic program.
//! * `Mb` — logit response `psi = 1 / (1 + exp(-t*delta) / c)` with
//!   `c = pi / (1 - pi)`, so `psi(0) = pi` identically; `t < 0` measures
//!   elasticity (more negative, more price-sensitive).
//! * `Mc` — a discrete table of `(delta, psi)` pairs; defined only at the
//!   tabulated grid points, with no interpolation. Continuous solvers use a
//!   least-squares quadratic fitted to the table instead.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tabulated renewal probabilities over an ascending grid of premium-change
/// fractions. Probabilities must be non-increasing in the change (raising a
/// premium never makes renewal more likely) and the grid must contain 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProbTable {
    deltas: Vec<f64>,
    probs: Vec<f64>,
}

/// Lookup tolerance for matching a delta to a tabulated grid point.
const DELTA_MATCH_TOL: f64 = 1e-9;

impl DiscreteProbTable {
    pub fn new(deltas: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if deltas.len() != probs.len() {
            return Err(Error::config("table delta/prob lengths differ"));
        }
        if deltas.len() < 2 {
            return Err(Error::config("table needs at least 2 points"));
        }
        if deltas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("table deltas must be strictly ascending"));
        }
        if probs.iter().any(|&p| !(p > 0.0 && p <= 1.0) || !p.is_finite()) {
            return Err(Error::config("table probabilities must lie in (0,1]"));
        }
        if probs.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(Error::config("table probabilities must be non-increasing"));
        }
        let t = Self { deltas, probs };
        if t.index_of(0.0).is_none() {
            return Err(Error::config("table must contain delta = 0"));
        }
        Ok(t)
    }

    /// The nine-point motor table used by the example scenarios: changes from
    /// -20% to +20% in 5% steps.
    pub fn motor() -> Self {
        Self::new(
            vec![-0.20, -0.15, -0.10, -0.05, 0.0, 0.05, 0.10, 0.15, 0.20],
            vec![0.999, 0.995, 0.990, 0.975, 0.950, 0.925, 0.900, 0.875, 0.825],
        )
        .expect("builtin table is valid")
    }

    /// Read a `delta,psi` two-column CSV (header required).
    pub fn from_csv_reader<R: std::io::Read>(rdr: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
        let mut deltas = Vec::new();
        let mut probs = Vec::new();
        for (k, rec) in csv.records().enumerate() {
            let row = k + 2;
            let rec = rec?;
            let field = |j: usize, name: &str| -> Result<f64> {
                rec.get(j)
                    .ok_or_else(|| Error::CsvRow { row, msg: format!("missing {name}") })?
                    .parse::<f64>()
                    .map_err(|e| Error::CsvRow { row, msg: format!("bad {name}: {e}") })
            };
            deltas.push(field(0, "delta")?);
            probs.push(field(1, "psi")?);
        }
        Self::new(deltas, probs)
    }

    pub fn from_csv_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn index_of(&self, delta: f64) -> Option<usize> {
        self.deltas.iter().position(|d| (d - delta).abs() <= DELTA_MATCH_TOL)
    }

    /// Renewal probability at a tabulated change; errors between grid points.
    pub fn prob_at(&self, delta: f64) -> Result<f64> {
        self.index_of(delta)
            .map(|i| self.probs[i])
            .ok_or(Error::TableLookup { delta })
    }

    /// Probability at an unchanged premium.
    pub fn zero_prob(&self) -> f64 {
        self.probs[self.index_of(0.0).expect("validated at construction")]
    }
}

/// One policyholder's renewal-probability response.
#[derive(Debug, Clone)]
pub enum RenewalModel {
    Ma { pi: f64, a: f64, b: f64 },
    Mb { pi: f64, t: f64 },
    Mc { table: Arc<DiscreteProbTable> },
}

impl RenewalModel {
    /// `c = pi / (1 - pi)`, the renewal odds at an unchanged premium.
    pub fn odds(pi: f64) -> f64 {
        pi / (1.0 - pi)
    }
}

/// Renewal probability under `model` at premium-change fraction `delta`.
///
/// For `Ma` the value is checked to lie in (0,1): a violation signals that
/// the parameters are not valid on the caller's change box. `Mb` maps into
/// (0,1) by construction. `Mc` is an exact table lookup.
pub fn psi(model: &RenewalModel, delta: f64) -> Result<f64> {
    match model {
        RenewalModel::Ma { pi, a, b } => {
            let v = pi * (1.0 + a * delta + b * delta * delta);
            if v <= 0.0 || v >= 1.0 {
                return Err(Error::PsiOutOfRange { value: v, delta });
            }
            Ok(v)
        }
        RenewalModel::Mb { pi, t } => {
            let c = RenewalModel::odds(*pi);
            Ok(1.0 / (1.0 + (-t * delta).exp() / c))
        }
        RenewalModel::Mc { table } => table.prob_at(delta),
    }
}

/// First and second derivatives of the renewal probability with respect to
/// the change fraction. Defined for the smooth families only.
pub fn psi_derivatives(model: &RenewalModel, delta: f64) -> Result<(f64, f64)> {
    match model {
        RenewalModel::Ma { pi, a, b } => Ok((pi * (a + 2.0 * b * delta), 2.0 * pi * b)),
        RenewalModel::Mb { pi, t } => {
            let c = RenewalModel::odds(*pi);
            let p = 1.0 / (1.0 + (-t * delta).exp() / c);
            let d1 = t * p * (1.0 - p);
            let d2 = t * t * p * (1.0 - p) * (1.0 - 2.0 * p);
            Ok((d1, d2))
        }
        RenewalModel::Mc { .. } => Err(Error::DiscreteModelDerivative),
    }
}

/// Second-order expansion of the logit model around an unchanged premium,
/// expressed as an `Ma` model. Valid when the admissible changes are close
/// to 0. With `c = pi/(1-pi)`:
///
/// ```text
/// pi' = c/(1+c),  a = t/(1+c),  b = -t^2 (c-1) / (2 (1+c)^2)
/// ```
///
/// These are the exact Taylor coefficients: value, first and second
/// derivative agree with the logit model at delta = 0.
pub fn approximate_mb_by_ma(model: &RenewalModel) -> Result<RenewalModel> {
    let RenewalModel::Mb { pi, t } = model else {
        return Err(Error::config("approximation is defined for the logit model only"));
    };
    let c = RenewalModel::odds(*pi);
    let pi_a = c / (1.0 + c);
    let a = t / (1.0 + c);
    let b = -t * t * (c - 1.0) / (2.0 * (1.0 + c) * (1.0 + c));
    Ok(RenewalModel::Ma { pi: pi_a, a, b })
}

/// Ordinary least-squares quadratic through a probability table:
/// coefficients `(q2, q1, q0)` of `q2*d^2 + q1*d + q0` minimising the sum of
/// squared deviations from the tabulated probabilities. Used as the
/// continuous surrogate for table-specified policies.
pub fn fit_quadratic_to_table(table: &DiscreteProbTable) -> Result<(f64, f64, f64)> {
    let xs = table.deltas();
    let ys = table.probs();
    let mut distinct = xs.to_vec();
    distinct.dedup_by(|a, b| (*a - *b).abs() <= DELTA_MATCH_TOL);
    if distinct.len() < 3 {
        return Err(Error::config("quadratic fit needs at least 3 distinct deltas"));
    }

    // Normal equations for the basis (1, x, x^2); 3x3 solve with partial
    // pivoting. Well conditioned for |delta| <= O(1).
    let n = xs.len() as f64;
    let (mut sx, mut sx2, mut sx3, mut sx4) = (0.0, 0.0, 0.0, 0.0);
    let (mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let x2 = x * x;
        sx += x;
        sx2 += x2;
        sx3 += x2 * x;
        sx4 += x2 * x2;
        sy += y;
        sxy += x * y;
        sx2y += x2 * y;
    }
    let mut m = [
        [n, sx, sx2, sy],
        [sx, sx2, sx3, sxy],
        [sx2, sx3, sx4, sx2y],
    ];
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        if m[col][col].abs() < 1e-300 {
            return Err(Error::config("degenerate quadratic fit design"));
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
    let q0 = m[0][3] / m[0][0];
    let q1 = m[1][3] / m[1][1];
    let q2 = m[2][3] / m[2][2];
    Ok((q2, q1, q0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn motor() -> Arc<DiscreteProbTable> {
        Arc::new(DiscreteProbTable::motor())
    }

    #[test]
    fn mc_lookup_matches_table() {
        let m = RenewalModel::Mc { table: motor() };
        assert_eq!(psi(&m, 0.0).unwrap(), 0.950);
        assert_eq!(psi(&m, 0.20).unwrap(), 0.825);
        assert!(matches!(psi(&m, 0.017), Err(Error::TableLookup { .. })));
    }

    #[test]
    fn mb_zero_delta_returns_pi() {
        let m = RenewalModel::Mb { pi: 0.95, t: -123.4 };
        assert_abs_diff_eq!(psi(&m, 0.0).unwrap(), 0.95, epsilon = 1e-15);
    }

    #[test]
    fn mb_hand_value() {
        // pi = 0.95 so c = 19; at t = -5, delta = 0.10 the probability is
        // 1 / (1 + e^{0.5}/19).
        let m = RenewalModel::Mb { pi: 0.95, t: -5.0 };
        let expect = 1.0 / (1.0 + 0.5f64.exp() / 19.0);
        assert_abs_diff_eq!(psi(&m, 0.10).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.92015, epsilon = 5e-6);
    }

    #[test]
    fn ma_hand_value_and_range_gate() {
        let m = RenewalModel::Ma { pi: 0.9, a: -0.5, b: 0.0 };
        assert_abs_diff_eq!(psi(&m, 0.10).unwrap(), 0.855, epsilon = 1e-15);
        // With a = -0.5 a 20% decrease pushes psi to 0.99; a 300% decrease
        // would exceed 1 and must be rejected.
        assert!(psi(&m, -3.0).is_err());
    }

    #[test]
    fn derivative_hand_values() {
        let ma = RenewalModel::Ma { pi: 0.9, a: -0.5, b: 0.0 };
        let (d1, d2) = psi_derivatives(&ma, 0.07).unwrap();
        assert_abs_diff_eq!(d1, -0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(d2, 0.0, epsilon = 1e-15);

        let mb = RenewalModel::Mb { pi: 0.95, t: -5.0 };
        let (d1, _) = psi_derivatives(&mb, 0.0).unwrap();
        assert_abs_diff_eq!(d1, -5.0 * 0.95 * 0.05, epsilon = 1e-12);

        let mc = RenewalModel::Mc { table: motor() };
        assert!(matches!(psi_derivatives(&mc, 0.0), Err(Error::DiscreteModelDerivative)));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::single(11);
        let h = 1e-6;
        for _ in 0..1000 {
            let pi: f64 = rng.gen_range(0.82..0.98);
            let model = if rng.gen_bool(0.5) {
                let a = (1.0 - 1.0 / pi) * rng.gen_range(0.05..0.95);
                let b = rng.gen_range(-0.4..0.0);
                RenewalModel::Ma { pi, a, b }
            } else {
                RenewalModel::Mb { pi, t: rng.gen_range(-8.0..-0.5) }
            };
            let d: f64 = rng.gen_range(-0.15..0.15);
            let (a1, a2) = psi_derivatives(&model, d).unwrap();
            let raw = |x: f64| match &model {
                RenewalModel::Ma { pi, a, b } => pi * (1.0 + a * x + b * x * x),
                RenewalModel::Mb { pi, t } => {
                    1.0 / (1.0 + (-t * x).exp() / RenewalModel::odds(*pi))
                }
                RenewalModel::Mc { .. } => unreachable!(),
            };
            let fd1 = (raw(d + h) - raw(d - h)) / (2.0 * h);
            let fd2 = (raw(d + h) - 2.0 * raw(d) + raw(d - h)) / (h * h);
            assert!((a1 - fd1).abs() <= 1e-6, "first derivative off: {a1} vs {fd1}");
            assert!((a2 - fd2).abs() <= 1e-3, "second derivative off: {a2} vs {fd2}");
        }
    }

    #[test]
    fn mb_to_ma_taylor_coefficients() {
        // pi = 0.95 gives odds c = 19; with t = -5 the expansion has
        // a = -5/20 and b = -25*18/(2*400).
        let mb = RenewalModel::Mb { pi: 0.95, t: -5.0 };
        let RenewalModel::Ma { pi, a, b } = approximate_mb_by_ma(&mb).unwrap() else {
            panic!("expected Ma");
        };
        assert_abs_diff_eq!(pi, 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(a, -0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(b, -0.5625, epsilon = 1e-12);
    }

    #[test]
    fn mb_to_ma_zero_elasticity_is_constant() {
        let mb = RenewalModel::Mb { pi: 0.9, t: 0.0 };
        let RenewalModel::Ma { pi, a, b } = approximate_mb_by_ma(&mb).unwrap() else {
            panic!("expected Ma");
        };
        assert_abs_diff_eq!(pi, 0.9, epsilon = 1e-12);
        assert_eq!(a, 0.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn mb_to_ma_agrees_to_second_order() {
        // Taylor contract: value and first two derivatives agree at 0, and
        // the pointwise gap is cubic in delta near 0.
        for (pi, t) in [(0.95, -5.0), (0.9, -3.0), (0.85, -7.5)] {
            let mb = RenewalModel::Mb { pi, t };
            let ma = approximate_mb_by_ma(&mb).unwrap();
            assert_abs_diff_eq!(psi(&mb, 0.0).unwrap(), psi(&ma, 0.0).unwrap(), epsilon = 1e-8);
            let (b1, b2) = psi_derivatives(&mb, 0.0).unwrap();
            let (a1, a2) = psi_derivatives(&ma, 0.0).unwrap();
            assert_abs_diff_eq!(a1, b1, epsilon = 1e-8);
            assert_abs_diff_eq!(a2, b2, epsilon = 1e-8);

            // Fit the cubic constant on a dense grid: |gap| <= K |delta|^3.
            let mut k_fit: f64 = 0.0;
            for i in 1..=50 {
                let d = 0.05 * (i as f64) / 50.0;
                for s in [-1.0, 1.0] {
                    let gap = (psi(&mb, s * d).unwrap() - psi(&ma, s * d).unwrap()).abs();
                    k_fit = k_fit.max(gap / (d * d * d));
                }
            }
            for i in 1..=200 {
                let d = 0.05 * (i as f64) / 200.0;
                for s in [-1.0, 1.0] {
                    let gap = (psi(&mb, s * d).unwrap() - psi(&ma, s * d).unwrap()).abs();
                    assert!(gap <= 1.0001 * k_fit * d * d * d + 1e-14);
                }
            }
        }
    }

    #[test]
    fn quadratic_fit_recovers_exact_quadratic() {
        let d: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.05).collect();
        let p: Vec<f64> = d.iter().map(|&x| 0.93 - 0.3 * x - 0.8 * x * x).collect();
        let t = DiscreteProbTable::new(d, p).unwrap();
        let (q2, q1, q0) = fit_quadratic_to_table(&t).unwrap();
        assert_abs_diff_eq!(q2, -0.8, epsilon = 1e-10);
        assert_abs_diff_eq!(q1, -0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(q0, 0.93, epsilon = 1e-10);
    }

    #[test]
    fn quadratic_fit_flat_table() {
        let d: Vec<f64> = (-2..=2).map(|i| i as f64 * 0.1).collect();
        let t = DiscreteProbTable::new(d, vec![0.9; 5]).unwrap();
        let (q2, q1, q0) = fit_quadratic_to_table(&t).unwrap();
        assert_abs_diff_eq!(q2, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(q1, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(q0, 0.9, epsilon = 1e-10);
    }

    #[test]
    fn table_validation_rejects_bad_shapes() {
        assert!(DiscreteProbTable::new(vec![0.0, 0.1], vec![0.9]).is_err());
        assert!(DiscreteProbTable::new(vec![0.1, 0.0], vec![0.9, 0.95]).is_err());
        assert!(DiscreteProbTable::new(vec![0.0, 0.1], vec![0.9, 0.95]).is_err()); // increasing
        assert!(DiscreteProbTable::new(vec![-0.1, 0.1], vec![0.95, 0.9]).is_err()); // no zero
        assert!(DiscreteProbTable::new(vec![0.0, 0.1], vec![1.2, 0.9]).is_err());
    }
}
