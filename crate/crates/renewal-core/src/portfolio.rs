//! Portfolio data model, CSV ingestion, synthetic generation and
//! premium-band splitting.
//!
//! The portfolio CSV schema is
//! `id,premium,pi0,model,param1,param2` with `model` one of `ma`, `mb`, `mc`:
//! for `ma`, `param1 = a` and `param2 = b`; for `mb`, `param1 = t` (the
//! elasticity, negative) and `param2` is empty — the odds constant is always
//! computed from `pi0`; for `mc`, `param1` names a probability table in the
//! registry (or a `.csv` path relative to the portfolio file).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DiscreteProbTable, RenewalModel};

/// Model-specific elasticity parameters attached to one policy.
#[derive(Debug, Clone)]
pub enum PolicyParams {
    Ma { a: f64, b: f64 },
    Mb { t: f64 },
    Mc { table_name: String, table: Arc<DiscreteProbTable> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ma,
    Mb,
    Mc,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Ma => write!(f, "ma"),
            ModelKind::Mb => write!(f, "mb"),
            ModelKind::Mc => write!(f, "mc"),
        }
    }
}

/// One policyholder: current premium, renewal probability at an unchanged
/// premium, and the parameters of the attached renewal-probability model.
#[derive(Debug, Clone)]
pub struct Policy {
    pub id: String,
    pub premium: f64,
    /// Renewal probability if the premium is left unchanged.
    pub pi0: f64,
    pub params: PolicyParams,
}

impl Policy {
    pub fn new(id: impl Into<String>, premium: f64, pi0: f64, params: PolicyParams) -> Result<Self> {
        let p = Policy { id: id.into(), premium, pi0, params };
        p.validate()?;
        Ok(p)
    }

    fn invalid(&self, msg: impl Into<String>) -> Error {
        Error::InvalidPolicy { id: self.id.clone(), msg: msg.into() }
    }

    /// Structural parameter checks. Box-dependent checks (the probability
    /// staying inside (0,1) over a concrete change range) are performed by
    /// the solvers, which know the box.
    pub fn validate(&self) -> Result<()> {
        if !(self.premium > 0.0) || !self.premium.is_finite() {
            return Err(self.invalid("premium must be positive"));
        }
        if !(self.pi0 > 0.0 && self.pi0 < 1.0) {
            return Err(self.invalid("base_renewal_prob must lie in (0,1)"));
        }
        match &self.params {
            PolicyParams::Ma { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(self.invalid("non-finite elasticity parameter"));
                }
                let lo = 1.0 - 1.0 / self.pi0;
                if *b == 0.0 {
                    // Negative elasticity keeps the volume objective concave;
                    // a >= 0 is always rejected.
                    if *a >= 0.0 {
                        return Err(self.invalid(format!(
                            "a = {a} outside validity window ({lo:.4}, 0)"
                        )));
                    }
                } else {
                    if !(*b > -1.0 && *b < 0.0) {
                        return Err(self.invalid(format!("b = {b} outside (-1, 0)")));
                    }
                    let a_lo = lo.max(-1.0 - b);
                    let a_hi = (1.0 + b).min(1.0 / self.pi0 - 1.0);
                    if !(*a > a_lo && *a < a_hi) {
                        return Err(self.invalid(format!(
                            "a = {a} outside validity window ({a_lo:.4}, {a_hi:.4})"
                        )));
                    }
                }
            }
            PolicyParams::Mb { t } => {
                if !t.is_finite() || *t >= 0.0 {
                    return Err(self.invalid(format!("t = {t} must be negative")));
                }
            }
            PolicyParams::Mc { .. } => {}
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            PolicyParams::Ma { .. } => ModelKind::Ma,
            PolicyParams::Mb { .. } => ModelKind::Mb,
            PolicyParams::Mc { .. } => ModelKind::Mc,
        }
    }

    pub fn renewal_model(&self) -> RenewalModel {
        match &self.params {
            PolicyParams::Ma { a, b } => RenewalModel::Ma { pi: self.pi0, a: *a, b: *b },
            PolicyParams::Mb { t } => RenewalModel::Mb { pi: self.pi0, t: *t },
            PolicyParams::Mc { table, .. } => RenewalModel::Mc { table: table.clone() },
        }
    }
}

/// An ordered, non-empty collection of policies sharing one model family.
#[derive(Debug, Clone)]
pub struct Portfolio {
    policies: Vec<Policy>,
    kind: ModelKind,
}

impl Portfolio {
    pub fn new(policies: Vec<Policy>) -> Result<Self> {
        let Some(first) = policies.first() else {
            return Err(Error::EmptyPortfolio);
        };
        let kind = first.kind();
        let mut ids = BTreeSet::new();
        for p in &policies {
            p.validate()?;
            if p.kind() != kind {
                return Err(Error::InvalidPolicy {
                    id: p.id.clone(),
                    msg: format!("model {} differs from portfolio model {kind}", p.kind()),
                });
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::InvalidPolicy { id: p.id.clone(), msg: "duplicate id".into() });
            }
        }
        Ok(Portfolio { policies, kind })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn policy(&self, i: usize) -> &Policy {
        &self.policies[i]
    }
}

/// Named probability tables available to `mc` portfolios.
#[derive(Debug, Clone)]
pub struct TableRegistry {
    tables: BTreeMap<String, Arc<DiscreteProbTable>>,
}

impl Default for TableRegistry {
    fn default() -> Self {
        let mut tables = BTreeMap::new();
        tables.insert("motor".to_string(), Arc::new(DiscreteProbTable::motor()));
        TableRegistry { tables }
    }
}

impl TableRegistry {
    pub fn insert(&mut self, name: impl Into<String>, table: DiscreteProbTable) {
        self.tables.insert(name.into(), Arc::new(table));
    }

    pub fn get(&self, name: &str) -> Option<Arc<DiscreteProbTable>> {
        self.tables.get(name).cloned()
    }

    /// Register every `*.csv` in `dir` under its file stem.
    pub fn load_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "csv") {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::config("unreadable table file name"))?
                    .to_string();
                self.insert(name, DiscreteProbTable::from_csv_path(&path)?);
            }
        }
        Ok(())
    }
}

/// Load a portfolio CSV using the built-in table registry.
pub fn load_portfolio(path: impl AsRef<Path>) -> Result<Portfolio> {
    load_portfolio_with(path, &TableRegistry::default())
}

pub fn load_portfolio_with(path: impl AsRef<Path>, tables: &TableRegistry) -> Result<Portfolio> {
    let path = path.as_ref();
    let mut registry = tables.clone();
    // `mc` rows may name a table csv next to the portfolio file.
    let base_dir = path.parent().map(Path::to_path_buf);
    let file = std::fs::File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let mut policies = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2; // 1-based, after the header line
        let rec = rec?;
        let get = |j: usize| rec.get(j).unwrap_or("").to_string();
        let id = get(0);
        if id.is_empty() {
            return Err(Error::CsvRow { row, msg: "missing id".into() });
        }
        let num = |j: usize, name: &str| -> Result<f64> {
            get(j)
                .parse::<f64>()
                .map_err(|e| Error::CsvRow { row, msg: format!("bad {name}: {e}") })
        };
        let premium = num(1, "premium")?;
        let pi0 = num(2, "pi0")?;
        let model = get(3).to_ascii_lowercase();
        let params = match model.as_str() {
            "ma" => PolicyParams::Ma { a: num(4, "param1 (a)")?, b: num(5, "param2 (b)")? },
            "mb" => PolicyParams::Mb { t: num(4, "param1 (t)")? },
            "mc" => {
                let name = get(4);
                let table = match registry.get(&name) {
                    Some(t) => t,
                    None => {
                        let from_file = name.ends_with(".csv").then(|| {
                            let p = base_dir
                                .as_ref()
                                .map(|d| d.join(&name))
                                .unwrap_or_else(|| name.clone().into());
                            DiscreteProbTable::from_csv_path(p)
                        });
                        match from_file {
                            Some(Ok(t)) => {
                                registry.insert(name.clone(), t.clone());
                                registry.get(&name).unwrap()
                            }
                            Some(Err(e)) => return Err(e),
                            None => {
                                return Err(Error::CsvRow {
                                    row,
                                    msg: format!("unknown table '{name}'"),
                                })
                            }
                        }
                    }
                };
                PolicyParams::Mc { table_name: name, table }
            }
            other => {
                return Err(Error::CsvRow { row, msg: format!("unknown model '{other}'") })
            }
        };
        policies.push(Policy::new(id, premium, pi0, params)?);
    }
    Portfolio::new(policies)
}

/// Write the portfolio in the ingestion schema. Floats are printed in the
/// shortest round-trip form, so save-then-load reproduces every field
/// exactly.
pub fn save_portfolio(pf: &Portfolio, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,premium,pi0,model,param1,param2")?;
    for p in pf.policies() {
        match &p.params {
            PolicyParams::Ma { a, b } => {
                writeln!(out, "{},{},{},ma,{},{}", p.id, p.premium, p.pi0, a, b)?
            }
            PolicyParams::Mb { t } => {
                writeln!(out, "{},{},{},mb,{},", p.id, p.premium, p.pi0, t)?
            }
            PolicyParams::Mc { table_name, .. } => {
                writeln!(out, "{},{},{},mc,{},", p.id, p.premium, p.pi0, table_name)?
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Elasticity family drawn by the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticModel {
    /// `b = 0`; `a` is drawn inside `(1 - 1/pi, 0)` and then widened by
    /// `a_scale` (clamped so probabilities stay valid for changes down to
    /// -10%). `a_scale = 1` keeps the strict window.
    MaLinear {
        #[serde(default = "default_a_scale")]
        a_scale: f64,
    },
    /// `b != 0`; both coefficients drawn so the response is decreasing on
    /// changes in `[-0.10, 0.30]`.
    MaQuadratic,
    /// Logit elasticity drawn uniformly from `t_range` (both ends negative).
    Mb {
        #[serde(default = "default_t_range")]
        t_range: (f64, f64),
    },
    /// Every policy uses the named registry table.
    Mc {
        #[serde(default = "default_table_name")]
        table_name: String,
    },
}

fn default_a_scale() -> f64 {
    1.0
}

fn default_t_range() -> (f64, f64) {
    (-8.0, -2.0)
}

fn default_table_name() -> String {
    "motor".to_string()
}

/// Target summary statistics for synthetic premiums plus the generation laws.
///
/// Premiums are drawn from an exponential law shifted to `premium_min`,
/// right-truncated at `premium_max`, with the scale solved so the mean
/// matches `premium_mean`. `premium_sd` is informational (reported, not
/// targeted). Renewal probabilities are uniform on `pi_range`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub premium_min: f64,
    pub premium_mean: f64,
    #[serde(default)]
    pub premium_sd: f64,
    pub premium_max: f64,
    #[serde(default = "default_pi_range")]
    pub pi_range: (f64, f64),
    #[serde(default = "default_model")]
    pub model: SyntheticModel,
}

fn default_pi_range() -> (f64, f64) {
    (0.85, 0.98)
}

fn default_model() -> SyntheticModel {
    SyntheticModel::MaLinear { a_scale: 1.0 }
}

impl Calibration {
    /// Production statistics of a 10'000-policy motor book: min 200,
    /// mean 1'204, sd 990, max 9'061.
    pub fn motor_defaults() -> Self {
        Calibration {
            premium_min: 200.0,
            premium_mean: 1204.0,
            premium_sd: 990.0,
            premium_max: 9061.0,
            pi_range: default_pi_range(),
            model: default_model(),
        }
    }

    pub fn with_model(mut self, model: SyntheticModel) -> Self {
        self.model = model;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.premium_min < self.premium_max) {
            return Err(Error::config("calibration requires min < max"));
        }
        let half = (self.premium_min + self.premium_max) / 2.0;
        if !(self.premium_mean > self.premium_min && self.premium_mean < half) {
            return Err(Error::config(
                "calibration mean must lie in (min, (min+max)/2) for a truncated exponential",
            ));
        }
        let (lo, hi) = self.pi_range;
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return Err(Error::config("pi_range must satisfy 0 < lo < hi < 1"));
        }
        Ok(())
    }
}

/// Mean of an exponential with scale `s` truncated to `[0, w]`.
fn truncated_exp_mean(s: f64, w: f64) -> f64 {
    let r = (-w / s).exp();
    s - w * r / (1.0 - r)
}

/// Solve the scale so the truncated mean hits `target` (monotone bisection).
fn solve_truncated_scale(target: f64, w: f64) -> f64 {
    let (mut lo, mut hi) = (target, 16.0 * w);
    if truncated_exp_mean(lo, w) > target {
        lo = target / 8.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_exp_mean(mid, w) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generate `n` policies, deterministically for a fixed seed.
pub fn generate_synthetic(n: usize, seed: u64, cal: &Calibration) -> Result<Portfolio> {
    generate_synthetic_with(n, seed, cal, &TableRegistry::default())
}

pub fn generate_synthetic_with(
    n: usize,
    seed: u64,
    cal: &Calibration,
    tables: &TableRegistry,
) -> Result<Portfolio> {
    if n == 0 {
        return Err(Error::config("n must be at least 1"));
    }
    cal.validate()?;
    let w = cal.premium_max - cal.premium_min;
    let scale = solve_truncated_scale(cal.premium_mean - cal.premium_min, w);
    let trunc_mass = 1.0 - (-w / scale).exp();

    let mc_table = match &cal.model {
        SyntheticModel::Mc { table_name } => Some((
            table_name.clone(),
            tables
                .get(table_name)
                .ok_or_else(|| Error::config(format!("unknown table '{table_name}'")))?,
        )),
        _ => None,
    };

    let mut rng = crate::rng::single(seed);
    let mut policies = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.gen();
        let premium = cal.premium_min - scale * (1.0 - u * trunc_mass).ln();
        let premium = premium.clamp(cal.premium_min, cal.premium_max);
        let pi0 = rng.gen_range(cal.pi_range.0..cal.pi_range.1);
        let params = match &cal.model {
            SyntheticModel::MaLinear { a_scale } => {
                let window = 1.0 - 1.0 / pi0; // negative
                let raw = a_scale * window * rng.gen_range(0.05..0.95);
                // Keep psi < 1 for decreases down to -10% with some margin.
                let a = raw.max(9.8 * window);
                PolicyParams::Ma { a, b: 0.0 }
            }
            SyntheticModel::MaQuadratic => {
                // Decreasing response on [-0.10, 0.30]: with b < 0 the vertex
                // -a/(2b) must sit left of -0.10, i.e. a <= 0.2*b.
                let window = 1.0 - 1.0 / pi0;
                let b_lo = (5.5 * window).max(-0.9);
                let b = rng.gen_range(b_lo * 0.98..b_lo * 0.02);
                let a_lo = window.max(-1.0 - b) * 0.98;
                let a_hi = 0.2 * b * 1.02;
                let a = if a_lo < a_hi { rng.gen_range(a_lo..a_hi) } else { 0.5 * (a_lo + a_hi) };
                PolicyParams::Ma { a, b }
            }
            SyntheticModel::Mb { t_range } => {
                let (lo, hi) = *t_range;
                PolicyParams::Mb { t: rng.gen_range(lo..hi) }
            }
            SyntheticModel::Mc { .. } => {
                let (name, table) = mc_table.as_ref().unwrap();
                PolicyParams::Mc { table_name: name.clone(), table: table.clone() }
            }
        };
        policies.push(Policy::new(format!("p{i}"), premium, pi0, params)?);
    }
    Portfolio::new(policies)
}

/// Ascending premium thresholds partitioning a portfolio into bands
/// `[..t0), [t0,t1), ..., [tlast, ..)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiumSplit {
    thresholds: Vec<f64>,
}

impl PremiumSplit {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("split thresholds must be strictly ascending"));
        }
        Ok(PremiumSplit { thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn band_count(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Index of the half-open band containing `premium`.
    pub fn band_of(&self, premium: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= premium)
    }

    /// Human-readable label for band `i`, e.g. `<600`, `[600,1200)`, `>=1200`.
    pub fn band_label(&self, i: usize) -> String {
        let t = &self.thresholds;
        if t.is_empty() {
            return "all".to_string();
        }
        if i == 0 {
            format!("<{}", t[0])
        } else if i == t.len() {
            format!(">={}", t[i - 1])
        } else {
            format!("[{},{})", t[i - 1], t[i])
        }
    }
}

/// Partition by premium band. Band membership is half-open so every premium
/// lands in exactly one band; empty bands are dropped. Concatenating the
/// returned portfolios in order restores every policy exactly once.
pub fn split_portfolio(pf: &Portfolio, split: &PremiumSplit) -> Vec<Portfolio> {
    let mut buckets: Vec<Vec<Policy>> = vec![Vec::new(); split.band_count()];
    for p in pf.policies() {
        buckets[split.band_of(p.premium)].push(p.clone());
    }
    buckets
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|b| Portfolio::new(b).expect("bands of a valid portfolio are valid"))
        .collect()
}

/// Band labels aligned with the non-empty bands returned by
/// [`split_portfolio`].
pub fn split_labels(pf: &Portfolio, split: &PremiumSplit) -> Vec<String> {
    let mut seen = vec![false; split.band_count()];
    for p in pf.policies() {
        seen[split.band_of(p.premium)] = true;
    }
    seen.iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(i, _)| split.band_label(i))
        .collect()
}
