//! Scenario runner: wire a portfolio, an objective, constraints and a solver
//! together and produce the standard report table.
//!
//! A scenario is described by one JSON document:
//!
//! ```json
//! {
//!   "objective": "volume",
//!   "retention_floor": 0.85,
//!   "delta_bounds": [-0.10, 0.20],
//!   "tau_bounds": [-500.0, 500.0],
//!   "grid": [-0.2, -0.15, -0.1, -0.05, 0.0, 0.05, 0.1, 0.15, 0.2],
//!   "solver": "mdnlp",
//!   "split": [600.0, 1200.0],
//!   "rounding": {"c": 1000.0, "c1": 100.0},
//!   "risk_weight": 0.0,
//!   "loading_C": 0.0,
//!   "sim": {"prior": "uniform", "m": 1000}
//! }
//! ```
//!
//! `objective` is one of `volume`, `volume-variance`, `difference`,
//! `retention-max`; `solver` one of `qp`, `sqp`, `mdnlp`, `sim`. `grid` may
//! be a value array or `{"a": .., "b": .., "c1": ..}` for the lattice
//! `[a,b] ∩ (1/c1)Z`. `risk_weight` feeds `volume-variance`, `loading_C`
//! feeds `retention-max`, and `sim` configures the sampling solver.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdnlp::{mdnlp_solve, MdnlpConfig};
use crate::objectives::{
    self, Constraints, DeltaVector, DiscreteGrid, RoundingConfig, VarianceMode,
};
use crate::portfolio::{
    generate_synthetic, split_portfolio, Calibration, ModelKind, Policy, Portfolio, PremiumSplit,
    SyntheticModel,
};
use crate::qp::{self, KktCertificate};
use crate::sim::{prior_from_solution, sim_optimize, SimConfig, SimObjective, SimPrior, WeightedDeltas};
use crate::sqp::{self, SqpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Volume,
    VolumeVariance,
    Difference,
    RetentionMax,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObjectiveKind::Volume => "volume",
            ObjectiveKind::VolumeVariance => "volume-variance",
            ObjectiveKind::Difference => "difference",
            ObjectiveKind::RetentionMax => "retention-max",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Qp,
    Sqp,
    Mdnlp,
    Sim,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverKind::Qp => "qp",
            SolverKind::Sqp => "sqp",
            SolverKind::Mdnlp => "mdnlp",
            SolverKind::Sim => "sim",
        };
        write!(f, "{s}")
    }
}

/// Grid description: explicit values or a lattice `[a,b] ∩ (1/c1)Z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Lattice { a: f64, b: f64, c1: f64 },
}

impl GridSpec {
    pub fn build(&self) -> Result<DiscreteGrid> {
        match self {
            GridSpec::Values(v) => DiscreteGrid::new(v.clone()),
            GridSpec::Lattice { a, b, c1 } => DiscreteGrid::lattice(*a, *b, *c1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    /// `"uniform"`: uniform over the constraint grid.
    Named(String),
    /// Uniform over an explicit admissible set.
    Uniform { uniform: Vec<f64> },
    /// Shared empirical distribution.
    Empirical { values: Vec<f64>, weights: Vec<f64> },
    /// Empirical distribution of a previously emitted solution
    /// (`id,delta` CSV), the usual follow-up run.
    FromSolution { from_solution: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub prior: PriorSpec,
    pub m: u64,
    #[serde(default)]
    pub max_resamples: Option<u64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// One scenario document; see the module docs for the JSON schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub objective: ObjectiveKind,
    pub retention_floor: f64,
    pub delta_bounds: (f64, f64),
    #[serde(default)]
    pub tau_bounds: Option<(f64, f64)>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    pub solver: SolverKind,
    #[serde(default)]
    pub split: Option<Vec<f64>>,
    /// Optional per-band retention floors for split runs, aligned with the
    /// bands implied by `split` (defaults to the global floor everywhere).
    #[serde(default)]
    pub split_floors: Option<Vec<f64>>,
    #[serde(default)]
    pub rounding: Option<RoundingConfig>,
    #[serde(default)]
    pub risk_weight: f64,
    #[serde(default, rename = "loading_C")]
    pub loading_c: f64,
    #[serde(default)]
    pub sim: Option<SimSpec>,
    #[serde(default)]
    pub variance_mode: VarianceMode,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn constraints(&self, solver_needs_default_grid: bool) -> Result<Constraints> {
        let mut cons = Constraints::new(self.retention_floor, self.delta_bounds)?;
        if let Some(tau) = self.tau_bounds {
            cons = cons.with_abs_bounds(tau)?;
        }
        match (&self.grid, solver_needs_default_grid) {
            (Some(g), _) => cons = cons.with_grid(g.build()?),
            (None, true) => cons = cons.with_grid(DiscreteGrid::default_motor()),
            (None, false) => {}
        }
        Ok(cons)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverDiag {
    pub solver: String,
    pub converged: bool,
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub kkt: Option<KktCertificate>,
    #[serde(default)]
    pub local: Option<bool>,
    #[serde(default)]
    pub bnb_nodes: Option<u64>,
    #[serde(default)]
    pub acceptance_rate: Option<f64>,
}

/// Everything the tables report about one solved scenario. All growth
/// figures are pure functions of the portfolio and the returned changes,
/// relative to the no-change expectations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub n_policies: usize,
    pub objective: ObjectiveKind,
    pub objective_value: f64,
    pub baseline_volume: f64,
    pub expected_volume: f64,
    pub volume_growth_pct: f64,
    pub baseline_count: f64,
    pub expected_count: f64,
    pub policy_count_growth_pct: f64,
    pub retention: f64,
    pub average_delta_pct: f64,
    pub average_increase_pct: Option<f64>,
    pub average_decrease_pct: Option<f64>,
    pub n_increases: usize,
    pub n_decreases: usize,
    pub n_zero: usize,
    pub variance_corrected: f64,
    pub variance_unsquared: f64,
    #[serde(default)]
    pub rounded_volume: Option<f64>,
    #[serde(default)]
    pub rounded_objective: Option<f64>,
    pub certified_feasible: bool,
    pub solver: SolverDiag,
}

#[derive(Debug)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub delta: DeltaVector,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the sampling seed of `sim` scenarios.
    pub seed: Option<u64>,
    /// Write the sequential solver's iteration trace here.
    pub trace_path: Option<PathBuf>,
}

fn objective_value(
    pf: &Portfolio,
    d: &DeltaVector,
    spec: &ScenarioSpec,
) -> Result<f64> {
    Ok(match spec.objective {
        ObjectiveKind::Volume => objectives::q_vol(pf, d)?,
        ObjectiveKind::Difference => objectives::q_dif(pf, d)?,
        ObjectiveKind::RetentionMax => objectives::retention(pf, d)?,
        ObjectiveKind::VolumeVariance => {
            objectives::q_vol(pf, d)?
                - spec.risk_weight * objectives::q_var(pf, d, spec.variance_mode)?
        }
    })
}

/// Assemble the report for a solved delta vector.
pub fn compute_report(
    pf: &Portfolio,
    d: &DeltaVector,
    spec: &ScenarioSpec,
    cons: &Constraints,
    diag: SolverDiag,
) -> Result<ScenarioReport> {
    let baseline_volume = objectives::baseline_volume(pf);
    let expected_volume = objectives::q_vol(pf, d)?;
    let baseline_count = objectives::baseline_count(pf);
    let expected_count = objectives::expected_count(pf, d)?;
    let retention = expected_count / pf.len() as f64;

    let mut n_inc = 0;
    let mut n_dec = 0;
    let mut sum_inc = 0.0;
    let mut sum_dec = 0.0;
    for &x in d.as_slice() {
        if x > 1e-12 {
            n_inc += 1;
            sum_inc += x;
        } else if x < -1e-12 {
            n_dec += 1;
            sum_dec += x;
        }
    }
    let feas = objectives::feasible(pf, d, cons)?;
    let objective_value = objective_value(pf, d, spec)?;
    Ok(ScenarioReport {
        n_policies: pf.len(),
        objective: spec.objective,
        objective_value,
        baseline_volume,
        expected_volume,
        volume_growth_pct: 100.0 * (expected_volume / baseline_volume - 1.0),
        baseline_count,
        expected_count,
        policy_count_growth_pct: 100.0 * (expected_count / baseline_count - 1.0),
        retention,
        average_delta_pct: 100.0 * d.mean(),
        average_increase_pct: (n_inc > 0).then(|| 100.0 * sum_inc / n_inc as f64),
        average_decrease_pct: (n_dec > 0).then(|| 100.0 * sum_dec / n_dec as f64),
        n_increases: n_inc,
        n_decreases: n_dec,
        n_zero: pf.len() - n_inc - n_dec,
        variance_corrected: objectives::q_var(pf, d, VarianceMode::Corrected)?,
        variance_unsquared: objectives::q_var(pf, d, VarianceMode::Unsquared)?,
        rounded_volume: spec.rounding.as_ref().map(|r| objectives::rounded(expected_volume, r)),
        rounded_objective: spec
            .rounding
            .as_ref()
            .map(|r| objectives::rounded(objective_value, r)),
        certified_feasible: feas.feasible,
        solver: diag,
    })
}

fn resolve_prior(spec: &PriorSpec, cons: &Constraints) -> Result<SimPrior> {
    Ok(match spec {
        PriorSpec::Named(name) if name == "uniform" => {
            let grid = cons
                .grid
                .clone()
                .ok_or_else(|| Error::config("the uniform prior needs a constraint grid"))?;
            SimPrior::UniformGrid { allowed: grid }
        }
        PriorSpec::Named(other) => {
            return Err(Error::config(format!("unknown prior '{other}'")))
        }
        PriorSpec::Uniform { uniform } => SimPrior::UniformGrid {
            allowed: DiscreteGrid::allowing_missing_zero(uniform.clone())?,
        },
        PriorSpec::Empirical { values, weights } => SimPrior::EmpiricalShared {
            dist: WeightedDeltas::new(values.clone(), weights.clone())?,
        },
        PriorSpec::FromSolution { from_solution } => {
            let text = std::fs::read_to_string(from_solution)?;
            let mut deltas = Vec::new();
            for (k, line) in text.lines().enumerate() {
                if k == 0 || line.trim().is_empty() {
                    continue; // header
                }
                let field = line.rsplit(',').next().unwrap_or("");
                deltas.push(field.trim().parse::<f64>().map_err(|e| Error::CsvRow {
                    row: k + 1,
                    msg: format!("bad delta: {e}"),
                })?);
            }
            prior_from_solution(&DeltaVector(deltas))?
        }
    })
}

/// Solve one scenario and report it.
pub fn run_scenario(
    pf: &Portfolio,
    spec: &ScenarioSpec,
    opts: &RunOptions,
) -> Result<ScenarioOutcome> {
    let cons = spec.constraints(spec.solver == SolverKind::Mdnlp)?;
    let (delta, diag) = match (spec.objective, spec.solver) {
        (ObjectiveKind::Volume, SolverKind::Qp) => {
            let (d, cert) = qp::solve_qp(&qp::assemble_qp(pf, &cons)?)?;
            (d, diag_qp(cert))
        }
        (ObjectiveKind::Difference, SolverKind::Qp) => {
            let (d, cert) =
                qp::solve_qp(&qp::assemble_qp_objective(pf, &cons, qp::QpObjective::Difference)?)?;
            (d, diag_qp(cert))
        }
        (ObjectiveKind::VolumeVariance, SolverKind::Qp | SolverKind::Sqp) => {
            let (d, cert) =
                qp::solve_volume_variance(pf, &cons, spec.risk_weight, spec.variance_mode)?;
            (d, diag_qp(cert))
        }
        (ObjectiveKind::Volume, SolverKind::Sqp) => {
            let problem = match pf.kind() {
                ModelKind::Ma => sqp::build_problem_ma_cubic(pf, &cons)?,
                ModelKind::Mb => sqp::build_problem_mb(pf, &cons)?,
                ModelKind::Mc => {
                    return Err(Error::config(
                        "table-specified portfolios need the mdnlp or sim solver",
                    ))
                }
            };
            run_sqp(&problem, pf.len(), opts)?
        }
        (ObjectiveKind::Difference, SolverKind::Sqp) => {
            let problem = sqp::build_problem_difference(pf, &cons)?;
            run_sqp(&problem, pf.len(), opts)?
        }
        (ObjectiveKind::RetentionMax, SolverKind::Sqp) => {
            let problem = sqp::build_problem_retention_max(pf, &cons, spec.loading_c)?;
            run_sqp(&problem, pf.len(), opts)?
        }
        (ObjectiveKind::Volume, SolverKind::Mdnlp) => {
            let res = mdnlp_solve(pf, &cons, &MdnlpConfig::default())?;
            let diag = SolverDiag {
                solver: "mdnlp".into(),
                converged: res.converged,
                iterations: Some(res.outer_iterations as u64),
                local: Some(res.local),
                bnb_nodes: Some(res.bnb_nodes as u64),
                ..SolverDiag::default()
            };
            (res.delta, diag)
        }
        (ObjectiveKind::Volume | ObjectiveKind::Difference, SolverKind::Sim) => {
            let sim_spec = spec
                .sim
                .as_ref()
                .ok_or_else(|| Error::config("solver 'sim' needs the sim settings"))?;
            let prior = resolve_prior(&sim_spec.prior, &cons)?;
            let cfg = SimConfig {
                m: sim_spec.m,
                max_resamples_per_replication: sim_spec.max_resamples.unwrap_or(10_000),
                seed: opts.seed.or(sim_spec.seed).unwrap_or(0),
                objective: match spec.objective {
                    ObjectiveKind::Difference => SimObjective::Difference,
                    _ => SimObjective::Volume,
                },
            };
            let res = sim_optimize(pf, &cons, &prior, &cfg)?;
            let diag = SolverDiag {
                solver: "sim".into(),
                converged: true,
                iterations: Some(res.stats.replications),
                acceptance_rate: Some(res.stats.acceptance_rate),
                ..SolverDiag::default()
            };
            (res.best_delta, diag)
        }
        (obj, solver) => {
            return Err(Error::config(format!(
                "objective '{obj}' is not supported with solver '{solver}'"
            )))
        }
    };
    let report = compute_report(pf, &delta, spec, &cons, diag)?;
    Ok(ScenarioOutcome { report, delta })
}

fn diag_qp(cert: KktCertificate) -> SolverDiag {
    SolverDiag {
        solver: "qp".into(),
        converged: cert.within(1e-8, 1e-8),
        kkt: Some(cert),
        ..SolverDiag::default()
    }
}

fn run_sqp(
    problem: &sqp::SmoothProblem,
    n: usize,
    opts: &RunOptions,
) -> Result<(DeltaVector, SolverDiag)> {
    let res = sqp::sqp_solve(problem, &DeltaVector::zeros(n), &SqpConfig::default())?;
    if let Some(path) = &opts.trace_path {
        sqp::write_trace_csv(path, &res.trace)?;
    }
    let diag = SolverDiag {
        solver: "sqp".into(),
        converged: res.converged(),
        iterations: Some(res.iterations as u64),
        kkt: Some(res.certificate),
        ..SolverDiag::default()
    };
    Ok((res.delta, diag))
}

/// Outcome of a split run: per-band solves, their combination evaluated on
/// the whole portfolio, the unsplit solve, and the headline difference.
pub struct SplitOutcome {
    pub band_labels: Vec<String>,
    pub band_reports: Vec<ScenarioReport>,
    pub combined_delta: DeltaVector,
    pub aggregate: ScenarioReport,
    pub unsplit: ScenarioReport,
    /// Unsplit minus combined volume growth, percentage points.
    pub difference_pp: f64,
}

/// Solve each premium band separately (each under its own retention floor,
/// defaulting to the global one), recombine, and compare against the
/// unsplit solve.
pub fn run_split_scenario(
    pf: &Portfolio,
    spec: &ScenarioSpec,
    opts: &RunOptions,
) -> Result<SplitOutcome> {
    let thresholds = spec
        .split
        .clone()
        .ok_or_else(|| Error::config("split scenario needs thresholds"))?;
    let split = PremiumSplit::new(thresholds)?;
    if let Some(floors) = &spec.split_floors {
        if floors.len() != split.band_count() {
            return Err(Error::config(format!(
                "split_floors has {} entries for {} bands",
                floors.len(),
                split.band_count()
            )));
        }
    }

    let bands = split_portfolio(pf, &split);
    let labels = crate::portfolio::split_labels(pf, &split);

    // Band index (into the full band list) for each non-empty band.
    let mut non_empty: Vec<usize> = Vec::new();
    {
        let mut seen = vec![false; split.band_count()];
        for p in pf.policies() {
            seen[split.band_of(p.premium)] = true;
        }
        for (i, s) in seen.iter().enumerate() {
            if *s {
                non_empty.push(i);
            }
        }
    }

    let mut band_reports = Vec::with_capacity(bands.len());
    let mut band_deltas: Vec<DeltaVector> = Vec::with_capacity(bands.len());
    for (k, band) in bands.iter().enumerate() {
        let mut band_spec = spec.clone();
        band_spec.split = None;
        if let Some(floors) = &spec.split_floors {
            band_spec.retention_floor = floors[non_empty[k]];
        }
        let out = run_scenario(band, &band_spec, opts)?;
        band_reports.push(out.report);
        band_deltas.push(out.delta);
    }

    // Stitch band solutions back into portfolio order.
    let mut cursor = vec![0usize; bands.len()];
    let band_lookup: std::collections::HashMap<usize, usize> =
        non_empty.iter().enumerate().map(|(k, &b)| (b, k)).collect();
    let mut combined = Vec::with_capacity(pf.len());
    for p in pf.policies() {
        let k = band_lookup[&split.band_of(p.premium)];
        combined.push(band_deltas[k][cursor[k]]);
        cursor[k] += 1;
    }
    let combined = DeltaVector(combined);

    let mut whole_spec = spec.clone();
    whole_spec.split = None;
    let cons = whole_spec.constraints(whole_spec.solver == SolverKind::Mdnlp)?;
    let aggregate = compute_report(
        pf,
        &combined,
        &whole_spec,
        &cons,
        SolverDiag { solver: format!("{} (split)", spec.solver), converged: true, ..SolverDiag::default() },
    )?;
    let unsplit = run_scenario(pf, &whole_spec, opts)?;
    let difference_pp = unsplit.report.volume_growth_pct - aggregate.volume_growth_pct;
    Ok(SplitOutcome {
        band_labels: labels,
        band_reports,
        combined_delta: combined,
        aggregate,
        unsplit: unsplit.report,
        difference_pp,
    })
}

/// The two homogeneous sanity portfolios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Every premium equal (200), renewal probabilities drawn.
    EqualPremium,
    /// Every renewal probability equal (0.9), premiums drawn.
    EqualPi,
}

pub struct ToyOutcome {
    pub kind: ToyKind,
    pub scenario_names: Vec<&'static str>,
    pub reports: Vec<ScenarioReport>,
}

/// Build the toy portfolio and run the three standard scenarios: volume
/// maximisation, the volume/variance trade-off, and retention maximisation
/// under a 10% volume loading.
pub fn run_toy_model(kind: ToyKind, n: usize, seed: u64) -> Result<ToyOutcome> {
    let mut cal = Calibration::motor_defaults()
        .with_model(SyntheticModel::MaLinear { a_scale: 6.0 });
    let pf = match kind {
        ToyKind::EqualPremium => {
            let base = generate_synthetic(n, seed, &cal)?;
            let policies: Vec<Policy> = base
                .policies()
                .iter()
                .map(|p| Policy::new(p.id.clone(), 200.0, p.pi0, p.params.clone()))
                .collect::<Result<_>>()?;
            Portfolio::new(policies)?
        }
        ToyKind::EqualPi => {
            cal.pi_range = (0.8999999, 0.9000001);
            let base = generate_synthetic(n, seed, &cal)?;
            let policies: Vec<Policy> = base
                .policies()
                .iter()
                .map(|p| Policy::new(p.id.clone(), p.premium, 0.9, p.params.clone()))
                .collect::<Result<_>>()?;
            Portfolio::new(policies)?
        }
    };

    let base_spec = ScenarioSpec {
        objective: ObjectiveKind::Volume,
        retention_floor: 0.85,
        delta_bounds: (-0.10, 0.20),
        tau_bounds: None,
        grid: None,
        solver: SolverKind::Qp,
        split: None,
        split_floors: None,
        rounding: None,
        risk_weight: 0.0,
        loading_c: 0.0,
        sim: None,
        variance_mode: VarianceMode::Corrected,
    };
    let loading = 0.10 * objectives::baseline_volume(&pf);
    let scenarios = vec![
        ("volume", base_spec.clone()),
        (
            "volume-variance",
            ScenarioSpec {
                objective: ObjectiveKind::VolumeVariance,
                risk_weight: 1e-4,
                ..base_spec.clone()
            },
        ),
        (
            "retention-max",
            ScenarioSpec {
                objective: ObjectiveKind::RetentionMax,
                solver: SolverKind::Sqp,
                loading_c: loading,
                ..base_spec
            },
        ),
    ];

    let mut names = Vec::new();
    let mut reports = Vec::new();
    for (name, spec) in scenarios {
        names.push(name);
        reports.push(run_scenario(&pf, &spec, &RunOptions::default())?.report);
    }
    Ok(ToyOutcome { kind, scenario_names: names, reports })
}

impl ToyOutcome {
    /// Three-column text table over the standard scenarios.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let head: Vec<String> = self.scenario_names.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("{:<42}", "scenario"));
        for h in &head {
            out.push_str(&format!("{h:>18}"));
        }
        out.push('\n');
        let rows: Vec<(&str, Vec<String>)> = vec![
            (
                "Expected premium volume growth (%)",
                self.reports.iter().map(|r| format!("{:.2}", r.volume_growth_pct)).collect(),
            ),
            (
                "Expected policy count growth (%)",
                self.reports.iter().map(|r| format!("{:.2}", r.policy_count_growth_pct)).collect(),
            ),
            (
                "Average optimal delta (%)",
                self.reports.iter().map(|r| format!("{:.2}", r.average_delta_pct)).collect(),
            ),
        ];
        for (label, vals) in rows {
            out.push_str(&format!("{label:<42}"));
            for v in vals {
                out.push_str(&format!("{v:>18}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "table" | "text-table" | "txt" => Ok(ReportFormat::Table),
            other => Err(Error::config(format!("unknown format '{other}'"))),
        }
    }
}

/// Flat `(key, value)` view of a report; the single source for the CSV and
/// text renderings, and the target the JSON form flattens onto.
pub fn report_fields(r: &ScenarioReport) -> Vec<(String, String)> {
    let fmt_opt = |v: Option<f64>| v.map_or("".to_string(), |x| format!("{x}"));
    let mut out = vec![
        ("n_policies".to_string(), r.n_policies.to_string()),
        ("objective".to_string(), r.objective.to_string()),
        ("objective_value".to_string(), format!("{}", r.objective_value)),
        ("baseline_volume".to_string(), format!("{}", r.baseline_volume)),
        ("expected_volume".to_string(), format!("{}", r.expected_volume)),
        ("volume_growth_pct".to_string(), format!("{}", r.volume_growth_pct)),
        ("baseline_count".to_string(), format!("{}", r.baseline_count)),
        ("expected_count".to_string(), format!("{}", r.expected_count)),
        ("policy_count_growth_pct".to_string(), format!("{}", r.policy_count_growth_pct)),
        ("retention".to_string(), format!("{}", r.retention)),
        ("average_delta_pct".to_string(), format!("{}", r.average_delta_pct)),
        ("average_increase_pct".to_string(), fmt_opt(r.average_increase_pct)),
        ("average_decrease_pct".to_string(), fmt_opt(r.average_decrease_pct)),
        ("n_increases".to_string(), r.n_increases.to_string()),
        ("n_decreases".to_string(), r.n_decreases.to_string()),
        ("n_zero".to_string(), r.n_zero.to_string()),
        ("variance_corrected".to_string(), format!("{}", r.variance_corrected)),
        ("variance_unsquared".to_string(), format!("{}", r.variance_unsquared)),
        ("rounded_volume".to_string(), fmt_opt(r.rounded_volume)),
        ("rounded_objective".to_string(), fmt_opt(r.rounded_objective)),
        ("certified_feasible".to_string(), r.certified_feasible.to_string()),
        ("solver".to_string(), r.solver.solver.clone()),
        ("solver_converged".to_string(), r.solver.converged.to_string()),
    ];
    if let Some(it) = r.solver.iterations {
        out.push(("solver_iterations".to_string(), it.to_string()));
    }
    if let Some(k) = &r.solver.kkt {
        out.push(("solver_kkt_lambda".to_string(), format!("{}", k.lambda)));
        out.push((
            "solver_kkt_stationarity".to_string(),
            format!("{}", k.stationarity_residual),
        ));
        out.push((
            "solver_kkt_complementarity".to_string(),
            format!("{}", k.complementarity_residual),
        ));
        out.push(("solver_kkt_primal".to_string(), format!("{}", k.primal_violation)));
    }
    if let Some(l) = r.solver.local {
        out.push(("solver_local".to_string(), l.to_string()));
    }
    if let Some(nodes) = r.solver.bnb_nodes {
        out.push(("solver_bnb_nodes".to_string(), nodes.to_string()));
    }
    if let Some(acc) = r.solver.acceptance_rate {
        out.push(("solver_acceptance_rate".to_string(), format!("{acc}")));
    }
    out
}

/// Render a report as CSV, JSON or an aligned text table.
pub fn emit_report(report: &ScenarioReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Csv => {
            let mut s = String::from("field,value\n");
            for (k, v) in report_fields(report) {
                s.push_str(&format!("{k},{v}\n"));
            }
            s
        }
        ReportFormat::Table => {
            let labels: Vec<(&str, String)> = vec![
                ("Policies", report.n_policies.to_string()),
                ("Objective", report.objective.to_string()),
                (
                    "Expected premium volume growth (%)",
                    format!("{:.4}", report.volume_growth_pct),
                ),
                (
                    "Expected policy count growth (%)",
                    format!("{:.4}", report.policy_count_growth_pct),
                ),
                ("Expected retention (%)", format!("{:.4}", 100.0 * report.retention)),
                ("Average optimal delta (%)", format!("{:.4}", report.average_delta_pct)),
                (
                    "Average optimal increase (%)",
                    report
                        .average_increase_pct
                        .map_or("-".into(), |v| format!("{v:.4}")),
                ),
                (
                    "Average optimal decrease (%)",
                    report
                        .average_decrease_pct
                        .map_or("-".into(), |v| format!("{v:.4}")),
                ),
                ("Number of increases", report.n_increases.to_string()),
                ("Number of decreases", report.n_decreases.to_string()),
                ("Number unchanged", report.n_zero.to_string()),
                ("Objective value", format!("{:.6}", report.objective_value)),
                ("Expected volume", format!("{:.6}", report.expected_volume)),
                ("Variance (corrected)", format!("{:.6}", report.variance_corrected)),
                ("Variance (unsquared)", format!("{:.6}", report.variance_unsquared)),
                (
                    "Certified feasible",
                    report.certified_feasible.to_string(),
                ),
                ("Solver", report.solver.solver.clone()),
            ];
            let mut extra: Vec<(&str, String)> = Vec::new();
            if let Some(rv) = report.rounded_volume {
                extra.push(("Expected volume (rounded)", format!("{rv}")));
            }
            let mut s = String::new();
            for (k, v) in labels.into_iter().chain(extra) {
                s.push_str(&format!("{k:<38} {v}\n"));
            }
            s
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiscreteProbTable;
    use crate::portfolio::PolicyParams;
    use std::sync::Arc;

    fn motor_portfolio(n: usize) -> Portfolio {
        let table = Arc::new(DiscreteProbTable::motor());
        Portfolio::new(
            (0..n)
                .map(|i| {
                    Policy::new(
                        format!("p{i}"),
                        100.0,
                        0.95,
                        PolicyParams::Mc { table_name: "motor".into(), table: table.clone() },
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn mdnlp_spec(floor: f64) -> ScenarioSpec {
        ScenarioSpec {
            objective: ObjectiveKind::Volume,
            retention_floor: floor,
            delta_bounds: (-0.20, 0.20),
            tau_bounds: None,
            grid: None,
            solver: SolverKind::Mdnlp,
            split: None,
            split_floors: None,
            rounding: None,
            risk_weight: 0.0,
            loading_c: 0.0,
            sim: None,
            variance_mode: VarianceMode::Corrected,
        }
    }

    #[test]
    fn scenario_json_round_trip() {
        let text = r#"{
            "objective": "volume",
            "retention_floor": 0.85,
            "delta_bounds": [-0.1, 0.2],
            "tau_bounds": [-50.0, 300.0],
            "grid": {"a": -0.2, "b": 0.2, "c1": 20},
            "solver": "sim",
            "split": [600.0, 1200.0],
            "rounding": {"c": 1000.0, "c1": 100.0},
            "risk_weight": 0.001,
            "loading_C": 85000.0,
            "sim": {"prior": "uniform", "m": 1000}
        }"#;
        let spec = ScenarioSpec::from_json(text).unwrap();
        assert_eq!(spec.objective, ObjectiveKind::Volume);
        assert_eq!(spec.solver, SolverKind::Sim);
        assert_eq!(spec.loading_c, 85000.0);
        let grid = spec.grid.as_ref().unwrap().build().unwrap();
        assert_eq!(grid.len(), 9);
        let back = serde_json::to_string(&spec).unwrap();
        let spec2: ScenarioSpec = serde_json::from_str(&back).unwrap();
        assert_eq!(spec2.retention_floor, 0.85);
    }

    #[test]
    fn identity_scenario_reports_zero_growth() {
        let pf = motor_portfolio(40);
        let mut spec = mdnlp_spec(0.85);
        spec.grid = Some(GridSpec::Values(vec![0.0]));
        let out = run_scenario(&pf, &spec, &RunOptions::default()).unwrap();
        assert_eq!(out.report.volume_growth_pct, 0.0);
        assert_eq!(out.report.policy_count_growth_pct, 0.0);
        assert_eq!(out.report.n_increases, 0);
        assert_eq!(out.report.n_decreases, 0);
        assert_eq!(out.report.n_zero, 40);
        assert!(out.report.certified_feasible);
    }

    #[test]
    fn report_growths_are_recomputable() {
        let pf = motor_portfolio(60);
        let spec = mdnlp_spec(0.90);
        let out = run_scenario(&pf, &spec, &RunOptions::default()).unwrap();
        let v0 = objectives::baseline_volume(&pf);
        let v1 = objectives::q_vol(&pf, &out.delta).unwrap();
        let growth = 100.0 * (v1 / v0 - 1.0);
        assert!((growth - out.report.volume_growth_pct).abs() <= 1e-9);
        let c0 = objectives::baseline_count(&pf);
        let c1 = objectives::expected_count(&pf, &out.delta).unwrap();
        let cg = 100.0 * (c1 / c0 - 1.0);
        assert!((cg - out.report.policy_count_growth_pct).abs() <= 1e-9);
        let total = out.report.n_increases + out.report.n_decreases + out.report.n_zero;
        assert_eq!(total, pf.len());
    }

    #[test]
    fn csv_and_json_reports_agree() {
        let pf = motor_portfolio(25);
        let spec = mdnlp_spec(0.9);
        let out = run_scenario(&pf, &spec, &RunOptions::default()).unwrap();
        let csv = emit_report(&out.report, ReportFormat::Csv).unwrap();
        let json = emit_report(&out.report, ReportFormat::Json).unwrap();
        let parsed: ScenarioReport = serde_json::from_str(&json).unwrap();
        let from_json: std::collections::HashMap<String, String> =
            report_fields(&parsed).into_iter().collect();
        for line in csv.lines().skip(1) {
            let (k, v) = line.split_once(',').unwrap();
            assert_eq!(from_json.get(k).map(String::as_str), Some(v), "field {k}");
        }
        let table = emit_report(&out.report, ReportFormat::Table).unwrap();
        for label in [
            "Expected premium volume growth (%)",
            "Average optimal delta (%)",
            "Number of increases",
        ] {
            assert!(table.contains(label), "missing {label}");
        }
    }

    #[test]
    fn degenerate_split_differs_by_nothing() {
        let pf = motor_portfolio(30);
        let mut spec = mdnlp_spec(0.90);
        spec.split = Some(vec![]);
        let out = run_split_scenario(&pf, &spec, &RunOptions::default()).unwrap();
        assert_eq!(out.band_reports.len(), 1);
        assert!(out.difference_pp.abs() <= 1e-12);
    }

    #[test]
    fn toy_equal_premium_volume_solution_is_uniform_for_identical_policies() {
        // Fully identical policies: the volume optimum has equal coordinates.
        let policies: Vec<Policy> = (0..20)
            .map(|i| {
                Policy::new(format!("p{i}"), 200.0, 0.9, PolicyParams::Ma { a: -0.5, b: 0.0 })
                    .unwrap()
            })
            .collect();
        let pf = Portfolio::new(policies).unwrap();
        let spec = ScenarioSpec {
            solver: SolverKind::Qp,
            ..mdnlp_spec(0.85)
        };
        let mut spec = spec;
        spec.delta_bounds = (-0.10, 0.20);
        let out = run_scenario(&pf, &spec, &RunOptions::default()).unwrap();
        let first = out.delta[0];
        assert!(out.delta.as_slice().iter().all(|&d| (d - first).abs() <= 1e-12));
    }

    #[test]
    fn toy_scenario_three_constraint_arithmetic() {
        let toy = run_toy_model(ToyKind::EqualPremium, 300, 9).unwrap();
        assert_eq!(toy.reports.len(), 3);
        // Scenario 3 demands at least 10% volume growth.
        let r3 = &toy.reports[2];
        assert!(
            r3.volume_growth_pct >= 10.0 - 1e-6,
            "retention-max volume growth {}",
            r3.volume_growth_pct
        );
        let table = toy.render_table();
        assert!(table.contains("volume-variance"));
    }

    #[test]
    fn toy_kinds_differ_only_through_heterogeneity_channel() {
        let a = run_toy_model(ToyKind::EqualPremium, 200, 11).unwrap();
        let b = run_toy_model(ToyKind::EqualPi, 200, 11).unwrap();
        // Smoke comparison: same scenario set, different heterogeneity.
        assert_eq!(a.scenario_names, b.scenario_names);
        assert_ne!(
            a.reports[0].volume_growth_pct.to_bits(),
            b.reports[0].volume_growth_pct.to_bits()
        );
    }

    #[test]
    fn unsupported_combination_is_rejected() {
        let pf = motor_portfolio(5);
        let mut spec = mdnlp_spec(0.9);
        spec.objective = ObjectiveKind::RetentionMax;
        spec.solver = SolverKind::Mdnlp;
        let err = run_scenario(&pf, &spec, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
