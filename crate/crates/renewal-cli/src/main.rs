//! `renewalopt` — renewal premium optimisation from the command line.
//!
//! Subcommands:
//!
//! * `run` — load a portfolio CSV and a scenario JSON, solve, and write the
//!   report (and the optimal changes) into an output directory. Exits 0 only
//!   when every produced solution is certified feasible.
//! * `generate` — write a synthetic portfolio calibrated to target summary
//!   statistics.
//! * `fit-tariff` — recover tariff-structure coefficients from optimised
//!   premiums at known risk points.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use renewal_core::portfolio::{
    generate_synthetic_with, load_portfolio_with, save_portfolio, Calibration, TableRegistry,
};
use renewal_core::scenario::{
    emit_report, run_scenario, run_split_scenario, ReportFormat, RunOptions, ScenarioSpec,
};
use renewal_core::tariff::{fit_tariff, RiskPoint, TariffStructure};

#[derive(Parser)]
#[command(name = "renewalopt", about = "Renewal premium optimisation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario against a portfolio and write reports.
    Run(RunArgs),
    /// Generate a synthetic portfolio CSV.
    Generate(GenerateArgs),
    /// Fit tariff-structure coefficients to risk points.
    FitTariff(FitTariffArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Portfolio CSV (id,premium,pi0,model,param1,param2).
    #[arg(long)]
    portfolio: PathBuf,
    /// Scenario JSON document.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for report and delta files.
    #[arg(long)]
    out: PathBuf,
    /// Report format: csv, json or table.
    #[arg(long, default_value = "table")]
    format: String,
    /// Seed override for sampling solvers.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the sequential solver's iteration trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Directory of extra probability tables (<name>.csv with delta,psi).
    #[arg(long)]
    tables: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of policies.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration JSON; defaults to the motor-book statistics.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Output portfolio CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitTariffArgs {
    /// Risk-point CSV (x,y,premium).
    #[arg(long)]
    points: PathBuf,
    /// Output text file for the fitted coefficients.
    #[arg(long)]
    out: PathBuf,
    /// Initial structure JSON; defaults to a broad neutral start.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn write_deltas(path: &Path, pf: &renewal_core::Portfolio, d: &renewal_core::DeltaVector) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,delta")?;
    for (p, v) in pf.policies().iter().zip(d.as_slice()) {
        writeln!(out, "{},{}", p.id, v)?;
    }
    Ok(())
}

fn format_ext(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
        ReportFormat::Table => "txt",
    }
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let format: ReportFormat = args.format.parse()?;
    let mut registry = TableRegistry::default();
    if let Some(dir) = &args.tables {
        registry.load_dir(dir).context("loading table directory")?;
    }
    let pf = load_portfolio_with(&args.portfolio, &registry)
        .with_context(|| format!("loading portfolio {}", args.portfolio.display()))?;
    let spec = ScenarioSpec::from_json(
        &std::fs::read_to_string(&args.scenario)
            .with_context(|| format!("reading scenario {}", args.scenario.display()))?,
    )?;
    std::fs::create_dir_all(&args.out)?;
    let opts = RunOptions { seed: args.seed, trace_path: args.trace.clone() };

    let mut all_feasible = true;
    if spec.split.is_some() {
        let outcome = run_split_scenario(&pf, &spec, &opts)?;
        for (label, report) in outcome.band_labels.iter().zip(&outcome.band_reports) {
            let name = label.replace(['<', '>', '=', '[', ')', ','], "_");
            let path = args.out.join(format!("band_{name}.{}", format_ext(format)));
            std::fs::write(&path, emit_report(report, format)?)?;
            all_feasible &= report.certified_feasible;
        }
        std::fs::write(
            args.out.join(format!("aggregate.{}", format_ext(format))),
            emit_report(&outcome.aggregate, format)?,
        )?;
        std::fs::write(
            args.out.join(format!("unsplit.{}", format_ext(format))),
            emit_report(&outcome.unsplit, format)?,
        )?;
        write_deltas(&args.out.join("deltas.csv"), &pf, &outcome.combined_delta)?;
        all_feasible &= outcome.aggregate.certified_feasible;
        all_feasible &= outcome.unsplit.certified_feasible;
        println!(
            "split difference (unsplit - combined volume growth): {:.4} pp",
            outcome.difference_pp
        );
        println!("{}", emit_report(&outcome.aggregate, ReportFormat::Table)?);
    } else {
        let outcome = run_scenario(&pf, &spec, &opts)?;
        std::fs::write(
            args.out.join(format!("report.{}", format_ext(format))),
            emit_report(&outcome.report, format)?,
        )?;
        write_deltas(&args.out.join("deltas.csv"), &pf, &outcome.delta)?;
        all_feasible = outcome.report.certified_feasible;
        println!("{}", emit_report(&outcome.report, ReportFormat::Table)?);
    }
    Ok(all_feasible)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let cal = match &args.calibration {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading calibration {}", path.display()))?,
        )?,
        None => Calibration::motor_defaults(),
    };
    let pf = generate_synthetic_with(args.n, args.seed, &cal, &TableRegistry::default())?;
    save_portfolio(&pf, &args.out)?;
    println!("wrote {} policies to {}", pf.len(), args.out.display());
    Ok(())
}

fn cmd_fit_tariff(args: FitTariffArgs) -> Result<()> {
    let points = RiskPoint::from_csv_reader(std::fs::File::open(&args.points)?)?;
    let init: TariffStructure = match &args.init {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => {
            // Neutral start: cap above every target, linear fit territory.
            let max_t = points.iter().map(|p| p.target_premium).fold(0.0, f64::max);
            let mean_t =
                points.iter().map(|p| p.target_premium).sum::<f64>() / points.len().max(1) as f64;
            TariffStructure {
                cap: 2.0 * max_t,
                m0: mean_t,
                m1: 0.0,
                m2: 0.0,
                a: 0.0,
                b: 0.0,
                exp_second_arg: Default::default(),
            }
        }
    };
    let (fitted, report) = fit_tariff(&points, &init)?;
    let mut text = fitted.to_key_value_block();
    text.push_str(&format!(
        "rss = {}\nmax_abs_residual = {}\nmax_rel_residual = {}\ndegenerate_cap = {}\n",
        report.rss, report.max_abs_residual, report.max_rel_residual, report.degenerate_cap
    ));
    std::fs::write(&args.out, &text)?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Generate(args) => cmd_generate(args).map(|_| true),
        Command::FitTariff(args) => cmd_fit_tariff(args).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a solution failed feasibility certification");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
