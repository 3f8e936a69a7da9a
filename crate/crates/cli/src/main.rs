//! Batch front end for the proximal indirect comparison toolkit.
//!
//! Subcommands: `simulate` runs one catalog experiment and writes summary
//! tables, `analyze` runs the two-trial CSV pipeline, `oracle` prints the
//! closed-form bridge parameters and the Monte-Carlo truth, `truth` prints
//! the truth alone. Exit codes: 0 success, 1 usage/config error, 2 data
//! validation error, 3 numerical non-convergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proxidc::analysis::{analyze, AnalysisConfig};
use proxidc::data::{load_dataset, load_two_trials, LoadOptions, Schema};
use proxidc::error::Error;
use proxidc::fixture::{generate_fixture, write_fixture, FixtureKind};
use proxidc::sim::{
    closed_form_bridges, monte_carlo_truth, run_experiment_with_truth_draws, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "proxidc",
    about = "Proximal indirect comparison: simulation lab and two-trial analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation experiment and write summary tables.
    Simulate(SimulateArgs),
    /// Run the indirect-comparison analysis on two-trial CSV data.
    Analyze(AnalyzeArgs),
    /// Print closed-form bridge parameters and the Monte-Carlo truth.
    Oracle(OracleArgs),
    /// Print the Monte-Carlo truth for one experiment.
    Truth(TruthArgs),
    /// Write the bundled synthetic fixture CSVs (for demos and tests).
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (created if needed).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary format: csv, text, or both.
    #[arg(long, default_value = "both")]
    format: String,
    /// Omit the timestamp header so repeated runs are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment id in 1..=19.
    #[arg(long)]
    experiment: u32,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    /// Draws for the Monte-Carlo truth.
    #[arg(long, default_value_t = proxidc::sim::DEFAULT_TRUTH_DRAWS)]
    truth_draws: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Source-trial CSV (arms 1/0). Use with --target-csv.
    #[arg(long, requires = "target_csv", conflicts_with = "combined_csv")]
    source_csv: Option<PathBuf>,
    /// Target-trial CSV (arms -1/0).
    #[arg(long)]
    target_csv: Option<PathBuf>,
    /// Single combined CSV with an explicit trial-indicator column.
    #[arg(long)]
    combined_csv: Option<PathBuf>,
    /// Schema file mapping logical roles to column names.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Randomization probability of arm 1 in the source trial.
    #[arg(long)]
    e_source: f64,
    /// Randomization probability of arm -1 in the target trial.
    #[arg(long)]
    e_target: f64,
    /// Comma-separated ridge grid for cross validation.
    #[arg(long, default_value = "0,1e-6,1e-4,1e-2,1")]
    lambda_grid: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep rows with incomplete covariates instead of dropping them.
    #[arg(long)]
    keep_incomplete: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    experiment: u32,
    #[arg(long, default_value_t = 10_000_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long)]
    experiment: u32,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10_000_000)]
    n_mc: usize,
}

#[derive(Args)]
struct FixtureArgs {
    /// `shifted` or `no-shift`.
    #[arg(long, default_value = "shifted")]
    kind: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 20260809)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error (exit 1 by contract).
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };

    configure_threads();

    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Truth(args) => cmd_truth(args),
        Command::Fixture(args) => cmd_fixture(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// PROXIDC_THREADS caps the rayon worker count.
fn configure_threads() {
    if let Ok(v) = std::env::var("PROXIDC_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidExperimentId(_) | Error::Config(_) | Error::CvEmptyGrid => 1,
        Error::Io(_)
        | Error::Csv(_)
        | Error::MissingColumn(_)
        | Error::NonNumeric { .. }
        | Error::InvalidTrialIndicator { .. }
        | Error::InvalidTreatment { .. }
        | Error::ZRequiredInSource { .. }
        | Error::RequiredInSource(..)
        | Error::TargetTrialEmpty
        | Error::SourceTrialEmpty
        | Error::InvalidPropensity(_)
        | Error::Schema(_)
        | Error::ColumnCountMismatch { .. }
        | Error::ZMissingForBasis { .. }
        | Error::SampleTooSmall(_)
        | Error::DimensionMismatch(_) => 2,
        _ => 3,
    }
}

fn timestamp_header(no_timestamp: bool) -> String {
    if no_timestamp {
        String::new()
    } else {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("# generated_unix = {secs}\n")
    }
}

fn write_outputs(
    out: &OutputArgs,
    stem: &str,
    csv: &str,
    text: &str,
    extra: &[(&str, &str)],
) -> Result<(), Error> {
    let Some(dir) = &out.out else {
        return Ok(());
    };
    std::fs::create_dir_all(dir)?;
    let header = timestamp_header(out.no_timestamp);
    let fmt = out.format.as_str();
    if fmt == "csv" || fmt == "both" {
        std::fs::write(dir.join(format!("{stem}.csv")), format!("{header}{csv}"))?;
    }
    if fmt == "text" || fmt == "both" {
        std::fs::write(dir.join(format!("{stem}.txt")), format!("{header}{text}"))?;
    }
    for (name, body) in extra {
        std::fs::write(dir.join(name), format!("{header}{body}"))?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::for_experiment(args.experiment, args.n, args.reps, args.seed)?;
    let result = run_experiment_with_truth_draws(&cfg, args.truth_draws)?;
    let table = result.summary.to_text_table();
    print!("{table}");
    write_outputs(
        &args.output,
        "summary",
        &result.summary.to_csv(),
        &table,
        &[
            ("reps.csv", result.reps_to_csv().as_str()),
            ("config.txt", cfg.to_key_value().as_str()),
        ],
    )?;
    Ok(ExitCode::SUCCESS)
}

fn parse_lambda_grid(raw: &str) -> Result<Vec<f64>, Error> {
    let grid: Result<Vec<f64>, _> = raw
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect();
    grid.map_err(|_| Error::Config(format!("could not parse lambda grid '{raw}'")))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode, Error> {
    let schema = match &args.schema {
        Some(p) => Schema::from_file(p)?,
        None => Schema::default(),
    };
    let opts = LoadOptions {
        e1: Some(args.e_source),
        drop_incomplete: !args.keep_incomplete,
        implied_s: None,
    };
    if !(args.e_source > 0.0 && args.e_source < 1.0) {
        return Err(Error::InvalidPropensity(args.e_source));
    }
    if !(args.e_target > 0.0 && args.e_target < 1.0) {
        return Err(Error::InvalidPropensity(args.e_target));
    }
    let loaded = match (&args.combined_csv, &args.source_csv, &args.target_csv) {
        (Some(combined), None, None) => load_dataset(combined, &schema, &opts)?,
        (None, Some(src), Some(tgt)) => load_two_trials(src, tgt, &schema, &opts)?,
        _ => {
            return Err(Error::Config(
                "supply either --combined-csv or both --source-csv and --target-csv".into(),
            ))
        }
    };
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }

    let cfg = AnalysisConfig {
        e_source: args.e_source,
        e_target: args.e_target,
        lambda_grid: parse_lambda_grid(&args.lambda_grid)?,
        cv_folds: args.folds,
        seed: args.seed,
    };
    let mut report = analyze(&loaded.dataset, &cfg)?;
    report
        .diagnostics
        .insert("dropped_rows".into(), loaded.dropped_rows.to_string());
    let table = report.to_text_table();
    print!("{table}");
    write_outputs(&args.output, "report", &report.to_csv(), &table, &[])?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: OracleArgs) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::for_experiment(args.experiment, 1000, 1, args.seed)?;
    match closed_form_bridges(&cfg.dgp) {
        Ok((eta, xi)) => {
            let fmt = |v: Vec<f64>| {
                v.iter()
                    .map(|t| format!("{t:.6}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            println!("eta* = ({})", fmt(eta.iter().copied().collect()));
            println!("xi*  = ({})", fmt(xi.iter().copied().collect()));
        }
        Err(Error::NoClosedFormBridge(which)) => {
            println!(
                "bridge functions not uniquely identified: no closed form ({which} is not square invertible)"
            );
        }
        Err(e) => return Err(e),
    }
    let (truth, mc_se) = monte_carlo_truth(&cfg.dgp, args.n_mc, args.seed)?;
    println!("psi_truth = {truth:.6} (mc se {mc_se:.6})");
    Ok(ExitCode::SUCCESS)
}

fn cmd_truth(args: TruthArgs) -> Result<ExitCode, Error> {
    let cfg = ExperimentConfig::for_experiment(args.experiment, 1000, 1, args.seed)?;
    let (truth, mc_se) = monte_carlo_truth(&cfg.dgp, args.n_mc, args.seed)?;
    println!("psi_truth = {truth:.6} (mc se {mc_se:.6})");
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixture(args: FixtureArgs) -> Result<ExitCode, Error> {
    let kind = match args.kind.as_str() {
        "shifted" => FixtureKind::Shifted,
        "no-shift" => FixtureKind::NoShift,
        other => {
            return Err(Error::Config(format!(
                "unknown fixture kind '{other}' (use shifted or no-shift)"
            )))
        }
    };
    let files = generate_fixture(kind, args.n, args.seed, 0.5, 0.5)?;
    write_fixture(&files, Path::new(&args.out))?;
    println!("wrote fixture to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
