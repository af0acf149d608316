//! `cellshap` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cellshap::estimation::{load_model, read_table_file, ColumnTransform, DataTable};
use cellshap::report::{
    detect_report, explain_report, prepare, render_to_dir, ModelSource, ReportBody, ReportFile,
};
use cellshap::simulation::{
    run_grid, summarize, write_rows_csv, write_summary_csv, CovKind, Exclusion, GridConfig,
};
use cellshap::{Algorithm, DetectorParams, Error};

#[derive(Debug, Parser)]
#[command(
    name = "cellshap",
    version,
    about = "Shapley explanations and cellwise detection of multivariate outliers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose each row's squared Mahalanobis distance into Shapley values and interactions.
    Explain(ExplainArgs),
    /// Flag and impute outlying cells with SCD or MOE.
    Detect(DetectArgs),
    /// Run a seeded contamination study and write metric tables.
    Simulate(SimulateArgs),
    /// Render SVG charts from a stored explain or detect report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Estimate {
    /// Column means and sample covariance.
    Sample,
    /// Median/MAD standardization, then sample covariance.
    Standardize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Scd,
    Moe,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Scd => Algorithm::Scd,
            AlgorithmArg::Moe => Algorithm::Moe,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV data file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Location vector, one value per line.
    #[arg(long, requires = "sigma")]
    mu: Option<PathBuf>,
    /// Scatter matrix, headerless square CSV.
    #[arg(long, requires = "mu")]
    sigma: Option<PathBuf>,
    /// Estimate the model from the data instead of reading it.
    #[arg(long, value_enum, conflicts_with_all = ["mu", "sigma"])]
    estimate: Option<Estimate>,
    /// Columns to log-transform before estimation (names or 1-based indices, comma separated).
    #[arg(long, value_delimiter = ',')]
    log_columns: Vec<String>,
    /// Cutoff probability.
    #[arg(long, default_value_t = 0.99)]
    level: f64,
    /// Report destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for SVG charts.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = AlgorithmArg::Moe)]
    algorithm: AlgorithmArg,
    /// Step size in (0, 1].
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Relative shift threshold in [0, 1] (MOE).
    #[arg(long, default_value_t = 0.2)]
    eta: f64,
    /// Keep per-iteration Shapley values in the report.
    #[arg(long)]
    history: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Structured outliers, mixed correlation, p in {10, 20}, 10 replications.
    Desk,
    /// Full shift-outlier grid.
    Shift,
    /// Full structured-outlier grid.
    Structured,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Grid configuration as JSON; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Replications per parameter combination (default: preset value).
    #[arg(long)]
    replications: Option<usize>,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Restrict to these covariance families.
    #[arg(long, value_delimiter = ',')]
    cov: Vec<String>,
    /// Skip structured gamma = 2 cases under moderate and mixed correlation.
    #[arg(long)]
    exclude_low_gamma: bool,
    /// Run cases sequentially.
    #[arg(long)]
    serial: bool,
    /// Output directory for metrics.csv, metrics.json and summary.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON written by explain or detect.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for SVG charts.
    #[arg(long)]
    svg: PathBuf,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::InvalidLevel(_) | Error::InvalidDof | Error::InvalidParameter { .. } => 1,
        _ => 2,
    }
}

fn resolve_transforms(table: &DataTable, spec: &[String]) -> Result<Vec<ColumnTransform>, Failure> {
    let mut transforms = vec![ColumnTransform::None; table.columns.len()];
    for item in spec.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let index = table
            .columns
            .iter()
            .position(|c| c == item)
            .or_else(|| {
                item.parse::<usize>()
                    .ok()
                    .filter(|&k| k >= 1 && k <= table.columns.len())
                    .map(|k| k - 1)
            })
            .ok_or_else(|| Failure::Usage(format!("--log-columns: unknown column {item:?}")))?;
        transforms[index] = ColumnTransform::Log;
    }
    Ok(transforms)
}

fn model_source(args: &DataArgs) -> Result<ModelSource, Failure> {
    match (&args.mu, &args.sigma, args.estimate) {
        (Some(mu), Some(sigma), None) => Ok(ModelSource::External(load_model(mu, sigma)?)),
        (None, None, Some(Estimate::Sample)) => Ok(ModelSource::Sample),
        (None, None, Some(Estimate::Standardize)) => Ok(ModelSource::Standardize),
        _ => Err(Failure::Usage(
            "exactly one model source is required: --mu with --sigma, or --estimate".into(),
        )),
    }
}

fn check_level(level: f64) -> Result<(), Failure> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "--level must lie in (0, 1), got {level}"
        )))
    }
}

fn write_output(report: &ReportFile, args: &DataArgs) -> Result<(), Failure> {
    let json = report.to_json()?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(Error::from)?,
        None => println!("{json}"),
    }
    if let Some(dir) = &args.svg {
        render_to_dir(report, dir)?;
    }
    Ok(())
}

fn load_prepared(args: &DataArgs) -> Result<cellshap::report::Prepared, Failure> {
    check_level(args.level)?;
    let source = model_source(args)?;
    let table = read_table_file(&args.input)?;
    let transforms = resolve_transforms(&table, &args.log_columns)?;
    Ok(prepare(table.columns, &table.rows, transforms, source)?)
}

fn cmd_explain(args: &ExplainArgs) -> Result<(), Failure> {
    let prepared = load_prepared(&args.data)?;
    let report = explain_report(&prepared, args.data.level)?;
    write_output(&ReportFile::new(ReportBody::Explain(report)), &args.data)
}

fn cmd_detect(args: &DetectArgs) -> Result<(), Failure> {
    let params = DetectorParams {
        delta: args.delta,
        eta: args.eta,
        level: args.data.level,
    };
    params
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let prepared = load_prepared(&args.data)?;
    let report = detect_report(&prepared, args.algorithm.into(), &params, args.history)?;
    write_output(&ReportFile::new(ReportBody::Detect(report)), &args.data)
}

fn grid_config(args: &SimulateArgs) -> Result<GridConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(Error::from)?;
            serde_json::from_str::<GridConfig>(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => match args.preset {
            Preset::Desk => GridConfig::structured_desk(args.seed),
            Preset::Shift => GridConfig::shift_full(10, args.seed),
            Preset::Structured => GridConfig::structured_full(10, args.seed),
        },
    };
    config.master_seed = args.seed;
    if let Some(r) = args.replications {
        config.replications = r;
    }
    if !args.cov.is_empty() {
        config.cov_kinds = args
            .cov
            .iter()
            .map(|c| {
                CovKind::parse(c)
                    .ok_or_else(|| Failure::Usage(format!("--cov: unknown family {c:?}")))
            })
            .collect::<Result<_, _>>()?;
    }
    if args.exclude_low_gamma {
        config.exclusions.extend(Exclusion::low_gamma_correlated());
    }
    if args.serial {
        config.parallel = false;
    }
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let config = grid_config(args)?;
    let rows = run_grid(&config)?;
    let summary = summarize(&rows);
    let dir = &args.out;
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    let create = |name: &str| std::fs::File::create(dir.join(name)).map_err(Error::from);
    write_rows_csv(create("metrics.csv")?, &rows)?;
    write_summary_csv(create("summary.csv")?, &summary)?;
    let json = serde_json::json!({
        "config": config,
        "rows": rows,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join("metrics.json"), text + "\n").map_err(Error::from)?;
    for s in &summary {
        eprintln!(
            "{:<10} {:<4} {:<3}  precision {:.3}  recall {:.3}  fscore {:.3}  ({} runs, {} failed)",
            s.scenario.name(),
            s.cov_kind.name(),
            s.detector.name(),
            s.precision,
            s.recall,
            s.fscore,
            s.count,
            s.failures
        );
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let report = ReportFile::load(Path::new(&args.input))?;
    for path in render_to_dir(&report, &args.svg)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Explain(a) => cmd_explain(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
