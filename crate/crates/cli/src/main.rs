mod config;
mod error;
mod output;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use ada_clue::driver::{aggregate, run_experiment, ExperimentConfig, ExperimentData, RunTrace};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use config::LoadedConfig;
use error::CliError;
use output::{GridPoint, Metadata, Timing};

/// Active domain adaptation experiments: label acquisition strategies and
/// minimax-entropy adaptation on shifted datasets.
#[derive(Parser)]
#[command(name = "ada-clue", version)]
struct Cli {
    /// Replace the configured seed list (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,

    /// Worker threads for seeds and grid points.
    #[arg(long, global = true, env = "CLUE_ADA_THREADS")]
    threads: Option<usize>,

    /// Write zero timings and a fixed timestamp (SOURCE_DATE_EPOCH, or 0)
    /// so repeat runs produce byte-identical files.
    #[arg(long, global = true)]
    reproducible: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of one config; write a CSV and a JSON summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// CSV path; the summary goes next to it with a .json extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one config per value of a single key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// KEY=v1,v2,... where KEY is a dotted path such as
        /// strategy.temperature.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config against its data and print it in normalized form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

struct Settings {
    seed_override: Option<Vec<u64>>,
    threads: Option<usize>,
    timing: Timing,
    timestamp: u64,
}

fn with_overrides(mut cfg: LoadedConfig, s: &Settings) -> LoadedConfig {
    if let Some(seeds) = &s.seed_override {
        cfg.file.experiment.seeds = seeds.clone();
    }
    cfg
}

/// Runs all seeds. Successful traces come back even when some seeds fail;
/// the failures are folded into one runtime error.
struct Outcome {
    traces: Vec<RunTrace>,
    failure: Option<CliError>,
}

fn run_traces(exp: &ExperimentConfig, data: &ExperimentData) -> Result<Outcome, CliError> {
    let results = run_experiment(exp, data).map_err(|e| CliError::Config(e.to_string()))?;
    let mut traces = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in exp.seeds.iter().zip(results) {
        match r {
            Ok(t) => traces.push(t),
            Err(e) => failed.push(format!("seed {seed}: {e}")),
        }
    }
    let failure = (!failed.is_empty()).then(|| CliError::Runtime(failed.join("; ")));
    if traces.is_empty() {
        return Err(failure.unwrap_or_else(|| CliError::Runtime("no seeds ran".into())));
    }
    Ok(Outcome { traces, failure })
}

fn write_results(
    csv_path: &Path,
    cfg: &LoadedConfig,
    traces: &[RunTrace],
    s: &Settings,
) -> Result<(), CliError> {
    let hash = cfg.file.hash();
    let strategy = cfg.file.strategy.name.as_str();
    let meta = Metadata {
        config_hash: &hash,
        seeds: &cfg.file.experiment.seeds,
        strategy,
        timestamp: s.timestamp,
    };
    output::write(csv_path, &output::results_csv(&meta, traces, s.timing))?;
    let summary = aggregate(traces).map_err(|e| CliError::Runtime(e.to_string()))?;
    output::write(
        &csv_path.with_extension("json"),
        &output::summary_json(&hash, strategy, &summary),
    )
}

fn final_line(traces: &[RunTrace]) -> String {
    match aggregate(traces).ok().and_then(|s| s.last().cloned()) {
        Some(last) => format!(
            "{} seeds, {} labels, final accuracy {:.4} ± {:.4}",
            traces.len(),
            last.labels,
            last.acc_mean,
            last.acc_std
        ),
        None => String::from("no results"),
    }
}

fn cmd_run(config_path: &Path, out: &Path, s: &Settings) -> Result<(), CliError> {
    let cfg = with_overrides(config::load(config_path)?, s);
    let (exp, data) = config::validate(&cfg)?;
    let Outcome { traces, failure } = run_traces(&exp, &data)?;
    write_results(out, &cfg, &traces, s)?;
    emit(&format!("{}: {}\n", out.display(), final_line(&traces)))?;
    failure.map_or(Ok(()), Err)
}

/// `KEY=v1,v2,...` into the key and its non-empty values.
fn parse_grid(grid: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = grid
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("grid `{grid}` is not KEY=v1,v2,...")))?;
    let key = key.trim();
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if key.is_empty() {
        return Err(CliError::Config("grid key is empty".into()));
    }
    if values.is_empty() {
        return Err(CliError::Config(format!("grid for `{key}` has no values")));
    }
    Ok((key.to_string(), values))
}

fn file_stem(key: &str, value: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
            .collect::<String>()
    };
    format!("{}={}", clean(key), clean(value))
}

fn cmd_sweep(config_path: &Path, grid: &str, out_dir: &Path, s: &Settings) -> Result<(), CliError> {
    let (key, values) = parse_grid(grid)?;
    let doc = config::read_document(config_path)?;
    // every grid point is validated before anything runs
    let mut points = Vec::with_capacity(values.len());
    for v in &values {
        let mut d = doc.clone();
        config::set_key(&mut d, &key, v)?;
        let cfg = with_overrides(config::from_document(d, config_path)?, s);
        let (exp, data) = config::validate(&cfg).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{key}={v}: {m}")),
            other => other,
        })?;
        points.push((v.clone(), cfg, exp, data));
    }
    let runs: Vec<Result<Outcome, CliError>> = points
        .par_iter()
        .map(|(_, _, exp, data)| run_traces(exp, data))
        .collect();
    let mut done = Vec::with_capacity(points.len());
    let mut failures = Vec::new();
    for ((v, cfg, _, _), r) in points.iter().zip(runs) {
        let Outcome { traces, failure } = match r {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("{key}={v}: {e}"));
                continue;
            }
        };
        if let Some(e) = failure {
            failures.push(format!("{key}={v}: {e}"));
        }
        let path = out_dir.join(format!("{}.csv", file_stem(&key, v)));
        write_results(&path, cfg, &traces, s)?;
        emit(&format!("{}: {}\n", path.display(), final_line(&traces)))?;
        done.push((v.as_str(), traces));
    }
    let grid_points: Vec<GridPoint<'_>> = done
        .iter()
        .map(|(v, t)| GridPoint { value: v, traces: t })
        .collect();
    let combined = out_dir.join("combined.csv");
    output::write(&combined, &output::combined_csv(&key, &grid_points))?;
    emit(&format!("{}: {} grid points\n", combined.display(), grid_points.len()))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(failures.join("; ")))
    }
}

fn cmd_validate(config_path: &Path, s: &Settings) -> Result<(), CliError> {
    let cfg = with_overrides(config::load(config_path)?, s);
    let (exp, data) = config::validate(&cfg)?;
    emit(&format!(
        "# config_hash = {}\n# source rows = {}, target rows = {}, features = {}, classes = {}, total labels = {}\n{}",
        cfg.file.hash(),
        data.source.len(),
        data.target.len(),
        data.source.dim(),
        data.source.num_classes(),
        exp.rounds * exp.budget,
        cfg.file.to_toml()
    ))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let reproducible_epoch = || {
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    let settings = Settings {
        seed_override: cli.seed_override,
        threads: cli.threads,
        timing: if cli.reproducible { Timing::Zeroed } else { Timing::Measured },
        timestamp: if cli.reproducible {
            reproducible_epoch()
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        },
    };
    if settings.seed_override.as_ref().is_some_and(Vec::is_empty) {
        return Err(CliError::Config("--seed-override needs at least one seed".into()));
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = settings.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Run { config, out } => cmd_run(config, out, &settings),
        Command::Sweep { config, grid, out } => cmd_sweep(config, grid, out, &settings),
        Command::Validate { config } => cmd_validate(config, &settings),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ada-clue: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
