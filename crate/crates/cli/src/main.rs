use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use luffy_sim::engine::{compare, run, BatchSource, RunOutput, RunSummary};
use luffy_sim::report::{self, ComparisonSummary};
use luffy_sim::trace::{load_trace, save_trace, write_trace};
use luffy_sim::{Error, Exec, IterationReport, Result, SimConfig, Strategy};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(
    name = "luffy-sim",
    version,
    about = "Simulate expert-parallel MoE training with sequence migration and token condensation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set workload.bias_concentration=0.1` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Workload seed (same as `--set workload.seed=K`)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Iterations to simulate (same as `--set run.iterations=N`)
    #[arg(long, global = true)]
    iters: Option<usize>,

    /// Run everything on the calling thread
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a batch and write it as a JSON-lines trace
    GenTrace {
        /// Which iteration's batch to generate
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one strategy and write per-block CSV reports
    Simulate {
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Replay this trace every iteration instead of generating batches
        #[arg(long)]
        trace: Option<PathBuf>,
        /// CSV output; stdout when omitted. Metadata goes to `<out>.meta.json`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several strategies on identical batches and write a speedup summary
    Compare {
        /// Comma-separated strategy names; vanilla is always included
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON summary output; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every strategy's per-block reports as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare strategies across expert counts
    Sweep {
        /// Comma-separated experts-per-layer values
        #[arg(long, value_delimiter = ',')]
        experts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        /// Sweep points run concurrently, at most this many at once
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LUFFY_SIM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn effective_config(common: &Common) -> Result<SimConfig> {
    let base = match &common.config {
        // an unreadable config file is still the user's config problem
        Some(path) => SimConfig::from_file(path).map_err(|e| match e {
            Error::Io { .. } => Error::ConfigParse(e.to_string()),
            e => e,
        })?,
        None => SimConfig::default(),
    };
    let mut config = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.workload.seed = seed;
    }
    if let Some(iters) = common.iters {
        config.run.iterations = iters;
    }
    config.ensure_valid()?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = effective_config(&cli.common)?;
    let exec = if cli.common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.command {
        Command::GenTrace { iteration, out } => {
            let batch = BatchSource::Generated.batch(&config, iteration)?;
            match out {
                Some(path) => save_trace(&batch, &path),
                None => write_trace(&batch, &mut std::io::stdout().lock())
                    .map_err(|e| io_err("<stdout>", e)),
            }
        }
        Command::Simulate {
            strategy,
            trace,
            out,
        } => {
            if let Some(s) = strategy {
                config.run.strategy = s;
            }
            let source = batch_source(trace.as_deref())?;
            let output = run(
                &config,
                config.run.strategy,
                config.run.iterations,
                &source,
                exec,
            )?;
            match out {
                Some(path) => {
                    report::write_csv(&output.reports, &path)?;
                    let meta = json!({
                        "config": &config,
                        "trace": trace,
                        "summary": &output.summary,
                    });
                    report::write_json(&meta, meta_path(&path))
                }
                None => emit(&report::to_csv(&output.reports)?),
            }
        }
        Command::Compare {
            strategies,
            trace,
            out,
            csv,
        } => {
            if let Some(s) = strategies {
                config.run.strategies = s;
            }
            let source = batch_source(trace.as_deref())?;
            let (outputs, summary) = compare_all(&config, &source, exec)?;
            if let Some(path) = csv {
                let all: Vec<IterationReport> =
                    outputs.into_iter().flat_map(|o| o.reports).collect();
                report::write_csv(&all, path)?;
            }
            let doc = json!({ "config": &config, "trace": trace, "summary": summary });
            write_doc(&doc, out.as_deref())
        }
        Command::Sweep {
            experts,
            strategies,
            jobs,
            out,
        } => {
            if let Some(e) = experts {
                config.run.sweep_experts = e;
            }
            if let Some(s) = strategies {
                config.run.strategies = s;
            }
            config.ensure_valid()?;
            let points = sweep(&config, jobs, exec)?;
            let doc = json!({ "config": &config, "points": points });
            write_doc(&doc, out.as_deref())
        }
    }
}

fn batch_source(trace: Option<&Path>) -> Result<BatchSource> {
    Ok(match trace {
        Some(path) => BatchSource::Trace(load_trace(path)?),
        None => BatchSource::Generated,
    })
}

fn compare_all(
    config: &SimConfig,
    source: &BatchSource,
    exec: Exec,
) -> Result<(Vec<RunOutput>, ComparisonSummary)> {
    let mut strategies = config.run.strategies.clone();
    if !strategies.contains(&Strategy::Vanilla) {
        strategies.insert(0, Strategy::Vanilla);
    }
    strategies.dedup();
    let outputs = compare(config, &strategies, config.run.iterations, source, exec)?;
    for o in &outputs {
        log_summary(&o.summary);
    }
    let all: Vec<IterationReport> = outputs.iter().flat_map(|o| o.reports.clone()).collect();
    let summary = report::summarize(&all)?;
    Ok((outputs, summary))
}

fn sweep(
    config: &SimConfig,
    jobs: usize,
    exec: Exec,
) -> Result<BTreeMap<usize, ComparisonSummary>> {
    let point = |&experts: &usize| -> Result<(usize, ComparisonSummary)> {
        let mut c = config.clone();
        c.model.experts_per_layer = experts;
        c.model.top_k = c.model.top_k.min(experts);
        c.cluster.expert_placement = None;
        c.ensure_valid()?;
        let (_, summary) = compare_all(&c, &BatchSource::Generated, exec)?;
        Ok((experts, summary))
    };
    let experts = &config.run.sweep_experts;
    let results: Vec<Result<(usize, ComparisonSummary)>> = run_points(experts, jobs, exec, point)?;
    results.into_iter().collect()
}

#[cfg(feature = "parallel")]
fn run_points<T, R, F>(items: &[T], jobs: usize, exec: Exec, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs <= 1 || !exec.is_parallel() {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(vec![format!("cannot start {jobs} jobs: {e}")]))?;
    Ok(pool.install(|| exec.map(items, f)))
}

#[cfg(not(feature = "parallel"))]
fn run_points<T, R, F>(items: &[T], _jobs: usize, _exec: Exec, f: F) -> Result<Vec<R>>
where
    F: Fn(&T) -> R,
{
    Ok(items.iter().map(f).collect())
}

fn log_summary(s: &RunSummary) {
    log::info!(
        "{}: {} iterations, mean {:.3} ms compute + {:.3} ms comm, {} bytes",
        s.strategy,
        s.iterations,
        s.mean_computation_ms,
        s.mean_communication_ms,
        s.total_bytes
    );
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn write_doc(doc: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => report::write_json(doc, path),
        None => emit(&format!("{}\n", serde_json::to_string_pretty(doc)?)),
    }
}

fn emit(text: &str) -> Result<()> {
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| io_err("<stdout>", e))
}

fn io_err(path: &str, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}
