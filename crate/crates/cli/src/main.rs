use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use copilot_core::api;
use copilot_core::chaos::{measure_failure_rate, MeasureConfig};
use copilot_core::monitors::{replay_run, ReplayError};
use copilot_core::stage::{run_checks, Engine, RunOptions};
use copilot_core::store::ingest::IngestServer;
use copilot_core::store::EventStore;
use copilot_core::workflow::{load_workflow, StageKind};
use copilot_core::workloads::fixtures::{ring, usecase1, usecase2, RingParams, MOCK_COMMAND};
use copilot_core::workloads::Fixture;

#[derive(Parser)]
#[command(
    name = "copilot",
    version,
    about = "Staged deployment and supervision of multi-application workflows"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Record,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureName {
    Usecase1,
    Usecase2,
    Ring,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a workflow and run its static checks.
    Validate {
        spec: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Execute a workflow through its stages.
    Run {
        spec: PathBuf,
        /// Proceed through manual gates without waiting for an operator.
        #[arg(long)]
        auto_approve: bool,
        /// Serve the HTTP API on this address during the run.
        #[arg(long)]
        serve: Option<String>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Re-evaluate the monitors over a stored run and compare verdicts.
    Replay { run_dir: PathBuf },
    /// Measure the system failure rate under seeded fault injection.
    Chaos {
        #[arg(long)]
        spec: PathBuf,
        /// Per-component fault probability.
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run trials through the stage gates instead of all at once.
        #[arg(long)]
        gated: bool,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Mock executable substituted for `copilot-mock` in the workflow.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Also print one record per trial.
        #[arg(long)]
        verbose: bool,
        /// Keep every trial run in the store for later replay.
        #[arg(long)]
        keep: bool,
    },
    /// Serve the HTTP API over stored runs and accept remote companion events.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long)]
        ingest: Option<String>,
    },
    /// Write a bundled workflow and its files into a directory.
    Fixture {
        #[arg(value_enum)]
        name: FixtureName,
        dir: PathBuf,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
}

fn home() -> PathBuf {
    std::env::var_os(copilot_core::env::HOME)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn default_mock() -> PathBuf {
    std::env::current_exe()
        .ok()
        .and_then(|p| p.parent().map(|d| d.join(MOCK_COMMAND)))
        .filter(|p| p.is_file())
        .unwrap_or_else(|| PathBuf::from(MOCK_COMMAND))
}

/// Workflows run applications from their own directory, so a relative
/// mock path must be made absolute first.
fn mock_path(mock: Option<PathBuf>) -> PathBuf {
    let p = mock.unwrap_or_else(default_mock);
    p.canonicalize().unwrap_or(p)
}

fn base_dir(spec: &Path) -> PathBuf {
    let dir = spec
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf())
}

fn validate(spec_path: &Path, format: Format) -> Result<ExitCode> {
    let spec = match load_workflow(spec_path) {
        Ok(s) => s,
        Err(e) => {
            match format {
                Format::Record => println!(
                    "{}",
                    serde_json::json!({"error": e.code(), "detail": e.to_string()})
                ),
                Format::Text => eprintln!("invalid workflow: {e}"),
            }
            return Ok(ExitCode::from(1));
        }
    };
    let base = base_dir(spec_path);
    let mut first_failure = None;
    for stage in spec
        .stages
        .iter()
        .filter(|s| s.kind == StageKind::StaticCheck)
    {
        for r in run_checks(&stage.name, &stage.checks, &spec, &base) {
            match format {
                Format::Record => println!("{}", serde_json::to_string(&r)?),
                Format::Text => println!(
                    "{:4} {} ({}): {}",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.check_id,
                    stage.name,
                    r.detail
                ),
            }
            if !r.passed() && first_failure.is_none() {
                first_failure = Some(r.check_id.clone());
            }
        }
    }
    match first_failure {
        Some(id) => {
            eprintln!("check failed: {id}");
            Ok(ExitCode::from(1))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

async fn run(
    spec_path: &Path,
    auto_approve: bool,
    serve: Option<String>,
    run_id: Option<String>,
) -> Result<ExitCode> {
    let spec = match load_workflow(spec_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("invalid workflow: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    let store = Arc::new(EventStore::open(home())?);
    let engine = Engine::new(store);
    let mut opts = RunOptions::new(base_dir(spec_path));
    opts.auto_approve = auto_approve;
    opts.run_id = run_id;
    let (handle, task) = engine.start(spec, opts).await?;
    println!("run {}", handle.run_id);
    let server = match serve {
        Some(addr) => {
            let listener = tokio::net::TcpListener::bind(&addr)
                .await
                .with_context(|| format!("bind {addr}"))?;
            println!("serving on http://{}", listener.local_addr()?);
            let token = std::env::var(copilot_core::env::API_TOKEN).ok();
            Some(tokio::spawn(api::serve(
                listener,
                api::router(engine.clone(), token),
            )))
        }
        None => None,
    };
    let outcome = task.await?;
    if let Some(s) = server {
        s.abort();
    }
    engine.store().close();
    println!("{}", outcome.status().as_str());
    Ok(ExitCode::from(outcome.exit_code() as u8))
}

fn replay(dir: &Path) -> Result<ExitCode> {
    match replay_run(dir) {
        Ok(report) => {
            for v in &report.replayed {
                println!("{}", serde_json::to_string(v)?);
            }
            match report.first_mismatch() {
                None => {
                    eprintln!("{} verdicts, identical", report.stored.len());
                    Ok(ExitCode::SUCCESS)
                }
                Some(i) => {
                    eprintln!(
                        "verdicts differ at index {i}: stored {} replayed {}",
                        report.stored.len(),
                        report.replayed.len()
                    );
                    Ok(ExitCode::from(1))
                }
            }
        }
        Err(e @ ReplayError::Integrity(_)) => {
            eprintln!("integrity error: {e}");
            Ok(ExitCode::from(1))
        }
        Err(e) => bail!(e),
    }
}

fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Runtime::new()?;
    match cli.cmd {
        Cmd::Validate { spec, format } => validate(&spec, format),
        Cmd::Run {
            spec,
            auto_approve,
            serve,
            run_id,
        } => rt.block_on(run(&spec, auto_approve, serve, run_id)),
        Cmd::Replay { run_dir } => replay(&run_dir),
        Cmd::Chaos {
            spec,
            p,
            trials,
            seed,
            gated,
            parallelism,
            mock,
            verbose,
            keep,
        } => {
            if !(0.0..=1.0).contains(&p) {
                bail!("--p must lie in [0, 1]");
            }
            let fixture =
                Fixture::from_dir(&spec).with_context(|| format!("read {}", spec.display()))?;
            let apps = load_workflow(&spec)?.applications.len();
            let work = tempfile_dir()?;
            let mut cfg = MeasureConfig::new(trials, seed, &work);
            cfg.gated = gated;
            cfg.probabilities = Some(vec![p; apps]);
            if let Some(n) = parallelism {
                cfg.parallelism = n;
            }
            if keep {
                cfg.store = Some(Arc::new(EventStore::open(home())?));
            }
            let mock = mock_path(mock);
            let result = rt.block_on(measure_failure_rate(&fixture, &mock, &cfg));
            let _ = std::fs::remove_dir_all(&work);
            let r = result?;
            println!(
                "{}",
                serde_json::json!({
                    "trials": r.trials,
                    "failures": r.failures,
                    "rate": r.rate,
                    "predicted": r.predicted,
                    "p": p,
                    "seed": seed,
                    "gated": gated,
                    "faulted": r.faulted,
                    "false_greens": r.false_greens,
                    "false_alarms": r.false_alarms,
                    "failures_by_stage": r.failures_by_stage,
                })
            );
            if verbose {
                for t in &r.results {
                    println!("{}", serde_json::to_string(t)?);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Serve { listen, ingest } => rt.block_on(async {
            let store = Arc::new(EventStore::open(home())?);
            let engine = Engine::new(store.clone());
            let _ingest = match ingest {
                Some(addr) => {
                    let s = IngestServer::bind(store, &addr).await?;
                    println!("ingest on {}", s.addr);
                    Some(s)
                }
                None => None,
            };
            let listener = tokio::net::TcpListener::bind(&listen).await?;
            println!("serving on http://{}", listener.local_addr()?);
            let token = std::env::var(copilot_core::env::API_TOKEN).ok();
            api::serve(listener, api::router(engine, token)).await?;
            Ok(ExitCode::SUCCESS)
        }),
        Cmd::Fixture { name, dir, mock } => {
            let fx = match name {
                FixtureName::Usecase1 => usecase1(),
                FixtureName::Usecase2 => usecase2(),
                FixtureName::Ring => ring(&RingParams::default()),
            };
            let path = fx.materialize(&dir, &mock_path(mock))?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn tempfile_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("copilot-chaos-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
