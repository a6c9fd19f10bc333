//! Standalone application companion: launches one application of a
//! workflow, observes it, and mirrors its exit status.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use copilot_core::companion::{launch, LaunchOptions};
use copilot_core::store::ingest::RemoteSink;
use copilot_core::store::{EventSink, EventStore};
use copilot_core::tracepoint::{Collector, CollectorCore};
use copilot_core::workflow::load_workflow;
use tokio::signal::unix::{signal, SignalKind};

#[derive(Parser)]
#[command(name = "copilot-companion", version)]
struct Args {
    /// Application name in the workflow.
    #[arg(long)]
    app: String,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    run: String,
    /// Event store: `host:port` of an ingest server, or a runs directory.
    #[arg(long)]
    store: String,
    /// Stage recorded on the launched event.
    #[arg(long)]
    stage: Option<String>,
}

const SIGINT: i32 = 2;

fn is_addr(s: &str) -> bool {
    s.parse::<std::net::SocketAddr>().is_ok()
}

async fn main_async(args: Args) -> Result<ExitCode> {
    let spec = load_workflow(&args.spec)?;
    let app = spec
        .application(&args.app)
        .ok_or_else(|| anyhow!("no application {} in {}", args.app, args.spec.display()))?
        .clone();
    let sink: Arc<dyn EventSink> = if is_addr(&args.store) {
        let addr = args.store.clone();
        let run = args.run.clone();
        let remote = tokio::task::spawn_blocking(move || RemoteSink::connect(&addr, &run))
            .await?
            .with_context(|| format!("connect {}", args.store))?;
        Arc::new(remote)
    } else {
        let store = EventStore::open(&args.store)?;
        match store.run(&args.run)? {
            Some(log) => log,
            None => store.create_run(&args.run, &spec.to_canonical())?,
        }
    };
    let core = CollectorCore::with_sink(sink.clone(), &args.run);
    let collector = Collector::bind(core.clone(), "127.0.0.1:0").await?;

    let mut opts = LaunchOptions::new(&args.run, &collector.addr.to_string());
    opts.cwd = args
        .spec
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(PathBuf::from);
    opts.sample_ms = app.sample_ms.unwrap_or(spec.run.sample_ms);
    if let Some(stage) = &args.stage {
        opts.launch_fields
            .insert("stage".into(), stage.as_str().into());
    }
    let companion = match launch(&app, &opts, sink, Some(core)).await {
        Ok(c) => c,
        Err(e) => {
            eprintln!("copilot-companion: {e}");
            return Ok(ExitCode::from(127));
        }
    };
    let control = companion.control();
    let mut term = signal(SignalKind::terminate())?;
    let mut int = signal(SignalKind::interrupt())?;
    let forward = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = term.recv() => { control.terminate(); }
                _ = int.recv() => { control.signal(SIGINT); }
            }
        }
    });
    let report = companion.wait().await;
    forward.abort();
    collector.shutdown().await;
    let code = match (report.exit_code, report.signal) {
        (Some(c), _) => c,
        (None, Some(s)) => 128 + s,
        (None, None) => 1,
    };
    Ok(ExitCode::from(code.clamp(0, 255) as u8))
}

fn main() -> Result<ExitCode> {
    let args = Args::parse();
    tokio::runtime::Runtime::new()?.block_on(main_async(args))
}
