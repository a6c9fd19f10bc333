#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use copilot_core::stage::{Engine, RunHandle, RunOptions, RunOutcome};
use copilot_core::store::{Event, EventKind, EventStore, RunLog};
use copilot_core::workflow::load_workflow;
use copilot_core::workloads::Fixture;
use tempfile::TempDir;

pub fn mock_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_copilot-mock"))
}

pub fn copilot_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_copilot"))
}

pub fn companion_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_copilot-companion"))
}

/// One mock application in a test workflow.
pub struct AppDef<'a> {
    pub name: &'a str,
    /// Extra `[[applications]]` keys, one per line.
    pub extra: &'a str,
    pub behavior: &'a str,
}

pub fn app<'a>(name: &'a str, behavior: &'a str) -> AppDef<'a> {
    AppDef {
        name,
        extra: "heartbeat_interval_ms = 100",
        behavior,
    }
}

/// Builds a workflow whose applications all run the mock. `tail` holds
/// the channel and stage tables verbatim.
pub fn workflow(run: &str, apps: &[AppDef], tail: &str) -> Fixture {
    let mut w = format!("name = \"test\"\n\n[run]\n{run}\n\n");
    let mut files = Vec::new();
    for a in apps {
        let _ = writeln!(
            w,
            "[[applications]]\nname = \"{0}\"\ncommand = [\"copilot-mock\", \"--behavior\", \"behavior/{0}.toml\"]\n{1}\n",
            a.name, a.extra
        );
        files.push((format!("behavior/{}.toml", a.name), a.behavior.to_string()));
    }
    w.push_str(tail);
    Fixture { workflow: w, files }
}

pub const GATED_STAGES: &str = r#"
[[stages]]
name = "static"
kind = "static-check"
approval = "automatic"
timeout_ms = 10000
checks = [{ id = "exe", kind = "executable-exists", target = "copilot-mock" }]

[[stages]]
name = "single-node"
kind = "single-node"
approval = "automatic"
timeout_ms = 20000

[[stages]]
name = "scaled"
kind = "scaled"
approval = "manual"
timeout_ms = 30000
"#;

pub struct Materialized {
    pub dir: TempDir,
    pub workflow: PathBuf,
}

pub fn materialize(fx: &Fixture) -> Materialized {
    let dir = tempfile::tempdir().unwrap();
    let workflow = fx.materialize(dir.path(), &mock_exe()).unwrap();
    Materialized { dir, workflow }
}

pub struct Started {
    pub files: Materialized,
    pub engine: Arc<Engine>,
    pub handle: RunHandle,
    pub task: tokio::task::JoinHandle<RunOutcome>,
    pub log: Arc<RunLog>,
}

pub async fn start(fx: &Fixture, tweak: impl FnOnce(&mut RunOptions)) -> Started {
    start_in(Arc::new(EventStore::in_memory()), fx, tweak).await
}

pub async fn start_in(
    store: Arc<EventStore>,
    fx: &Fixture,
    tweak: impl FnOnce(&mut RunOptions),
) -> Started {
    let files = materialize(fx);
    let spec = load_workflow(&files.workflow).unwrap();
    let engine = Engine::new(store.clone());
    let mut opts = RunOptions::new(files.dir.path());
    tweak(&mut opts);
    let (handle, task) = engine.start(spec, opts).await.unwrap();
    let log = store.run(&handle.run_id).unwrap().unwrap();
    Started {
        files,
        engine,
        handle,
        task,
        log,
    }
}

/// Runs a fixture to completion and returns the outcome and every event.
pub async fn run_to_end(
    fx: &Fixture,
    tweak: impl FnOnce(&mut RunOptions),
) -> (RunOutcome, Vec<Arc<Event>>) {
    let s = start(fx, tweak).await;
    let outcome = s.task.await.unwrap();
    (outcome, s.log.all())
}

/// Polls the log until an event satisfies `pred`.
pub async fn wait_for(
    log: &RunLog,
    within: Duration,
    pred: impl Fn(&Event) -> bool,
) -> Option<Arc<Event>> {
    let deadline = Instant::now() + within;
    loop {
        if let Some(e) = log.all().into_iter().find(|e| pred(e)) {
            return Some(e);
        }
        if Instant::now() > deadline {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

pub fn is_transition(e: &Event, stage: &str, to: &str) -> bool {
    e.kind == EventKind::Stage
        && e.str_field("event") == Some("transition")
        && e.str_field("stage") == Some(stage)
        && e.str_field("to_status") == Some(to)
}

pub fn stage_event<'a>(events: &'a [Arc<Event>], name: &str) -> Vec<&'a Arc<Event>> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Stage && e.str_field("event") == Some(name))
        .collect()
}

pub fn of_kind(events: &[Arc<Event>], kind: EventKind) -> Vec<&Arc<Event>> {
    events.iter().filter(|e| e.kind == kind).collect()
}

pub fn verdicts<'a>(events: &'a [Arc<Event>], monitor: &str) -> Vec<&'a Arc<Event>> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Verdict && e.str_field("monitor") == Some(monitor))
        .collect()
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}
