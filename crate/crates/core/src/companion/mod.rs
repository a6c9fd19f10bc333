//! The application companion: launches one application, samples its
//! resources, follows its logs and records how it ended.
//!
//! Everything a companion observes goes through one [`EventSink`], so the
//! events of a single application are totally ordered in the store.

mod logs;
mod proc;

use std::collections::BTreeMap;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::process::{Child, Command};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{mono_now, wall_now_ms};
use crate::store::{Event, EventDraft, EventKind, EventSink, Fields};
use crate::tracepoint::CollectorCore;
use crate::workflow::ApplicationSpec;

pub use logs::{pump, tail_file, LineHandler};
pub use proc::{sample_resources, ResourceSample};

/// Parent environment variables copied into the launched event. Anything
/// else may hold credentials and stays out of the store.
pub const PERSISTED_ENV: [&str; 6] = ["PATH", "HOME", "USER", "LANG", "HOSTNAME", "PWD"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchContext {
    pub app_name: String,
    pub run_id: String,
    pub command: Vec<String>,
    /// Variables set for the child on top of the inherited environment.
    pub env: BTreeMap<String, String>,
    pub pid: u32,
    pub start_time: i64,
    pub start_mono: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitClass {
    Success,
    Failure,
    Killed,
}

impl ExitClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitClass::Success => "success",
            ExitClass::Failure => "failure",
            ExitClass::Killed => "killed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub app_name: String,
    pub run_id: String,
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    pub wall_duration_ms: u64,
    pub peak_rss_bytes: u64,
    pub classified: ExitClass,
}

impl ExitReport {
    pub fn classify(exit_code: Option<i32>, signal: Option<i32>) -> ExitClass {
        match (exit_code, signal) {
            (Some(0), _) => ExitClass::Success,
            (Some(_), _) => ExitClass::Failure,
            (None, _) => ExitClass::Killed,
        }
    }

    pub fn to_draft(&self, pid: u32) -> EventDraft {
        EventDraft::new(&self.app_name, EventKind::Exit)
            .with("pid", pid)
            .with_opt("exit_code", self.exit_code)
            .with_opt("signal", self.signal)
            .with("classified", self.classified.as_str())
            .with("wall_duration_ms", self.wall_duration_ms)
            .with("peak_rss_bytes", self.peak_rss_bytes)
    }

    pub fn from_event(e: &Event) -> Option<Self> {
        if e.kind != EventKind::Exit {
            return None;
        }
        Some(Self {
            app_name: e.source.clone(),
            run_id: e.run.clone(),
            exit_code: e.i64_field("exit_code").map(|c| c as i32),
            signal: e.i64_field("signal").map(|s| s as i32),
            wall_duration_ms: e.u64_field("wall_duration_ms").unwrap_or(0),
            peak_rss_bytes: e.u64_field("peak_rss_bytes").unwrap_or(0),
            classified: match e.str_field("classified")? {
                "success" => ExitClass::Success,
                "failure" => ExitClass::Failure,
                _ => ExitClass::Killed,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LaunchError {
    #[error("executable not found: {0}")]
    NotFound(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("spawn failed: {0}")]
    Spawn(String),
}

impl LaunchError {
    pub fn reason(&self) -> &'static str {
        match self {
            LaunchError::NotFound(_) => "not_found",
            LaunchError::PermissionDenied(_) => "permission_denied",
            LaunchError::Spawn(_) => "spawn",
        }
    }
}

/// Finds the executable the way `execvp` would: names with a slash are paths
/// relative to `cwd`, bare names are looked up on `path_var`.
pub fn resolve_executable(
    exe: &str,
    cwd: Option<&Path>,
    path_var: Option<&str>,
) -> Result<PathBuf, LaunchError> {
    let check = |p: PathBuf| -> Result<PathBuf, LaunchError> {
        let meta =
            std::fs::metadata(&p).map_err(|_| LaunchError::NotFound(p.display().to_string()))?;
        if !meta.is_file() || meta.permissions().mode() & 0o111 == 0 {
            return Err(LaunchError::PermissionDenied(p.display().to_string()));
        }
        Ok(p)
    };
    if exe.is_empty() {
        return Err(LaunchError::NotFound(String::new()));
    }
    if exe.contains('/') {
        let p = Path::new(exe);
        return check(match cwd {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        });
    }
    let path_var = path_var
        .map(str::to_string)
        .or_else(|| std::env::var("PATH").ok())
        .unwrap_or_default();
    let mut denied = None;
    for dir in std::env::split_paths(&path_var) {
        match check(dir.join(exe)) {
            Ok(p) => return Ok(p),
            Err(e @ LaunchError::PermissionDenied(_)) => denied = denied.or(Some(e)),
            Err(_) => {}
        }
    }
    Err(denied.unwrap_or_else(|| LaunchError::NotFound(exe.to_string())))
}

#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub run_id: String,
    pub trace_addr: String,
    pub cwd: Option<PathBuf>,
    /// Extra variables for the child, applied after the application's own.
    pub extra_env: BTreeMap<String, String>,
    /// Extra fields recorded on the launched event.
    pub launch_fields: Fields,
    pub sample_ms: u64,
    pub log_poll: Duration,
}

impl LaunchOptions {
    pub fn new(run_id: &str, trace_addr: &str) -> Self {
        Self {
            run_id: run_id.into(),
            trace_addr: trace_addr.into(),
            cwd: None,
            extra_env: BTreeMap::new(),
            launch_fields: Fields::new(),
            sample_ms: 250,
            log_poll: Duration::from_millis(25),
        }
    }
}

static LAST_START: AtomicU64 = AtomicU64::new(0);

fn next_start_mono() -> u64 {
    let now = mono_now();
    let prev = LAST_START.fetch_max(now, Ordering::SeqCst);
    if prev >= now {
        LAST_START.fetch_add(1, Ordering::SeqCst) + 1
    } else {
        now
    }
}

/// Sends signals to a launched process until it has been reaped.
#[derive(Debug, Clone)]
pub struct ProcessControl {
    pid: u32,
    reaped: Arc<AtomicBool>,
}

impl ProcessControl {
    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn is_running(&self) -> bool {
        !self.reaped.load(Ordering::SeqCst)
    }

    /// False when the process is already gone.
    pub fn signal(&self, sig: i32) -> bool {
        if !self.is_running() {
            return false;
        }
        // SAFETY: plain syscall on a pid we spawned and have not reaped.
        unsafe { libc::kill(self.pid as libc::pid_t, sig) == 0 }
    }

    pub fn kill(&self) -> bool {
        self.signal(libc::SIGKILL)
    }

    pub fn terminate(&self) -> bool {
        self.signal(libc::SIGTERM)
    }
}

pub struct Companion {
    ctx: LaunchContext,
    child: Child,
    control: ProcessControl,
    sink: Arc<dyn EventSink>,
    started: Instant,
    peak_rss: Arc<AtomicU64>,
    stop: watch::Sender<bool>,
    pipes: Vec<JoinHandle<()>>,
    tailers: Vec<JoinHandle<()>>,
    sampler: JoinHandle<()>,
}

/// Launches `app` and starts observing it. On failure a `launch_failed`
/// event is recorded before the error is returned.
pub async fn launch(
    app: &ApplicationSpec,
    opts: &LaunchOptions,
    sink: Arc<dyn EventSink>,
    relay: Option<Arc<CollectorCore>>,
) -> Result<Companion, LaunchError> {
    let mut env = app.env.clone();
    env.extend(opts.extra_env.clone());
    env.insert(crate::env::RUN_ID.into(), opts.run_id.clone());
    env.insert(crate::env::APP.into(), app.name.clone());
    env.insert(crate::env::TRACE_ADDR.into(), opts.trace_addr.clone());

    let fail = |err: LaunchError| {
        let _ = sink.append(
            EventDraft::new(&app.name, EventKind::LaunchFailed)
                .with("reason", err.reason())
                .with("detail", err.to_string())
                .with("command", app.command.join(" ")),
        );
        err
    };

    let exe = resolve_executable(
        app.command.first().map(String::as_str).unwrap_or(""),
        opts.cwd.as_deref(),
        env.get("PATH").map(String::as_str),
    )
    .map_err(fail)?;

    let mut cmd = Command::new(&exe);
    cmd.args(&app.command[1..])
        .envs(&env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true);
    if let Some(dir) = &opts.cwd {
        cmd.current_dir(dir);
    }
    let mut child = cmd.spawn().map_err(|e| {
        fail(match e.kind() {
            std::io::ErrorKind::NotFound => LaunchError::NotFound(exe.display().to_string()),
            std::io::ErrorKind::PermissionDenied => {
                LaunchError::PermissionDenied(exe.display().to_string())
            }
            _ => LaunchError::Spawn(e.to_string()),
        })
    })?;
    let started = Instant::now();
    let start_mono = next_start_mono();
    let pid = child.id().unwrap_or(0);

    let ctx = LaunchContext {
        app_name: app.name.clone(),
        run_id: opts.run_id.clone(),
        command: app.command.clone(),
        env,
        pid,
        start_time: wall_now_ms(),
        start_mono,
    };

    let mut launched = EventDraft::new(&app.name, EventKind::Launched)
        .with("pid", pid)
        .with("command", app.command.join(" "))
        .with("start_time", ctx.start_time)
        .with("nodes", app.nodes);
    for (k, v) in &opts.launch_fields {
        launched.set(k.clone(), v.clone());
    }
    for (k, v) in &ctx.env {
        if k.starts_with("COPILOT_") && k != crate::env::API_TOKEN {
            launched.set(format!("env.{k}"), v.as_str());
        }
    }
    for k in PERSISTED_ENV {
        if let Ok(v) = std::env::var(k) {
            launched.set(format!("env.{k}"), v);
        }
    }
    let _ = sink.append(launched);

    let handler = Arc::new(LineHandler {
        app: app.name.clone(),
        pattern: app.log_pattern.as_deref().and_then(|p| Regex::new(p).ok()),
        sink: sink.clone(),
        relay,
    });
    let mut pipes = Vec::new();
    if let Some(out) = child.stdout.take() {
        pipes.push(tokio::spawn(pump(out, "stdout", handler.clone())));
    }
    if let Some(err) = child.stderr.take() {
        pipes.push(tokio::spawn(pump(err, "stderr", handler.clone())));
    }

    let (stop, stop_rx) = watch::channel(false);
    let tailers = app
        .log_paths
        .iter()
        .map(|p| {
            let path = match &opts.cwd {
                Some(dir) if Path::new(p).is_relative() => dir.join(p),
                _ => PathBuf::from(p),
            };
            tokio::spawn(tail_file(
                path,
                opts.log_poll,
                handler.clone(),
                stop_rx.clone(),
            ))
        })
        .collect();

    let peak_rss = Arc::new(AtomicU64::new(0));
    let reaped = Arc::new(AtomicBool::new(false));
    let sampler = {
        let period = Duration::from_millis(app.sample_ms.unwrap_or(opts.sample_ms).max(1));
        let sink = sink.clone();
        let app = app.name.clone();
        let peak = peak_rss.clone();
        let reaped = reaped.clone();
        let mut stop_rx = stop_rx.clone();
        tokio::spawn(async move {
            loop {
                if reaped.load(Ordering::SeqCst) || *stop_rx.borrow() {
                    break;
                }
                match sample_resources(pid) {
                    Some(s) => {
                        peak.fetch_max(s.peak_rss_bytes, Ordering::SeqCst);
                        let _ = sink.append(resource_draft(&app, &s));
                    }
                    None => break,
                }
                tokio::select! {
                    _ = tokio::time::sleep(period) => {}
                    _ = stop_rx.changed() => {}
                }
            }
        })
    };

    Ok(Companion {
        ctx,
        child,
        control: ProcessControl { pid, reaped },
        sink,
        started,
        peak_rss,
        stop,
        pipes,
        tailers,
        sampler,
    })
}

fn resource_draft(app: &str, s: &ResourceSample) -> EventDraft {
    EventDraft::new(app, EventKind::Resource)
        .with("rss_bytes", s.rss_bytes)
        .with("cpu_time_ms", s.cpu_time_ms)
        .with_opt("open_fds", s.open_fds)
}

impl Companion {
    pub fn context(&self) -> &LaunchContext {
        &self.ctx
    }

    pub fn control(&self) -> ProcessControl {
        self.control.clone()
    }

    /// Takes one resource sample now and records it. `None` once the
    /// process has exited.
    pub fn sample(&self) -> Option<ResourceSample> {
        if !self.control.is_running() {
            return None;
        }
        let s = sample_resources(self.ctx.pid)?;
        self.peak_rss.fetch_max(s.peak_rss_bytes, Ordering::SeqCst);
        let _ = self.sink.append(resource_draft(&self.ctx.app_name, &s));
        Some(s)
    }

    /// Waits for the process, drains its output and logs, and records the
    /// exit. Called exactly once per launch.
    pub async fn wait(mut self) -> ExitReport {
        let status = self.child.wait().await;
        let wall_duration_ms = self.started.elapsed().as_millis() as u64;
        self.control.reaped.store(true, Ordering::SeqCst);
        let (exit_code, signal) = match status {
            Ok(s) => (s.code(), s.signal()),
            Err(_) => (None, Some(libc::SIGKILL)),
        };
        let _ = self.stop.send(true);
        let drain = async {
            for t in self.pipes.drain(..) {
                let _ = t.await;
            }
            for t in self.tailers.drain(..) {
                let _ = t.await;
            }
        };
        // A grandchild holding the pipes open must not wedge the companion.
        let _ = tokio::time::timeout(Duration::from_secs(2), drain).await;
        self.sampler.abort();
        let report = ExitReport {
            app_name: self.ctx.app_name.clone(),
            run_id: self.ctx.run_id.clone(),
            exit_code,
            signal,
            wall_duration_ms,
            peak_rss_bytes: self.peak_rss.load(Ordering::SeqCst),
            classified: ExitReport::classify(exit_code, signal),
        };
        let _ = self.sink.append(report.to_draft(self.ctx.pid));
        report
    }
}
