//! The supervisor: walks a run through its stages, launches applications,
//! drives the monitors, enforces fail-fast halting and serves operator
//! decisions and steering commands.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::Instant as TokioInstant;

use super::checks::run_checks;
use super::state::{
    reliability_draft, CheckResult, DecidedBy, Decision, GateDecision, StageMachine, StageStatus,
    SUPERVISOR_SOURCE,
};
use crate::chaos::{apply_static_faults, spawn_injector, FaultPlan};
use crate::clock::{instant_at, wall_now_ms};
use crate::companion::{launch, ExitClass, ExitReport, LaunchOptions, ProcessControl};
use crate::monitors::{HealthStatus, MonitorConfig, SegmentMonitor, Verdict};
use crate::store::{EventDraft, EventKind, EventSink, EventStore, RunLog, StoreError};
use crate::tracepoint::{Collector, CollectorCore, Downlink};
use crate::workflow::{
    estimate_system_failure, reduce_to_single_node, Approval, StageKind, StageSpec, WorkflowSpec,
    OPERATOR,
};

/// Stage label used by runs that bypass gating.
pub const UNGATED_STAGE: &str = "ungated";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub run_id: Option<String>,
    /// Directory relative paths in the workflow resolve against; also the
    /// applications' working directory.
    pub base_dir: PathBuf,
    /// Manual gates proceed automatically, recorded as such.
    pub auto_approve: bool,
    /// Without gating the full workflow runs once, with no checks.
    pub gated: bool,
    pub faults: Option<FaultPlan>,
    /// Bind address of the run's tracepoint collector.
    pub trace_bind: String,
}

impl RunOptions {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_id: None,
            base_dir: base_dir.into(),
            auto_approve: false,
            gated: true,
            faults: None,
            trace_bind: "127.0.0.1:0".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Passed,
    Failed,
    Aborted,
}

impl RunOutcome {
    pub fn status(self) -> StageStatus {
        match self {
            RunOutcome::Passed => StageStatus::Passed,
            RunOutcome::Failed => StageStatus::Failed,
            RunOutcome::Aborted => StageStatus::Aborted,
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            RunOutcome::Passed => 0,
            RunOutcome::Failed => 2,
            RunOutcome::Aborted => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateError {
    #[error("no stage named {0}")]
    UnknownStage(String),
    #[error("{0}")]
    Conflict(String),
    #[error("run has finished")]
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SteerError {
    #[error("no application named {0}")]
    UnknownApp(String),
    #[error("{0}")]
    NotLive(String),
    #[error("run has finished")]
    Finished,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("collector: {0}")]
    Collector(std::io::Error),
    #[error("invalid workflow: {0}")]
    Workflow(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteerCommand {
    pub command_id: String,
    pub target_app: String,
    pub verb: String,
    pub args: BTreeMap<String, String>,
    pub issued_by: String,
    pub delivered: bool,
}

enum Command {
    Decide {
        stage: String,
        decision: Decision,
        reason: String,
        issued_by: Option<String>,
        reply: oneshot::Sender<Result<GateDecision, GateError>>,
    },
    Steer {
        target: String,
        verb: String,
        args: BTreeMap<String, String>,
        issued_by: String,
        reply: oneshot::Sender<Result<SteerCommand, SteerError>>,
    },
}

/// Talks to a live run's supervisor.
#[derive(Clone)]
pub struct RunHandle {
    pub run_id: String,
    pub spec: Arc<WorkflowSpec>,
    tx: mpsc::UnboundedSender<Command>,
    collector_addr: std::net::SocketAddr,
}

impl RunHandle {
    pub fn collector_addr(&self) -> std::net::SocketAddr {
        self.collector_addr
    }

    pub async fn decide(
        &self,
        stage: &str,
        decision: Decision,
        reason: &str,
        issued_by: Option<String>,
    ) -> Result<GateDecision, GateError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Decide {
                stage: stage.into(),
                decision,
                reason: reason.into(),
                issued_by,
                reply,
            })
            .map_err(|_| GateError::Finished)?;
        rx.await.map_err(|_| GateError::Finished)?
    }

    pub async fn steer(
        &self,
        target: &str,
        verb: &str,
        args: BTreeMap<String, String>,
        issued_by: &str,
    ) -> Result<SteerCommand, SteerError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Command::Steer {
                target: target.into(),
                verb: verb.into(),
                args,
                issued_by: issued_by.into(),
                reply,
            })
            .map_err(|_| SteerError::Finished)?;
        rx.await.map_err(|_| SteerError::Finished)?
    }
}

/// Owns the store and the registry of live runs.
pub struct Engine {
    store: Arc<EventStore>,
    runs: RwLock<HashMap<String, RunHandle>>,
}

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

fn fresh_run_id() -> String {
    let n = RUN_COUNTER.fetch_add(1, Ordering::SeqCst);
    format!("run-{}-{}-{n}", wall_now_ms(), std::process::id())
}

impl Engine {
    pub fn new(store: Arc<EventStore>) -> Arc<Self> {
        Arc::new(Self {
            store,
            runs: RwLock::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    /// Handle of a run whose supervisor is still active.
    pub fn handle(&self, run_id: &str) -> Option<RunHandle> {
        self.runs.read().unwrap().get(run_id).cloned()
    }

    /// Creates the run and starts its supervisor. The run and its plan are
    /// in the store when this returns.
    pub async fn start(
        self: &Arc<Self>,
        spec: WorkflowSpec,
        opts: RunOptions,
    ) -> Result<(RunHandle, JoinHandle<RunOutcome>), EngineError> {
        spec.validate()
            .map_err(|e| EngineError::Workflow(e.to_string()))?;
        let run_id = opts.run_id.clone().unwrap_or_else(fresh_run_id);
        let log = self.store.create_run(&run_id, &spec.to_canonical())?;
        let core = CollectorCore::new(self.store.clone(), &run_id)?;
        let collector = Collector::bind(core.clone(), &opts.trace_bind)
            .await
            .map_err(EngineError::Collector)?;
        let spec = Arc::new(spec);
        let (tx, rx) = mpsc::unbounded_channel();
        let handle = RunHandle {
            run_id: run_id.clone(),
            spec: spec.clone(),
            tx,
            collector_addr: collector.addr,
        };

        let stages: Vec<&StageSpec> = if opts.gated {
            spec.stages.iter().collect()
        } else {
            Vec::new()
        };
        for s in &stages {
            log.append(
                EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
                    .with("event", "plan")
                    .with("stage", s.name.as_str())
                    .with("stage_kind", s.kind.as_str())
                    .with(
                        "approval",
                        if s.approval == Approval::Manual {
                            "manual"
                        } else {
                            "automatic"
                        },
                    )
                    .with("skip", s.skip),
            )?;
        }
        if !opts.gated {
            log.append(
                EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
                    .with("event", "plan")
                    .with("stage", UNGATED_STAGE)
                    .with("stage_kind", UNGATED_STAGE)
                    .with("approval", "automatic")
                    .with("skip", false),
            )?;
        }
        let names: Vec<String> = spec.applications.iter().map(|a| a.name.clone()).collect();
        match estimate_system_failure(&spec.failure_priors()) {
            Ok(est) => {
                log.append(reliability_draft(&est, &names))?;
            }
            Err(e) => return Err(EngineError::Workflow(e.to_string())),
        }

        self.runs
            .write()
            .unwrap()
            .insert(run_id.clone(), handle.clone());
        let first = stages
            .first()
            .map(|s| s.name.clone())
            .unwrap_or_else(|| UNGATED_STAGE.into());
        let sup = Supervisor {
            log,
            spec,
            machine: StageMachine::new(&first),
            rx,
            core,
            channel_dir: channel_dir(),
            steer_counter: 0,
            gates: Vec::new(),
            trace_addr: collector.addr.to_string(),
            opts,
        };
        let engine = self.clone();
        let task = tokio::spawn(async move {
            let run_id = sup.log.id().to_string();
            let outcome = sup.run().await;
            collector.shutdown().await;
            engine.runs.write().unwrap().remove(&run_id);
            outcome
        });
        Ok((handle, task))
    }
}

static DIR_COUNTER: AtomicU64 = AtomicU64::new(0);

// Unix socket paths are short; keep the directory near the root.
fn channel_dir() -> PathBuf {
    let n = DIR_COUNTER.fetch_add(1, Ordering::SeqCst);
    std::env::temp_dir().join(format!("cp-{}-{n}", std::process::id()))
}

/// How an execution ended.
#[derive(Debug, Clone, PartialEq)]
enum ExecEnd {
    /// Every application exited on its own.
    Completed,
    /// Every application is healthy; the execution keeps running.
    Healthy,
    /// Fail-fast halt on a monitor anomaly.
    Halted(String),
    TimedOut,
    /// Operator halt.
    Aborted,
    LaunchFailed(String),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Goal {
    Completion,
    Healthy,
}

struct Execution {
    stage: String,
    spec: WorkflowSpec,
    controls: BTreeMap<String, ProcessControl>,
    exit_rx: mpsc::UnboundedReceiver<ExitReport>,
    exits: BTreeMap<String, ExitReport>,
    monitor: Option<SegmentMonitor>,
    health: BTreeMap<String, (&'static str, Option<String>)>,
    stalled: Vec<String>,
    anomalies: Vec<String>,
    segment: u64,
    injector: Option<JoinHandle<()>>,
    launch_failure: Option<String>,
    finished: bool,
}

impl Execution {
    fn all_exited(&self) -> bool {
        self.exits.len() == self.controls.len()
    }

    fn kill_all(&self) {
        for c in self.controls.values() {
            c.kill();
        }
    }

    fn critical(&self, app: &str) -> bool {
        self.spec.application(app).is_some_and(|a| a.critical)
    }

    /// Records the verdicts; returns the first anomaly that warrants a
    /// fail-fast halt.
    fn absorb(&mut self, verdicts: &[Verdict]) -> Option<String> {
        let mut anomaly = None;
        for v in verdicts {
            match v.monitor {
                "health" => {
                    let class = v
                        .extra
                        .get("classified")
                        .and_then(|c| c.as_str())
                        .map(str::to_string);
                    self.health
                        .insert(v.subject.clone(), (v.status, class.clone()));
                    if v.is_health(HealthStatus::Stalled) {
                        self.stalled.push(v.subject.clone());
                    }
                    let bad = v.is_health(HealthStatus::Stalled)
                        || (v.is_health(HealthStatus::Dead) && class.as_deref() != Some("success"));
                    if bad && self.critical(&v.subject) {
                        let a = format!("{} {}", v.subject, v.status);
                        self.anomalies.push(a.clone());
                        anomaly.get_or_insert(a);
                    }
                }
                "channel" if v.status == HealthStatus::Stalled.as_str() => {
                    self.stalled.push(v.subject.clone());
                    let critical = self
                        .spec
                        .channels
                        .iter()
                        .find(|c| c.name == v.subject)
                        .is_some_and(|c| {
                            [&c.from_app, &c.to_app]
                                .iter()
                                .any(|a| a.as_str() != OPERATOR && self.critical(a))
                        });
                    if critical {
                        let a = format!("channel {} stalled", v.subject);
                        self.anomalies.push(a.clone());
                        anomaly.get_or_insert(a);
                    }
                }
                _ => {}
            }
        }
        anomaly
    }

    fn all_healthy(&self) -> bool {
        self.spec
            .applications
            .iter()
            .all(|a| match self.health.get(&a.name) {
                Some(("healthy" | "unknown", _)) => true,
                Some(("dead", Some(c))) => c == "success",
                _ => false,
            })
    }
}

struct Supervisor {
    log: Arc<RunLog>,
    spec: Arc<WorkflowSpec>,
    machine: StageMachine,
    rx: mpsc::UnboundedReceiver<Command>,
    core: Arc<CollectorCore>,
    channel_dir: PathBuf,
    steer_counter: u64,
    gates: Vec<GateDecision>,
    trace_addr: String,
    opts: RunOptions,
}

type Step<T> = Result<T, StoreError>;

impl Supervisor {
    async fn run(mut self) -> RunOutcome {
        let _ = std::fs::create_dir_all(&self.channel_dir);
        let (outcome, reason) = match self.drive().await {
            Ok(r) => r,
            Err(e) => (RunOutcome::Failed, format!("store: {e}")),
        };
        let _ = std::fs::remove_dir_all(&self.channel_dir);
        let _ = self.log.append(
            EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
                .with("event", "outcome")
                .with("status", outcome.status().as_str())
                .with("reason", reason),
        );
        // The outcome is the run's last record.
        self.log.close();
        // Anything still queued gets a definite answer.
        self.rx.close();
        while let Ok(cmd) = self.rx.try_recv() {
            match cmd {
                Command::Decide { reply, .. } => {
                    let _ = reply.send(Err(GateError::Finished));
                }
                Command::Steer { reply, .. } => {
                    let _ = reply.send(Err(SteerError::Finished));
                }
            }
        }
        outcome
    }

    fn transition(&mut self, stage: &str, to: StageStatus, reason: &str) -> Step<()> {
        let draft = self
            .machine
            .transition(stage, to, reason)
            .expect("supervisor only makes legal moves");
        self.log.append(draft)?;
        Ok(())
    }

    fn stage_event(&self, event: &str, stage: &str, reason: &str) -> Step<()> {
        self.log.append(
            EventDraft::new(SUPERVISOR_SOURCE, EventKind::Stage)
                .with("event", event)
                .with("stage", stage)
                .with("reason", reason),
        )?;
        Ok(())
    }

    async fn checks(&mut self, stage: &StageSpec) -> Step<Vec<CheckResult>> {
        let (name, checks, spec, base) = (
            stage.name.clone(),
            stage.checks.clone(),
            (*self.spec).clone(),
            self.opts.base_dir.clone(),
        );
        let results = tokio::task::spawn_blocking(move || run_checks(&name, &checks, &spec, &base))
            .await
            .unwrap_or_default();
        for r in &results {
            self.log.append(r.to_draft())?;
        }
        Ok(results)
    }

    async fn drive(&mut self) -> Step<(RunOutcome, String)> {
        if let Some(plan) = &self.opts.faults {
            apply_static_faults(&plan.statics(), &self.opts.base_dir, &self.log)?;
        }
        if !self.opts.gated {
            return self.ungated().await;
        }
        let spec = self.spec.clone();
        let stages = &spec.stages;
        let mut live_exec: Option<Execution> = None;
        let mut first_exec = true;
        for (i, stage) in stages.iter().enumerate() {
            let name = stage.name.as_str();
            if stage.kind == StageKind::StaticCheck {
                self.transition(name, StageStatus::Checking, "")?;
                let results = self.checks(stage).await?;
                let failed: Vec<&str> = results
                    .iter()
                    .filter(|r| !r.passed())
                    .map(|r| r.check_id.as_str())
                    .collect();
                if failed.is_empty() {
                    self.transition(name, StageStatus::Passed, "all checks passed")?;
                    continue;
                }
                let reason = format!("checks failed: {}", failed.join(", "));
                self.transition(name, StageStatus::Failed, &reason)?;
                return Ok((RunOutcome::Failed, reason));
            }
            if stage.skip {
                self.stage_event("skip", name, "skipped by workflow")?;
                continue;
            }
            if i == 0 {
                // Execution stages move out of `passed`; a workflow starting
                // with one passes through an empty check phase.
                self.transition(name, StageStatus::Checking, "")?;
                self.transition(name, StageStatus::Passed, "no checks")?;
            }
            if !self.gate(stage).await? {
                return Ok((
                    RunOutcome::Aborted,
                    format!("operator halted before {name}"),
                ));
            }
            self.transition(name, StageStatus::Running, "")?;
            if !stage.checks.is_empty() {
                let results = self.checks(stage).await?;
                let failed: Vec<&str> = results
                    .iter()
                    .filter(|r| !r.passed())
                    .map(|r| r.check_id.as_str())
                    .collect();
                if !failed.is_empty() {
                    let reason = format!("checks failed: {}", failed.join(", "));
                    if let Some(mut e) = live_exec.take() {
                        self.stop_exec(&mut e, &reason).await?;
                    }
                    self.transition(name, StageStatus::Failed, &reason)?;
                    return Ok((RunOutcome::Failed, reason));
                }
            }
            let timeout = Duration::from_millis(stage.timeout_ms);
            let next_is_live = stages[i + 1..]
                .iter()
                .any(|s| s.kind == StageKind::Live && !s.skip);
            let (mut exec, goal) = match stage.kind {
                StageKind::SingleNode => {
                    if let Some(mut e) = live_exec.take() {
                        self.stop_exec(&mut e, "superseded").await?;
                    }
                    let reduced = reduce_to_single_node(&self.spec);
                    (
                        self.start_exec(name, stage.kind, reduced, true, first_exec)
                            .await?,
                        Goal::Completion,
                    )
                }
                StageKind::Scaled => {
                    if let Some(mut e) = live_exec.take() {
                        self.stop_exec(&mut e, "superseded").await?;
                    }
                    let full = (*self.spec).clone();
                    let goal = if next_is_live {
                        Goal::Healthy
                    } else {
                        Goal::Completion
                    };
                    (
                        self.start_exec(name, stage.kind, full, false, first_exec)
                            .await?,
                        goal,
                    )
                }
                _ => match live_exec.take() {
                    Some(e) => (e, Goal::Completion),
                    None => {
                        let full = (*self.spec).clone();
                        (
                            self.start_exec(name, stage.kind, full, false, first_exec)
                                .await?,
                            Goal::Completion,
                        )
                    }
                },
            };
            first_exec = false;
            let end = self.supervise(&mut exec, goal, timeout).await?;
            match self.judge(&mut exec, end, stage.kind).await? {
                Ok(()) if exec.finished => {
                    self.transition(name, StageStatus::Passed, "completed")?;
                }
                Ok(()) => {
                    self.transition(name, StageStatus::Passed, "all applications healthy")?;
                    live_exec = Some(exec);
                }
                Err((outcome, reason)) => {
                    let to = if outcome == RunOutcome::Aborted {
                        StageStatus::Aborted
                    } else {
                        StageStatus::Failed
                    };
                    self.transition(name, to, &reason)?;
                    return Ok((outcome, reason));
                }
            }
        }
        if let Some(mut e) = live_exec.take() {
            self.stop_exec(&mut e, "no further stage").await?;
        }
        Ok((RunOutcome::Passed, "all stages passed".into()))
    }

    async fn ungated(&mut self) -> Step<(RunOutcome, String)> {
        let timeout = self
            .spec
            .stage_of_kind(StageKind::Scaled)
            .map_or(Duration::from_secs(600), |s| {
                Duration::from_millis(s.timeout_ms)
            });
        let full = (*self.spec).clone();
        let mut exec = self
            .start_exec(UNGATED_STAGE, StageKind::Scaled, full, false, true)
            .await?;
        let end = self.supervise(&mut exec, Goal::Completion, timeout).await?;
        Ok(match self.judge(&mut exec, end, StageKind::Scaled).await? {
            Ok(()) => (RunOutcome::Passed, "completed".into()),
            Err(r) => r,
        })
    }

    /// Waits for a gate decision when one is needed. False means halted.
    async fn gate(&mut self, stage: &StageSpec) -> Step<bool> {
        let name = stage.name.as_str();
        if stage.approval == Approval::Automatic || self.opts.auto_approve {
            let reason = if stage.approval == Approval::Automatic {
                "automatic"
            } else {
                "auto-approve"
            };
            self.record_gate(GateDecision {
                stage: name.into(),
                decided_by: DecidedBy::Automatic,
                decision: Decision::Proceed,
                at: wall_now_ms(),
                reason: reason.into(),
                issued_by: None,
            })?;
            return Ok(true);
        }
        self.transition(
            name,
            StageStatus::AwaitingApproval,
            "manual approval required",
        )?;
        loop {
            let Some(cmd) = self.rx.recv().await else {
                // Cannot happen while the engine holds a handle; treat as halt.
                return Ok(false);
            };
            match cmd {
                Command::Decide {
                    stage,
                    decision,
                    reason,
                    issued_by,
                    reply,
                } => {
                    let r = self.decide(&stage, decision, &reason, issued_by)?;
                    let fresh = r
                        .as_ref()
                        .is_ok_and(|g| g.stage == name && self.gates.last() == Some(g));
                    let _ = reply.send(r);
                    if fresh {
                        if decision == Decision::Halt {
                            self.transition(name, StageStatus::Aborted, "operator halt")?;
                            return Ok(false);
                        }
                        return Ok(true);
                    }
                }
                Command::Steer { target, reply, .. } => {
                    let e = if self.spec.application(&target).is_none() {
                        SteerError::UnknownApp(target)
                    } else {
                        SteerError::NotLive(format!("stage {name} is awaiting approval"))
                    };
                    let _ = reply.send(Err(e));
                }
            }
        }
    }

    fn record_gate(&mut self, g: GateDecision) -> Step<()> {
        self.log.append(g.to_draft())?;
        self.gates.push(g);
        Ok(())
    }

    /// Applies an operator decision to the machine's current position.
    fn decide(
        &mut self,
        stage: &str,
        decision: Decision,
        reason: &str,
        issued_by: Option<String>,
    ) -> Step<Result<GateDecision, GateError>> {
        if let Some(g) = self.gates.iter().find(|g| {
            g.stage == stage && g.decision == decision && g.decided_by == DecidedBy::Operator
        }) {
            return Ok(Ok(g.clone()));
        }
        if self.opts.gated && self.spec.stage(stage).is_none() {
            return Ok(Err(GateError::UnknownStage(stage.into())));
        }
        let here = self.machine.current == stage;
        let st = self.machine.status;
        let allowed = here
            && match decision {
                Decision::Proceed => st == StageStatus::AwaitingApproval,
                Decision::Halt => {
                    matches!(st, StageStatus::AwaitingApproval | StageStatus::Running)
                }
            };
        if !allowed {
            let at = if here {
                st.as_str().to_string()
            } else {
                format!(
                    "not current (current is {} {})",
                    self.machine.current,
                    st.as_str()
                )
            };
            return Ok(Err(GateError::Conflict(format!(
                "cannot {} stage {stage}: {at}",
                decision.as_str()
            ))));
        }
        let g = GateDecision {
            stage: stage.into(),
            decided_by: DecidedBy::Operator,
            decision,
            at: wall_now_ms(),
            reason: reason.into(),
            issued_by,
        };
        self.record_gate(g.clone())?;
        Ok(Ok(g))
    }

    fn steer(
        &mut self,
        exec: Option<&Execution>,
        target: &str,
        verb: &str,
        args: BTreeMap<String, String>,
        issued_by: &str,
    ) -> Step<Result<SteerCommand, SteerError>> {
        if self.spec.application(target).is_none() {
            return Ok(Err(SteerError::UnknownApp(target.into())));
        }
        let running = exec
            .and_then(|e| e.controls.get(target))
            .is_some_and(|c| c.is_running());
        if !running {
            return Ok(Err(SteerError::NotLive(format!("{target} is not running"))));
        }
        self.steer_counter += 1;
        let command_id = format!("cmd-{}", self.steer_counter);
        let delivered = self.core.connected(target);
        self.log.append(
            EventDraft::new(OPERATOR, EventKind::SteerIssue)
                .with("command_id", command_id.as_str())
                .with("target", target)
                .with("verb", verb)
                .with("args", serde_json::to_string(&args).expect("string map"))
                .with("issued_by", issued_by)
                .with("timeout_ms", self.spec.run.steer_timeout_ms)
                .with("delivered", delivered),
        )?;
        let sent = delivered
            && self.core.send(
                target,
                Downlink::Steer {
                    command_id: command_id.clone(),
                    verb: verb.into(),
                    args: args.clone(),
                },
            );
        Ok(Ok(SteerCommand {
            command_id,
            target_app: target.into(),
            verb: verb.into(),
            args,
            issued_by: issued_by.into(),
            delivered: sent,
        }))
    }

    async fn start_exec(
        &mut self,
        stage: &str,
        kind: StageKind,
        spec: WorkflowSpec,
        scaled_down: bool,
        inject: bool,
    ) -> Step<Execution> {
        let monitor =
            SegmentMonitor::start(self.log.clone(), MonitorConfig::from_spec(&spec), stage)?;
        let (exit_tx, exit_rx) = mpsc::unbounded_channel();
        let mut exec = Execution {
            stage: stage.into(),
            spec,
            controls: BTreeMap::new(),
            exit_rx,
            exits: BTreeMap::new(),
            segment: monitor.segment(),
            monitor: Some(monitor),
            health: BTreeMap::new(),
            stalled: Vec::new(),
            anomalies: Vec::new(),
            injector: None,
            launch_failure: None,
            finished: false,
        };
        let sink: Arc<dyn EventSink> = self.log.clone();
        for app in exec.spec.applications.clone() {
            let mut opts = LaunchOptions::new(self.log.id(), &self.trace_addr);
            opts.cwd = Some(self.opts.base_dir.clone());
            opts.sample_ms = self.spec.run.sample_ms;
            let scale = if scaled_down { app.scale_factor } else { 1.0 };
            let env = [
                (
                    crate::env::CHANNEL_DIR,
                    self.channel_dir.display().to_string(),
                ),
                (crate::env::NODES, app.nodes.to_string()),
                (crate::env::SCALE, scale.to_string()),
                (crate::env::STAGE, stage.to_string()),
            ];
            opts.extra_env = env.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
            opts.launch_fields.insert("stage".into(), stage.into());
            opts.launch_fields
                .insert("stage_kind".into(), kind.as_str().into());
            self.core.reset_source(&app.name);
            match launch(&app, &opts, sink.clone(), Some(self.core.clone())).await {
                Ok(c) => {
                    exec.controls.insert(app.name.clone(), c.control());
                    let tx = exit_tx.clone();
                    tokio::spawn(async move {
                        let _ = tx.send(c.wait().await);
                    });
                }
                Err(e) => {
                    exec.launch_failure = Some(format!("{}: {e}", app.name));
                    break;
                }
            }
        }
        drop(exit_tx);
        if exec.launch_failure.is_some() {
            exec.kill_all();
            self.finish_exec(&mut exec).await?;
            return Ok(exec);
        }
        if inject {
            if let Some(plan) = &self.opts.faults {
                let runtime = plan.runtime();
                if !runtime.is_empty() {
                    exec.injector = Some(spawn_injector(
                        runtime,
                        exec.controls.clone(),
                        self.core.clone(),
                        self.log.clone(),
                    ));
                }
            }
        }
        Ok(exec)
    }

    /// Runs the monitor loop until `goal`, a halt, the timeout or an
    /// operator abort.
    async fn supervise(
        &mut self,
        exec: &mut Execution,
        goal: Goal,
        timeout: Duration,
    ) -> Step<ExecEnd> {
        if let Some(r) = &exec.launch_failure {
            return Ok(ExecEnd::LaunchFailed(r.clone()));
        }
        if exec.finished {
            return Ok(ExecEnd::Completed);
        }
        if goal == Goal::Healthy && exec.all_healthy() {
            return Ok(ExecEnd::Healthy);
        }
        let deadline = TokioInstant::now() + timeout;
        loop {
            if exec.all_exited() {
                self.finish_exec(exec).await?;
                return Ok(ExecEnd::Completed);
            }
            let next = exec
                .monitor
                .as_ref()
                .expect("monitor runs until finish")
                .next_tick_at();
            tokio::select! {
                _ = tokio::time::sleep_until(TokioInstant::from_std(instant_at(next))) => {
                    let verdicts = exec.monitor.as_mut().expect("monitor").catch_up()?;
                    if let Some(a) = exec.absorb(&verdicts) {
                        self.stage_event("halt", &exec.stage, &a)?;
                        exec.kill_all();
                        self.finish_exec(exec).await?;
                        return Ok(ExecEnd::Halted(a));
                    }
                    if goal == Goal::Healthy && exec.all_healthy() {
                        return Ok(ExecEnd::Healthy);
                    }
                }
                r = exec.exit_rx.recv() => match r {
                    Some(r) => {
                        exec.exits.insert(r.app_name.clone(), r);
                    }
                    None => {
                        self.finish_exec(exec).await?;
                        return Ok(ExecEnd::Completed);
                    }
                },
                Some(cmd) = self.rx.recv() => match cmd {
                    Command::Decide { stage, decision, reason, issued_by, reply } => {
                        let r = self.decide(&stage, decision, &reason, issued_by)?;
                        let fresh = r.as_ref().is_ok_and(|g| self.gates.last() == Some(g));
                        let _ = reply.send(r);
                        if fresh && decision == Decision::Halt {
                            exec.kill_all();
                            self.finish_exec(exec).await?;
                            return Ok(ExecEnd::Aborted);
                        }
                    }
                    Command::Steer { target, verb, args, issued_by, reply } => {
                        let r = self.steer(Some(exec), &target, &verb, args, &issued_by)?;
                        let _ = reply.send(r);
                    }
                },
                _ = tokio::time::sleep_until(deadline) => {
                    self.stage_event("halt", &exec.stage, "timeout")?;
                    exec.kill_all();
                    self.finish_exec(exec).await?;
                    return Ok(ExecEnd::TimedOut);
                }
            }
        }
    }

    /// Collects every exit, lets the monitor see everything recorded up to
    /// now, and closes the segment.
    async fn finish_exec(&mut self, exec: &mut Execution) -> Step<()> {
        if exec.finished {
            return Ok(());
        }
        let Some(mut monitor) = exec.monitor.take() else {
            return Ok(());
        };
        loop {
            let next = TokioInstant::from_std(instant_at(monitor.next_tick_at()));
            tokio::select! {
                r = exec.exit_rx.recv() => match r {
                    Some(r) => {
                        exec.exits.insert(r.app_name.clone(), r);
                    }
                    None => break,
                },
                _ = tokio::time::sleep_until(next) => {
                    let v = monitor.catch_up()?;
                    exec.absorb(&v);
                }
            }
        }
        if let Some(j) = exec.injector.take() {
            j.abort();
        }
        let target = self.log.last_seq();
        while !monitor.has_seen(target) {
            tokio::time::sleep_until(TokioInstant::from_std(instant_at(monitor.next_tick_at())))
                .await;
            let v = monitor.catch_up()?;
            exec.absorb(&v);
        }
        monitor.stop()?;
        exec.finished = true;
        Ok(())
    }

    async fn stop_exec(&mut self, exec: &mut Execution, reason: &str) -> Step<()> {
        if !exec.finished {
            self.stage_event("stop", &exec.stage, reason)?;
            exec.kill_all();
            self.finish_exec(exec).await?;
        }
        Ok(())
    }

    /// Stage verdict for an execution that ended as `end`.
    async fn judge(
        &mut self,
        exec: &mut Execution,
        end: ExecEnd,
        kind: StageKind,
    ) -> Step<Result<(), (RunOutcome, String)>> {
        let fail = |r: String| Ok(Err((RunOutcome::Failed, r)));
        match end {
            ExecEnd::LaunchFailed(r) => fail(format!("launch failed: {r}")),
            ExecEnd::Halted(r) => fail(format!("halted: {r}")),
            ExecEnd::TimedOut => fail("timeout".into()),
            ExecEnd::Aborted => Ok(Err((RunOutcome::Aborted, "operator halt".into()))),
            ExecEnd::Healthy => Ok(Ok(())),
            ExecEnd::Completed => {
                let strict = kind == StageKind::SingleNode;
                let bad: Vec<&str> = exec
                    .exits
                    .values()
                    .filter(|r| {
                        r.classified != ExitClass::Success && (strict || exec.critical(&r.app_name))
                    })
                    .map(|r| r.app_name.as_str())
                    .collect();
                if !bad.is_empty() {
                    return fail(format!("abnormal exit: {}", bad.join(", ")));
                }
                let stalls = if strict {
                    &exec.stalled
                } else {
                    &exec.anomalies
                };
                if !stalls.is_empty() {
                    return fail(format!("anomalies: {}", stalls.join(", ")));
                }
                if strict {
                    let mut seen = std::collections::BTreeSet::new();
                    for e in self
                        .log
                        .all()
                        .iter()
                        .filter(|e| e.seq > exec.segment && e.kind == EventKind::IoStat)
                    {
                        if e.bool_field("suspect") != Some(true) {
                            if let Some(c) = e.str_field("channel") {
                                seen.insert(c.to_string());
                            }
                        }
                    }
                    let silent: Vec<&str> = exec
                        .spec
                        .channels
                        .iter()
                        .map(|c| c.name.as_str())
                        .filter(|c| !seen.contains(*c))
                        .collect();
                    if !silent.is_empty() {
                        return fail(format!("channel-silent: {}", silent.join(", ")));
                    }
                }
                Ok(Ok(()))
            }
        }
    }
}
