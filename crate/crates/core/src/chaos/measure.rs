use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use super::{plan_faults, FaultKind, PlanConfig};
use crate::stage::{Engine, EngineError, RunOptions, RunOutcome, StageState, StageStatus};
use crate::store::{EventKind, EventStore};
use crate::workflow::{estimate_system_failure, load_workflow};
use crate::workloads::Fixture;

#[derive(Debug, Clone)]
pub struct MeasureConfig {
    pub trials: usize,
    pub seed: u64,
    pub gated: bool,
    /// Trials running at once.
    pub parallelism: usize,
    pub plan: PlanConfig,
    /// Per-component probabilities; the workflow's priors when `None`.
    pub probabilities: Option<Vec<f64>>,
    /// Scratch space for per-trial copies of the fixture.
    pub work_dir: PathBuf,
    /// Store that keeps every trial's events. Without one, trials run
    /// against a private in-memory store and only their summaries survive.
    pub store: Option<Arc<EventStore>>,
}

impl MeasureConfig {
    pub fn new(trials: usize, seed: u64, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            trials,
            seed,
            gated: false,
            parallelism: std::thread::available_parallelism().map_or(8, |n| n.get().clamp(4, 16)),
            plan: PlanConfig::default(),
            probabilities: None,
            work_dir: work_dir.into(),
            store: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub index: usize,
    pub seed: u64,
    pub run_id: String,
    pub planned: Vec<FaultKind>,
    /// Faults that actually took effect.
    pub manifested: usize,
    pub outcome: RunOutcome,
    /// Stage that failed, when one did.
    pub failed_stage: Option<String>,
    pub reason: Option<String>,
    /// Applications launched per stage name.
    pub launches: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRate {
    pub trials: usize,
    pub failures: usize,
    pub rate: f64,
    /// System failure probability predicted from the component priors.
    pub predicted: f64,
    /// Trials where at least one fault took effect.
    pub faulted: usize,
    /// Faulted trials that still passed.
    pub false_greens: usize,
    /// Unfaulted trials that failed.
    pub false_alarms: usize,
    /// Failed trials by failing stage.
    pub failures_by_stage: Vec<(String, usize)>,
    pub results: Vec<TrialResult>,
}

/// Runs `cfg.trials` seeded trials of `fixture` and reports the observed
/// failure rate next to the analytic prediction. Each trial gets its own
/// copy of the fixture, since file faults modify it.
pub async fn measure_failure_rate(
    fixture: &Fixture,
    mock_exe: &Path,
    cfg: &MeasureConfig,
) -> Result<FailureRate, EngineError> {
    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| EngineError::Workflow(e.to_string()))?;
    let probe_dir = cfg.work_dir.join("probe");
    let path = fixture
        .materialize(&probe_dir, mock_exe)
        .map_err(|e| EngineError::Workflow(e.to_string()))?;
    let spec = load_workflow(&path).map_err(|e| EngineError::Workflow(e.to_string()))?;
    let _ = std::fs::remove_dir_all(&probe_dir);
    let probs = cfg
        .probabilities
        .clone()
        .unwrap_or_else(|| spec.failure_priors());
    let predicted = estimate_system_failure(&probs)
        .map_err(|e| EngineError::Workflow(e.to_string()))?
        .system_failure_probability;

    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sub_seeds: Vec<u64> = (0..cfg.trials).map(|_| seeds.random()).collect();
    let keep = cfg.store.is_some();
    let store = cfg
        .store
        .clone()
        .unwrap_or_else(|| Arc::new(EventStore::in_memory()));
    let engine = Engine::new(store.clone());
    let gate = Arc::new(Semaphore::new(cfg.parallelism.max(1)));
    let mut set = JoinSet::new();
    for (index, seed) in sub_seeds.into_iter().enumerate() {
        let permit = gate.clone().acquire_owned().await.expect("semaphore open");
        let (engine, store, fixture, mock) = (
            engine.clone(),
            store.clone(),
            fixture.clone(),
            mock_exe.to_path_buf(),
        );
        let (dir, gated, plan_cfg, probs) = (
            cfg.work_dir.join(format!("trial-{index}")),
            cfg.gated,
            cfg.plan.clone(),
            probs.clone(),
        );
        set.spawn(async move {
            let _permit = permit;
            let r = trial(
                &engine, &store, &fixture, &mock, &dir, index, seed, gated, &plan_cfg, &probs, keep,
            )
            .await;
            let _ = std::fs::remove_dir_all(&dir);
            r
        });
    }
    let mut results = Vec::with_capacity(cfg.trials);
    while let Some(r) = set.join_next().await {
        results.push(r.expect("trial task")?);
    }
    results.sort_by_key(|r| r.index);

    let failures = results
        .iter()
        .filter(|r| r.outcome != RunOutcome::Passed)
        .count();
    let faulted = results.iter().filter(|r| r.manifested > 0).count();
    let false_greens = results
        .iter()
        .filter(|r| r.manifested > 0 && r.outcome == RunOutcome::Passed)
        .count();
    let false_alarms = results
        .iter()
        .filter(|r| r.manifested == 0 && r.outcome != RunOutcome::Passed)
        .count();
    let mut by_stage = std::collections::BTreeMap::new();
    for r in &results {
        if let Some(s) = &r.failed_stage {
            *by_stage.entry(s.clone()).or_insert(0) += 1;
        }
    }
    Ok(FailureRate {
        trials: results.len(),
        failures,
        rate: if results.is_empty() {
            0.0
        } else {
            failures as f64 / results.len() as f64
        },
        predicted,
        faulted,
        false_greens,
        false_alarms,
        failures_by_stage: by_stage.into_iter().collect(),
        results,
    })
}

#[allow(clippy::too_many_arguments)]
async fn trial(
    engine: &Arc<Engine>,
    store: &EventStore,
    fixture: &Fixture,
    mock: &Path,
    dir: &Path,
    index: usize,
    seed: u64,
    gated: bool,
    plan_cfg: &PlanConfig,
    probs: &[f64],
    keep: bool,
) -> Result<TrialResult, EngineError> {
    let path = fixture
        .materialize(dir, mock)
        .map_err(|e| EngineError::Workflow(e.to_string()))?;
    let spec = load_workflow(&path).map_err(|e| EngineError::Workflow(e.to_string()))?;
    let plan = plan_faults(&spec, probs, seed, plan_cfg);
    let planned = plan.faults.iter().map(|f| f.kind).collect();
    let mut opts = RunOptions::new(dir);
    opts.gated = gated;
    opts.auto_approve = true;
    opts.faults = Some(plan);
    let (handle, task) = engine.start(spec, opts).await?;
    let outcome = task.await.unwrap_or(RunOutcome::Failed);

    let log = store.run(&handle.run_id)?.expect("run exists");
    let events = log.all();
    let manifested = events
        .iter()
        .filter(|e| e.kind == EventKind::FaultInjected && e.bool_field("noop") == Some(false))
        .count();
    let state = StageState::from_events(&handle.run_id, events.iter().map(|e| e.as_ref()));
    let failed_stage = (outcome != RunOutcome::Passed).then(|| {
        state
            .stages
            .iter()
            .find(|s| matches!(s.status, StageStatus::Failed | StageStatus::Aborted))
            .map_or_else(
                || crate::stage::UNGATED_STAGE.to_string(),
                |s| s.name.clone(),
            )
    });
    let mut launches = std::collections::BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Launched) {
        *launches
            .entry(e.str_field("stage").unwrap_or_default().to_string())
            .or_insert(0) += 1;
    }
    if !keep {
        // Trials only need their summary; drop the events.
        store.forget_run(&handle.run_id);
    }
    Ok(TrialResult {
        index,
        seed,
        run_id: handle.run_id,
        planned,
        manifested,
        outcome,
        failed_stage,
        reason: state.outcome_reason.clone(),
        launches: launches.into_iter().collect(),
    })
}
