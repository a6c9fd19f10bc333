//! Seeded fault injection and the empirical check of the system failure
//! model.

mod measure;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use crate::companion::ProcessControl;
use crate::store::{EventDraft, EventKind, RunLog, StoreError};
use crate::tracepoint::{CollectorCore, Downlink};
use crate::workflow::{ChannelKind, CheckKind, WorkflowSpec};

pub use measure::{measure_failure_rate, FailureRate, MeasureConfig, TrialResult};

/// Source of fault_injected events.
pub const CHAOS_SOURCE: &str = "chaos";

/// Exit code requested by a `nonzero_exit` fault.
pub const FAULT_EXIT_CODE: i32 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Kill,
    NonzeroExit,
    HeartbeatSilence,
    ChannelSilence,
    MissingDependency,
    CorruptConfig,
}

impl FaultKind {
    pub const RUNTIME: [FaultKind; 4] = [
        FaultKind::Kill,
        FaultKind::NonzeroExit,
        FaultKind::HeartbeatSilence,
        FaultKind::ChannelSilence,
    ];
    pub const STATIC: [FaultKind; 2] = [FaultKind::MissingDependency, FaultKind::CorruptConfig];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::Kill => "kill",
            FaultKind::NonzeroExit => "nonzero_exit",
            FaultKind::HeartbeatSilence => "heartbeat_silence",
            FaultKind::ChannelSilence => "channel_silence",
            FaultKind::MissingDependency => "missing_dependency",
            FaultKind::CorruptConfig => "corrupt_config",
        }
    }

    /// Delivered over the app's tracepoint link.
    pub fn uses_link(self) -> bool {
        matches!(
            self,
            FaultKind::NonzeroExit | FaultKind::HeartbeatSilence | FaultKind::ChannelSilence
        )
    }

    /// Faults applied to files before the run starts rather than to a
    /// running process.
    pub fn is_static(self) -> bool {
        Self::STATIC.contains(&self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInstance {
    /// Application the fault is charged to.
    pub target: String,
    pub kind: FaultKind,
    /// Offset from the start of the first execution stage.
    pub at_ms: u64,
    /// Channel silenced by `channel_silence`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    /// File removed or garbled by a static fault.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub seed: u64,
    pub faults: Vec<FaultInstance>,
}

impl FaultPlan {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plans serialize")
    }

    pub fn runtime(&self) -> Vec<FaultInstance> {
        self.faults
            .iter()
            .filter(|f| !f.kind.is_static())
            .cloned()
            .collect()
    }

    pub fn statics(&self) -> Vec<FaultInstance> {
        self.faults
            .iter()
            .filter(|f| f.kind.is_static())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    /// Kinds drawn from, uniformly.
    pub kinds: Vec<FaultKind>,
    /// Fault times are uniform over `[lo, hi]` milliseconds.
    pub window_ms: (u64, u64),
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            kinds: FaultKind::RUNTIME.to_vec(),
            window_ms: (100, 300),
        }
    }
}

fn static_path(
    spec: &WorkflowSpec,
    app: &str,
    kind: FaultKind,
    rng: &mut ChaCha8Rng,
) -> Option<String> {
    let wanted: &[CheckKind] = match kind {
        FaultKind::MissingDependency => &[CheckKind::LibraryResolvable, CheckKind::PathReadable],
        FaultKind::CorruptConfig => &[CheckKind::ConfigParses],
        _ => return None,
    };
    let mut candidates: Vec<&str> = spec
        .stages
        .iter()
        .flat_map(|s| &s.checks)
        .filter(|c| wanted.contains(&c.kind))
        .map(|c| c.target.as_str())
        .collect();
    // Prefer files that visibly belong to the faulted application.
    let own: Vec<&str> = candidates
        .iter()
        .copied()
        .filter(|t| t.contains(app))
        .collect();
    if !own.is_empty() {
        candidates = own;
    }
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())].to_string())
}

/// Draws a fault plan: application `i` is faulted with probability
/// `probabilities[i]`, with kind and time drawn from `cfg`. The plan is a
/// function of its inputs and the seed alone.
pub fn plan_faults(
    spec: &WorkflowSpec,
    probabilities: &[f64],
    seed: u64,
    cfg: &PlanConfig,
) -> FaultPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut faults = Vec::new();
    for (i, app) in spec.applications.iter().enumerate() {
        let p = probabilities
            .get(i)
            .copied()
            .unwrap_or(app.failure_probability);
        // Always draw, so one component's probability never shifts the
        // stream seen by the next.
        let u: f64 = rng.random();
        let kind = cfg.kinds[rng
            .random_range(0..cfg.kinds.len().max(1))
            .min(cfg.kinds.len().saturating_sub(1))];
        let (lo, hi) = cfg.window_ms;
        let at_ms = rng.random_range(lo..=hi.max(lo));
        let outbound: Vec<&str> = spec
            .channels
            .iter()
            .filter(|c| c.from_app == app.name && c.kind != ChannelKind::Steering)
            .map(|c| c.name.as_str())
            .collect();
        let pick = rng.random_range(0..outbound.len().max(1));
        let path = static_path(spec, &app.name, kind, &mut rng);
        if cfg.kinds.is_empty() || u >= p {
            continue;
        }
        let mut f = FaultInstance {
            target: app.name.clone(),
            kind,
            at_ms,
            channel: None,
            path: None,
        };
        match kind {
            FaultKind::ChannelSilence => match outbound.get(pick) {
                Some(c) => f.channel = Some(c.to_string()),
                None => f.kind = FaultKind::HeartbeatSilence,
            },
            FaultKind::MissingDependency | FaultKind::CorruptConfig => {
                f.at_ms = 0;
                f.path = path;
            }
            _ => {}
        }
        faults.push(f);
    }
    FaultPlan { seed, faults }
}

fn fault_draft(f: &FaultInstance, applied: bool, detail: &str) -> EventDraft {
    EventDraft::new(CHAOS_SOURCE, EventKind::FaultInjected)
        .with("target", f.target.as_str())
        .with("fault", f.kind.as_str())
        .with("at_ms", f.at_ms)
        .with_opt("channel", f.channel.clone())
        .with_opt("path", f.path.clone())
        .with("noop", !applied)
        .with("detail", detail)
}

/// Applies file faults under `base` before any stage runs.
pub fn apply_static_faults(
    faults: &[FaultInstance],
    base: &Path,
    log: &RunLog,
) -> Result<(), StoreError> {
    for f in faults.iter().filter(|f| f.kind.is_static()) {
        let Some(rel) = &f.path else {
            log.append(fault_draft(f, false, "no file to fault"))?;
            continue;
        };
        let path = base.join(rel);
        let result = match f.kind {
            FaultKind::MissingDependency => {
                let mut moved = path.clone().into_os_string();
                moved.push(".chaos-missing");
                std::fs::rename(&path, moved)
            }
            _ => std::fs::write(&path, "[[[ corrupted = = ]\n\u{0}\n"),
        };
        match result {
            Ok(()) => log.append(fault_draft(
                f,
                true,
                &format!("{} {}", f.kind.as_str(), path.display()),
            ))?,
            Err(e) => log.append(fault_draft(f, false, &e.to_string()))?,
        };
    }
    Ok(())
}

/// Applies one runtime fault now.
pub fn inject_now(
    f: &FaultInstance,
    controls: &BTreeMap<String, ProcessControl>,
    core: &CollectorCore,
    log: &RunLog,
) -> Result<bool, StoreError> {
    let alive = controls.get(&f.target).is_some_and(|c| c.is_running());
    let applied = alive
        && match f.kind {
            FaultKind::Kill => controls[&f.target].kill(),
            FaultKind::NonzeroExit => core.send(
                &f.target,
                Downlink::Exit {
                    code: FAULT_EXIT_CODE,
                },
            ),
            FaultKind::HeartbeatSilence => core.send(&f.target, Downlink::HeartbeatSilence),
            FaultKind::ChannelSilence => core.send(
                &f.target,
                Downlink::ChannelSilence {
                    channel: f.channel.clone().unwrap_or_default(),
                },
            ),
            FaultKind::MissingDependency | FaultKind::CorruptConfig => false,
        };
    let detail = if applied {
        "applied"
    } else if alive {
        "target unreachable"
    } else {
        "target not running"
    };
    log.append(fault_draft(f, applied, detail))?;
    Ok(applied)
}

/// Schedules the runtime faults relative to now.
pub fn spawn_injector(
    faults: Vec<FaultInstance>,
    controls: BTreeMap<String, ProcessControl>,
    core: Arc<CollectorCore>,
    log: Arc<RunLog>,
) -> JoinHandle<()> {
    tokio::spawn(async move {
        let start = tokio::time::Instant::now();
        let mut faults = faults;
        faults.sort_by_key(|f| f.at_ms);
        for f in faults {
            tokio::time::sleep_until(start + Duration::from_millis(f.at_ms)).await;
            // A loaded host can delay the tracepoint link past the fault
            // time. Deliver once the app connects, unless it exits first.
            if f.kind.uses_link() {
                while controls.get(&f.target).is_some_and(|c| c.is_running())
                    && !core.connected(&f.target)
                {
                    tokio::time::sleep(Duration::from_millis(10)).await;
                }
            }
            if inject_now(&f, &controls, &core, &log).is_err() {
                break;
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::fixtures::{ring, RingParams};

    fn spec() -> WorkflowSpec {
        crate::workflow::parse_workflow(&ring(&RingParams::default()).workflow).unwrap()
    }

    #[test]
    fn extremes() {
        let s = spec();
        let cfg = PlanConfig::default();
        assert!(plan_faults(&s, &[0.0; 4], 1, &cfg).faults.is_empty());
        let all = plan_faults(&s, &[1.0; 4], 1, &cfg);
        let targets: Vec<_> = all.faults.iter().map(|f| f.target.as_str()).collect();
        assert_eq!(targets, ["c0", "c1", "c2", "c3"]);
        for f in &all.faults {
            assert!((100..=300).contains(&f.at_ms));
            if f.kind == FaultKind::ChannelSilence {
                assert!(f.channel.is_some());
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let s = spec();
        let cfg = PlanConfig::default();
        let a = plan_faults(&s, &[0.5; 4], 42, &cfg);
        let b = plan_faults(&s, &[0.5; 4], 42, &cfg);
        assert_eq!(a.to_bytes(), b.to_bytes());
        let differ = (0..20).any(|seed| plan_faults(&s, &[0.5; 4], seed, &cfg) != a);
        assert!(differ);
    }

    #[test]
    fn inclusion_rate_tracks_probability() {
        let s = spec();
        let cfg = PlanConfig::default();
        let n = 4000;
        let hits: usize = (0..n)
            .map(|seed| plan_faults(&s, &[0.15; 4], seed, &cfg).faults.len())
            .sum();
        let rate = hits as f64 / (4 * n) as f64;
        assert!((rate - 0.15).abs() < 0.015, "{rate}");
    }

    #[test]
    fn any_fault_rate_matches_the_system_estimate() {
        let s = spec();
        let cfg = PlanConfig::default();
        let n = 20_000;
        let mut seeds = ChaCha8Rng::seed_from_u64(3);
        let faulted = (0..n)
            .filter(|_| {
                !plan_faults(&s, &[0.15; 4], seeds.random(), &cfg)
                    .faults
                    .is_empty()
            })
            .count();
        let want = 1.0 - 0.85f64.powi(4);
        // 4 standard errors at n = 20000.
        assert!(
            (faulted as f64 / n as f64 - want).abs() < 0.015,
            "{faulted}"
        );
    }

    #[test]
    fn static_faults_pick_checked_files() {
        let s = spec();
        let cfg = PlanConfig {
            kinds: FaultKind::STATIC.to_vec(),
            window_ms: (0, 0),
        };
        let plan = plan_faults(&s, &[1.0; 4], 7, &cfg);
        for f in &plan.faults {
            let path = f.path.as_deref().unwrap();
            match f.kind {
                FaultKind::MissingDependency => assert_eq!(path, "lib/libsim.so"),
                FaultKind::CorruptConfig => assert!(path.ends_with(&format!("{}.toml", f.target))),
                _ => unreachable!(),
            }
        }
    }
}
