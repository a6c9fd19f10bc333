use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde_json::Value;

use super::{
    channel_status, heartbeat_deadline, heartbeat_status, steering_roundtrip, HealthStatus,
    SteerObservation, SteeringStatus, DEFAULT_THROUGHPUT_WINDOW_MS,
};
use crate::clock::ms_to_ns;
use crate::store::{Event, EventDraft, EventKind, Fields, RunLog, StoreError};
use crate::tracepoint::AckStatus;
use crate::workflow::{WorkflowSpec, OPERATOR};

/// Event source used for verdicts and monitor bookkeeping.
pub const MONITOR_SOURCE: &str = "monitor";

#[derive(Debug, Clone, PartialEq)]
pub struct AppWatch {
    pub name: String,
    pub heartbeat_interval_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWatch {
    pub name: String,
    pub from_app: String,
    pub to_app: String,
    pub stall_timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorConfig {
    pub tick_ms: u64,
    pub grace_multiplier: u32,
    pub throughput_window_ms: u64,
    pub apps: Vec<AppWatch>,
    pub channels: Vec<ChannelWatch>,
}

impl MonitorConfig {
    pub fn from_spec(spec: &WorkflowSpec) -> Self {
        Self {
            tick_ms: spec.run.tick_ms,
            grace_multiplier: spec.run.grace_multiplier,
            throughput_window_ms: DEFAULT_THROUGHPUT_WINDOW_MS,
            apps: spec
                .applications
                .iter()
                .map(|a| AppWatch {
                    name: a.name.clone(),
                    heartbeat_interval_ms: a.heartbeat_interval_ms,
                })
                .collect(),
            channels: spec
                .channels
                .iter()
                .map(|c| ChannelWatch {
                    name: c.name.clone(),
                    from_app: c.from_app.clone(),
                    to_app: c.to_app.clone(),
                    stall_timeout_ms: c.stall_timeout_ms,
                })
                .collect(),
        }
    }
}

/// One status transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    /// `health`, `channel` or `steering`.
    pub monitor: &'static str,
    pub subject: String,
    pub status: &'static str,
    /// Monotonic time the status took effect.
    pub since: u64,
    /// Nominal tick time at which the transition was observed.
    pub at: u64,
    /// Store seq of the last event the verdict rests on.
    pub evidence: Option<u64>,
    pub extra: Fields,
}

impl Verdict {
    pub fn to_draft(&self, segment: u64) -> EventDraft {
        let mut d = EventDraft::new(MONITOR_SOURCE, EventKind::Verdict)
            .with("monitor", self.monitor)
            .with("subject", self.subject.as_str())
            .with("status", self.status)
            .with("since", self.since)
            .with("at", self.at)
            .with("segment", segment)
            .with_opt("evidence", self.evidence);
        for (k, v) in &self.extra {
            d.set(k.clone(), v.clone());
        }
        d
    }

    pub fn is_health(&self, status: HealthStatus) -> bool {
        self.monitor == "health" && self.status == status.as_str()
    }
}

#[derive(Default)]
struct AppState {
    heartbeat_interval_ms: Option<u64>,
    started: Option<(u64, u64)>,
    last_beat: Option<(u64, u64)>,
    exit: Option<(u64, u64, Fields)>,
    emitted: Option<HealthStatus>,
}

#[derive(Default)]
struct ChanState {
    stats: VecDeque<(u64, u64)>,
    last_seq: Option<u64>,
    emitted: Option<HealthStatus>,
}

struct SteerState {
    obs: SteerObservation,
    timeout_ms: u64,
    target: String,
    last_ack_seq: Option<u64>,
    emitted: SteeringStatus,
    dup_emitted: usize,
}

/// Tick-quantized evaluator. Ticks fall at `origin + k * tick_ms`; the
/// evaluation for a tick sees exactly the events with `mono <= tick time`,
/// so the verdict sequence is a function of the event log alone.
pub struct Evaluator {
    cfg: MonitorConfig,
    origin: u64,
    tick_index: u64,
    apps: BTreeMap<String, AppState>,
    chans: BTreeMap<String, ChanState>,
    steer: BTreeMap<String, SteerState>,
}

impl Evaluator {
    pub fn new(cfg: MonitorConfig, origin: u64) -> Self {
        let apps = cfg
            .apps
            .iter()
            .map(|a| {
                (
                    a.name.clone(),
                    AppState {
                        heartbeat_interval_ms: a.heartbeat_interval_ms,
                        ..AppState::default()
                    },
                )
            })
            .collect();
        let chans = cfg
            .channels
            .iter()
            .map(|c| (c.name.clone(), ChanState::default()))
            .collect();
        Self {
            cfg,
            origin,
            tick_index: 0,
            apps,
            chans,
            steer: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn next_tick_at(&self) -> u64 {
        self.origin + self.tick_index * ms_to_ns(self.cfg.tick_ms)
    }

    pub fn last_tick_at(&self) -> Option<u64> {
        self.tick_index
            .checked_sub(1)
            .map(|k| self.origin + k * ms_to_ns(self.cfg.tick_ms))
    }

    /// Feeds one event. Events must arrive in store order and only once
    /// `mono <= next_tick_at()`.
    pub fn feed(&mut self, e: &Event) {
        match e.kind {
            EventKind::Launched => {
                if let Some(a) = self.apps.get_mut(&e.source) {
                    a.started = Some((e.mono, e.seq));
                }
            }
            EventKind::Exit => {
                if let Some(a) = self.apps.get_mut(&e.source) {
                    let mut f = Fields::new();
                    for k in ["classified", "exit_code", "signal"] {
                        if let Some(v) = e.field(k) {
                            f.insert(k.into(), v.clone());
                        }
                    }
                    a.exit = Some((e.mono, e.seq, f));
                }
            }
            EventKind::Heartbeat => {
                if e.bool_field("out_of_order") == Some(true)
                    || e.bool_field("suspect") == Some(true)
                {
                    return;
                }
                if let Some(a) = self.apps.get_mut(&e.source) {
                    a.last_beat = Some((e.mono, e.seq));
                }
            }
            EventKind::IoStat => {
                if e.bool_field("suspect") == Some(true) {
                    return;
                }
                let Some(ch) = e.str_field("channel") else {
                    return;
                };
                if let Some(c) = self.chans.get_mut(ch) {
                    c.stats
                        .push_back((e.mono, e.u64_field("bytes").unwrap_or(0)));
                    c.last_seq = Some(e.seq);
                }
            }
            EventKind::SteerIssue => {
                let (Some(id), Some(timeout_ms)) =
                    (e.str_field("command_id"), e.u64_field("timeout_ms"))
                else {
                    return;
                };
                self.steer.insert(
                    id.to_string(),
                    SteerState {
                        obs: SteerObservation {
                            command_id: id.to_string(),
                            issued_at: e.mono,
                            delivered: e.bool_field("delivered").unwrap_or(false),
                            acks: Vec::new(),
                        },
                        timeout_ms,
                        target: e.str_field("target").unwrap_or_default().to_string(),
                        last_ack_seq: None,
                        emitted: SteeringStatus::Pending,
                        dup_emitted: 0,
                    },
                );
            }
            EventKind::SteerAck => {
                let Some(id) = e.str_field("command_id") else {
                    return;
                };
                let status = match e.str_field("status") {
                    Some("applied") => AckStatus::Applied,
                    Some("rejected") => AckStatus::Rejected,
                    _ => return,
                };
                if let Some(s) = self.steer.get_mut(id) {
                    s.obs.acks.push((e.mono, status));
                    s.last_ack_seq.get_or_insert(e.seq);
                }
            }
            _ => {}
        }
    }

    /// Evaluates the next tick and advances past it.
    pub fn tick(&mut self) -> Vec<Verdict> {
        let now = self.next_tick_at();
        self.tick_index += 1;
        let grace = self.cfg.grace_multiplier;
        let mut out = Vec::new();

        for (name, a) in &mut self.apps {
            if a.emitted == Some(HealthStatus::Dead) {
                continue;
            }
            if let Some((mono, seq, fields)) = &a.exit {
                a.emitted = Some(HealthStatus::Dead);
                out.push(Verdict {
                    monitor: "health",
                    subject: name.clone(),
                    status: HealthStatus::Dead.as_str(),
                    since: *mono,
                    at: now,
                    evidence: Some(*seq),
                    extra: fields.clone(),
                });
                continue;
            }
            let Some((started, launch_seq)) = a.started else {
                continue;
            };
            let beat = a.last_beat.map(|(t, _)| t);
            let (status, since) = match a.heartbeat_interval_ms {
                Some(interval) => {
                    let s = heartbeat_status(beat, started, now, interval, grace);
                    let since = match s {
                        HealthStatus::Starting => started,
                        HealthStatus::Healthy => beat.unwrap_or(started),
                        _ => heartbeat_deadline(beat, started, interval, grace),
                    };
                    (s, since)
                }
                None => (HealthStatus::Unknown, started),
            };
            if a.emitted != Some(status) {
                a.emitted = Some(status);
                out.push(Verdict {
                    monitor: "health",
                    subject: name.clone(),
                    status: status.as_str(),
                    since,
                    at: now,
                    evidence: Some(a.last_beat.map_or(launch_seq, |(_, s)| s)),
                    extra: Fields::new(),
                });
            }
        }

        let window = self.cfg.throughput_window_ms;
        for watch in &self.cfg.channels {
            let endpoint = |app: &str| self.apps.get(app);
            let ends: Vec<&AppState> = [watch.from_app.as_str(), watch.to_app.as_str()]
                .into_iter()
                .filter(|a| *a != OPERATOR)
                .filter_map(endpoint)
                .collect();
            if ends.is_empty() || ends.iter().any(|a| a.started.is_none() || a.exit.is_some()) {
                continue;
            }
            let watch_since = ends
                .iter()
                .filter_map(|a| a.started.map(|s| s.0))
                .max()
                .unwrap_or(0);
            let c = self.chans.get_mut(&watch.name).expect("declared channel");
            let lo = now.saturating_sub(ms_to_ns(window));
            while c.stats.len() > 1 && c.stats.front().is_some_and(|(t, _)| *t <= lo) {
                c.stats.pop_front();
            }
            let stats: Vec<(u64, u64)> = c.stats.iter().copied().collect();
            let reading = channel_status(&stats, watch_since, watch.stall_timeout_ms, window, now);
            if c.emitted != Some(reading.status) {
                c.emitted = Some(reading.status);
                let timeout = ms_to_ns(watch.stall_timeout_ms);
                let last = stats.last().map(|(t, _)| *t);
                let since = match (reading.status, last) {
                    (HealthStatus::Healthy, Some(t)) => t,
                    (HealthStatus::Stalled, Some(t)) => t + timeout + 1,
                    (HealthStatus::Stalled, None) => watch_since + timeout,
                    _ => watch_since,
                };
                let mut extra = Fields::new();
                extra.insert("throughput_bps".into(), Value::from(reading.throughput));
                out.push(Verdict {
                    monitor: "channel",
                    subject: watch.name.clone(),
                    status: reading.status.as_str(),
                    since,
                    at: now,
                    evidence: c.last_seq,
                    extra,
                });
            }
        }

        for (id, s) in &mut self.steer {
            let rec = steering_roundtrip(&s.obs, s.timeout_ms, now);
            if s.emitted == SteeringStatus::Pending && rec.status != SteeringStatus::Pending {
                s.emitted = rec.status;
                let mut extra = Fields::new();
                extra.insert("target".into(), s.target.clone().into());
                if let Some(l) = rec.latency_ns() {
                    extra.insert("latency_ns".into(), l.into());
                }
                out.push(Verdict {
                    monitor: "steering",
                    subject: id.clone(),
                    status: rec.status.as_str(),
                    since: rec
                        .acked_at
                        .unwrap_or(s.obs.issued_at + ms_to_ns(s.timeout_ms)),
                    at: now,
                    evidence: if rec.acked_at.is_some() {
                        s.last_ack_seq
                    } else {
                        None
                    },
                    extra,
                });
            }
            while s.dup_emitted < rec.duplicate_acks {
                s.dup_emitted += 1;
                let mut extra = Fields::new();
                extra.insert("target".into(), s.target.clone().into());
                out.push(Verdict {
                    monitor: "steering",
                    subject: id.clone(),
                    status: "duplicate_ack",
                    since: now,
                    at: now,
                    evidence: None,
                    extra,
                });
            }
        }
        out
    }
}

/// Drives an [`Evaluator`] over a live run log for one execution segment.
///
/// The segment starts with a `monitor_start` stage event whose store
/// timestamp is the tick origin and ends with `monitor_stop` recording the
/// last evaluated tick. Replay needs nothing else.
pub struct SegmentMonitor {
    log: Arc<RunLog>,
    evaluator: Evaluator,
    segment: u64,
    cursor: u64,
}

impl SegmentMonitor {
    pub fn start(log: Arc<RunLog>, cfg: MonitorConfig, exec: &str) -> Result<Self, StoreError> {
        let draft = EventDraft::new(MONITOR_SOURCE, EventKind::Stage)
            .with("event", "monitor_start")
            .with("exec", exec)
            .with("tick_ms", cfg.tick_ms)
            .with("grace_multiplier", cfg.grace_multiplier)
            .with("throughput_window_ms", cfg.throughput_window_ms);
        let segment = log.append(draft)?;
        let origin = log.get(segment).expect("just appended").mono;
        Ok(Self {
            log,
            evaluator: Evaluator::new(cfg, origin),
            segment,
            cursor: segment,
        })
    }

    pub fn segment(&self) -> u64 {
        self.segment
    }

    pub fn next_tick_at(&self) -> u64 {
        self.evaluator.next_tick_at()
    }

    pub fn last_tick_at(&self) -> Option<u64> {
        self.evaluator.last_tick_at()
    }

    /// Evaluates every tick whose time has passed, appending verdicts.
    pub fn catch_up(&mut self) -> Result<Vec<Verdict>, StoreError> {
        let mut all = Vec::new();
        loop {
            let (events, now) = self.log.stable_since(self.cursor);
            let tick_at = self.evaluator.next_tick_at();
            if tick_at > now {
                break;
            }
            for e in &events {
                if e.mono > tick_at {
                    break;
                }
                self.cursor = e.seq;
                if !matches!(e.kind, EventKind::Verdict | EventKind::Stage) {
                    self.evaluator.feed(e);
                }
            }
            let verdicts = self.evaluator.tick();
            for v in &verdicts {
                self.log.append(v.to_draft(self.segment))?;
            }
            all.extend(verdicts);
        }
        Ok(all)
    }

    /// True once every event up to `seq` has been evaluated by some tick.
    pub fn has_seen(&self, seq: u64) -> bool {
        self.cursor >= seq
    }

    pub fn stop(self) -> Result<u64, StoreError> {
        let mut d = EventDraft::new(MONITOR_SOURCE, EventKind::Stage)
            .with("event", "monitor_stop")
            .with("segment", self.segment);
        if let Some(t) = self.evaluator.last_tick_at() {
            d.set("last_tick", t);
        }
        self.log.append(d)
    }
}
