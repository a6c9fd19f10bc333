use std::path::Path;

use thiserror::Error;

use super::evaluator::{Evaluator, MonitorConfig, MONITOR_SOURCE};
use crate::store::{verify_records, Event, EventKind, Fields, StoreError, EVENTS_FILE, META_FILE};
use crate::workflow::{parse_workflow, WorkflowError, WorkflowSpec};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Integrity(#[from] StoreError),
    #[error("stored workflow snapshot is invalid: {0}")]
    Spec(#[from] WorkflowError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub run_id: String,
    pub stored: Vec<Fields>,
    pub replayed: Vec<Fields>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.stored == self.replayed
    }

    /// Index of the first verdict where the two sequences differ.
    pub fn first_mismatch(&self) -> Option<usize> {
        if self.identical() {
            return None;
        }
        Some(
            self.stored
                .iter()
                .zip(&self.replayed)
                .position(|(a, b)| a != b)
                .unwrap_or(self.stored.len().min(self.replayed.len())),
        )
    }
}

fn stage_event(e: &Event, name: &str) -> bool {
    e.kind == EventKind::Stage && e.source == MONITOR_SOURCE && e.str_field("event") == Some(name)
}

/// Re-runs the monitors over every monitoring segment of a stored run and
/// returns the verdict payloads they produce, in order.
pub fn replay_verdicts(events: &[Event], spec: &WorkflowSpec) -> Vec<Fields> {
    let mut out = Vec::new();
    for start in events.iter().filter(|e| stage_event(e, "monitor_start")) {
        let segment = start.seq;
        let stop = events
            .iter()
            .find(|e| stage_event(e, "monitor_stop") && e.u64_field("segment") == Some(segment));
        let end_seq = stop.map_or(u64::MAX, |e| e.seq);
        // An interrupted segment has no stop marker; replay up to the last
        // tick that left a verdict behind.
        let last_tick = match stop {
            Some(e) => e.u64_field("last_tick"),
            None => events
                .iter()
                .filter(|e| e.kind == EventKind::Verdict && e.u64_field("segment") == Some(segment))
                .filter_map(|e| e.u64_field("at"))
                .max(),
        };
        let Some(last_tick) = last_tick else { continue };

        let mut cfg = MonitorConfig::from_spec(spec);
        if let Some(t) = start.u64_field("tick_ms") {
            cfg.tick_ms = t;
        }
        if let Some(g) = start.u64_field("grace_multiplier") {
            cfg.grace_multiplier = g as u32;
        }
        if let Some(w) = start.u64_field("throughput_window_ms") {
            cfg.throughput_window_ms = w;
        }
        let mut ev = Evaluator::new(cfg, start.mono);
        let inputs: Vec<&Event> = events
            .iter()
            .filter(|e| e.seq > segment && e.seq < end_seq)
            .filter(|e| !matches!(e.kind, EventKind::Verdict | EventKind::Stage))
            .collect();
        let mut i = 0;
        while ev.next_tick_at() <= last_tick {
            let at = ev.next_tick_at();
            while i < inputs.len() && inputs[i].mono <= at {
                ev.feed(inputs[i]);
                i += 1;
            }
            out.extend(ev.tick().into_iter().map(|v| v.to_draft(segment).fields));
        }
    }
    out
}

pub fn stored_verdicts(events: &[Event]) -> Vec<Fields> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Verdict && e.source == MONITOR_SOURCE)
        .map(|e| e.fields.clone())
        .collect()
}

/// Verifies a run directory and replays its monitors.
pub fn replay_run(dir: &Path) -> Result<ReplayReport, ReplayError> {
    let run_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| ReplayError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    };
    let bytes = read(EVENTS_FILE)?;
    let (events, _) = verify_records(&run_id, &bytes)?;
    let stored = stored_verdicts(&events);
    let replayed = if events.iter().any(|e| stage_event(e, "monitor_start")) {
        let meta = read(META_FILE)?;
        let spec = parse_workflow(&String::from_utf8_lossy(&meta))?;
        replay_verdicts(&events, &spec)
    } else {
        Vec::new()
    };
    Ok(ReplayReport {
        run_id,
        stored,
        replayed,
    })
}
