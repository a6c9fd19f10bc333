use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::clock::wall_now_ms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Launched,
    LaunchFailed,
    Exit,
    Resource,
    Log,
    LogError,
    Heartbeat,
    SteerIssue,
    SteerAck,
    IoStat,
    Progress,
    Verdict,
    Stage,
    FaultInjected,
}

impl EventKind {
    pub const ALL: [EventKind; 14] = [
        EventKind::Launched,
        EventKind::LaunchFailed,
        EventKind::Exit,
        EventKind::Resource,
        EventKind::Log,
        EventKind::LogError,
        EventKind::Heartbeat,
        EventKind::SteerIssue,
        EventKind::SteerAck,
        EventKind::IoStat,
        EventKind::Progress,
        EventKind::Verdict,
        EventKind::Stage,
        EventKind::FaultInjected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Launched => "launched",
            EventKind::LaunchFailed => "launch_failed",
            EventKind::Exit => "exit",
            EventKind::Resource => "resource",
            EventKind::Log => "log",
            EventKind::LogError => "log_error",
            EventKind::Heartbeat => "heartbeat",
            EventKind::SteerIssue => "steer_issue",
            EventKind::SteerAck => "steer_ack",
            EventKind::IoStat => "io_stat",
            EventKind::Progress => "progress",
            EventKind::Verdict => "verdict",
            EventKind::Stage => "stage",
            EventKind::FaultInjected => "fault_injected",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

pub type Fields = BTreeMap<String, Value>;

/// One stored telemetry record. Immutable once appended.
///
/// On disk and on the wire an event is one compact JSON object per line with
/// the keys `seq`, `ts`, `mono`, `run`, `source`, `kind`, `fields`, `digest`
/// in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Dense per-run sequence number, starting at 1.
    pub seq: u64,
    /// Wall clock, UTC milliseconds.
    pub ts: i64,
    /// Monotonic nanoseconds assigned at append; strictly increasing with `seq`.
    pub mono: u64,
    pub run: String,
    pub source: String,
    pub kind: EventKind,
    #[serde(default)]
    pub fields: Fields,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub digest: String,
}

impl Event {
    pub fn field(&self, key: &str) -> Option<&Value> {
        self.fields.get(key)
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.fields.get(key).and_then(Value::as_str)
    }

    pub fn u64_field(&self, key: &str) -> Option<u64> {
        self.fields.get(key).and_then(Value::as_u64)
    }

    pub fn i64_field(&self, key: &str) -> Option<i64> {
        self.fields.get(key).and_then(Value::as_i64)
    }

    pub fn f64_field(&self, key: &str) -> Option<f64> {
        self.fields.get(key).and_then(Value::as_f64)
    }

    pub fn bool_field(&self, key: &str) -> Option<bool> {
        self.fields.get(key).and_then(Value::as_bool)
    }

    /// The record line, without trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }

    pub(crate) fn compute_digest(&self, prev: &str) -> String {
        let mut unsigned = self.clone();
        unsigned.digest.clear();
        let mut h = Sha256::new();
        h.update(prev.as_bytes());
        h.update(unsigned.to_line().as_bytes());
        hex::encode(&h.finalize()[..16])
    }
}

/// An event before the store has assigned its sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDraft {
    pub ts: i64,
    pub source: String,
    pub kind: EventKind,
    #[serde(default)]
    pub fields: Fields,
}

impl EventDraft {
    pub fn new(source: impl Into<String>, kind: EventKind) -> Self {
        Self {
            ts: wall_now_ms(),
            source: source.into(),
            kind,
            fields: Fields::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.fields.insert(key.into(), value.into());
        self
    }

    pub fn with_opt<V: Into<Value>>(self, key: impl Into<String>, value: Option<V>) -> Self {
        match value {
            Some(v) => self.with(key, v),
            None => self,
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.fields.insert(key.into(), value.into());
    }

    /// Payloads are flat: scalar values only.
    pub(crate) fn check_flat(&self) -> Result<(), String> {
        for (k, v) in &self.fields {
            if matches!(v, Value::Array(_) | Value::Object(_)) {
                return Err(format!("field `{k}` is not a scalar"));
            }
        }
        if self.source.is_empty() {
            return Err("empty source".into());
        }
        Ok(())
    }
}
