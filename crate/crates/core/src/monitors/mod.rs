//! Health monitors: heartbeat stall, steering round-trip and channel
//! stall/throughput.
//!
//! The functions here are pure. [`Evaluator`] applies them at fixed,
//! quantized tick times over a store event prefix, which is what makes a
//! stored run replayable verdict-for-verdict.

mod evaluator;
mod replay;

use serde::{Deserialize, Serialize};

use crate::clock::ms_to_ns;
use crate::tracepoint::AckStatus;

pub use evaluator::{AppWatch, ChannelWatch, SegmentMonitor};
pub use evaluator::{Evaluator, MonitorConfig, Verdict, MONITOR_SOURCE};
pub use replay::{replay_run, replay_verdicts, stored_verdicts, ReplayError, ReplayReport};

pub const DEFAULT_GRACE_MULTIPLIER: u32 = 2;
pub const DEFAULT_TICK_MS: u64 = 100;
pub const DEFAULT_THROUGHPUT_WINDOW_MS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Starting,
    Healthy,
    Stalled,
    Dead,
    Unknown,
}

impl HealthStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            HealthStatus::Starting => "starting",
            HealthStatus::Healthy => "healthy",
            HealthStatus::Stalled => "stalled",
            HealthStatus::Dead => "dead",
            HealthStatus::Unknown => "unknown",
        }
    }
}

/// Liveness from heartbeat timing. All times are monotonic nanoseconds.
///
/// Before the first beat the application is `starting` for one grace
/// window after launch. A beat keeps it `healthy` for
/// `grace_multiplier * interval_ms`; past that it is `stalled`. Exit-based
/// `dead` is decided elsewhere.
pub fn heartbeat_status(
    last_beat: Option<u64>,
    started_at: u64,
    now: u64,
    interval_ms: u64,
    grace_multiplier: u32,
) -> HealthStatus {
    let window = ms_to_ns(interval_ms).saturating_mul(grace_multiplier as u64);
    match last_beat {
        None if now.saturating_sub(started_at) < window => HealthStatus::Starting,
        None => HealthStatus::Stalled,
        Some(t) if now.saturating_sub(t) <= window => HealthStatus::Healthy,
        Some(_) => HealthStatus::Stalled,
    }
}

/// Monotonic time at which `heartbeat_status` turns `stalled` absent new beats.
pub fn heartbeat_deadline(
    last_beat: Option<u64>,
    started_at: u64,
    interval_ms: u64,
    grace_multiplier: u32,
) -> u64 {
    let window = ms_to_ns(interval_ms).saturating_mul(grace_multiplier as u64);
    match last_beat {
        None => started_at.saturating_add(window),
        Some(t) => t.saturating_add(window).saturating_add(1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringStatus {
    Pending,
    Applied,
    Rejected,
    TimedOut,
}

impl SteeringStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SteeringStatus::Pending => "pending",
            SteeringStatus::Applied => "applied",
            SteeringStatus::Rejected => "rejected",
            SteeringStatus::TimedOut => "timed_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringRecord {
    pub command_id: String,
    pub issued_at: u64,
    pub delivered_at: Option<u64>,
    pub acked_at: Option<u64>,
    pub status: SteeringStatus,
    /// Acks received after the first one.
    pub duplicate_acks: usize,
}

impl SteeringRecord {
    pub fn latency_ns(&self) -> Option<u64> {
        self.acked_at.map(|a| a - self.issued_at)
    }
}

/// What the store holds about one steering command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SteerObservation {
    pub command_id: String,
    pub issued_at: u64,
    pub delivered: bool,
    /// Acks in arrival order: (monotonic time, status).
    pub acks: Vec<(u64, AckStatus)>,
}

/// The first ack within the timeout decides the outcome; later acks only
/// count as duplicates. An ack arriving after the timeout does not revive a
/// timed-out command.
pub fn steering_roundtrip(obs: &SteerObservation, timeout_ms: u64, now: u64) -> SteeringRecord {
    let timeout = ms_to_ns(timeout_ms);
    let deadline = obs.issued_at.saturating_add(timeout);
    let first = obs
        .acks
        .first()
        .filter(|(t, _)| *t <= deadline && *t <= now);
    let (status, acked_at) = match first {
        Some((t, AckStatus::Applied)) => (SteeringStatus::Applied, Some(*t)),
        Some((t, AckStatus::Rejected)) => (SteeringStatus::Rejected, Some(*t)),
        None if now >= deadline => (SteeringStatus::TimedOut, None),
        None => (SteeringStatus::Pending, None),
    };
    let seen = obs.acks.iter().filter(|(t, _)| *t <= now).count();
    SteeringRecord {
        command_id: obs.command_id.clone(),
        issued_at: obs.issued_at,
        delivered_at: obs.delivered.then_some(obs.issued_at),
        acked_at,
        status,
        duplicate_acks: if acked_at.is_some() {
            seen.saturating_sub(1)
        } else {
            0
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelReading {
    pub status: HealthStatus,
    /// Bytes per second over the trailing window.
    pub throughput: f64,
}

/// Channel health from its io_stat history `(monotonic time, bytes)`,
/// ordered by time. `watch_since` is when both endpoints were up.
pub fn channel_status(
    stats: &[(u64, u64)],
    watch_since: u64,
    stall_timeout_ms: u64,
    window_ms: u64,
    now: u64,
) -> ChannelReading {
    let timeout = ms_to_ns(stall_timeout_ms);
    let window = ms_to_ns(window_ms).max(1);
    let seen: Vec<&(u64, u64)> = stats.iter().filter(|(t, _)| *t <= now).collect();
    let status = match seen.last() {
        Some((t, _)) if now - t <= timeout => HealthStatus::Healthy,
        Some(_) => HealthStatus::Stalled,
        None if now.saturating_sub(watch_since) < timeout => HealthStatus::Starting,
        None => HealthStatus::Stalled,
    };
    let lo = now.saturating_sub(window);
    let bytes: u64 = seen.iter().filter(|(t, _)| *t > lo).map(|(_, b)| *b).sum();
    ChannelReading {
        status,
        throughput: bytes as f64 / (window as f64 / 1e9),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000_000;

    #[test]
    fn heartbeat_examples() {
        let now = 10_000 * MS;
        assert_eq!(
            heartbeat_status(Some(now - 800 * MS), 0, now, 1000, 2),
            HealthStatus::Healthy
        );
        assert_eq!(
            heartbeat_status(Some(now - 2100 * MS), 0, now, 1000, 2),
            HealthStatus::Stalled
        );
        assert_eq!(
            heartbeat_status(None, now - 500 * MS, now, 1000, 2),
            HealthStatus::Starting
        );
        assert_eq!(
            heartbeat_status(None, now - 2000 * MS, now, 1000, 2),
            HealthStatus::Stalled
        );
        // boundary: exactly one window after the beat is still healthy
        assert_eq!(
            heartbeat_status(Some(now - 2000 * MS), 0, now, 1000, 2),
            HealthStatus::Healthy
        );
    }

    #[test]
    fn deadline_matches_status_boundary() {
        for last in [None, Some(5 * MS)] {
            let d = heartbeat_deadline(last, MS, 200, 2);
            assert_ne!(
                heartbeat_status(last, MS, d - 1, 200, 2),
                HealthStatus::Stalled
            );
            assert_eq!(heartbeat_status(last, MS, d, 200, 2), HealthStatus::Stalled);
        }
    }

    #[test]
    fn stalled_never_reverts_without_a_beat() {
        let last = Some(100 * MS);
        let mut was_stalled = false;
        for now in (100..5000).map(|t| t * MS) {
            let s = heartbeat_status(last, 0, now, 200, 2);
            if was_stalled {
                assert_eq!(s, HealthStatus::Stalled);
            }
            was_stalled |= s == HealthStatus::Stalled;
        }
        assert!(was_stalled);
    }

    fn obs(acks: Vec<(u64, AckStatus)>) -> SteerObservation {
        SteerObservation {
            command_id: "c1".into(),
            issued_at: 0,
            delivered: true,
            acks,
        }
    }

    #[test]
    fn steering_applied_with_latency() {
        let r = steering_roundtrip(&obs(vec![(40 * MS, AckStatus::Applied)]), 1000, 100 * MS);
        assert_eq!(r.status, SteeringStatus::Applied);
        assert_eq!(r.latency_ns(), Some(40 * MS));
    }

    #[test]
    fn steering_times_out() {
        let o = obs(vec![]);
        assert_eq!(
            steering_roundtrip(&o, 1000, 999 * MS).status,
            SteeringStatus::Pending
        );
        let r = steering_roundtrip(&o, 1000, 1000 * MS);
        assert_eq!(r.status, SteeringStatus::TimedOut);
        assert_eq!(r.acked_at, None);
        // a late ack does not revive it
        let late = obs(vec![(1500 * MS, AckStatus::Applied)]);
        let r = steering_roundtrip(&late, 1000, 2000 * MS);
        assert_eq!(r.status, SteeringStatus::TimedOut);
        assert_eq!(r.acked_at, None);
    }

    #[test]
    fn steering_first_ack_wins() {
        let o = obs(vec![
            (10 * MS, AckStatus::Applied),
            (20 * MS, AckStatus::Rejected),
        ]);
        let r = steering_roundtrip(&o, 1000, 30 * MS);
        assert_eq!(r.status, SteeringStatus::Applied);
        assert_eq!(r.duplicate_acks, 1);
    }

    #[test]
    fn channel_throughput_over_window() {
        const MIB: u64 = 1 << 20;
        // 1 MiB every 100 ms for 3 s
        let stats: Vec<(u64, u64)> = (1..=30).map(|i| (i * 100 * MS, MIB)).collect();
        let r = channel_status(&stats, 0, 500, 1000, 3000 * MS);
        assert_eq!(r.status, HealthStatus::Healthy);
        let expected = 10.0 * MIB as f64;
        assert!(
            (r.throughput - expected).abs() <= MIB as f64,
            "{}",
            r.throughput
        );
    }

    #[test]
    fn channel_stalls_without_traffic() {
        assert_eq!(
            channel_status(&[], 0, 500, 1000, 499 * MS).status,
            HealthStatus::Starting
        );
        assert_eq!(
            channel_status(&[], 0, 500, 1000, 500 * MS).status,
            HealthStatus::Stalled
        );
        assert_eq!(
            channel_status(&[(MS, 10)], 0, 500, 1000, 502 * MS).status,
            HealthStatus::Stalled
        );
    }

    #[test]
    fn single_event_throughput_is_bytes_over_window() {
        let r = channel_status(&[(100 * MS, 4096)], 0, 500, 1000, 200 * MS);
        assert_eq!(r.status, HealthStatus::Healthy);
        assert!((r.throughput - 4096.0).abs() < 1e-9);
    }
}
