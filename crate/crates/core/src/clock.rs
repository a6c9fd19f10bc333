//! Wall and monotonic clocks.
//!
//! Wall-clock milliseconds are for display and the query axis only. All
//! ordering and latency arithmetic uses [`mono_now`], nanoseconds since a
//! process-wide anchor.

use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

static ANCHOR: OnceLock<Instant> = OnceLock::new();

pub fn mono_now() -> u64 {
    let anchor = *ANCHOR.get_or_init(Instant::now);
    anchor.elapsed().as_nanos() as u64
}

pub fn wall_now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// The `Instant` at which [`mono_now`] reads `mono`.
pub fn instant_at(mono: u64) -> Instant {
    let anchor = *ANCHOR.get_or_init(Instant::now);
    anchor + std::time::Duration::from_nanos(mono)
}

pub const NS_PER_MS: u64 = 1_000_000;

pub fn ms_to_ns(ms: u64) -> u64 {
    ms.saturating_mul(NS_PER_MS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mono_is_non_decreasing() {
        let a = mono_now();
        let b = mono_now();
        assert!(b >= a);
    }
}
