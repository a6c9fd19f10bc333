//! Resource readings from `/proc`.

use serde::{Deserialize, Serialize};

use crate::clock::mono_now;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub t_mono: u64,
    pub rss_bytes: u64,
    /// Peak resident set so far, as reported by the kernel.
    pub peak_rss_bytes: u64,
    /// User plus system CPU time, cumulative.
    pub cpu_time_ms: u64,
    pub open_fds: Option<u64>,
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

fn clock_ticks() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as u64
    } else {
        100
    }
}

/// Reads the current resource usage of `pid`. `None` once the process has
/// exited (including the zombie state before it is reaped).
pub fn sample_resources(pid: u32) -> Option<ResourceSample> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name is parenthesised and may contain spaces.
    let rest = &stat[stat.rfind(')')? + 1..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    if f.first().is_none_or(|s| *s == "Z" || *s == "X") {
        return None;
    }
    // Fields after the name start at index 3 in proc(5) numbering.
    let utime: u64 = f.get(11)?.parse().ok()?;
    let stime: u64 = f.get(12)?.parse().ok()?;
    let rss_pages: u64 = f.get(21)?.parse().ok()?;
    let rss_bytes = rss_pages * page_size();

    let peak_rss_bytes = std::fs::read_to_string(format!("/proc/{pid}/status"))
        .ok()
        .and_then(|s| {
            s.lines()
                .find_map(|l| l.strip_prefix("VmHWM:"))
                .and_then(|v| v.split_whitespace().next()?.parse::<u64>().ok())
        })
        .map_or(rss_bytes, |kb| (kb * 1024).max(rss_bytes));

    let open_fds = std::fs::read_dir(format!("/proc/{pid}/fd"))
        .ok()
        .map(|d| d.count() as u64);

    Some(ResourceSample {
        t_mono: mono_now(),
        rss_bytes,
        peak_rss_bytes,
        cpu_time_ms: (utime + stime) * 1000 / clock_ticks(),
        open_fds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn own_process_has_resident_memory() {
        let s = sample_resources(std::process::id()).unwrap();
        assert!(s.rss_bytes > 0);
        assert!(s.peak_rss_bytes >= s.rss_bytes);
        assert!(s.open_fds.unwrap() > 0);
    }

    #[test]
    fn missing_process_gives_no_sample() {
        assert_eq!(sample_resources(u32::MAX - 1), None);
    }
}
