//! The mock application loop behind `copilot-mock`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use super::behavior::{Direction, MockBehavior, MockChannel};
use crate::tracepoint::{AckStatus, Downlink, Emitter, Tracepoint};

/// Exit code when a channel peer cannot be reached.
pub const CHANNEL_ERROR_EXIT: i32 = 70;
/// Exit code for an unreadable or invalid behavior file.
pub const BEHAVIOR_ERROR_EXIT: i32 = 64;

const CONNECT_ATTEMPTS: u32 = 300;
const CONNECT_DELAY: Duration = Duration::from_millis(10);

fn socket_path(ch: &MockChannel) -> PathBuf {
    match &ch.peer {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = std::env::var(crate::env::CHANNEL_DIR).unwrap_or_else(|_| ".".into());
            PathBuf::from(dir).join(format!("{}.sock", ch.name))
        }
    }
}

fn env_factor(key: &str) -> f64 {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .unwrap_or(1.0)
}

fn drain(mut s: UnixStream) {
    let mut buf = [0u8; 64 * 1024];
    while matches!(s.read(&mut buf), Ok(n) if n > 0) {}
}

fn connect(path: &PathBuf) -> Option<UnixStream> {
    for _ in 0..CONNECT_ATTEMPTS {
        if let Ok(s) = UnixStream::connect(path) {
            return Some(s);
        }
        std::thread::sleep(CONNECT_DELAY);
    }
    None
}

fn accept_one(l: &UnixListener) -> Option<UnixStream> {
    l.set_nonblocking(true).ok()?;
    for _ in 0..CONNECT_ATTEMPTS {
        match l.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false).ok()?;
                return Some(s);
            }
            Err(_) => std::thread::sleep(CONNECT_DELAY),
        }
    }
    None
}

fn bind(path: &PathBuf) -> std::io::Result<UnixListener> {
    let _ = std::fs::remove_file(path);
    UnixListener::bind(path)
}

struct Outbound {
    name: String,
    stream: Option<UnixStream>,
    frame: Vec<u8>,
}

/// Runs the behavior to completion and returns the process exit code.
pub fn run_mock(b: &MockBehavior, mut emitter: Emitter) -> i32 {
    let size_factor = env_factor(crate::env::SCALE) * env_factor(crate::env::NODES);

    // Listeners first, then outbound connections, then pending accepts, so
    // no two mocks can wait on each other.
    let mut listeners = Vec::new();
    for ch in &b.channels {
        if matches!(ch.direction, Direction::Recv | Direction::DuplexListen) {
            match bind(&socket_path(ch)) {
                Ok(l) => listeners.push((ch, l)),
                Err(e) => {
                    eprintln!("channel {}: cannot listen: {e}", ch.name);
                    return CHANNEL_ERROR_EXIT;
                }
            }
        }
    }
    let mut outbound = Vec::new();
    let mut steer_channels = Vec::new();
    let frame_for = |ch: &MockChannel| {
        let n = (ch.bytes_per_step as f64 * size_factor).round() as u32;
        let mut f = n.to_le_bytes().to_vec();
        f.resize(4 + n as usize, 0x5a);
        f
    };
    for ch in &b.channels {
        match ch.direction {
            Direction::Send | Direction::DuplexConnect => {
                let Some(s) = connect(&socket_path(ch)) else {
                    eprintln!("channel {}: peer unreachable", ch.name);
                    return CHANNEL_ERROR_EXIT;
                };
                if ch.direction == Direction::DuplexConnect {
                    if let Ok(r) = s.try_clone() {
                        std::thread::spawn(move || drain(r));
                    }
                }
                let _ = s.set_write_timeout(Some(Duration::from_secs(1)));
                outbound.push(Outbound {
                    name: ch.name.clone(),
                    stream: Some(s),
                    frame: frame_for(ch),
                });
            }
            Direction::Steer => steer_channels.push(ch.name.clone()),
            _ => {}
        }
    }
    for (ch, l) in listeners {
        if ch.direction == Direction::DuplexListen {
            let Some(s) = accept_one(&l) else {
                eprintln!("channel {}: peer never connected", ch.name);
                return CHANNEL_ERROR_EXIT;
            };
            if let Ok(r) = s.try_clone() {
                std::thread::spawn(move || drain(r));
            }
            let _ = s.set_write_timeout(Some(Duration::from_secs(1)));
            outbound.push(Outbound {
                name: ch.name.clone(),
                stream: Some(s),
                frame: frame_for(ch),
            });
        } else {
            std::thread::spawn(move || {
                for s in l.incoming().flatten() {
                    std::thread::spawn(move || drain(s));
                }
            });
        }
    }

    let mut log: Box<dyn Write> = match &b.log_file {
        Some(p) => match OpenOptions::new().create(true).append(true).open(p) {
            Ok(f) => Box::new(f),
            Err(e) => {
                eprintln!("cannot open log file {p}: {e}");
                return BEHAVIOR_ERROR_EXIT;
            }
        },
        None => Box::new(std::io::stdout()),
    };

    let handlers: BTreeSet<&str> = b.steering_handlers.iter().map(String::as_str).collect();
    let mut rate = 1.0f64;
    let mut hb_silenced = false;
    let mut silenced: BTreeSet<String> = BTreeSet::new();
    let start = Instant::now();
    let planned_exit = |step: u64| {
        b.misbehavior
            .exit_at_step
            .is_some_and(|s| s == step)
            .then_some(if b.exit_code != 0 { b.exit_code } else { 1 })
    };

    let mut code = b.exit_code;
    'steps: for step in 1..=b.iterations {
        let mut steer_bytes = 0u64;
        for msg in emitter.poll_downlink() {
            match msg {
                Downlink::Steer {
                    command_id,
                    verb,
                    args,
                } => {
                    steer_bytes += serde_json::to_vec(&(&command_id, &verb, &args))
                        .map_or(0, |v| v.len() as u64);
                    if b.misbehavior.ignore_steering {
                        continue;
                    }
                    let status = match apply(&handlers, &verb, &args) {
                        Some(r) => {
                            if let Some(r) = r {
                                rate = r;
                            }
                            AckStatus::Applied
                        }
                        None => AckStatus::Rejected,
                    };
                    emitter.emit(Tracepoint::SteerAck { command_id, status });
                }
                Downlink::HeartbeatSilence => hb_silenced = true,
                Downlink::ChannelSilence { channel } => {
                    silenced.insert(channel);
                }
                Downlink::Exit { code: c } => {
                    code = c;
                    break 'steps;
                }
            }
        }
        if let Some(c) = planned_exit(step) {
            code = c;
            break;
        }

        let step_time = Duration::from_secs_f64(b.step_ms as f64 / 1000.0 / rate);
        if b.busy {
            let until = Instant::now() + step_time;
            let mut x = 0u64;
            while Instant::now() < until {
                x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(1));
            }
        } else {
            std::thread::sleep(step_time);
        }

        for out in &mut outbound {
            if silenced.contains(&out.name) {
                continue;
            }
            let Some(s) = out.stream.as_mut() else {
                continue;
            };
            let t0 = Instant::now();
            if s.write_all(&out.frame).is_err() {
                out.stream = None;
                continue;
            }
            emitter.emit(Tracepoint::IoStat {
                channel: out.name.clone(),
                bytes: (out.frame.len() - 4) as u64,
                latency_us: Some(t0.elapsed().as_micros() as u64),
            });
        }
        for name in &steer_channels {
            if !silenced.contains(name) {
                emitter.emit(Tracepoint::IoStat {
                    channel: name.clone(),
                    bytes: steer_bytes,
                    latency_us: None,
                });
            }
        }
        let beats_stopped =
            hb_silenced || b.misbehavior.silence_after_step.is_some_and(|s| step > s);
        if b.heartbeat_every > 0 && step % b.heartbeat_every == 0 && !beats_stopped {
            emitter.emit(Tracepoint::Heartbeat { iteration: step });
        }
        let _ = writeln!(log, "step={step} t={}", start.elapsed().as_millis());
    }
    let _ = log.flush();
    emitter.close(Duration::from_secs(2));
    code
}

/// `Some(new_rate)` when the command is accepted.
fn apply(
    handlers: &BTreeSet<&str>,
    verb: &str,
    args: &BTreeMap<String, String>,
) -> Option<Option<f64>> {
    if !handlers.contains(verb) {
        return None;
    }
    if verb == "set_rate" {
        let v = args
            .get("value")?
            .parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0)?;
        return Some(Some(v));
    }
    Some(None)
}
