//! Application-side tracepoint emitter.
//!
//! `emit` never blocks the caller longer than the configured budget: records
//! go into a bounded local queue drained by a writer thread. When the queue
//! stays full past the budget the record is dropped and counted; the count
//! rides along on the next record that makes it out. Without a reachable
//! collector the writer falls back to `@TP` lines on stdout.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, SendTimeoutError, Sender};

use super::record::{encode, Downlink, Hello, Tracepoint, TracepointEvent, LOG_PREFIX};
use crate::clock::wall_now_ms;

#[derive(Debug, Clone)]
pub struct EmitterConfig {
    pub run_id: String,
    pub app: String,
    pub trace_addr: Option<String>,
    pub queue: usize,
    pub budget: Duration,
    pub reconnect_attempts: u32,
    pub reconnect_delay: Duration,
}

impl EmitterConfig {
    pub fn new(run_id: &str, app: &str, trace_addr: Option<String>) -> Self {
        Self {
            run_id: run_id.into(),
            app: app.into(),
            trace_addr,
            queue: 4096,
            budget: Duration::from_millis(1),
            reconnect_attempts: 40,
            reconnect_delay: Duration::from_millis(50),
        }
    }

    /// Reads `COPILOT_RUN_ID`, `COPILOT_APP` and `COPILOT_TRACE_ADDR`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self::new(
            &var(crate::env::RUN_ID).unwrap_or_else(|| "unmanaged".into()),
            &var(crate::env::APP).unwrap_or_else(|| "app".into()),
            var(crate::env::TRACE_ADDR),
        )
    }
}

pub struct Emitter {
    cfg: EmitterConfig,
    tx: Option<Sender<Vec<u8>>>,
    seq: AtomicU64,
    dropped: AtomicU64,
    downlink: Receiver<Downlink>,
    networked: Arc<AtomicBool>,
    writer: Option<JoinHandle<()>>,
}

impl Emitter {
    pub fn new(cfg: EmitterConfig) -> Self {
        let (tx, rx) = bounded::<Vec<u8>>(cfg.queue.max(1));
        let (down_tx, down_rx) = unbounded();
        let networked = Arc::new(AtomicBool::new(false));
        let initial = cfg
            .trace_addr
            .as_deref()
            .and_then(|addr| connect(addr, &cfg, 3, &down_tx));
        networked.store(initial.is_some(), Ordering::SeqCst);
        let writer = {
            let cfg = cfg.clone();
            let networked = networked.clone();
            std::thread::Builder::new()
                .name("tp-writer".into())
                .spawn(move || writer_loop(rx, initial, cfg, down_tx, networked))
                .expect("spawn tracepoint writer")
        };
        Self {
            cfg,
            tx: Some(tx),
            seq: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            downlink: down_rx,
            networked,
            writer: Some(writer),
        }
    }

    pub fn from_env() -> Self {
        Self::new(EmitterConfig::from_env())
    }

    pub fn is_networked(&self) -> bool {
        self.networked.load(Ordering::SeqCst)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Fire-and-forget. Returns false if the record was dropped.
    pub fn emit(&self, payload: Tracepoint) -> bool {
        let Some(tx) = &self.tx else { return false };
        let seq = self.seq.fetch_add(1, Ordering::Relaxed) + 1;
        let event = TracepointEvent {
            ts_wall: wall_now_ms(),
            seq,
            run_id: self.cfg.run_id.clone(),
            app_name: self.cfg.app.clone(),
            payload,
            dropped: self.dropped.load(Ordering::Relaxed),
        };
        match tx.send_timeout(encode(&event), self.cfg.budget) {
            Ok(()) => true,
            Err(SendTimeoutError::Timeout(_)) | Err(SendTimeoutError::Disconnected(_)) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                false
            }
        }
    }

    /// Steering commands and control messages received so far.
    pub fn poll_downlink(&self) -> Vec<Downlink> {
        self.downlink.try_iter().collect()
    }

    /// Flushes queued records, waiting at most `timeout`.
    pub fn close(&mut self, timeout: Duration) {
        self.tx = None;
        if let Some(handle) = self.writer.take() {
            let deadline = std::time::Instant::now() + timeout;
            while !handle.is_finished() && std::time::Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(2));
            }
            if handle.is_finished() {
                let _ = handle.join();
            }
        }
    }
}

impl Drop for Emitter {
    fn drop(&mut self) {
        self.close(Duration::from_secs(2));
    }
}

fn connect(
    addr: &str,
    cfg: &EmitterConfig,
    attempts: u32,
    down_tx: &Sender<Downlink>,
) -> Option<TcpStream> {
    for attempt in 0..attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(cfg.reconnect_delay);
        }
        let Ok(mut stream) = TcpStream::connect(addr) else {
            continue;
        };
        let _ = stream.set_nodelay(true);
        let mut hello = serde_json::to_vec(&Hello::new(&cfg.run_id, &cfg.app)).expect("hello");
        hello.push(b'\n');
        if stream.write_all(&hello).is_err() {
            continue;
        }
        if let Ok(read_half) = stream.try_clone() {
            let down_tx = down_tx.clone();
            let _ = std::thread::Builder::new()
                .name("tp-downlink".into())
                .spawn(move || {
                    for line in BufReader::new(read_half).lines() {
                        let Ok(line) = line else { break };
                        if let Ok(msg) = serde_json::from_str::<Downlink>(&line) {
                            if down_tx.send(msg).is_err() {
                                break;
                            }
                        }
                    }
                });
        }
        return Some(stream);
    }
    None
}

fn writer_loop(
    rx: Receiver<Vec<u8>>,
    mut stream: Option<TcpStream>,
    cfg: EmitterConfig,
    down_tx: Sender<Downlink>,
    networked: Arc<AtomicBool>,
) {
    for record in rx.iter() {
        let mut delivered = false;
        while let Some(s) = stream.as_mut() {
            if s.write_all(&record).is_ok() {
                delivered = true;
                break;
            }
            // Reconnect and resend; the collector drops a repeated seq.
            stream = cfg
                .trace_addr
                .as_deref()
                .and_then(|addr| connect(addr, &cfg, cfg.reconnect_attempts, &down_tx));
            networked.store(stream.is_some(), Ordering::SeqCst);
        }
        if !delivered {
            let text = String::from_utf8_lossy(&record);
            let mut out = std::io::stdout().lock();
            let _ = write!(out, "{LOG_PREFIX}{text}");
            let _ = out.flush();
        }
    }
    if let Some(s) = stream {
        let _ = s.shutdown(std::net::Shutdown::Write);
    }
}
