use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinSet;

use super::record::{decode, DecodeError, Downlink, Hello, Tracepoint, TracepointEvent};
use crate::store::{EventDraft, EventKind, EventSink, EventStore, Query, StoreError};

/// Outcome of offering one decoded record to the collector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceptance {
    Stored {
        store_seq: u64,
        out_of_order: bool,
        suspect: bool,
    },
    /// Same seq as the last accepted record for the source; not stored.
    Duplicate,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CollectorStats {
    pub accepted: u64,
    pub duplicates: u64,
    pub rejected: u64,
}

/// Transport-independent acceptance logic shared by the socket collector and
/// the `@TP` log-line path. Per-source seq bookkeeping is rebuilt from the
/// store, so a restarted collector never re-accepts a seq it already stored.
pub struct CollectorCore {
    sink: Arc<dyn EventSink>,
    store: Option<Arc<EventStore>>,
    run_id: String,
    last_seq: Mutex<HashMap<(String, String), u64>>,
    links: Mutex<HashMap<String, mpsc::UnboundedSender<Downlink>>>,
    accepted: AtomicU64,
    duplicates: AtomicU64,
    rejected: AtomicU64,
}

const TRACE_KINDS: [EventKind; 4] = [
    EventKind::Heartbeat,
    EventKind::SteerAck,
    EventKind::IoStat,
    EventKind::Progress,
];

impl CollectorCore {
    pub fn new(store: Arc<EventStore>, run_id: &str) -> Result<Arc<Self>, StoreError> {
        let log = store
            .run(run_id)?
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_string()))?;
        let mut last_seq = HashMap::new();
        for e in log.query(&Query::run(run_id).kinds(TRACE_KINDS)) {
            if e.bool_field("out_of_order") == Some(true) {
                continue;
            }
            if let (Some(seq), Some(run)) = (e.u64_field("tp_seq"), e.str_field("tp_run")) {
                let slot = last_seq
                    .entry((run.to_string(), e.source.clone()))
                    .or_insert(0);
                *slot = (*slot).max(seq);
            }
        }
        Ok(Self::build(log, Some(store), run_id, last_seq))
    }

    /// A core appending to an arbitrary sink, starting with no seq history.
    pub fn with_sink(sink: Arc<dyn EventSink>, run_id: &str) -> Arc<Self> {
        Self::build(sink, None, run_id, HashMap::new())
    }

    fn build(
        sink: Arc<dyn EventSink>,
        store: Option<Arc<EventStore>>,
        run_id: &str,
        last_seq: HashMap<(String, String), u64>,
    ) -> Arc<Self> {
        Arc::new(Self {
            sink,
            store,
            run_id: run_id.to_string(),
            last_seq: Mutex::new(last_seq),
            links: Mutex::new(HashMap::new()),
            accepted: AtomicU64::new(0),
            duplicates: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn store(&self) -> Option<&Arc<EventStore>> {
        self.store.as_ref()
    }

    /// `announced` is the (run, app) the connection introduced itself as;
    /// records disagreeing with it, or with this collector's run, are stored
    /// with `suspect = true`.
    pub fn ingest(
        &self,
        announced: Option<(&str, &str)>,
        ev: TracepointEvent,
        via: &str,
    ) -> Result<Acceptance, StoreError> {
        let suspect = ev.run_id != self.run_id
            || announced.is_some_and(|(run, app)| run != ev.run_id || app != ev.app_name);
        let key = (ev.run_id.clone(), ev.app_name.clone());
        let mut last = self.last_seq.lock().unwrap();
        let prev = last.get(&key).copied();
        if prev == Some(ev.seq) {
            self.duplicates.fetch_add(1, Ordering::Relaxed);
            return Ok(Acceptance::Duplicate);
        }
        let out_of_order = prev.is_some_and(|p| ev.seq < p);

        let mut draft = match &ev.payload {
            Tracepoint::Heartbeat { iteration } => {
                EventDraft::new(&ev.app_name, EventKind::Heartbeat).with("iteration", *iteration)
            }
            Tracepoint::SteerAck { command_id, status } => {
                EventDraft::new(&ev.app_name, EventKind::SteerAck)
                    .with("command_id", command_id.as_str())
                    .with("status", status.as_str())
            }
            Tracepoint::IoStat {
                channel,
                bytes,
                latency_us,
            } => EventDraft::new(&ev.app_name, EventKind::IoStat)
                .with("channel", channel.as_str())
                .with("bytes", *bytes)
                .with_opt("latency_us", *latency_us),
            Tracepoint::Progress { phase } => {
                EventDraft::new(&ev.app_name, EventKind::Progress).with("phase", phase.as_str())
            }
        };
        draft.set("tp_seq", ev.seq);
        draft.set("tp_ts", ev.ts_wall);
        draft.set("tp_run", ev.run_id.as_str());
        draft.set("via", via);
        if ev.dropped > 0 {
            draft.set("dropped", ev.dropped);
        }
        if out_of_order {
            draft.set("out_of_order", true);
        }
        if suspect {
            draft.set("suspect", true);
        }
        let store_seq = self.sink.append(draft)?;
        if !out_of_order {
            last.insert(key, ev.seq);
        }
        self.accepted.fetch_add(1, Ordering::Relaxed);
        Ok(Acceptance::Stored {
            store_seq,
            out_of_order,
            suspect,
        })
    }

    /// Forgets the seq history of `app`. Called before each launch, since a
    /// new process numbers its records from 1 again.
    pub fn reset_source(&self, app: &str) {
        self.last_seq.lock().unwrap().retain(|(_, a), _| a != app);
    }

    pub fn note_reject(&self, err: &DecodeError, via: &str) {
        self.rejected.fetch_add(1, Ordering::Relaxed);
        tracing::debug!(run = %self.run_id, via, reason = err.reason(), "rejected tracepoint record: {err}");
    }

    pub fn stats(&self) -> CollectorStats {
        CollectorStats {
            accepted: self.accepted.load(Ordering::Relaxed),
            duplicates: self.duplicates.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
        }
    }

    /// Queues a message for the application's live connection. False when
    /// the application has no connection.
    pub fn send(&self, app: &str, msg: Downlink) -> bool {
        let mut links = self.links.lock().unwrap();
        match links.get(app) {
            Some(tx) if tx.send(msg).is_ok() => true,
            Some(_) => {
                links.remove(app);
                false
            }
            None => false,
        }
    }

    pub fn connected(&self, app: &str) -> bool {
        self.links
            .lock()
            .unwrap()
            .get(app)
            .is_some_and(|tx| !tx.is_closed())
    }

    fn register(&self, app: &str, tx: mpsc::UnboundedSender<Downlink>) {
        self.links.lock().unwrap().insert(app.to_string(), tx);
    }

    fn unregister(&self, app: &str, tx: &mpsc::UnboundedSender<Downlink>) {
        let mut links = self.links.lock().unwrap();
        if links.get(app).is_some_and(|cur| cur.same_channel(tx)) {
            links.remove(app);
        }
    }
}

/// Socket front end: accepts many emitter connections on one address.
pub struct Collector {
    pub addr: std::net::SocketAddr,
    core: Arc<CollectorCore>,
    tasks: JoinSet<()>,
}

impl Collector {
    pub async fn bind(core: Arc<CollectorCore>, addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let mut tasks = JoinSet::new();
        let accept_core = core.clone();
        tasks.spawn(async move {
            let mut conns = JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => match accepted {
                        Ok((stream, _)) => {
                            let _ = stream.set_nodelay(true);
                            conns.spawn(serve_conn(accept_core.clone(), stream));
                        }
                        Err(_) => break,
                    },
                    Some(_) = conns.join_next(), if !conns.is_empty() => {}
                }
            }
        });
        Ok(Self { addr, core, tasks })
    }

    pub fn core(&self) -> &Arc<CollectorCore> {
        &self.core
    }

    /// Stops listening and drops every open connection.
    pub async fn shutdown(mut self) {
        self.tasks.shutdown().await;
    }
}

async fn serve_conn(core: Arc<CollectorCore>, stream: TcpStream) {
    let (rd, wr) = stream.into_split();
    let mut wr = Some(wr);
    let mut rd = BufReader::new(rd);
    let mut buf = Vec::new();
    let mut announced: Option<(String, String)> = None;
    let mut link: Option<mpsc::UnboundedSender<Downlink>> = None;
    let mut writer: Option<tokio::task::JoinHandle<()>> = None;
    let mut first = true;

    loop {
        buf.clear();
        match rd.read_until(b'\n', &mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        if first {
            first = false;
            if let Ok(h) = serde_json::from_slice::<Hello>(buf.trim_ascii_end()) {
                let (tx, mut rx) = mpsc::unbounded_channel::<Downlink>();
                core.register(&h.app, tx.clone());
                link = Some(tx);
                let Some(mut wr_half) = wr.take() else {
                    continue;
                };
                writer = Some(tokio::spawn(async move {
                    while let Some(msg) = rx.recv().await {
                        let mut line = serde_json::to_vec(&msg).expect("downlink serializes");
                        line.push(b'\n');
                        if wr_half.write_all(&line).await.is_err() {
                            break;
                        }
                    }
                }));
                announced = Some((h.run, h.app));
                continue;
            }
        }
        let ann = announced.as_ref().map(|(r, a)| (r.as_str(), a.as_str()));
        match decode(&buf) {
            Ok(ev) => {
                if core.ingest(ann, ev, "socket").is_err() {
                    break;
                }
            }
            Err(e) => core.note_reject(&e, "socket"),
        }
    }
    if let (Some((_, app)), Some(tx)) = (&announced, &link) {
        core.unregister(app, tx);
    }
    if let Some(w) = writer {
        w.abort();
    }
}
