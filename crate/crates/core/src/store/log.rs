use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, RwLock};

use tokio::sync::mpsc;

use super::subscribe::{SubSlot, Subscription};
use super::{Event, EventDraft, EventFilter, EventKind, Query, StoreError};
use crate::clock::mono_now;

pub const EVENTS_FILE: &str = "events.ndj";
pub const META_FILE: &str = "meta";

#[derive(Default)]
struct Index {
    by_kind: HashMap<EventKind, Vec<u64>>,
    by_source: HashMap<String, Vec<u64>>,
}

impl Index {
    fn add(&mut self, e: &Event) {
        self.by_kind.entry(e.kind).or_default().push(e.seq);
        self.by_source
            .entry(e.source.clone())
            .or_default()
            .push(e.seq);
    }
}

struct Writer {
    file: Option<File>,
    closed: bool,
    last_digest: String,
    last_mono: u64,
    subscribers: Vec<SubSlot>,
}

/// The append log of one run: an in-memory copy of every event plus the
/// optional backing file.
pub struct RunLog {
    id: String,
    dir: Option<PathBuf>,
    writer: Mutex<Writer>,
    events: RwLock<Vec<Arc<Event>>>,
    index: RwLock<Index>,
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io(format!("{}: {e}", path.display()))
}

impl RunLog {
    pub(crate) fn new(id: &str, dir: Option<PathBuf>, meta: &str) -> Result<Self, StoreError> {
        let file = match &dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
                let meta_path = d.join(META_FILE);
                std::fs::write(&meta_path, meta).map_err(|e| io_err(&meta_path, e))?;
                let path = d.join(EVENTS_FILE);
                Some(
                    OpenOptions::new()
                        .create_new(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| io_err(&path, e))?,
                )
            }
            None => None,
        };
        Ok(Self::with_events(id, dir, file, Vec::new()))
    }

    fn with_events(id: &str, dir: Option<PathBuf>, file: Option<File>, events: Vec<Event>) -> Self {
        let mut index = Index::default();
        for e in &events {
            index.add(e);
        }
        let last_digest = events.last().map(|e| e.digest.clone()).unwrap_or_default();
        let last_mono = events.last().map_or(0, |e| e.mono);
        Self {
            id: id.to_string(),
            dir,
            writer: Mutex::new(Writer {
                file,
                closed: false,
                last_digest,
                last_mono,
                subscribers: Vec::new(),
            }),
            events: RwLock::new(events.into_iter().map(Arc::new).collect()),
            index: RwLock::new(index),
        }
    }

    /// Opens a run directory, discarding a torn trailing record left by a
    /// crash mid-append. Any complete record that fails verification is an
    /// integrity error.
    pub(crate) fn open(id: &str, dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(EVENTS_FILE);
        let mut bytes = Vec::new();
        File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| io_err(&path, e))?;
        let (events, valid_len) = verify_records(id, &bytes)?;
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        if valid_len < bytes.len() {
            file.set_len(valid_len as u64)
                .map_err(|e| io_err(&path, e))?;
        }
        Ok(Self::with_events(
            id,
            Some(dir.to_path_buf()),
            Some(file),
            events,
        ))
    }

    pub(crate) fn import(
        id: &str,
        dir: Option<PathBuf>,
        meta: &str,
        bytes: &[u8],
    ) -> Result<Self, StoreError> {
        let (events, valid_len) = verify_records(id, bytes)?;
        if valid_len != bytes.len() {
            return Err(StoreError::Integrity {
                line: events.len() + 1,
                reason: "truncated record".into(),
            });
        }
        let log = Self::new(id, dir, meta)?;
        {
            let mut w = log.writer.lock().unwrap();
            if let Some(f) = w.file.as_mut() {
                f.write_all(bytes)
                    .map_err(|e| StoreError::Io(e.to_string()))?;
            }
            w.last_digest = events.last().map(|e| e.digest.clone()).unwrap_or_default();
            w.last_mono = events.last().map_or(0, |e| e.mono);
        }
        let mut index = log.index.write().unwrap();
        let mut stored = log.events.write().unwrap();
        for e in events {
            index.add(&e);
            stored.push(Arc::new(e));
        }
        drop(stored);
        drop(index);
        Ok(log)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn meta(&self) -> Option<String> {
        self.dir
            .as_ref()
            .and_then(|d| std::fs::read_to_string(d.join(META_FILE)).ok())
    }

    pub fn len(&self) -> usize {
        self.events.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last_seq(&self) -> u64 {
        self.len() as u64
    }

    pub fn append(&self, draft: EventDraft) -> Result<u64, StoreError> {
        draft.check_flat().map_err(StoreError::InvalidEvent)?;
        let mut w = self.writer.lock().unwrap();
        if w.closed {
            return Err(StoreError::Closed);
        }
        let seq = self.events.read().unwrap().len() as u64 + 1;
        let mono = mono_now().max(w.last_mono + 1);
        let mut event = Event {
            seq,
            ts: draft.ts,
            mono,
            run: self.id.clone(),
            source: draft.source,
            kind: draft.kind,
            fields: draft.fields,
            digest: String::new(),
        };
        event.digest = event.compute_digest(&w.last_digest);
        if let Some(f) = w.file.as_mut() {
            let mut line = event.to_line();
            line.push('\n');
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| StoreError::Io(e.to_string()))?;
        }
        w.last_digest = event.digest.clone();
        w.last_mono = mono;
        let event = Arc::new(event);
        self.index.write().unwrap().add(&event);
        self.events.write().unwrap().push(event.clone());
        w.subscribers.retain(|s| s.offer(&event));
        Ok(seq)
    }

    /// Rejects further appends and ends every live subscription.
    pub fn close(&self) {
        let mut w = self.writer.lock().unwrap();
        w.closed = true;
        w.subscribers.clear();
        w.file = None;
    }

    pub fn is_closed(&self) -> bool {
        self.writer.lock().unwrap().closed
    }

    pub fn get(&self, seq: u64) -> Option<Arc<Event>> {
        let events = self.events.read().unwrap();
        seq.checked_sub(1)
            .and_then(|i| events.get(i as usize).cloned())
    }

    pub fn all(&self) -> Vec<Arc<Event>> {
        self.events.read().unwrap().clone()
    }

    /// Events after `seq`, read together with a monotonic timestamp taken
    /// while no append is in flight: every event with `mono <= now` is in
    /// the returned slice.
    pub fn stable_since(&self, seq: u64) -> (Vec<Arc<Event>>, u64) {
        let w = self.writer.lock().unwrap();
        let now = mono_now().max(w.last_mono);
        let events = self.events.read().unwrap();
        let start = (seq as usize).min(events.len());
        (events[start..].to_vec(), now)
    }

    pub fn query(&self, q: &Query) -> Vec<Event> {
        let events = self.events.read().unwrap();
        let index = self.index.read().unwrap();
        let after = q.seq_after.unwrap_or(0);
        let limit = q.limit.unwrap_or(usize::MAX);

        let candidates = |lists: Vec<&Vec<u64>>| -> Vec<u64> {
            let mut out: Vec<u64> = lists.into_iter().flatten().copied().collect();
            out.sort_unstable();
            out
        };
        let by_kind = q
            .filter
            .kinds
            .as_ref()
            .map(|ks| candidates(ks.iter().filter_map(|k| index.by_kind.get(k)).collect()));
        let by_source = q
            .filter
            .sources
            .as_ref()
            .map(|ss| candidates(ss.iter().filter_map(|s| index.by_source.get(s)).collect()));
        let seqs: Option<Vec<u64>> = match (by_kind, by_source) {
            (Some(a), Some(b)) => Some(if a.len() <= b.len() { a } else { b }),
            (a, b) => a.or(b),
        };

        let mut out = Vec::new();
        match seqs {
            Some(list) => {
                let start = list.partition_point(|&s| s <= after);
                for &s in &list[start..] {
                    let e = &events[(s - 1) as usize];
                    if q.matches(e) {
                        out.push((**e).clone());
                        if out.len() >= limit {
                            break;
                        }
                    }
                }
            }
            None => {
                for e in events.iter().skip(after as usize) {
                    if q.matches(e) {
                        out.push((**e).clone());
                        if out.len() >= limit {
                            break;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn subscribe(
        &self,
        filter: EventFilter,
        capacity: usize,
    ) -> Result<Subscription, StoreError> {
        let mut w = self.writer.lock().unwrap();
        if w.closed {
            return Err(StoreError::Closed);
        }
        let (tx, rx) = mpsc::channel(capacity.max(1));
        let overflow = Arc::new(AtomicBool::new(false));
        w.subscribers.push(SubSlot {
            filter,
            tx,
            overflow: overflow.clone(),
        });
        let start_after = self.events.read().unwrap().len() as u64;
        Ok(Subscription::new(rx, overflow, start_after))
    }

    pub fn export(&self, out: &mut dyn Write) -> Result<usize, StoreError> {
        let events = self.all();
        for e in &events {
            writeln!(out, "{}", e.to_line()).map_err(|e| StoreError::Io(e.to_string()))?;
        }
        Ok(events.len())
    }
}

/// Parses and verifies a record log, returning the verified events and the
/// byte length they occupy. A trailing fragment without newline is left
/// out of the valid length.
pub fn verify_records(run_id: &str, bytes: &[u8]) -> Result<(Vec<Event>, usize), StoreError> {
    let mut events = Vec::new();
    let mut prev = String::new();
    let mut offset = 0;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[offset..offset + nl];
        let lineno = events.len() + 1;
        let bad = |reason: String| StoreError::Integrity {
            line: lineno,
            reason,
        };
        let event: Event = serde_json::from_slice(line).map_err(|e| bad(e.to_string()))?;
        if event.seq != lineno as u64 {
            return Err(bad(format!("expected seq {lineno}, found {}", event.seq)));
        }
        if event.run != run_id {
            return Err(bad(format!("record belongs to run `{}`", event.run)));
        }
        if event.compute_digest(&prev) != event.digest {
            return Err(bad("digest mismatch".into()));
        }
        prev = event.digest.clone();
        events.push(event);
        offset += nl + 1;
    }
    Ok((events, offset))
}
