//! Append-only per-run event store.
//!
//! Layout on disk: `<root>/<run_id>/events.ndj` holds one JSON record per
//! line and `<root>/<run_id>/meta` a snapshot of the workflow spec. Each
//! record carries a digest chained over its predecessor, so a reopened log
//! is either a verified prefix or an integrity error.

mod event;
pub mod ingest;
mod log;
mod query;
mod subscribe;

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use thiserror::Error;

pub use event::{Event, EventDraft, EventKind, Fields};
pub use log::{verify_records, RunLog, EVENTS_FILE, META_FILE};
pub use query::{EventFilter, Query};
pub use subscribe::{Overflow, Subscription, SUBSCRIBER_BUFFER};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("store I/O error: {0}")]
    Io(String),
    #[error("store is closed")]
    Closed,
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` already exists")]
    RunExists(String),
    #[error("invalid run id `{0}`")]
    InvalidRunId(String),
    #[error("integrity error at record {line}: {reason}")]
    Integrity { line: usize, reason: String },
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

/// Anything events can be appended to: a local run log or a remote ingest
/// endpoint. Implementations serialize appends, so one sink gives a total
/// order over everything sent through it.
pub trait EventSink: Send + Sync {
    fn append(&self, draft: EventDraft) -> Result<u64, StoreError>;
}

impl EventSink for RunLog {
    fn append(&self, draft: EventDraft) -> Result<u64, StoreError> {
        RunLog::append(self, draft)
    }
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Collection of run logs, optionally persisted under a root directory.
pub struct EventStore {
    root: Option<PathBuf>,
    runs: RwLock<HashMap<String, Arc<RunLog>>>,
}

impl std::fmt::Debug for EventStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventStore")
            .field("root", &self.root)
            .field("runs", &self.runs.read().unwrap().len())
            .finish()
    }
}

impl EventStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)
            .map_err(|e| StoreError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: Some(root),
            runs: RwLock::new(HashMap::new()),
        })
    }

    pub fn in_memory() -> Self {
        Self {
            root: None,
            runs: RwLock::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn create_run(&self, run_id: &str, meta: &str) -> Result<Arc<RunLog>, StoreError> {
        if !valid_run_id(run_id) {
            return Err(StoreError::InvalidRunId(run_id.into()));
        }
        let mut runs = self.runs.write().unwrap();
        let dir = self.root.as_ref().map(|r| r.join(run_id));
        if runs.contains_key(run_id) || dir.as_ref().is_some_and(|d| d.exists()) {
            return Err(StoreError::RunExists(run_id.into()));
        }
        let log = Arc::new(RunLog::new(run_id, dir, meta)?);
        runs.insert(run_id.to_string(), log.clone());
        Ok(log)
    }

    /// Looks a run up, loading (and recovering) it from disk on first use.
    pub fn run(&self, run_id: &str) -> Result<Option<Arc<RunLog>>, StoreError> {
        if let Some(log) = self.runs.read().unwrap().get(run_id) {
            return Ok(Some(log.clone()));
        }
        let Some(root) = &self.root else {
            return Ok(None);
        };
        if !valid_run_id(run_id) {
            return Ok(None);
        }
        let dir = root.join(run_id);
        if !dir.join(EVENTS_FILE).is_file() {
            return Ok(None);
        }
        let mut runs = self.runs.write().unwrap();
        if let Some(log) = runs.get(run_id) {
            return Ok(Some(log.clone()));
        }
        let log = Arc::new(RunLog::open(run_id, &dir)?);
        runs.insert(run_id.to_string(), log.clone());
        Ok(Some(log))
    }

    fn require(&self, run_id: &str) -> Result<Arc<RunLog>, StoreError> {
        self.run(run_id)?
            .ok_or_else(|| StoreError::UnknownRun(run_id.into()))
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids: BTreeSet<String> = self.runs.read().unwrap().keys().cloned().collect();
        if let Some(root) = &self.root {
            if let Ok(entries) = std::fs::read_dir(root) {
                for entry in entries.flatten() {
                    if entry.path().join(EVENTS_FILE).is_file() {
                        if let Some(name) = entry.file_name().to_str() {
                            ids.insert(name.to_string());
                        }
                    }
                }
            }
        }
        ids.into_iter().collect()
    }

    pub fn append(&self, run_id: &str, draft: EventDraft) -> Result<u64, StoreError> {
        self.require(run_id)?.append(draft)
    }

    /// Unknown runs yield an empty result.
    pub fn query(&self, q: &Query) -> Result<Vec<Event>, StoreError> {
        q.validate()?;
        Ok(match self.run(&q.run_id)? {
            Some(log) => log.query(q),
            None => Vec::new(),
        })
    }

    pub fn subscribe(&self, run_id: &str, filter: EventFilter) -> Result<Subscription, StoreError> {
        self.subscribe_with_capacity(run_id, filter, SUBSCRIBER_BUFFER)
    }

    pub fn subscribe_with_capacity(
        &self,
        run_id: &str,
        filter: EventFilter,
        capacity: usize,
    ) -> Result<Subscription, StoreError> {
        self.require(run_id)?.subscribe(filter, capacity)
    }

    pub fn export(&self, run_id: &str, out: &mut dyn Write) -> Result<usize, StoreError> {
        self.require(run_id)?.export(out)
    }

    /// Loads an exported record stream as a new run with identical events.
    pub fn import(
        &self,
        run_id: &str,
        meta: &str,
        input: &mut dyn Read,
    ) -> Result<usize, StoreError> {
        if !valid_run_id(run_id) {
            return Err(StoreError::InvalidRunId(run_id.into()));
        }
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| StoreError::Io(e.to_string()))?;
        let mut runs = self.runs.write().unwrap();
        let dir = self.root.as_ref().map(|r| r.join(run_id));
        if runs.contains_key(run_id) || dir.as_ref().is_some_and(|d| d.exists()) {
            return Err(StoreError::RunExists(run_id.into()));
        }
        let log = Arc::new(RunLog::import(run_id, dir, meta, &bytes)?);
        let n = log.len();
        runs.insert(run_id.to_string(), log);
        Ok(n)
    }

    pub fn close_run(&self, run_id: &str) -> Result<(), StoreError> {
        self.require(run_id)?.close();
        Ok(())
    }

    /// Closes a run and releases it from memory. Persisted runs reload from
    /// disk on next access; in-memory runs are gone.
    pub fn forget_run(&self, run_id: &str) {
        if let Some(log) = self.runs.write().unwrap().remove(run_id) {
            log.close();
        }
    }

    pub fn close(&self) {
        for log in self.runs.read().unwrap().values() {
            log.close();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(source: &str, kind: EventKind) -> EventDraft {
        EventDraft::new(source, kind)
    }

    #[test]
    fn first_append_is_seq_one() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        assert_eq!(store.append("r", draft("a", EventKind::Log)).unwrap(), 1);
        assert_eq!(store.append("r", draft("a", EventKind::Log)).unwrap(), 2);
    }

    #[test]
    fn append_after_close_is_rejected() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        store.close_run("r").unwrap();
        assert_eq!(
            store.append("r", draft("a", EventKind::Log)),
            Err(StoreError::Closed)
        );
    }

    #[test]
    fn nested_payload_is_rejected() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        let d = draft("a", EventKind::Log).with("x", serde_json::json!([1, 2]));
        assert!(matches!(
            store.append("r", d),
            Err(StoreError::InvalidEvent(_))
        ));
    }

    #[test]
    fn unknown_run_queries_empty() {
        let store = EventStore::in_memory();
        assert!(store.query(&Query::run("nope")).unwrap().is_empty());
    }

    #[test]
    fn seq_after_last_is_empty() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        for _ in 0..3 {
            store.append("r", draft("a", EventKind::Log)).unwrap();
        }
        assert!(store.query(&Query::run("r").after(3)).unwrap().is_empty());
        assert_eq!(store.query(&Query::run("r")).unwrap().len(), 3);
    }

    #[test]
    fn inverted_time_bounds_are_invalid() {
        let store = EventStore::in_memory();
        let q = Query {
            t0: Some(5),
            t1: Some(4),
            ..Query::run("r")
        };
        assert!(matches!(store.query(&q), Err(StoreError::InvalidQuery(_))));
    }

    #[test]
    fn mono_strictly_increases_with_seq() {
        let store = EventStore::in_memory();
        let log = store.create_run("r", "").unwrap();
        for _ in 0..100 {
            log.append(draft("a", EventKind::Log)).unwrap();
        }
        let all = log.all();
        assert!(all.windows(2).all(|w| w[0].mono < w[1].mono));
    }

    #[tokio::test]
    async fn subscription_receives_in_order() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        let mut sub = store
            .subscribe("r", EventFilter::kinds([EventKind::Heartbeat]))
            .unwrap();
        for i in 0..5u64 {
            store
                .append("r", draft("a", EventKind::Heartbeat).with("i", i))
                .unwrap();
            store.append("r", draft("a", EventKind::Log)).unwrap();
        }
        for i in 0..5u64 {
            let e = sub.next().await.unwrap().unwrap();
            assert_eq!(e.u64_field("i"), Some(i));
        }
        assert_eq!(sub.try_next(), Ok(None));
    }

    #[test]
    fn paused_subscriber_overflows() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        let mut sub = store.subscribe("r", EventFilter::default()).unwrap();
        for _ in 0..SUBSCRIBER_BUFFER + 1 {
            store.append("r", draft("a", EventKind::Log)).unwrap();
        }
        let mut got = 0;
        loop {
            match sub.try_next() {
                Ok(Some(_)) => got += 1,
                Ok(None) => panic!("stream should have closed"),
                Err(Overflow) => break,
            }
        }
        assert_eq!(got, SUBSCRIBER_BUFFER);
    }

    #[test]
    fn close_ends_subscriptions_without_overflow() {
        let store = EventStore::in_memory();
        store.create_run("r", "").unwrap();
        let mut sub = store.subscribe("r", EventFilter::default()).unwrap();
        store.close_run("r").unwrap();
        assert_eq!(sub.blocking_next(), Ok(None));
    }
}
