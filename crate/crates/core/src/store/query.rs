use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Event, EventKind, StoreError};

/// Source/kind predicate shared by queries and live subscriptions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventFilter {
    pub sources: Option<BTreeSet<String>>,
    pub kinds: Option<BTreeSet<EventKind>>,
}

impl EventFilter {
    pub fn kinds(kinds: impl IntoIterator<Item = EventKind>) -> Self {
        Self {
            sources: None,
            kinds: Some(kinds.into_iter().collect()),
        }
    }

    pub fn matches(&self, e: &Event) -> bool {
        self.sources.as_ref().is_none_or(|s| s.contains(&e.source))
            && self.kinds.as_ref().is_none_or(|k| k.contains(&e.kind))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub run_id: String,
    #[serde(flatten)]
    pub filter: EventFilter,
    /// Inclusive wall-clock bounds, UTC milliseconds.
    pub t0: Option<i64>,
    pub t1: Option<i64>,
    pub seq_after: Option<u64>,
    pub limit: Option<usize>,
}

impl Query {
    pub fn run(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            ..Self::default()
        }
    }

    pub fn kinds(mut self, kinds: impl IntoIterator<Item = EventKind>) -> Self {
        self.filter.kinds = Some(kinds.into_iter().collect());
        self
    }

    pub fn sources<S: Into<String>>(mut self, sources: impl IntoIterator<Item = S>) -> Self {
        self.filter.sources = Some(sources.into_iter().map(Into::into).collect());
        self
    }

    pub fn after(mut self, seq: u64) -> Self {
        self.seq_after = Some(seq);
        self
    }

    pub fn limit(mut self, n: usize) -> Self {
        self.limit = Some(n);
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if let (Some(a), Some(b)) = (self.t0, self.t1) {
            if a > b {
                return Err(StoreError::InvalidQuery("t0 must not exceed t1".into()));
            }
        }
        if self.limit == Some(0) {
            return Err(StoreError::InvalidQuery("limit must be positive".into()));
        }
        Ok(())
    }

    /// Full predicate, ignoring `limit`.
    pub fn matches(&self, e: &Event) -> bool {
        e.run == self.run_id
            && self.filter.matches(e)
            && self.t0.is_none_or(|t| e.ts >= t)
            && self.t1.is_none_or(|t| e.ts <= t)
            && self.seq_after.is_none_or(|s| e.seq > s)
    }
}
