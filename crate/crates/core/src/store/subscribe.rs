use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use thiserror::Error;
use tokio::sync::mpsc;
use tokio::sync::mpsc::error::TrySendError;

use super::{Event, EventFilter};

/// Default per-subscriber buffer.
pub const SUBSCRIBER_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("subscriber fell behind its buffer; re-query from the last seen seq")]
pub struct Overflow;

pub(crate) struct SubSlot {
    pub(crate) filter: EventFilter,
    pub(crate) tx: mpsc::Sender<Arc<Event>>,
    pub(crate) overflow: Arc<AtomicBool>,
}

impl SubSlot {
    /// Delivers `event` if it matches. Returns false once the slot is dead.
    pub(crate) fn offer(&self, event: &Arc<Event>) -> bool {
        if !self.filter.matches(event) {
            return !self.tx.is_closed();
        }
        match self.tx.try_send(event.clone()) {
            Ok(()) => true,
            Err(TrySendError::Full(_)) => {
                self.overflow.store(true, Ordering::SeqCst);
                false
            }
            Err(TrySendError::Closed(_)) => false,
        }
    }
}

/// A live, ordered stream of events appended after `start_after`.
///
/// Stitching `query(seq_after = x)` for `x < start_after`, truncated at
/// `start_after`, with this stream reproduces the full log without gaps.
pub struct Subscription {
    rx: mpsc::Receiver<Arc<Event>>,
    overflow: Arc<AtomicBool>,
    pub start_after: u64,
}

impl Subscription {
    pub(crate) fn new(
        rx: mpsc::Receiver<Arc<Event>>,
        overflow: Arc<AtomicBool>,
        start_after: u64,
    ) -> Self {
        Self {
            rx,
            overflow,
            start_after,
        }
    }

    /// `Ok(None)` when the store closed the stream normally.
    pub async fn next(&mut self) -> Result<Option<Arc<Event>>, Overflow> {
        match self.rx.recv().await {
            Some(e) => Ok(Some(e)),
            None => self.end(),
        }
    }

    pub fn blocking_next(&mut self) -> Result<Option<Arc<Event>>, Overflow> {
        match self.rx.blocking_recv() {
            Some(e) => Ok(Some(e)),
            None => self.end(),
        }
    }

    /// Non-blocking poll; `Ok(None)` means nothing is buffered right now.
    pub fn try_next(&mut self) -> Result<Option<Arc<Event>>, Overflow> {
        match self.rx.try_recv() {
            Ok(e) => Ok(Some(e)),
            Err(mpsc::error::TryRecvError::Empty) => Ok(None),
            Err(mpsc::error::TryRecvError::Disconnected) => self.end(),
        }
    }

    fn end(&self) -> Result<Option<Arc<Event>>, Overflow> {
        if self.overflow.load(Ordering::SeqCst) {
            Err(Overflow)
        } else {
            Ok(None)
        }
    }
}
