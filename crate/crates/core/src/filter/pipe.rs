//! Fan-out of an event stream to filtered sinks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_channel::{Sender, TrySendError};
use parking_lot::RwLock;
use thiserror::Error;

use crate::event::Event;
use crate::transport::{TransportError, Writer};

use super::Filter;

pub type SinkId = u64;

/// Batches at least this large are matched with the data-parallel path.
const PAR_MATCH_MIN: usize = 512;

#[derive(Debug, Error)]
pub enum SinkError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("sink receiver is gone")]
    Disconnected,
    #[error("sink is full; {0} events dropped")]
    Overflow(usize),
}

/// Receives the events that passed a subscription's filter, in push order.
pub trait Sink: Send + Sync {
    fn deliver(&self, events: &[Arc<Event>]) -> Result<(), SinkError>;

    fn flush(&self) -> Result<(), SinkError> {
        Ok(())
    }

    fn close(&self) -> Result<(), SinkError> {
        Ok(())
    }
}

/// Forwards to a transport writer.
pub struct WriterSink(pub Writer);

impl Sink for WriterSink {
    fn deliver(&self, events: &[Arc<Event>]) -> Result<(), SinkError> {
        Ok(self.0.write_batch(events)?)
    }

    fn flush(&self) -> Result<(), SinkError> {
        Ok(self.0.flush()?)
    }

    fn close(&self) -> Result<(), SinkError> {
        Ok(self.0.close()?)
    }
}

/// Hands events to a bounded channel without blocking; overflow is dropped.
pub struct ChannelSink(pub Sender<Arc<Event>>);

impl Sink for ChannelSink {
    fn deliver(&self, events: &[Arc<Event>]) -> Result<(), SinkError> {
        for (i, e) in events.iter().enumerate() {
            match self.0.try_send(e.clone()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => return Err(SinkError::Overflow(events.len() - i)),
                Err(TrySendError::Disconnected(_)) => return Err(SinkError::Disconnected),
            }
        }
        Ok(())
    }
}

struct SinkSlot {
    id: SinkId,
    label: String,
    filter: Filter,
    sink: Box<dyn Sink>,
    delivered: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkStats {
    pub id: SinkId,
    pub label: String,
    pub delivered: u64,
    pub failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipeStats {
    pub pushed: u64,
    pub sinks: Vec<SinkStats>,
}

/// Sends each pushed event to every sink whose filter matches it.
///
/// Sinks are independent: one failing sink only bumps its failure count.
/// Adding or removing a sink never disturbs the others.
#[derive(Default)]
pub struct Pipe {
    sinks: RwLock<Vec<Arc<SinkSlot>>>,
    next_id: AtomicU64,
    pushed: AtomicU64,
}

impl Pipe {
    pub fn new() -> Pipe {
        Pipe::default()
    }

    pub fn add_sink(&self, filter: Filter, sink: Box<dyn Sink>) -> SinkId {
        self.add_labeled_sink("", filter, sink)
    }

    pub fn add_labeled_sink(
        &self,
        label: impl Into<String>,
        filter: Filter,
        sink: Box<dyn Sink>,
    ) -> SinkId {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        self.sinks.write().push(Arc::new(SinkSlot {
            id,
            label: label.into(),
            filter,
            sink,
            delivered: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }));
        id
    }

    /// Detaches and closes a sink. Removing an unknown id is a no-op that
    /// returns `false`.
    pub fn remove_sink(&self, id: SinkId) -> bool {
        let slot = {
            let mut sinks = self.sinks.write();
            match sinks.iter().position(|s| s.id == id) {
                Some(i) => sinks.remove(i),
                None => return false,
            }
        };
        if let Err(e) = slot.sink.close() {
            tracing::warn!("closing sink {id}: {e}");
        }
        true
    }

    pub fn len(&self) -> usize {
        self.sinks.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&self, event: Event) -> usize {
        self.push_batch(&[Arc::new(event)])
    }

    /// Pushes `events` in order to every matching sink. Returns the number of
    /// (event, sink) deliveries.
    pub fn push_batch(&self, events: &[Arc<Event>]) -> usize {
        if events.is_empty() {
            return 0;
        }
        self.pushed
            .fetch_add(events.len() as u64, Ordering::Relaxed);
        let sinks: Vec<Arc<SinkSlot>> = self.sinks.read().clone();
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            if sinks.len() > 1 {
                return sinks.par_iter().map(|s| feed(s, events)).sum();
            }
        }
        sinks.iter().map(|s| feed(s, events)).sum()
    }

    /// Flushes every sink, returning the failures.
    pub fn sync(&self) -> Vec<(SinkId, SinkError)> {
        let sinks: Vec<Arc<SinkSlot>> = self.sinks.read().clone();
        let mut errors = Vec::new();
        for s in sinks {
            if let Err(e) = s.sink.flush() {
                s.failures.fetch_add(1, Ordering::Relaxed);
                errors.push((s.id, e));
            }
        }
        errors
    }

    /// Closes and detaches all sinks.
    pub fn close(&self) {
        let sinks = std::mem::take(&mut *self.sinks.write());
        for s in sinks {
            if let Err(e) = s.sink.close() {
                tracing::warn!("closing sink {}: {e}", s.id);
            }
        }
    }

    pub fn stats(&self) -> PipeStats {
        PipeStats {
            pushed: self.pushed.load(Ordering::Relaxed),
            sinks: self
                .sinks
                .read()
                .iter()
                .map(|s| SinkStats {
                    id: s.id,
                    label: s.label.clone(),
                    delivered: s.delivered.load(Ordering::Relaxed),
                    failures: s.failures.load(Ordering::Relaxed),
                })
                .collect(),
        }
    }
}

fn feed(slot: &SinkSlot, events: &[Arc<Event>]) -> usize {
    let matched: Vec<Arc<Event>> = if events.len() >= PAR_MATCH_MIN {
        slot.filter
            .matches_batch(events)
            .into_iter()
            .zip(events)
            .filter(|(m, _)| *m)
            .map(|(_, e)| e.clone())
            .collect()
    } else {
        events
            .iter()
            .filter(|e| slot.filter.matches(e))
            .cloned()
            .collect()
    };
    if matched.is_empty() {
        return 0;
    }
    match slot.sink.deliver(&matched) {
        Ok(()) => {
            slot.delivered
                .fetch_add(matched.len() as u64, Ordering::Relaxed);
            matched.len()
        }
        Err(e) => {
            slot.failures.fetch_add(1, Ordering::Relaxed);
            tracing::debug!("sink {} failed: {e}", slot.id);
            0
        }
    }
}
