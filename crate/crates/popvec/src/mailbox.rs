//! Latest-snapshot slot shared between the learner and actor workers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, PoisonError};

use popvec_core::Error;

/// Holds the newest published value and its version.
///
/// Publishing swaps an `Arc`, so a reader either gets the old or the new
/// value in full; the lock is held only for the pointer swap or clone.
#[derive(Debug)]
pub struct Mailbox<S> {
    slot: Mutex<Option<(u64, Arc<S>)>>,
    version: AtomicU64,
}

impl<S> Default for Mailbox<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S> Mailbox<S> {
    pub fn new() -> Self {
        Self {
            slot: Mutex::new(None),
            version: AtomicU64::new(0),
        }
    }

    /// Replaces the snapshot and returns its version (1 for the first).
    pub fn publish(&self, snapshot: S) -> u64 {
        let snapshot = Arc::new(snapshot);
        let mut slot = self.slot.lock().unwrap_or_else(PoisonError::into_inner);
        let v = slot.as_ref().map_or(0, |(v, _)| *v) + 1;
        *slot = Some((v, snapshot));
        self.version.store(v, Ordering::Release);
        v
    }

    /// Newest snapshot and its version; `NotReady` before the first publish.
    pub fn fetch(&self) -> Result<(Arc<S>, u64), Error> {
        let slot = self.slot.lock().unwrap_or_else(PoisonError::into_inner);
        slot.as_ref()
            .map(|(v, s)| (Arc::clone(s), *v))
            .ok_or(Error::NotReady("no snapshot published yet"))
    }

    /// Current version without touching the snapshot; 0 before any publish.
    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fetch_before_publish_is_not_ready() {
        let m = Mailbox::<u32>::new();
        assert!(matches!(m.fetch(), Err(Error::NotReady(_))));
        assert_eq!(m.version(), 0);
    }

    #[test]
    fn versions_increase() {
        let m = Mailbox::new();
        assert_eq!(m.publish("a"), 1);
        assert_eq!(*m.fetch().unwrap().0, "a");
        assert_eq!(m.publish("b"), 2);
        let (s, v) = m.fetch().unwrap();
        assert_eq!((*s, v), ("b", 2));
    }
}
