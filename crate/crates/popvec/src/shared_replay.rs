//! Replay buffers and ratio guard behind one lock, with bounded waiting.

use std::sync::{Condvar, Mutex, MutexGuard, PoisonError};
use std::time::{Duration, Instant};

use popvec_core::algos::TransitionBatch;
use popvec_core::replay::{
    sample_batch, BufferMode, Guard, RatioController, ReplayBuffer, Transition,
};
use popvec_core::rng::StreamRng;
use popvec_core::Real;

use crate::error::Result;

#[derive(Debug)]
struct Inner<T> {
    buffers: Vec<ReplayBuffer<T>>,
    ratio: RatioController,
    dropped: u64,
    closed: bool,
}

/// Outcome of a bounded wait.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wait {
    Done,
    /// The guard still blocked when the timeout expired.
    TimedOut,
    /// [`SharedReplay::close`] was called.
    Closed,
}

/// Counters read at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayStats {
    pub env_steps: u64,
    pub update_steps: u64,
    pub env_steps_per_member: f64,
    pub ratio: f64,
    pub dropped: u64,
    pub stored: usize,
}

#[derive(Debug)]
pub struct SharedReplay<T> {
    inner: Mutex<Inner<T>>,
    changed: Condvar,
    mode: BufferMode,
    population: usize,
}

impl<T: Real> SharedReplay<T> {
    /// One buffer per member in `PerAgent` mode, a single one in `Shared`
    /// mode. Each buffer holds `capacity` transitions.
    pub fn new(
        population: usize,
        mode: BufferMode,
        capacity: usize,
        obs_dim: usize,
        action_dim: usize,
        ratio: RatioController,
    ) -> Result<Self> {
        let count = match mode {
            BufferMode::PerAgent => population,
            BufferMode::Shared => 1,
        };
        let buffers = (0..count)
            .map(|_| ReplayBuffer::new(capacity, obs_dim, action_dim))
            .collect::<popvec_core::Result<Vec<_>>>()?;
        Ok(Self {
            inner: Mutex::new(Inner {
                buffers,
                ratio,
                dropped: 0,
                closed: false,
            }),
            changed: Condvar::new(),
            mode,
            population,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner<T>> {
        self.inner.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// Waits until `ready` holds, the timeout expires or the store closes.
    fn wait_until<'a>(
        &self,
        mut g: MutexGuard<'a, Inner<T>>,
        timeout: Duration,
        ready: impl Fn(&Inner<T>) -> bool,
    ) -> (MutexGuard<'a, Inner<T>>, Wait) {
        let deadline = Instant::now() + timeout;
        loop {
            if g.closed {
                return (g, Wait::Closed);
            }
            if ready(&g) {
                return (g, Wait::Done);
            }
            let now = Instant::now();
            if now >= deadline {
                return (g, Wait::TimedOut);
            }
            g = self
                .changed
                .wait_timeout(g, deadline - now)
                .unwrap_or_else(PoisonError::into_inner)
                .0;
        }
    }

    /// Stores a transition from `member` once the insert guard allows it.
    /// Transitions that fail validation are dropped and counted.
    pub fn insert(&self, member: usize, t: &Transition<T>, timeout: Duration) -> Wait {
        let g = self.lock();
        let (mut g, w) = self.wait_until(g, timeout, |i| i.ratio.check_insert() == Guard::Proceed);
        if w != Wait::Done {
            return w;
        }
        let slot = match self.mode {
            BufferMode::PerAgent => member,
            BufferMode::Shared => 0,
        };
        let pushed = g
            .buffers
            .get_mut(slot)
            .map(|b| b.push(t).is_ok())
            .unwrap_or(false);
        if pushed {
            g.ratio.record_env_steps(1);
            drop(g);
            self.changed.notify_all();
        } else {
            g.dropped += 1;
            log::debug!("dropped malformed transition tagged {member}");
        }
        Wait::Done
    }

    /// Records a transition that was rejected before reaching the store.
    pub fn record_drop(&self) {
        self.lock().dropped += 1;
    }

    /// Samples `[N,B,·]` once the sample guard allows one more update step,
    /// and counts that step. Before warmup the guard blocks.
    pub fn sample(
        &self,
        batch_size: usize,
        rngs: &mut [StreamRng],
        timeout: Duration,
    ) -> Result<(Option<TransitionBatch<T>>, Wait)> {
        let g = self.lock();
        let (mut g, w) = self.wait_until(g, timeout, |i| {
            i.ratio.check_sample() == Guard::Proceed && i.buffers.iter().all(|b| !b.is_empty())
        });
        if w != Wait::Done {
            return Ok((None, w));
        }
        let refs: Vec<&ReplayBuffer<T>> = g.buffers.iter().collect();
        let batch = sample_batch(&refs, self.population, batch_size, self.mode, rngs)?;
        g.ratio.record_updates(1);
        drop(g);
        self.changed.notify_all();
        Ok((Some(batch), Wait::Done))
    }

    /// Wakes every waiter and makes all further waits return `Closed`.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn stats(&self) -> ReplayStats {
        let g = self.lock();
        ReplayStats {
            env_steps: g.ratio.env_steps(),
            update_steps: g.ratio.update_steps(),
            env_steps_per_member: g.ratio.env_steps_per_member(),
            ratio: g.ratio.ratio(),
            dropped: g.dropped,
            stored: g.buffers.iter().map(|b| b.len()).sum(),
        }
    }

    /// Guard state: `(sample, insert)`.
    pub fn guards(&self) -> (Guard, Guard) {
        let g = self.lock();
        (g.ratio.check_sample(), g.ratio.check_insert())
    }

    /// Runs `f` on the buffers under the lock.
    pub fn with_buffers<R>(&self, f: impl FnOnce(&[ReplayBuffer<T>]) -> R) -> R {
        f(&self.lock().buffers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use popvec_core::rng::{domain, member_streams};

    fn t(v: f32) -> Transition<f32> {
        Transition {
            obs: vec![v],
            action: vec![v],
            reward: v,
            next_obs: vec![v],
            done: false,
        }
    }

    fn store(n: usize, warmup: f64) -> SharedReplay<f32> {
        let ratio = RatioController::new(1.0, 0.0, warmup, n).unwrap();
        SharedReplay::new(n, BufferMode::PerAgent, 100, 1, 1, ratio).unwrap()
    }

    #[test]
    fn sampling_waits_for_warmup() {
        let s = store(1, 3.0);
        let mut rngs = member_streams(0, domain::SAMPLE, 1);
        let short = Duration::from_millis(5);
        for i in 0..2 {
            assert_eq!(s.insert(0, &t(i as f32), short), Wait::Done);
        }
        assert_eq!(s.sample(4, &mut rngs, short).unwrap().1, Wait::TimedOut);
        s.insert(0, &t(2.0), short);
        let (b, w) = s.sample(4, &mut rngs, short).unwrap();
        assert_eq!(w, Wait::Done);
        assert_eq!(b.unwrap().reward.shape(), &[1, 4, 1]);
        assert_eq!(s.stats().update_steps, 1);
    }

    #[test]
    fn malformed_transitions_are_counted() {
        let s = store(2, 0.0);
        let short = Duration::from_millis(5);
        let mut bad = t(1.0);
        bad.reward = f32::NAN;
        assert_eq!(s.insert(0, &bad, short), Wait::Done);
        assert_eq!(s.insert(5, &t(1.0), short), Wait::Done);
        let st = s.stats();
        assert_eq!((st.dropped, st.env_steps, st.stored), (2, 0, 0));
    }

    #[test]
    fn insert_blocks_at_the_allowance_and_close_releases() {
        let s = store(1, 2.0);
        let short = Duration::from_millis(5);
        for _ in 0..3 {
            assert_eq!(s.insert(0, &t(0.0), short), Wait::Done);
        }
        assert_eq!(s.insert(0, &t(0.0), short), Wait::TimedOut);
        s.close();
        assert_eq!(s.insert(0, &t(0.0), Duration::from_secs(5)), Wait::Closed);
    }
}
