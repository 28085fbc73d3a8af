//! FIFO replay storage, uniform batch sampling and the update/env-step
//! ratio guard.

use alloc::vec::Vec;

use rand::Rng;

use crate::algos::TransitionBatch;
use crate::rng::StreamRng;
use crate::{Error, PopTensor, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<T> {
    pub obs: Vec<T>,
    pub action: Vec<T>,
    pub reward: T,
    pub next_obs: Vec<T>,
    pub done: bool,
}

/// Ring buffer of transitions stored as one flat row each:
/// `obs | action | reward | next_obs | done`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    obs_dim: usize,
    action_dim: usize,
    capacity: usize,
    rows: Vec<T>,
    insert_count: u64,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            obs_dim,
            action_dim,
            capacity,
            rows: Vec::new(),
            insert_count: 0,
        })
    }

    fn width(&self) -> usize {
        2 * self.obs_dim + self.action_dim + 2
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn insert_count(&self) -> u64 {
        self.insert_count
    }

    pub fn len(&self) -> usize {
        (self.insert_count as usize).min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.insert_count == 0
    }

    /// Rejects wrong shapes and non-finite values.
    pub fn check(&self, t: &Transition<T>) -> Result<()> {
        if t.obs.len() != self.obs_dim
            || t.next_obs.len() != self.obs_dim
            || t.action.len() != self.action_dim
        {
            return Err(Error::shape(
                "replay_push",
                &[t.obs.len(), t.action.len(), t.next_obs.len()],
                &[self.obs_dim, self.action_dim, self.obs_dim],
            ));
        }
        let finite = t
            .obs
            .iter()
            .chain(&t.action)
            .chain(&t.next_obs)
            .chain(core::iter::once(&t.reward))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Usage("transition contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn push(&mut self, t: &Transition<T>) -> Result<()> {
        self.check(t)?;
        let w = self.width();
        let slot = (self.insert_count % self.capacity as u64) as usize;
        if self.rows.len() < (slot + 1) * w {
            self.rows.resize((slot + 1) * w, T::zero());
        }
        let row = &mut self.rows[slot * w..(slot + 1) * w];
        let (o, rest) = row.split_at_mut(self.obs_dim);
        let (a, rest) = rest.split_at_mut(self.action_dim);
        let (r, rest) = rest.split_at_mut(1);
        let (no, d) = rest.split_at_mut(self.obs_dim);
        o.copy_from_slice(&t.obs);
        a.copy_from_slice(&t.action);
        r[0] = t.reward;
        no.copy_from_slice(&t.next_obs);
        d[0] = if t.done { T::one() } else { T::zero() };
        self.insert_count += 1;
        Ok(())
    }

    /// Transition `i` in insertion order, `0` being the oldest retained.
    pub fn get(&self, i: usize) -> Result<Transition<T>> {
        let len = self.len();
        if i >= len {
            return Err(Error::IndexOutOfRange { index: i, len });
        }
        let first = if (self.insert_count as usize) > self.capacity {
            (self.insert_count % self.capacity as u64) as usize
        } else {
            0
        };
        Ok(self.row(((first + i) % self.capacity) * self.width()))
    }

    fn row(&self, at: usize) -> Transition<T> {
        let (od, ad) = (self.obs_dim, self.action_dim);
        let r = &self.rows[at..at + self.width()];
        Transition {
            obs: r[..od].to_vec(),
            action: r[od..od + ad].to_vec(),
            reward: r[od + ad],
            next_obs: r[od + ad + 1..2 * od + ad + 1].to_vec(),
            done: r[2 * od + ad + 1] != T::zero(),
        }
    }

    /// Appends `b` uniformly drawn rows (with replacement) onto the
    /// per-field output vectors.
    fn sample_into(&self, b: usize, rng: &mut StreamRng, out: &mut [Vec<T>; 5]) -> Result<()> {
        let len = self.len();
        if len == 0 {
            return Err(Error::NotReady("replay buffer is empty"));
        }
        let (od, ad, w) = (self.obs_dim, self.action_dim, self.width());
        for _ in 0..b {
            let slot = rng.random_range(0..len);
            let r = &self.rows[slot * w..(slot + 1) * w];
            out[0].extend_from_slice(&r[..od]);
            out[1].extend_from_slice(&r[od..od + ad]);
            out[2].push(r[od + ad]);
            out[3].extend_from_slice(&r[od + ad + 1..2 * od + ad + 1]);
            out[4].push(r[2 * od + ad + 1]);
        }
        Ok(())
    }

    /// Raw storage for snapshots: `(insert_count, rows)`.
    pub fn raw_parts(&self) -> (u64, &[T]) {
        (self.insert_count, &self.rows)
    }

    pub fn from_raw_parts(
        capacity: usize,
        obs_dim: usize,
        action_dim: usize,
        insert_count: u64,
        rows: Vec<T>,
    ) -> Result<Self> {
        let mut b = Self::new(capacity, obs_dim, action_dim)?;
        if rows.len() != b.len_for(insert_count) * b.width() {
            return Err(Error::Config("replay snapshot has the wrong length".into()));
        }
        b.insert_count = insert_count;
        b.rows = rows;
        Ok(b)
    }

    fn len_for(&self, insert_count: u64) -> usize {
        (insert_count as usize).min(self.capacity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferMode {
    /// One buffer per member; member `n` samples only from buffer `n`.
    PerAgent,
    /// One buffer for everybody.
    Shared,
}

/// A `[N,B,·]` batch; member `n` draws with `rngs[n]`.
pub fn sample_batch<T: Real>(
    buffers: &[&ReplayBuffer<T>],
    n: usize,
    batch_size: usize,
    mode: BufferMode,
    rngs: &mut [StreamRng],
) -> Result<TransitionBatch<T>> {
    let expected = match mode {
        BufferMode::PerAgent => n,
        BufferMode::Shared => 1,
    };
    if buffers.len() != expected || rngs.len() != n || batch_size == 0 {
        return Err(Error::Config(alloc::format!(
            "{mode:?} sampling for {n} members needs {expected} buffers and {n} streams, got {} and {}",
            buffers.len(),
            rngs.len()
        )));
    }
    let (od, ad) = (buffers[0].obs_dim, buffers[0].action_dim);
    let mut out: [Vec<T>; 5] = [
        Vec::with_capacity(n * batch_size * od),
        Vec::with_capacity(n * batch_size * ad),
        Vec::with_capacity(n * batch_size),
        Vec::with_capacity(n * batch_size * od),
        Vec::with_capacity(n * batch_size),
    ];
    for (i, rng) in rngs.iter_mut().enumerate() {
        let buf = buffers[if mode == BufferMode::Shared { 0 } else { i }];
        if buf.obs_dim != od || buf.action_dim != ad {
            return Err(Error::Config(
                "replay buffers disagree on dimensions".into(),
            ));
        }
        buf.sample_into(batch_size, rng, &mut out)?;
    }
    let [o, a, r, no, d] = out;
    Ok(TransitionBatch {
        obs: PopTensor::from_vec(&[n, batch_size, od], o)?,
        action: PopTensor::from_vec(&[n, batch_size, ad], a)?,
        reward: PopTensor::from_vec(&[n, batch_size, 1], r)?,
        next_obs: PopTensor::from_vec(&[n, batch_size, od], no)?,
        done: PopTensor::from_vec(&[n, batch_size, 1], d)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guard {
    Proceed,
    Block,
}

/// Keeps update steps per environment step (per member) near a target.
///
/// Environment steps are counted per member (`env_steps / population`).
/// The first `warmup` of them only fill the buffers: sampling waits for them
/// and they are excluded from the ratio, and actors may run up to `warmup`
/// steps ahead of the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioController {
    pub target_ratio: f64,
    pub slack: f64,
    pub warmup: f64,
    pub population: usize,
    env_steps: u64,
    update_steps: u64,
}

impl RatioController {
    pub fn new(target_ratio: f64, slack: f64, warmup: f64, population: usize) -> Result<Self> {
        if !(target_ratio > 0.0) || !(slack >= 0.0) || !(warmup >= 0.0) || population == 0 {
            return Err(Error::Config(alloc::format!(
                "invalid ratio guard: target {target_ratio}, slack {slack}, warmup {warmup}, population {population}"
            )));
        }
        Ok(Self {
            target_ratio,
            slack,
            warmup,
            population,
            env_steps: 0,
            update_steps: 0,
        })
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn update_steps(&self) -> u64 {
        self.update_steps
    }

    /// Environment steps per member.
    pub fn env_steps_per_member(&self) -> f64 {
        self.env_steps as f64 / self.population as f64
    }

    pub fn record_env_steps(&mut self, k: u64) {
        self.env_steps += k;
    }

    pub fn record_updates(&mut self, k: u64) {
        self.update_steps += k;
    }

    pub fn warmed_up(&self) -> bool {
        self.env_steps > 0 && self.env_steps_per_member() >= self.warmup
    }

    /// Update steps per post-warmup environment step per member.
    pub fn ratio(&self) -> f64 {
        self.update_steps as f64 / (self.env_steps_per_member() - self.warmup).max(1.0)
    }

    /// Whether one more update step may run: blocks before warmup and when
    /// `updates > target·(1 + slack)·(env − warmup)`.
    pub fn check_sample(&self) -> Guard {
        if !self.warmed_up() {
            return Guard::Block;
        }
        let env = self.env_steps_per_member() - self.warmup;
        if self.update_steps as f64 > self.target_ratio * (1.0 + self.slack) * env {
            Guard::Block
        } else {
            Guard::Proceed
        }
    }

    /// Whether one more environment step may be inserted: blocks when
    /// `env > updates / target·(1 + slack) + warmup`.
    ///
    /// The two sides can never block at the same time.
    pub fn check_insert(&self) -> Guard {
        let limit = self.update_steps as f64 / self.target_ratio * (1.0 + self.slack) + self.warmup;
        if self.env_steps_per_member() > limit {
            Guard::Block
        } else {
            Guard::Proceed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, member_streams};
    use alloc::vec;

    fn tr(tag: f64) -> Transition<f64> {
        Transition {
            obs: vec![tag; 2],
            action: vec![tag],
            reward: tag,
            next_obs: vec![-tag; 2],
            done: false,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2, 2, 1).unwrap();
        b.push(&tr(1.0)).unwrap();
        assert_eq!(b.len(), 1);
        b.push(&tr(2.0)).unwrap();
        b.push(&tr(3.0)).unwrap();
        assert_eq!(b.get(0).unwrap(), tr(2.0));
        assert_eq!(b.get(1).unwrap(), tr(3.0));
        let mut b = ReplayBuffer::new(3, 2, 1).unwrap();
        for k in 0..5 {
            b.push(&tr(k as f64)).unwrap();
        }
        assert_eq!((b.insert_count(), b.len()), (5, 3));
        assert!(b.push(&tr(f64::NAN)).is_err());
    }

    #[test]
    fn single_row_repeats() {
        let mut b = ReplayBuffer::new(8, 2, 1).unwrap();
        b.push(&tr(4.0)).unwrap();
        let mut rngs = member_streams(0, domain::SAMPLE, 1);
        let batch = sample_batch(&[&b], 1, 5, BufferMode::PerAgent, &mut rngs).unwrap();
        assert!(batch.reward.data().iter().all(|&r| r == 4.0));
        let empty = ReplayBuffer::<f64>::new(8, 2, 1).unwrap();
        assert!(matches!(
            sample_batch(&[&empty], 1, 5, BufferMode::Shared, &mut rngs),
            Err(Error::NotReady(_))
        ));
    }

    #[test]
    fn ratio_guard_examples() {
        let mut c = RatioController::new(1.0, 0.05, 0.0, 1).unwrap();
        assert_eq!(c.check_sample(), Guard::Block);
        c.record_env_steps(1000);
        c.record_updates(1000);
        assert_eq!(c.check_sample(), Guard::Proceed);
        c.record_updates(100_000);
        assert_eq!(c.check_sample(), Guard::Block);
    }

    #[test]
    fn sampling_waits_for_warmup_and_ignores_it() {
        let mut c = RatioController::new(1.0, 0.0, 100.0, 1).unwrap();
        c.record_env_steps(99);
        assert_eq!(c.check_sample(), Guard::Block);
        c.record_env_steps(1);
        assert_eq!(c.check_sample(), Guard::Proceed);
        c.record_updates(1);
        assert_eq!(c.check_sample(), Guard::Block);
        c.record_env_steps(10);
        c.record_updates(9);
        assert_eq!(c.check_sample(), Guard::Proceed);
        c.record_updates(1);
        assert_eq!(c.check_sample(), Guard::Block);
        assert_eq!(c.ratio(), 11.0 / 10.0);
    }

    #[test]
    fn insert_side_respects_warmup() {
        let mut c = RatioController::new(1.0, 0.05, 10.0, 2).unwrap();
        let mut inserted = 0;
        while c.check_insert() == Guard::Proceed {
            c.record_env_steps(1);
            inserted += 1;
        }
        assert_eq!(inserted, 21);
        c.record_updates(1);
        assert_eq!(c.check_insert(), Guard::Proceed);
    }
}
