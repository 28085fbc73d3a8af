//! Off-policy actor-critic update rules written once for a whole population.
//!
//! [`td3`] supports independent members and a single critic shared by all
//! policies; [`sac`] trains independent members. Both run unchanged on a
//! population of one, which is how the sequential baseline is produced.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::mlp::PopMlp;
use crate::rng::StreamRng;
use crate::{Error, PopTensor, Real, Result};

pub mod sac;
pub mod td3;

pub use sac::{SacHyper, SacMemberHyper, SacState};
pub use td3::{Td3Hyper, Td3MemberHyper, Td3State};

/// Population-batched `(s, a, r, s', done)` with shapes `[N,B,·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch<T> {
    pub obs: PopTensor<T>,
    pub action: PopTensor<T>,
    pub reward: PopTensor<T>,
    pub next_obs: PopTensor<T>,
    pub done: PopTensor<T>,
}

impl<T: Real> TransitionBatch<T> {
    /// Checks shapes and returns `(N, B)`.
    pub fn validate(&self, obs_dim: usize, action_dim: usize) -> Result<(usize, usize)> {
        let s = self.obs.shape();
        if s.len() != 3 || s[2] != obs_dim {
            return Err(Error::shape("transition_batch", s, &[0, 0, obs_dim]));
        }
        let (n, b) = (s[0], s[1]);
        for (t, d) in [
            (&self.action, action_dim),
            (&self.reward, 1),
            (&self.next_obs, obs_dim),
            (&self.done, 1),
        ] {
            if t.shape() != [n, b, d] {
                return Err(Error::shape("transition_batch", t.shape(), &[n, b, d]));
            }
        }
        if self
            .done
            .data()
            .iter()
            .any(|&d| d != T::zero() && d != T::one())
        {
            return Err(Error::Usage("done flags must be 0 or 1".into()));
        }
        Ok((n, b))
    }

    pub fn population(&self) -> usize {
        self.obs.n()
    }

    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        Ok(Self {
            obs: self.obs.select_members(members)?,
            action: self.action.select_members(members)?,
            reward: self.reward.select_members(members)?,
            next_obs: self.next_obs.select_members(members)?,
            done: self.done.select_members(members)?,
        })
    }

    pub fn cast<U: Real>(&self) -> TransitionBatch<U> {
        TransitionBatch {
            obs: self.obs.cast(),
            action: self.action.cast(),
            reward: self.reward.cast(),
            next_obs: self.next_obs.cast(),
            done: self.done.cast(),
        }
    }
}

/// Whether each policy has its own critics or all policies share one pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticMode {
    Independent,
    SharedCritic,
}

/// A trainable population with a per-member hyperparameter record.
pub trait Agent<T: Real> {
    type Hyper;

    fn population(&self) -> usize;

    fn policy(&self) -> &PopMlp<T>;

    /// One update step for every member. `rngs[i]` is member `i`'s stream.
    fn update_step(
        &mut self,
        batch: &TransitionBatch<T>,
        hyper: &Self::Hyper,
        rngs: &mut [StreamRng],
    ) -> Result<()>;
}

/// Runs `k` update steps back to back, pulling one batch per step.
///
/// Equivalent to `k` separate [`Agent::update_step`] calls with the same
/// batches; the point is that nothing is exported between steps.
pub fn update_k_steps<T, A, S>(
    agent: &mut A,
    mut sampler: S,
    k: usize,
    hyper: &A::Hyper,
    rngs: &mut [StreamRng],
) -> Result<()>
where
    T: Real,
    A: Agent<T>,
    S: FnMut() -> Option<TransitionBatch<T>>,
{
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    for step in 0..k {
        let batch = sampler().ok_or_else(|| {
            Error::DataStarvation(alloc::format!(
                "sampler exhausted after {step} of {k} batches"
            ))
        })?;
        agent.update_step(&batch, hyper, rngs)?;
    }
    Ok(())
}

/// `reward + discount·(1 − done)·next_value`.
#[inline]
pub fn bellman_target<T: Real>(reward: T, done: T, next_value: T, discount: T) -> T {
    reward + discount * (T::one() - done) * next_value
}

pub(crate) fn normal<T: Real>(rng: &mut StreamRng) -> T {
    T::of(rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn clamp<T: Real>(x: T, bound: T) -> T {
    x.max(-bound).min(bound)
}

/// Deterministic-policy actions for `obs: [N,B,ds]`, scaled to
/// `±bound`. Unless `deterministic`, member `i` adds Gaussian noise with
/// standard deviation `noise_std[i]·bound` and the result is clipped back
/// into bounds.
pub fn act<T: Real>(
    policy: &PopMlp<T>,
    obs: &PopTensor<T>,
    noise_std: &[T],
    rngs: &mut [StreamRng],
    deterministic: bool,
    bound: T,
) -> Result<PopTensor<T>> {
    let n = policy.n();
    if !deterministic && (noise_std.len() != n || rngs.len() != n) {
        return Err(Error::Config(alloc::format!(
            "need {n} noise scales and streams, got {} and {}",
            noise_std.len(),
            rngs.len()
        )));
    }
    let mut a = policy.predict(obs)?.map(|v| v * bound);
    if !deterministic {
        for (i, rng) in rngs.iter_mut().enumerate() {
            let sd = noise_std[i] * bound;
            for v in a.member_mut(i) {
                let eps: T = normal(rng);
                *v = clamp(*v + sd * eps, bound);
            }
        }
    }
    Ok(a)
}

/// Moves a `[P,B,d]` tensor onto a critic population of `critic_n` members,
/// folding the policy axis into the batch axis when the critic is shared.
pub(crate) fn fold_to<T0: Real>(x: PopTensor<T0>, critic_n: usize) -> Result<PopTensor<T0>> {
    let s = x.shape().to_vec();
    if critic_n == s[0] {
        return Ok(x);
    }
    x.reshape(&[critic_n, s[0] * s[1] / critic_n, s[2]])
}

pub(crate) fn unfold_to<T0: Real>(x: PopTensor<T0>, p: usize) -> Result<PopTensor<T0>> {
    let s = x.shape().to_vec();
    if s[0] == p {
        return Ok(x);
    }
    x.reshape(&[p, s[0] * s[1] / p, s[2]])
}

/// Per-member mean-squared error of `q` against `y` and its gradient.
///
/// `q, y: [Nc, R, 1]` where each critic member sees `group` policy members'
/// batches stacked along `R`. The returned losses are per policy member; the
/// gradient is that of their mean over each critic member's group.
pub(crate) fn mse_loss_grad<T: Real>(
    q: &PopTensor<T>,
    y: &PopTensor<T>,
    group: usize,
) -> Result<(Vec<T>, PopTensor<T>)> {
    let diff = q.zip_map(y, |a, b| a - b)?;
    let rows = q.shape()[1];
    let per = rows / group;
    let mut losses = Vec::with_capacity(q.n() * group);
    for chunk in diff.data().chunks(per) {
        let s: T = chunk.iter().map(|&d| d * d).sum();
        losses.push(s / T::of(per as f64));
    }
    let scale = T::of(2.0 / rows as f64);
    Ok((losses, diff.map(|d| d * scale)))
}

pub(crate) fn check_rngs(rngs: &[StreamRng], n: usize) -> Result<()> {
    if rngs.len() != n {
        return Err(Error::Config(alloc::format!(
            "expected {n} member streams, got {}",
            rngs.len()
        )));
    }
    Ok(())
}
