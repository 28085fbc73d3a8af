//! Twin-critic deterministic policy gradient with target smoothing and
//! delayed policy updates.

use alloc::vec;
use alloc::vec::Vec;

use super::{
    check_rngs, clamp, fold_to, mse_loss_grad, normal, unfold_to, Agent, CriticMode,
    TransitionBatch,
};
use crate::evolve::dvd::DvdConfig;
use crate::mlp::{init_pop_mlp, soft_update_mlp, MlpAdam, OutputActivation, PopMlp};
use crate::rng::StreamRng;
use crate::tensor::{concat_last, reduce_mean_members, split_last};
use crate::{Error, PopTensor, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Td3Config {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub action_bound: f64,
    pub mode: CriticMode,
}

impl Td3Config {
    /// Standard `(256, 256)` networks.
    pub fn standard(obs_dim: usize, action_dim: usize, action_bound: f64) -> Self {
        Self {
            obs_dim,
            action_dim,
            hidden: vec![256, 256],
            action_bound,
            mode: CriticMode::Independent,
        }
    }

    /// Small `(32, 32)` networks for tests and quick runs.
    pub fn desk(obs_dim: usize, action_dim: usize, action_bound: f64) -> Self {
        Self {
            hidden: vec![32, 32],
            ..Self::standard(obs_dim, action_dim, action_bound)
        }
    }

    pub fn with_mode(mut self, mode: CriticMode) -> Self {
        self.mode = mode;
        self
    }

    fn policy_dims(&self) -> Vec<usize> {
        let mut d = vec![self.obs_dim];
        d.extend_from_slice(&self.hidden);
        d.push(self.action_dim);
        d
    }

    fn critic_dims(&self) -> Vec<usize> {
        let mut d = vec![self.obs_dim + self.action_dim];
        d.extend_from_slice(&self.hidden);
        d.push(1);
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Td3MemberHyper {
    pub critic_lr: f64,
    pub policy_lr: f64,
    /// Fraction of critic updates that also update the policy, in `(0, 1]`.
    pub policy_delay_ratio: f64,
    pub exploration_noise_std: f64,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub discount: f64,
    pub tau: f64,
}

impl Default for Td3MemberHyper {
    fn default() -> Self {
        Self {
            critic_lr: 3e-4,
            policy_lr: 3e-4,
            policy_delay_ratio: 0.5,
            exploration_noise_std: 0.1,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            discount: 0.99,
            tau: 0.005,
        }
    }
}

impl Td3MemberHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.critic_lr > 0.0
            && self.policy_lr > 0.0
            && self.policy_delay_ratio > 0.0
            && self.policy_delay_ratio <= 1.0
            && self.exploration_noise_std >= 0.0
            && self.target_noise_std >= 0.0
            && self.target_noise_clip >= 0.0
            && (0.0..=1.0).contains(&self.discount)
            && self.tau > 0.0
            && self.tau <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "invalid TD3 hyperparameters {self:?}"
            )))
        }
    }
}

/// Per-member TD3 hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3Hyper {
    pub members: Vec<Td3MemberHyper>,
}

impl Td3Hyper {
    pub fn uniform(n: usize, h: Td3MemberHyper) -> Self {
        Self {
            members: vec![h; n],
        }
    }

    fn column<T: Real>(&self, f: impl Fn(&Td3MemberHyper) -> f64) -> Vec<T> {
        self.members.iter().map(|h| T::of(f(h))).collect()
    }

    pub fn select_members(&self, members: &[usize]) -> Self {
        Self {
            members: members.iter().map(|&i| self.members[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Td3State<T> {
    pub policy: PopMlp<T>,
    pub target_policy: PopMlp<T>,
    pub critics: [PopMlp<T>; 2],
    pub target_critics: [PopMlp<T>; 2],
    pub policy_opt: MlpAdam<T>,
    pub critic_opts: [MlpAdam<T>; 2],
    /// Policy-delay accumulator per member; a policy update fires when it reaches 1.
    pub delay_acc: Vec<f64>,
    pub update_counter: Vec<u64>,
    pub mode: CriticMode,
    pub action_bound: T,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Diversity term added to the policy loss, if any.
    pub diversity: Option<DvdConfig<T>>,
}

/// Losses from one update step.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3StepStats<T> {
    /// Twin-critic loss per policy member.
    pub critic_loss: Vec<T>,
    /// Population-averaged critic loss (equals `critic_loss` mean).
    pub mean_critic_loss: T,
    pub policy_loss: Option<Vec<T>>,
    pub policy_fired: Vec<bool>,
}

impl<T: Real> Td3State<T> {
    /// `n` policies; critics have `n` members, or one when shared.
    pub fn new(cfg: &Td3Config, n: usize, seed: u64) -> Result<Self> {
        let critic_n = match cfg.mode {
            CriticMode::Independent => n,
            CriticMode::SharedCritic => 1,
        };
        let policy = init_pop_mlp(n, &cfg.policy_dims(), OutputActivation::Tanh, seed)?;
        let c1 = init_pop_mlp(
            critic_n,
            &cfg.critic_dims(),
            OutputActivation::Identity,
            seed ^ 0x5eed_0001,
        )?;
        let c2 = init_pop_mlp(
            critic_n,
            &cfg.critic_dims(),
            OutputActivation::Identity,
            seed ^ 0x5eed_0002,
        )?;
        Ok(Self {
            policy_opt: MlpAdam::new(&policy),
            critic_opts: [MlpAdam::new(&c1), MlpAdam::new(&c2)],
            target_policy: policy.clone(),
            target_critics: [c1.clone(), c2.clone()],
            policy,
            critics: [c1, c2],
            delay_acc: vec![0.0; n],
            update_counter: vec![0; n],
            mode: cfg.mode,
            action_bound: T::of(cfg.action_bound),
            obs_dim: cfg.obs_dim,
            action_dim: cfg.action_dim,
            diversity: None,
        })
    }

    pub fn with_diversity(mut self, cfg: DvdConfig<T>) -> Self {
        self.diversity = Some(cfg);
        self
    }

    pub fn critic_population(&self) -> usize {
        self.critics[0].n()
    }

    fn check_consistency(&self) -> Result<()> {
        let p = self.policy.n();
        let c = self.critic_population();
        let ok = match self.mode {
            CriticMode::Independent => c == p,
            CriticMode::SharedCritic => c == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "{:?} mode with {p} policies and {c} critics",
                self.mode
            )))
        }
    }

    /// Members `members` as an independent population (independent mode only).
    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        if self.mode != CriticMode::Independent {
            return Err(Error::Config(
                "members of a shared-critic population cannot be separated".into(),
            ));
        }
        Ok(Self {
            policy: self.policy.select_members(members)?,
            target_policy: self.target_policy.select_members(members)?,
            critics: [
                self.critics[0].select_members(members)?,
                self.critics[1].select_members(members)?,
            ],
            target_critics: [
                self.target_critics[0].select_members(members)?,
                self.target_critics[1].select_members(members)?,
            ],
            policy_opt: self.policy_opt.select_members(members)?,
            critic_opts: [
                self.critic_opts[0].select_members(members)?,
                self.critic_opts[1].select_members(members)?,
            ],
            delay_acc: members.iter().map(|&i| self.delay_acc[i]).collect(),
            update_counter: members.iter().map(|&i| self.update_counter[i]).collect(),
            diversity: None,
            ..*self
        })
    }

    /// Inverse of [`select_members`](Self::select_members) over a partition.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("cannot stack zero states".into()))?;
        let nets = |f: &dyn Fn(&Self) -> &PopMlp<T>| {
            PopMlp::stack(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
        };
        let opts = |f: &dyn Fn(&Self) -> &MlpAdam<T>| {
            MlpAdam::stack(&parts.iter().map(|p| f(p).clone()).collect::<Vec<_>>())
        };
        Ok(Self {
            policy: nets(&|p| &p.policy)?,
            target_policy: nets(&|p| &p.target_policy)?,
            critics: [nets(&|p| &p.critics[0])?, nets(&|p| &p.critics[1])?],
            target_critics: [
                nets(&|p| &p.target_critics[0])?,
                nets(&|p| &p.target_critics[1])?,
            ],
            policy_opt: opts(&|p| &p.policy_opt)?,
            critic_opts: [opts(&|p| &p.critic_opts[0])?, opts(&|p| &p.critic_opts[1])?],
            delay_acc: parts.iter().flat_map(|p| p.delay_acc.clone()).collect(),
            update_counter: parts
                .iter()
                .flat_map(|p| p.update_counter.clone())
                .collect(),
            diversity: None,
            ..*first
        })
    }

    fn critic_input(&self, obs: &PopTensor<T>, action: &PopTensor<T>) -> Result<PopTensor<T>> {
        fold_to(concat_last(obs, action)?, self.critic_population())
    }

    /// Clipped double-Q target `y = r + γ(1 − done)·min(Q'₁, Q'₂)(s', ã)`
    /// with `ã = clip(π'(s') + clip(ε, ±c), ±bound)`, shape `[N,B,1]`.
    pub fn critic_target(
        &self,
        batch: &TransitionBatch<T>,
        hyper: &Td3Hyper,
        rngs: &mut [StreamRng],
    ) -> Result<PopTensor<T>> {
        let p = self.policy.n();
        check_rngs(rngs, p)?;
        let bound = self.action_bound;
        let mut next_a = self
            .target_policy
            .predict(&batch.next_obs)?
            .map(|v| v * bound);
        for (i, rng) in rngs.iter_mut().enumerate() {
            let h = &hyper.members[i];
            let sd = T::of(h.target_noise_std) * bound;
            let clip = T::of(h.target_noise_clip) * bound;
            for v in next_a.member_mut(i) {
                let eps: T = normal(rng);
                *v = clamp(*v + clamp(sd * eps, clip), bound);
            }
        }
        let input = self.critic_input(&batch.next_obs, &next_a)?;
        let q1 = unfold_to(self.target_critics[0].predict(&input)?, p)?;
        let q2 = unfold_to(self.target_critics[1].predict(&input)?, p)?;
        let discounts: Vec<T> = hyper.column(|h| h.discount);
        let mut y = batch.reward.clone();
        let rows = y.member_len();
        for (j, v) in y.data_mut().iter_mut().enumerate() {
            let next = q1.data()[j].min(q2.data()[j]);
            *v = super::bellman_target(*v, batch.done.data()[j], next, discounts[j / rows]);
        }
        Ok(y)
    }

    /// Twin-critic MSE against fixed targets `y`: per-member losses and the
    /// gradient for each critic. In shared mode the loss is the population
    /// mean of member losses.
    pub fn critic_loss_grads(
        &self,
        obs: &PopTensor<T>,
        action: &PopTensor<T>,
        y: &PopTensor<T>,
    ) -> Result<(Vec<T>, [PopMlp<T>; 2])> {
        let p = self.policy.n();
        let group = p / self.critic_population();
        let input = self.critic_input(obs, action)?;
        let y = fold_to(y.clone(), self.critic_population())?;
        let mut losses = vec![T::zero(); p];
        let mut grads = Vec::with_capacity(2);
        for critic in &self.critics {
            let (q, cache) = critic.forward(&input)?;
            let (l, gq) = mse_loss_grad(&q, &y, group)?;
            for (acc, v) in losses.iter_mut().zip(l) {
                *acc += v;
            }
            grads.push(critic.backward(&cache, &gq)?.0);
        }
        let g2 = grads.pop().expect("two critics");
        let g1 = grads.pop().expect("two critics");
        Ok((losses, [g1, g2]))
    }

    /// Deterministic policy-gradient loss `−mean_b Q₁(s, π(s))` per member
    /// and its gradient with respect to the policy.
    pub fn policy_loss_grads(&self, obs: &PopTensor<T>) -> Result<(Vec<T>, PopMlp<T>)> {
        let p = self.policy.n();
        let bound = self.action_bound;
        let (pi, pcache) = self.policy.forward(obs)?;
        let action = pi.map(|v| v * bound);
        let input = self.critic_input(obs, &action)?;
        let (q, ccache) = self.critics[0].forward(&input)?;
        let rows = obs.shape()[1];
        let q_p = unfold_to(q.clone(), p)?;
        let losses = (0..p)
            .map(|i| -q_p.member(i).iter().copied().sum::<T>() / T::of(rows as f64))
            .collect();
        let gq = q.map(|_| -T::one() / T::of(rows as f64));
        let g_in = unfold_to(self.critics[0].backward_input(&ccache, &gq)?, p)?;
        let (_, g_a) = split_last(&g_in, self.obs_dim)?;
        let (grads, _) = self.policy.backward(&pcache, &g_a.map(|v| v * bound))?;
        Ok((losses, grads))
    }

    /// One TD3 step; returns the losses.
    pub fn update_step_stats(
        &mut self,
        batch: &TransitionBatch<T>,
        hyper: &Td3Hyper,
        rngs: &mut [StreamRng],
    ) -> Result<Td3StepStats<T>> {
        self.check_consistency()?;
        let p = self.policy.n();
        let (bn, _) = batch.validate(self.obs_dim, self.action_dim)?;
        if bn != p || hyper.members.len() != p {
            return Err(Error::Config(alloc::format!(
                "batch has {bn} members and hyper {}, population is {p}",
                hyper.members.len()
            )));
        }
        for h in &hyper.members {
            h.validate()?;
        }

        let y = self.critic_target(batch, hyper, rngs)?;
        let (critic_loss, [g1, g2]) = self.critic_loss_grads(&batch.obs, &batch.action, &y)?;
        let mean_critic_loss =
            reduce_mean_members(&PopTensor::from_vec(&[p], critic_loss.clone())?)[0];
        let critic_lr: Vec<T> = match self.mode {
            CriticMode::Independent => hyper.column(|h| h.critic_lr),
            CriticMode::SharedCritic => vec![T::of(hyper.members[0].critic_lr)],
        };
        self.critic_opts[0].step(&mut self.critics[0], &g1, &critic_lr, None)?;
        self.critic_opts[1].step(&mut self.critics[1], &g2, &critic_lr, None)?;

        let mut fired = vec![false; p];
        for (i, acc) in self.delay_acc.iter_mut().enumerate() {
            *acc += hyper.members[i].policy_delay_ratio;
            if *acc >= 1.0 - 1e-9 {
                *acc -= 1.0;
                fired[i] = true;
            }
        }

        let mut policy_loss = None;
        if fired.iter().any(|&f| f) {
            let (losses, mut grads) = self.policy_loss_grads(&batch.obs)?;
            if let Some(div) = self.diversity.as_mut() {
                let step = self.update_counter[0];
                let (_, dgrads) = div.policy_grads(&self.policy, step, self.action_bound)?;
                grads.add_assign(&dgrads)?;
            }
            let lr: Vec<T> = hyper.column(|h| h.policy_lr);
            self.policy_opt
                .step(&mut self.policy, &grads, &lr, Some(&fired))?;
            let tau: Vec<T> = hyper.column(|h| h.tau);
            soft_update_mlp(&mut self.target_policy, &self.policy, &tau, Some(&fired))?;
            for c in 0..2 {
                match self.mode {
                    CriticMode::Independent => soft_update_mlp(
                        &mut self.target_critics[c],
                        &self.critics[c],
                        &tau,
                        Some(&fired),
                    )?,
                    CriticMode::SharedCritic => soft_update_mlp(
                        &mut self.target_critics[c],
                        &self.critics[c],
                        &tau[..1],
                        None,
                    )?,
                }
            }
            policy_loss = Some(losses);
        }
        for c in &mut self.update_counter {
            *c += 1;
        }
        Ok(Td3StepStats {
            critic_loss,
            mean_critic_loss,
            policy_loss,
            policy_fired: fired,
        })
    }

    /// Resets optimizer moments and the delay accumulator of a member.
    pub fn reset_member_optimizer(&mut self, i: usize) {
        self.policy_opt.reset_member(i);
        self.delay_acc[i] = 0.0;
        if self.mode == CriticMode::Independent {
            for o in &mut self.critic_opts {
                o.reset_member(i);
            }
        }
    }

    /// Copies every per-member network of `src` onto `dst`. Shared critics
    /// are left alone.
    pub fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        self.policy.copy_member(src, dst)?;
        self.target_policy.copy_member(src, dst)?;
        if self.mode == CriticMode::Independent {
            for c in 0..2 {
                self.critics[c].copy_member(src, dst)?;
                self.target_critics[c].copy_member(src, dst)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> Agent<T> for Td3State<T> {
    type Hyper = Td3Hyper;

    fn population(&self) -> usize {
        self.policy.n()
    }

    fn policy(&self) -> &PopMlp<T> {
        &self.policy
    }

    fn update_step(
        &mut self,
        batch: &TransitionBatch<T>,
        hyper: &Td3Hyper,
        rngs: &mut [StreamRng],
    ) -> Result<()> {
        self.update_step_stats(batch, hyper, rngs).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, member_streams};

    fn batch(n: usize, b: usize, seed: u64) -> TransitionBatch<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut t = |d: usize| PopTensor::from_fn(&[n, b, d], |_| rng.random_range(-1.0..1.0));
        TransitionBatch {
            obs: t(3),
            action: t(2),
            reward: t(1),
            next_obs: t(3),
            done: PopTensor::zeros(&[n, b, 1]),
        }
    }

    #[test]
    fn zero_discount_or_done_gives_reward() {
        let cfg = Td3Config::desk(3, 2, 1.0);
        let st = Td3State::<f64>::new(&cfg, 2, 3).unwrap();
        let mut b = batch(2, 5, 1);
        let h = Td3MemberHyper {
            discount: 0.0,
            ..Default::default()
        };
        let mut rngs = member_streams(1, domain::UPDATE, 2);
        let y = st
            .critic_target(&b, &Td3Hyper::uniform(2, h), &mut rngs)
            .unwrap();
        assert_eq!(y, b.reward);
        b.done = PopTensor::full(&[2, 5, 1], 1.0);
        let y = st
            .critic_target(&b, &Td3Hyper::uniform(2, Default::default()), &mut rngs)
            .unwrap();
        assert_eq!(y, b.reward);
    }

    #[test]
    fn delay_ratio_half_updates_policy_every_other_step() {
        let cfg = Td3Config::desk(3, 2, 1.0);
        let mut st = Td3State::<f64>::new(&cfg, 1, 3).unwrap();
        let hyper = Td3Hyper::uniform(1, Td3MemberHyper::default());
        let mut rngs = member_streams(1, domain::UPDATE, 1);
        let fired: Vec<bool> = (0..6)
            .map(|k| {
                st.update_step_stats(&batch(1, 4, k), &hyper, &mut rngs)
                    .unwrap()
                    .policy_fired[0]
            })
            .collect();
        assert_eq!(fired, vec![false, true, false, true, false, true]);
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let cfg = Td3Config::desk(3, 2, 1.0);
        let mut st = Td3State::<f64>::new(&cfg, 2, 3).unwrap();
        st.mode = CriticMode::SharedCritic;
        let hyper = Td3Hyper::uniform(2, Td3MemberHyper::default());
        let mut rngs = member_streams(1, domain::UPDATE, 2);
        assert!(matches!(
            st.update_step(&batch(2, 4, 0), &hyper, &mut rngs),
            Err(Error::Config(_))
        ));
        let st = Td3State::<f64>::new(&cfg, 3, 3).unwrap();
        let mut rngs = member_streams(1, domain::UPDATE, 3);
        let mut st2 = st.clone();
        assert!(st2
            .update_step(
                &batch(2, 4, 0),
                &Td3Hyper::uniform(3, Default::default()),
                &mut rngs
            )
            .is_err());
    }

    #[test]
    fn rate_change_on_one_member_leaves_others_bitwise() {
        let cfg = Td3Config::desk(3, 2, 1.0);
        let base = Td3State::<f64>::new(&cfg, 3, 9).unwrap();
        let b = batch(3, 8, 4);
        let run = |hyper: &Td3Hyper| {
            let mut st = base.clone();
            let mut rngs = member_streams(2, domain::UPDATE, 3);
            for _ in 0..3 {
                st.update_step(&b, hyper, &mut rngs).unwrap();
            }
            st
        };
        let h = Td3Hyper::uniform(3, Td3MemberHyper::default());
        let mut h2 = h.clone();
        h2.members[1].critic_lr = 1e-2;
        h2.members[1].policy_lr = 1e-2;
        let (a, c) = (run(&h), run(&h2));
        for m in [0, 2] {
            assert_eq!(a.policy.flatten_member(m), c.policy.flatten_member(m));
            assert_eq!(
                a.critics[0].flatten_member(m),
                c.critics[0].flatten_member(m)
            );
        }
        assert_ne!(a.policy.flatten_member(1), c.policy.flatten_member(1));
    }
}
