//! Soft actor-critic with a tanh-squashed Gaussian policy, twin critics and a
//! learned temperature per member.

use alloc::vec;
use alloc::vec::Vec;

use super::{check_rngs, clamp, mse_loss_grad, normal, Agent, TransitionBatch};
use crate::adam::{adam_step, AdamState};
use crate::mlp::{init_pop_mlp, soft_update_mlp, MlpAdam, OutputActivation, PopMlp};
use crate::rng::StreamRng;
use crate::tensor::{concat_last, split_last};
use crate::{Error, PopTensor, Real, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub action_bound: f64,
    pub initial_log_alpha: f64,
}

impl SacConfig {
    pub fn standard(obs_dim: usize, action_dim: usize, action_bound: f64) -> Self {
        Self {
            obs_dim,
            action_dim,
            hidden: vec![256, 256],
            action_bound,
            initial_log_alpha: 0.0,
        }
    }

    pub fn desk(obs_dim: usize, action_dim: usize, action_bound: f64) -> Self {
        Self {
            hidden: vec![32, 32],
            ..Self::standard(obs_dim, action_dim, action_bound)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SacMemberHyper {
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub target_entropy: f64,
    pub reward_scale: f64,
    pub discount: f64,
    pub tau: f64,
}

impl SacMemberHyper {
    /// Standard values with target entropy `−action_dim`.
    pub fn for_action_dim(action_dim: usize) -> Self {
        Self {
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            target_entropy: -(action_dim as f64),
            reward_scale: 1.0,
            discount: 0.99,
            tau: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.policy_lr > 0.0
            && self.critic_lr > 0.0
            && self.alpha_lr > 0.0
            && self.target_entropy.is_finite()
            && self.reward_scale > 0.0
            && self.reward_scale.is_finite()
            && (0.0..=1.0).contains(&self.discount)
            && self.tau > 0.0
            && self.tau <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "invalid SAC hyperparameters {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacHyper {
    pub members: Vec<SacMemberHyper>,
}

impl SacHyper {
    pub fn uniform(n: usize, h: SacMemberHyper) -> Self {
        Self {
            members: vec![h; n],
        }
    }

    fn column<T: Real>(&self, f: impl Fn(&SacMemberHyper) -> f64) -> Vec<T> {
        self.members.iter().map(|h| T::of(f(h))).collect()
    }

    pub fn select_members(&self, members: &[usize]) -> Self {
        Self {
            members: members.iter().map(|&i| self.members[i]).collect(),
        }
    }
}

/// Reparametrized sample from the squashed Gaussian and what its backward
/// pass needs.
#[derive(Clone, Debug)]
pub struct Squashed<T> {
    /// `bound·tanh(u)`, `[N,B,da]`.
    pub action: PopTensor<T>,
    /// Log-density of `tanh(u)`, `[N,B,1]`.
    pub log_prob: PopTensor<T>,
    tanh_u: PopTensor<T>,
    sigma_eps: PopTensor<T>,
    log_std_live: Vec<bool>,
    bound: T,
}

/// `log(1 − tanh²u)` without cancellation for large `|u|`.
pub fn log1m_tanh_sq<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    let softplus = |x: T| x.max(T::zero()) + (-x.abs()).exp().ln_1p();
    two * (T::of(core::f64::consts::LN_2) - u - softplus(-two * u))
}

/// Samples `a = bound·tanh(μ + σ·ε)` from head output `[N,B,2·da]` laid out
/// as `(μ, log σ)`. `log σ` is clamped to `[−20, 2]`.
pub fn squashed_gaussian<T: Real>(
    head: &PopTensor<T>,
    eps: &PopTensor<T>,
    bound: T,
) -> Result<Squashed<T>> {
    let s = head.shape();
    let da = eps.shape()[2];
    if s.len() != 3 || s[2] != 2 * da || eps.shape()[..2] != s[..2] {
        return Err(Error::shape("squashed_gaussian", s, eps.shape()));
    }
    let rows = s[0] * s[1];
    let half_ln_2pi = T::of(0.5 * libm::log(2.0 * core::f64::consts::PI));
    let (lo, hi) = (T::of(LOG_STD_MIN), T::of(LOG_STD_MAX));
    let mut action = PopTensor::zeros(eps.shape());
    let mut tanh_u = PopTensor::zeros(eps.shape());
    let mut sigma_eps = PopTensor::zeros(eps.shape());
    let mut log_prob = PopTensor::zeros(&[s[0], s[1], 1]);
    let mut live = vec![false; rows * da];
    for r in 0..rows {
        let h = &head.data()[r * 2 * da..(r + 1) * 2 * da];
        let mut lp = T::zero();
        for j in 0..da {
            let k = r * da + j;
            let raw = h[da + j];
            live[k] = raw > lo && raw < hi;
            let ls = raw.max(lo).min(hi);
            let e = eps.data()[k];
            let se = ls.exp() * e;
            let u = h[j] + se;
            let t = u.tanh();
            action.data_mut()[k] = bound * t;
            tanh_u.data_mut()[k] = t;
            sigma_eps.data_mut()[k] = se;
            lp += -T::of(0.5) * e * e - ls - half_ln_2pi - log1m_tanh_sq(u);
        }
        log_prob.data_mut()[r] = lp;
    }
    Ok(Squashed {
        action,
        log_prob,
        tanh_u,
        sigma_eps,
        log_std_live: live,
        bound,
    })
}

impl<T: Real> Squashed<T> {
    /// Gradient with respect to the head output given upstream gradients on
    /// the action and the log-probability, holding `ε` fixed.
    pub fn backward(&self, g_action: &PopTensor<T>, g_logp: &PopTensor<T>) -> PopTensor<T> {
        let s = self.action.shape();
        let (rows, da) = (s[0] * s[1], s[2]);
        let two = T::of(2.0);
        let mut out = PopTensor::zeros(&[s[0], s[1], 2 * da]);
        for r in 0..rows {
            let gl = g_logp.data()[r];
            for j in 0..da {
                let k = r * da + j;
                let t = self.tanh_u.data()[k];
                // ∂/∂u of a and of log π (via −log(1 − tanh²u)).
                let du = g_action.data()[k] * self.bound * (T::one() - t * t) + gl * two * t;
                let o = out.data_mut();
                o[r * 2 * da + j] = du;
                o[r * 2 * da + da + j] = if self.log_std_live[k] {
                    du * self.sigma_eps.data()[k] - gl
                } else {
                    T::zero()
                };
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacState<T> {
    pub policy: PopMlp<T>,
    pub critics: [PopMlp<T>; 2],
    pub target_critics: [PopMlp<T>; 2],
    pub policy_opt: MlpAdam<T>,
    pub critic_opts: [MlpAdam<T>; 2],
    /// `[N,1]`.
    pub log_alpha: PopTensor<T>,
    pub alpha_opt: AdamState<T>,
    pub update_counter: Vec<u64>,
    pub action_bound: T,
    pub obs_dim: usize,
    pub action_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacStepStats<T> {
    pub critic_loss: Vec<T>,
    pub policy_loss: Vec<T>,
    pub alpha: Vec<T>,
    pub mean_log_prob: Vec<T>,
}

/// Gradient of `−α·mean(log π + target_entropy)` with respect to `log α`.
pub fn alpha_grad<T: Real>(alpha: T, mean_log_prob: T, target_entropy: T) -> T {
    -alpha * (mean_log_prob + target_entropy)
}

impl<T: Real> SacState<T> {
    pub fn new(cfg: &SacConfig, n: usize, seed: u64) -> Result<Self> {
        let mut pd = vec![cfg.obs_dim];
        pd.extend_from_slice(&cfg.hidden);
        pd.push(2 * cfg.action_dim);
        let mut cd = vec![cfg.obs_dim + cfg.action_dim];
        cd.extend_from_slice(&cfg.hidden);
        cd.push(1);
        let policy = init_pop_mlp(n, &pd, OutputActivation::Identity, seed)?;
        let c1 = init_pop_mlp(n, &cd, OutputActivation::Identity, seed ^ 0x5eed_0001)?;
        let c2 = init_pop_mlp(n, &cd, OutputActivation::Identity, seed ^ 0x5eed_0002)?;
        Ok(Self {
            policy_opt: MlpAdam::new(&policy),
            critic_opts: [MlpAdam::new(&c1), MlpAdam::new(&c2)],
            target_critics: [c1.clone(), c2.clone()],
            policy,
            critics: [c1, c2],
            log_alpha: PopTensor::full(&[n, 1], T::of(cfg.initial_log_alpha)),
            alpha_opt: AdamState::new(&[n, 1]),
            update_counter: vec![0; n],
            action_bound: T::of(cfg.action_bound),
            obs_dim: cfg.obs_dim,
            action_dim: cfg.action_dim,
        })
    }

    pub fn alpha(&self) -> Vec<T> {
        self.log_alpha.data().iter().map(|v| v.exp()).collect()
    }

    fn draw_eps(&self, rngs: &mut [StreamRng], rows: usize) -> PopTensor<T> {
        let n = self.policy.n();
        let per = rows * self.action_dim;
        let mut eps = PopTensor::zeros(&[n, rows, self.action_dim]);
        for (i, rng) in rngs.iter_mut().enumerate() {
            for v in &mut eps.data_mut()[i * per..(i + 1) * per] {
                *v = normal(rng);
            }
        }
        eps
    }

    /// Stochastic (or mean, if `deterministic`) actions in `±bound`.
    pub fn act(
        &self,
        obs: &PopTensor<T>,
        rngs: &mut [StreamRng],
        deterministic: bool,
    ) -> Result<PopTensor<T>> {
        let head = self.policy.predict(obs)?;
        let (mu, _) = split_last(&head, self.action_dim)?;
        if deterministic {
            let b = self.action_bound;
            return Ok(mu.map(|u| b * u.tanh()));
        }
        check_rngs(rngs, self.policy.n())?;
        let eps = self.draw_eps(rngs, obs.shape()[1]);
        let sq = squashed_gaussian(&head, &eps, self.action_bound)?;
        let b = self.action_bound;
        Ok(sq.action.map(|v| clamp(v, b)))
    }

    /// Soft target `scale·r + γ(1 − done)·(min Q'(s', a') − α·log π(a'|s'))`
    /// with `a'` drawn from the current policy using `eps_next`.
    pub fn critic_target(
        &self,
        batch: &TransitionBatch<T>,
        hyper: &SacHyper,
        eps_next: &PopTensor<T>,
    ) -> Result<PopTensor<T>> {
        let head = self.policy.predict(&batch.next_obs)?;
        let sq = squashed_gaussian(&head, eps_next, self.action_bound)?;
        let input = concat_last(&batch.next_obs, &sq.action)?;
        let q1 = self.target_critics[0].predict(&input)?;
        let q2 = self.target_critics[1].predict(&input)?;
        let alpha = self.alpha();
        let gamma: Vec<T> = hyper.column(|h| h.discount);
        let scale: Vec<T> = hyper.column(|h| h.reward_scale);
        let rows = batch.reward.member_len();
        let mut y = batch.reward.clone();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            let i = k / rows;
            let soft = q1.data()[k].min(q2.data()[k]) - alpha[i] * sq.log_prob.data()[k];
            let soft = if alpha[i] == T::zero() {
                q1.data()[k].min(q2.data()[k])
            } else {
                soft
            };
            *v = super::bellman_target(scale[i] * *v, batch.done.data()[k], soft, gamma[i]);
        }
        Ok(y)
    }

    pub fn critic_loss_grads(
        &self,
        obs: &PopTensor<T>,
        action: &PopTensor<T>,
        y: &PopTensor<T>,
    ) -> Result<(Vec<T>, [PopMlp<T>; 2])> {
        let input = concat_last(obs, action)?;
        let mut losses = vec![T::zero(); self.policy.n()];
        let mut grads = Vec::with_capacity(2);
        for critic in &self.critics {
            let (q, cache) = critic.forward(&input)?;
            let (l, gq) = mse_loss_grad(&q, y, 1)?;
            for (acc, v) in losses.iter_mut().zip(l) {
                *acc += v;
            }
            grads.push(critic.backward(&cache, &gq)?.0);
        }
        let g2 = grads.pop().expect("two critics");
        let g1 = grads.pop().expect("two critics");
        Ok((losses, [g1, g2]))
    }

    /// Policy loss `mean_b(α·log π(a|s) − min(Q₁, Q₂)(s, a))` per member with
    /// `a` reparametrized through `eps`; also returns per-member `mean log π`.
    pub fn policy_loss_grads(
        &self,
        obs: &PopTensor<T>,
        eps: &PopTensor<T>,
    ) -> Result<(Vec<T>, Vec<T>, PopMlp<T>)> {
        let n = self.policy.n();
        let rows = obs.shape()[1];
        let inv_b = T::one() / T::of(rows as f64);
        let alpha = self.alpha();
        let (head, pcache) = self.policy.forward(obs)?;
        let sq = squashed_gaussian(&head, eps, self.action_bound)?;
        let input = concat_last(obs, &sq.action)?;
        let (q1, c1) = self.critics[0].forward(&input)?;
        let (q2, c2) = self.critics[1].forward(&input)?;
        let mut g1 = q1.zeros_like();
        let mut g2 = q2.zeros_like();
        let mut losses = vec![T::zero(); n];
        let mut mean_lp = vec![T::zero(); n];
        for k in 0..n * rows {
            let i = k / rows;
            let (a, b) = (q1.data()[k], q2.data()[k]);
            // Ties route to the first critic.
            if a <= b {
                g1.data_mut()[k] = -inv_b;
            } else {
                g2.data_mut()[k] = -inv_b;
            }
            let lp = sq.log_prob.data()[k];
            losses[i] += (alpha[i] * lp - a.min(b)) * inv_b;
            mean_lp[i] += lp * inv_b;
        }
        let gin1 = self.critics[0].backward_input(&c1, &g1)?;
        let gin2 = self.critics[1].backward_input(&c2, &g2)?;
        let (_, ga1) = split_last(&gin1, self.obs_dim)?;
        let (_, mut ga) = split_last(&gin2, self.obs_dim)?;
        ga.add_assign(&ga1)?;
        let g_logp = PopTensor::from_fn(&[n, rows, 1], |k| alpha[k / rows] * inv_b);
        let g_head = sq.backward(&ga, &g_logp);
        let (grads, _) = self.policy.backward(&pcache, &g_head)?;
        Ok((losses, mean_lp, grads))
    }

    pub fn update_step_stats(
        &mut self,
        batch: &TransitionBatch<T>,
        hyper: &SacHyper,
        rngs: &mut [StreamRng],
    ) -> Result<SacStepStats<T>> {
        let n = self.policy.n();
        let (bn, rows) = batch.validate(self.obs_dim, self.action_dim)?;
        if bn != n || hyper.members.len() != n {
            return Err(Error::Config(alloc::format!(
                "batch has {bn} members and hyper {}, population is {n}",
                hyper.members.len()
            )));
        }
        check_rngs(rngs, n)?;
        for h in &hyper.members {
            h.validate()?;
        }

        let eps_next = self.draw_eps(rngs, rows);
        let eps = self.draw_eps(rngs, rows);

        let y = self.critic_target(batch, hyper, &eps_next)?;
        let (critic_loss, [g1, g2]) = self.critic_loss_grads(&batch.obs, &batch.action, &y)?;
        let critic_lr: Vec<T> = hyper.column(|h| h.critic_lr);
        self.critic_opts[0].step(&mut self.critics[0], &g1, &critic_lr, None)?;
        self.critic_opts[1].step(&mut self.critics[1], &g2, &critic_lr, None)?;

        let (policy_loss, mean_lp, pg) = self.policy_loss_grads(&batch.obs, &eps)?;
        let policy_lr: Vec<T> = hyper.column(|h| h.policy_lr);
        self.policy_opt
            .step(&mut self.policy, &pg, &policy_lr, None)?;

        let alpha = self.alpha();
        let ga = PopTensor::from_fn(&[n, 1], |i| {
            alpha_grad(alpha[i], mean_lp[i], T::of(hyper.members[i].target_entropy))
        });
        let alpha_lr: Vec<T> = hyper.column(|h| h.alpha_lr);
        adam_step(&mut self.log_alpha, &ga, &mut self.alpha_opt, &alpha_lr)?;

        let tau: Vec<T> = hyper.column(|h| h.tau);
        for c in 0..2 {
            soft_update_mlp(&mut self.target_critics[c], &self.critics[c], &tau, None)?;
        }
        for c in &mut self.update_counter {
            *c += 1;
        }
        Ok(SacStepStats {
            critic_loss,
            policy_loss,
            alpha,
            mean_log_prob: mean_lp,
        })
    }

    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        Ok(Self {
            policy: self.policy.select_members(members)?,
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
            log_alpha: self.log_alpha.select_members(members)?,
            alpha_opt: self.alpha_opt.select_members(members)?,
            update_counter: members.iter().map(|&i| self.update_counter[i]).collect(),
            ..*self
        })
    }

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
            critics: [nets(&|p| &p.critics[0])?, nets(&|p| &p.critics[1])?],
            target_critics: [
                nets(&|p| &p.target_critics[0])?,
                nets(&|p| &p.target_critics[1])?,
            ],
            policy_opt: opts(&|p| &p.policy_opt)?,
            critic_opts: [opts(&|p| &p.critic_opts[0])?, opts(&|p| &p.critic_opts[1])?],
            log_alpha: PopTensor::stack(
                &parts
                    .iter()
                    .map(|p| p.log_alpha.clone())
                    .collect::<Vec<_>>(),
            )?,
            alpha_opt: AdamState::stack(
                &parts
                    .iter()
                    .map(|p| p.alpha_opt.clone())
                    .collect::<Vec<_>>(),
            )?,
            update_counter: parts
                .iter()
                .flat_map(|p| p.update_counter.clone())
                .collect(),
            ..*first
        })
    }

    pub fn reset_member_optimizer(&mut self, i: usize) {
        self.policy_opt.reset_member(i);
        self.alpha_opt.reset_member(i);
        for o in &mut self.critic_opts {
            o.reset_member(i);
        }
    }

    pub fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        self.policy.copy_member(src, dst)?;
        for c in 0..2 {
            self.critics[c].copy_member(src, dst)?;
            self.target_critics[c].copy_member(src, dst)?;
        }
        self.log_alpha.copy_member(src, dst)
    }
}

impl<T: Real> Agent<T> for SacState<T> {
    type Hyper = SacHyper;

    fn population(&self) -> usize {
        self.policy.n()
    }

    fn policy(&self) -> &PopMlp<T> {
        &self.policy
    }

    fn update_step(
        &mut self,
        batch: &TransitionBatch<T>,
        hyper: &SacHyper,
        rngs: &mut [StreamRng],
    ) -> Result<()> {
        self.update_step_stats(batch, hyper, rngs).map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_log1m_tanh_sq() {
        for &u in &[-30.0f64, -3.0, -0.2, 0.0, 0.7, 5.0, 40.0] {
            let got = log1m_tanh_sq(u);
            let want = (1.0 - u.tanh().powi(2)).ln();
            if u.abs() < 6.0 {
                assert!((got - want).abs() < 1e-10, "u={u}");
            }
            assert!(got.is_finite());
        }
        // Asymptote 2ln2 − 2|u|.
        assert!((log1m_tanh_sq(40.0f64) - (2.0 * 2f64.ln() - 80.0)).abs() < 1e-9);
    }

    #[test]
    fn alpha_gradient_vanishes_at_target() {
        assert_eq!(alpha_grad(0.3f64, 2.0, -2.0), 0.0);
        assert!(alpha_grad(0.3f64, 1.0, -2.0) > 0.0);
    }

    #[test]
    fn zero_discount_zero_alpha_gives_scaled_reward() {
        let cfg = SacConfig::desk(3, 2, 1.0);
        let mut st = SacState::<f64>::new(&cfg, 2, 4).unwrap();
        st.log_alpha = PopTensor::full(&[2, 1], f64::NEG_INFINITY);
        let b = TransitionBatch {
            obs: PopTensor::from_fn(&[2, 4, 3], |i| i as f64 * 0.1),
            action: PopTensor::zeros(&[2, 4, 2]),
            reward: PopTensor::from_fn(&[2, 4, 1], |i| i as f64 - 3.0),
            next_obs: PopTensor::from_fn(&[2, 4, 3], |i| -(i as f64) * 0.1),
            done: PopTensor::zeros(&[2, 4, 1]),
        };
        let h = SacMemberHyper {
            discount: 0.0,
            reward_scale: 2.5,
            ..SacMemberHyper::for_action_dim(2)
        };
        let eps = PopTensor::from_fn(&[2, 4, 2], |i| (i as f64).sin());
        let y = st
            .critic_target(&b, &SacHyper::uniform(2, h), &eps)
            .unwrap();
        assert_eq!(y, b.reward.map(|r| 2.5 * r));
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        // Finite difference of tanh against the analytic correction.
        let head = PopTensor::from_vec(&[1, 1, 2], vec![0.4f64, -0.3]).unwrap();
        let eps = PopTensor::from_vec(&[1, 1, 1], vec![0.8]).unwrap();
        let sq = squashed_gaussian(&head, &eps, 1.0).unwrap();
        let sigma = (-0.3f64).exp();
        let u = 0.4 + sigma * 0.8;
        let h = 1e-6;
        let jac = ((u + h).tanh() - (u - h).tanh()) / (2.0 * h);
        let base = -0.5 * 0.8f64.powi(2) - (-0.3) - 0.5 * (2.0 * core::f64::consts::PI).ln();
        let want = base - jac.ln();
        let got = sq.log_prob.data()[0];
        assert!(((got - want) / want).abs() < 1e-5, "{got} vs {want}");
    }
}
