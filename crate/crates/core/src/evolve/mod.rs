//! Population strategies that sit on top of the vectorized learner:
//! truncation-selection PBT, diagonal CEM over policy parameters and a
//! determinant-based diversity term.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::algos::{SacMemberHyper, SacState, Td3MemberHyper, Td3State};
use crate::rng::StreamRng;
use crate::{Error, Real, Result};

pub mod cem;
pub mod dvd;
pub mod pbt;

pub use cem::CemState;
pub use dvd::{DvdConfig, LambdaSchedule};
pub use pbt::{EvolvePlan, PbtState};

/// One-dimensional sampling distribution for a hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi, log) = match *self {
            Dist::Uniform { lo, hi } => (lo, hi, false),
            Dist::LogUniform { lo, hi } => (lo, hi, true),
        };
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() || (log && lo <= 0.0) {
            return Err(Error::Config(alloc::format!(
                "invalid distribution {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => rng.random_range(lo..=hi),
            Dist::LogUniform { lo, hi } => {
                libm::exp(rng.random_range(libm::log(lo)..=libm::log(hi)))
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Dist::Uniform { lo, hi } | Dist::LogUniform { lo, hi } => (lo, hi),
        }
    }
}

/// Named distributions; fields not listed keep their base value.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperPrior {
    pub entries: Vec<(String, Dist)>,
}

impl HyperPrior {
    pub fn new(entries: Vec<(String, Dist)>) -> Result<Self> {
        let p = Self { entries };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.entries.iter().try_for_each(|(_, d)| d.validate())
    }

    /// Learning rates log-uniform in `[3e-5, 3e-3]`, policy delay ratio in
    /// `[0.2, 1]`, noise parameters in `[0, 1]`, discount in `[0.9, 1]`.
    pub fn td3() -> Self {
        let lr = Dist::LogUniform { lo: 3e-5, hi: 3e-3 };
        let unit = Dist::Uniform { lo: 0.0, hi: 1.0 };
        Self::named(&[
            ("critic_lr", lr),
            ("policy_lr", lr),
            ("policy_delay_ratio", Dist::Uniform { lo: 0.2, hi: 1.0 }),
            ("exploration_noise_std", unit),
            ("target_noise_std", unit),
            ("target_noise_clip", unit),
            ("discount", Dist::Uniform { lo: 0.9, hi: 1.0 }),
        ])
    }

    /// Learning rates log-uniform in `[3e-5, 3e-3]`, target entropy between
    /// 0.2 and 2 times `−action_dim`, reward scale in `[0.1, 10]`, discount
    /// in `[0.9, 1]`.
    pub fn sac(action_dim: usize) -> Self {
        let lr = Dist::LogUniform { lo: 3e-5, hi: 3e-3 };
        let d = action_dim as f64;
        Self::named(&[
            ("policy_lr", lr),
            ("critic_lr", lr),
            ("alpha_lr", lr),
            (
                "target_entropy",
                Dist::Uniform {
                    lo: -2.0 * d,
                    hi: -0.2 * d,
                },
            ),
            ("reward_scale", Dist::Uniform { lo: 0.1, hi: 10.0 }),
            ("discount", Dist::Uniform { lo: 0.9, hi: 1.0 }),
        ])
    }

    fn named(e: &[(&str, Dist)]) -> Self {
        Self {
            entries: e.iter().map(|(k, d)| (k.to_string(), *d)).collect(),
        }
    }
}

/// A per-member hyperparameter record addressable by field name.
pub trait Resample: Copy {
    fn set(&mut self, name: &str, value: f64) -> Result<()>;
    fn get(&self, name: &str) -> Option<f64>;
}

/// Draws every field named in `prior` and keeps the rest of `base`.
pub fn sample_hyper<H: Resample>(prior: &HyperPrior, base: H, rng: &mut StreamRng) -> Result<H> {
    prior.validate()?;
    let mut h = base;
    for (name, d) in &prior.entries {
        h.set(name, d.sample(rng))?;
    }
    Ok(h)
}

fn unknown(name: &str) -> Error {
    Error::Config(alloc::format!("unknown hyperparameter `{name}`"))
}

impl Resample for Td3MemberHyper {
    fn set(&mut self, name: &str, v: f64) -> Result<()> {
        *match name {
            "critic_lr" => &mut self.critic_lr,
            "policy_lr" => &mut self.policy_lr,
            "policy_delay_ratio" => &mut self.policy_delay_ratio,
            "exploration_noise_std" => &mut self.exploration_noise_std,
            "target_noise_std" => &mut self.target_noise_std,
            "target_noise_clip" => &mut self.target_noise_clip,
            "discount" => &mut self.discount,
            "tau" => &mut self.tau,
            _ => return Err(unknown(name)),
        } = v;
        Ok(())
    }

    fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "critic_lr" => self.critic_lr,
            "policy_lr" => self.policy_lr,
            "policy_delay_ratio" => self.policy_delay_ratio,
            "exploration_noise_std" => self.exploration_noise_std,
            "target_noise_std" => self.target_noise_std,
            "target_noise_clip" => self.target_noise_clip,
            "discount" => self.discount,
            "tau" => self.tau,
            _ => return None,
        })
    }
}

impl Resample for SacMemberHyper {
    fn set(&mut self, name: &str, v: f64) -> Result<()> {
        *match name {
            "policy_lr" => &mut self.policy_lr,
            "critic_lr" => &mut self.critic_lr,
            "alpha_lr" => &mut self.alpha_lr,
            "target_entropy" => &mut self.target_entropy,
            "reward_scale" => &mut self.reward_scale,
            "discount" => &mut self.discount,
            "tau" => &mut self.tau,
            _ => return Err(unknown(name)),
        } = v;
        Ok(())
    }

    fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "policy_lr" => self.policy_lr,
            "critic_lr" => self.critic_lr,
            "alpha_lr" => self.alpha_lr,
            "target_entropy" => self.target_entropy,
            "reward_scale" => self.reward_scale,
            "discount" => self.discount,
            "tau" => self.tau,
            _ => return None,
        })
    }
}

/// Member-level surgery needed by PBT.
pub trait Evolvable {
    fn population(&self) -> usize;
    fn copy_member(&mut self, src: usize, dst: usize) -> Result<()>;
    fn reset_member_optimizer(&mut self, i: usize);
}

impl<T: Real> Evolvable for Td3State<T> {
    fn population(&self) -> usize {
        self.policy.n()
    }
    fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        Td3State::copy_member(self, src, dst)
    }
    fn reset_member_optimizer(&mut self, i: usize) {
        Td3State::reset_member_optimizer(self, i)
    }
}

impl<T: Real> Evolvable for SacState<T> {
    fn population(&self) -> usize {
        self.policy.n()
    }
    fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        SacState::copy_member(self, src, dst)
    }
    fn reset_member_optimizer(&mut self, i: usize) {
        SacState::reset_member_optimizer(self, i)
    }
}
