//! Run configuration, read from TOML.
//!
//! ```toml
//! algorithm = "td3"          # td3 | sac
//! strategy = "pbt"           # none | pbt | cem | dvd
//! population = 8
//! k = 50
//!
//! [env]
//! kind = "point_mass"
//!
//! [pbt]
//! interval = 5000
//! ```
//!
//! Every key is optional; see [`RunConfig::default`].

use std::path::{Path, PathBuf};

use popvec_core::algos::sac::SacMemberHyper;
use popvec_core::algos::td3::Td3MemberHyper;
use popvec_core::algos::CriticMode;
use popvec_core::envs::{EnvKind, EnvSpec};
use popvec_core::replay::BufferMode;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Td3,
    Sac,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Independent,
    SharedCritic,
}

impl From<Mode> for CriticMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Independent => CriticMode::Independent,
            Mode::SharedCritic => CriticMode::SharedCritic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Pbt,
    Cem,
    Dvd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    PerAgent,
    Shared,
}

impl From<BufferKind> for BufferMode {
    fn from(b: BufferKind) -> Self {
        match b {
            BufferKind::PerAgent => BufferMode::PerAgent,
            BufferKind::Shared => BufferMode::Shared,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: String,
    /// Overrides the environment's default episode length.
    pub horizon: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: "point_mass".into(),
            horizon: None,
        }
    }
}

impl EnvConfig {
    pub fn spec(&self) -> Result<EnvSpec> {
        let mut spec = EnvKind::parse(&self.kind)?.default_spec();
        if let Some(h) = self.horizon {
            spec.horizon = h;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Environment steps per member collected before learning starts.
    pub warmup: usize,
    /// Target update steps per environment step per member.
    pub ratio: f64,
    pub slack: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1_000_000,
            warmup: 1000,
            ratio: 1.0,
            slack: 0.05,
        }
    }
}

#[derive(Clone, Default, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub path: Option<PathBuf>,
    /// Update steps between checkpoints; 0 writes only the final one.
    pub interval: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbtConfig {
    pub interval: u64,
    pub truncation_fraction: f64,
    /// Optional bounds replacing the default learning-rate prior,
    /// `[low, high]`, sampled log-uniformly.
    pub lr_range: Option<[f64; 2]>,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            interval: 10_000,
            truncation_fraction: 0.3,
            lr_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    /// Update steps per generation.
    pub interval: u64,
    pub init_var: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            interval: 5000,
            init_var: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DvdSection {
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub horizon: u64,
    pub probes: usize,
}

impl Default for DvdSection {
    fn default() -> Self {
        Self {
            lambda_start: 0.5,
            lambda_end: 0.0,
            horizon: 500_000,
            probes: 20,
        }
    }
}

/// Optional per-algorithm overrides; unset keys keep the defaults.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Section {
    pub critic_lr: Option<f64>,
    pub policy_lr: Option<f64>,
    pub policy_delay_ratio: Option<f64>,
    pub exploration_noise_std: Option<f64>,
    pub target_noise_std: Option<f64>,
    pub target_noise_clip: Option<f64>,
    pub discount: Option<f64>,
    pub tau: Option<f64>,
}

impl Td3Section {
    pub fn apply(&self, mut h: Td3MemberHyper) -> Td3MemberHyper {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut h.critic_lr, self.critic_lr);
        set(&mut h.policy_lr, self.policy_lr);
        set(&mut h.policy_delay_ratio, self.policy_delay_ratio);
        set(&mut h.exploration_noise_std, self.exploration_noise_std);
        set(&mut h.target_noise_std, self.target_noise_std);
        set(&mut h.target_noise_clip, self.target_noise_clip);
        set(&mut h.discount, self.discount);
        set(&mut h.tau, self.tau);
        h
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacSection {
    pub policy_lr: Option<f64>,
    pub critic_lr: Option<f64>,
    pub alpha_lr: Option<f64>,
    pub target_entropy: Option<f64>,
    pub reward_scale: Option<f64>,
    pub discount: Option<f64>,
    pub tau: Option<f64>,
}

impl SacSection {
    pub fn apply(&self, mut h: SacMemberHyper) -> SacMemberHyper {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut h.policy_lr, self.policy_lr);
        set(&mut h.critic_lr, self.critic_lr);
        set(&mut h.alpha_lr, self.alpha_lr);
        set(&mut h.target_entropy, self.target_entropy);
        set(&mut h.reward_scale, self.reward_scale);
        set(&mut h.discount, self.discount);
        set(&mut h.tau, self.tau);
        h
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub strategy: Strategy,
    pub population: usize,
    /// Update steps per burst.
    pub k: usize,
    pub actor_workers: usize,
    pub buffer_mode: BufferKind,
    pub seed: u64,
    pub total_update_steps: u64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub metrics_path: Option<PathBuf>,
    /// Seconds any pipeline stage may wait before the run is aborted.
    pub timeout_s: f64,
    pub env: EnvConfig,
    pub replay: ReplayConfig,
    pub checkpoint: CheckpointConfig,
    pub pbt: PbtConfig,
    pub cem: CemConfig,
    pub dvd: DvdSection,
    pub td3: Td3Section,
    pub sac: SacSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Td3,
            mode: Mode::Independent,
            strategy: Strategy::None,
            population: 1,
            k: 50,
            actor_workers: 1,
            buffer_mode: BufferKind::PerAgent,
            seed: 0,
            total_update_steps: 20_000,
            batch_size: 256,
            hidden: vec![256, 256],
            metrics_path: None,
            timeout_s: 60.0,
            env: EnvConfig::default(),
            replay: ReplayConfig::default(),
            checkpoint: CheckpointConfig::default(),
            pbt: PbtConfig::default(),
            cem: CemConfig::default(),
            dvd: DvdSection::default(),
            td3: Td3Section::default(),
            sac: SacSection::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    popvec_core::Error::Config(msg.into()).into()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(invalid("population must be at least 1"));
        }
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.actor_workers == 0 {
            return Err(invalid("actor_workers must be at least 1"));
        }
        if self.batch_size == 0 || self.total_update_steps == 0 {
            return Err(invalid(
                "batch_size and total_update_steps must be positive",
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("hidden layers must be non-empty and positive"));
        }
        if !(self.timeout_s > 0.0) {
            return Err(invalid("timeout_s must be positive"));
        }
        let r = &self.replay;
        if r.capacity == 0 || !(r.ratio > 0.0) || !(r.slack >= 0.0) {
            return Err(invalid(
                "replay needs capacity > 0, ratio > 0 and slack >= 0",
            ));
        }
        if self.algorithm == Algorithm::Sac && self.mode == Mode::SharedCritic {
            return Err(invalid("shared_critic mode is only available for td3"));
        }
        match self.strategy {
            Strategy::Pbt if self.pbt.interval == 0 => {
                return Err(invalid("pbt.interval must be positive"))
            }
            Strategy::Cem => {
                if self.cem.interval == 0 || !(self.cem.init_var > 0.0) {
                    return Err(invalid("cem needs interval > 0 and init_var > 0"));
                }
                if self.population < 2 || !self.population.is_multiple_of(2) {
                    return Err(invalid("cem needs an even population of at least 2"));
                }
            }
            Strategy::Dvd => {
                if self.algorithm != Algorithm::Td3 {
                    return Err(invalid("dvd is only available for td3"));
                }
                if self.population < 2 || self.dvd.probes == 0 {
                    return Err(invalid(
                        "dvd needs population >= 2 and at least one probe state",
                    ));
                }
            }
            _ => {}
        }
        if let Some([lo, hi]) = self.pbt.lr_range {
            if !(lo > 0.0 && hi > lo) {
                return Err(invalid("pbt.lr_range must satisfy 0 < low < high"));
            }
        }
        self.env.spec()?;
        self.member_hyper_td3().validate()?;
        self.member_hyper_sac()?.validate()?;
        Ok(())
    }

    pub fn member_hyper_td3(&self) -> Td3MemberHyper {
        self.td3.apply(Td3MemberHyper::default())
    }

    pub fn member_hyper_sac(&self) -> Result<SacMemberHyper> {
        let spec = self.env.spec()?;
        Ok(self
            .sac
            .apply(SacMemberHyper::for_action_dim(spec.action_dim)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            r#"
            algorithm = "sac"
            strategy = "pbt"
            population = 4
            buffer_mode = "shared"
            [env]
            kind = "pendulum"
            [sac]
            reward_scale = 5.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Sac);
        assert_eq!(cfg.env.spec().unwrap().kind, EnvKind::Pendulum);
        assert_eq!(cfg.member_hyper_sac().unwrap().reward_scale, 5.0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("population = 0").is_err());
        assert!(RunConfig::from_toml("k = 0").is_err());
        assert!(RunConfig::from_toml("actor_workers = 0").is_err());
        assert!(RunConfig::from_toml("strategy = \"cem\"\npopulation = 3").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[env]\nkind = \"cartpole\"").is_err());
        assert!(RunConfig::from_toml("[td3]\ndiscount = 1.5").is_err());
    }
}
