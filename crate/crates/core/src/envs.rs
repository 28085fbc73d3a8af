//! Native fixed-horizon continuous-control tasks.
//!
//! * `PointMass`: a 2-D point in `[−2, 2]²` driven toward the origin by a
//!   bounded acceleration. Observation `[x, y, vx, vy]`.
//! * `Pendulum`: torque-limited swing-up with `g = 10, m = 1, l = 1`.
//!   Observation `[cos θ, sin θ, ω]`.
//!
//! Episodes end exactly at the horizon; there are no terminal states.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::rng::{domain, stream, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    PointMass,
    Pendulum,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass => "point_mass",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "point_mass" | "pointmass" => Ok(EnvKind::PointMass),
            "pendulum" => Ok(EnvKind::Pendulum),
            _ => Err(Error::Config(alloc::format!("unknown environment `{s}`"))),
        }
    }

    pub fn default_spec(self) -> EnvSpec {
        match self {
            EnvKind::PointMass => EnvSpec {
                kind: self,
                observation_dim: 4,
                action_dim: 2,
                action_bound: 1.0,
                horizon: 200,
                dt: 0.05,
            },
            EnvKind::Pendulum => EnvSpec {
                kind: self,
                observation_dim: 3,
                action_dim: 1,
                action_bound: 2.0,
                horizon: 200,
                dt: 0.05,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub observation_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub horizon: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.kind.default_spec();
        if self.observation_dim != d.observation_dim || self.action_dim != d.action_dim {
            return Err(Error::Config(alloc::format!(
                "{} has fixed dimensions {}/{}",
                self.kind.name(),
                d.observation_dim,
                d.action_dim
            )));
        }
        if self.horizon == 0 || !(self.dt > 0.0) || !(self.action_bound > 0.0) {
            return Err(Error::Config(alloc::format!(
                "invalid environment spec {self:?}"
            )));
        }
        Ok(())
    }
}

pub const ARENA: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;
const G: f64 = 10.0;
const M: f64 = 1.0;
const L: f64 = 1.0;

/// Result of one interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    state: [f64; 4],
    step_index: usize,
    rng: StreamRng,
}

impl Env {
    /// New environment with its own stream; the first episode starts
    /// immediately.
    pub fn reset(spec: EnvSpec, seed: u64) -> Result<(Self, Vec<f64>)> {
        spec.validate()?;
        let mut env = Self {
            spec,
            state: [0.0; 4],
            step_index: 0,
            rng: stream(seed, domain::ENV, 0, 0),
        };
        let obs = env.next_episode();
        Ok((env, obs))
    }

    /// Starts the next episode from this environment's stream.
    pub fn next_episode(&mut self) -> Vec<f64> {
        self.step_index = 0;
        self.state = match self.spec.kind {
            EnvKind::PointMass => [
                self.rng.random_range(-ARENA..=ARENA),
                self.rng.random_range(-ARENA..=ARENA),
                0.0,
                0.0,
            ],
            EnvKind::Pendulum => [
                self.rng.random_range(-PI..=PI),
                self.rng.random_range(-1.0..=1.0),
                0.0,
                0.0,
            ],
        };
        self.observation()
    }

    /// Places the environment in an explicit physical state at step 0.
    pub fn set_state(&mut self, state: &[f64]) -> Result<Vec<f64>> {
        let n = match self.spec.kind {
            EnvKind::PointMass => 4,
            EnvKind::Pendulum => 2,
        };
        if state.len() != n {
            return Err(Error::shape("set_state", &[state.len()], &[n]));
        }
        self.state = [0.0; 4];
        self.state[..n].copy_from_slice(state);
        self.step_index = 0;
        Ok(self.observation())
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.spec.horizon
    }

    pub fn observation(&self) -> Vec<f64> {
        let s = &self.state;
        match self.spec.kind {
            EnvKind::PointMass => s.to_vec(),
            EnvKind::Pendulum => alloc::vec![libm::cos(s[0]), libm::sin(s[0]), s[1]],
        }
    }

    /// Advances one step; actions are clipped to the bound.
    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.is_done() {
            return Err(Error::Usage(
                "episode finished; start a new one first".into(),
            ));
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::shape(
                "env_step",
                &[action.len()],
                &[self.spec.action_dim],
            ));
        }
        let b = self.spec.action_bound;
        let dt = self.spec.dt;
        let clip = |a: f64| if a.is_nan() { 0.0 } else { a.clamp(-b, b) };
        let reward = match self.spec.kind {
            EnvKind::PointMass => {
                let s = &mut self.state;
                for k in 0..2 {
                    let v = s[2 + k];
                    s[k] += v * dt;
                    s[2 + k] = v + clip(action[k]) * dt;
                    if s[k].abs() >= ARENA {
                        s[k] = s[k].clamp(-ARENA, ARENA);
                        s[2 + k] = 0.0;
                    }
                }
                -libm::hypot(s[0], s[1])
            }
            EnvKind::Pendulum => {
                let s = &mut self.state;
                let (th, w) = (s[0], s[1]);
                let u = clip(action[0]);
                let cost = angle_normalize(th).powi(2) + 0.1 * w * w + 0.001 * u * u;
                let w2 = (w + (3.0 * G / (2.0 * L) * libm::sin(th) + 3.0 / (M * L * L) * u) * dt)
                    .clamp(-MAX_SPEED, MAX_SPEED);
                s[0] = th + w2 * dt;
                s[1] = w2;
                -cost
            }
        };
        self.step_index += 1;
        Ok(Step {
            observation: self.observation(),
            reward,
            done: self.is_done(),
        })
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn angle_normalize(x: f64) -> f64 {
    let r = libm::fmod(x + PI, 2.0 * PI);
    if r < 0.0 {
        r + PI
    } else {
        r - PI
    }
}
