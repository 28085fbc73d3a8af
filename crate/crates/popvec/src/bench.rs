//! Update-step benchmark over three execution strategies of the same work.
//!
//! * `sequential`: one single-member agent per member, updated one after
//!   another on the calling thread;
//! * `vectorized`: one population agent updated with population kernels;
//! * `parallel_threads`: the single-member agents spread over at most
//!   `available_parallelism()` threads, spawned and joined per repetition.
//!
//! Every mode runs `k` update steps per repetition on batches generated once
//! before timing. The first repetition is the warmup and is reported apart
//! from the median and interquartile range.

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use popvec_core::algos::sac::{SacConfig, SacHyper, SacMemberHyper, SacState};
use popvec_core::algos::td3::{Td3Config, Td3Hyper, Td3MemberHyper, Td3State};
use popvec_core::algos::{Agent, TransitionBatch};
use popvec_core::envs::EnvKind;
use popvec_core::rng::{domain, member_streams, stream, StreamRng};
use popvec_core::tensor::kernel_launches;
use popvec_core::{PopTensor, Real};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Algorithm;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Sequential,
    Vectorized,
    ParallelThreads,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [
        BenchMode::Sequential,
        BenchMode::Vectorized,
        BenchMode::ParallelThreads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Sequential => "sequential",
            BenchMode::Vectorized => "vectorized",
            BenchMode::ParallelThreads => "parallel_threads",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                popvec_core::Error::Config(format!(
                    "unknown bench mode `{s}` (expected sequential, vectorized or parallel_threads)"
                ))
                .into()
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub mode: BenchMode,
    pub algorithm: Algorithm,
    pub n: usize,
    pub k: usize,
    /// Timed repetitions, warmup excluded.
    pub reps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub env: EnvKind,
    pub seed: u64,
    /// Estimated working-set limit in bytes.
    pub memory_budget: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            mode: BenchMode::Vectorized,
            algorithm: Algorithm::Td3,
            n: 1,
            k: 50,
            reps: 5,
            batch_size: 64,
            hidden: vec![32, 32],
            env: EnvKind::PointMass,
            seed: 0,
            memory_budget: 4 << 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub n: usize,
    pub k: usize,
    pub repetitions: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub warmup_ms: f64,
    /// Population kernels launched by one repetition (vectorized mode only).
    pub kernel_launches: Option<u64>,
}

/// Quantile of sorted data with linear interpolation between order
/// statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(median, interquartile range)`.
pub fn median_iqr(times: &[f64]) -> (f64, f64) {
    let mut s = times.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

pub fn hardware_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Agents the harness can split into single-member copies.
pub trait BenchAgent<T: Real>: Agent<T> + Checkpoint<T> + Send + Sized
where
    Self::Hyper: Send + Sync,
{
    fn build(spec: &BenchSpec) -> Result<(Self, Self::Hyper)>;
    fn member(&self, hyper: &Self::Hyper, i: usize) -> Result<(Self, Self::Hyper)>;
    /// Parameters per member, used for the memory estimate.
    fn member_params(&self) -> usize;
}

fn dims(spec: &BenchSpec) -> (usize, usize, f64) {
    let e = spec.env.default_spec();
    (e.observation_dim, e.action_dim, e.action_bound)
}

impl<T: Real> BenchAgent<T> for Td3State<T> {
    fn build(spec: &BenchSpec) -> Result<(Self, Td3Hyper)> {
        let (od, ad, bound) = dims(spec);
        let cfg = Td3Config {
            hidden: spec.hidden.clone(),
            ..Td3Config::desk(od, ad, bound)
        };
        Ok((
            Td3State::new(&cfg, spec.n, spec.seed)?,
            Td3Hyper::uniform(spec.n, Td3MemberHyper::default()),
        ))
    }

    fn member(&self, hyper: &Td3Hyper, i: usize) -> Result<(Self, Td3Hyper)> {
        Ok((self.select_members(&[i])?, hyper.select_members(&[i])))
    }

    fn member_params(&self) -> usize {
        self.policy.member_param_count() + 2 * self.critics[0].member_param_count()
    }
}

impl<T: Real> BenchAgent<T> for SacState<T> {
    fn build(spec: &BenchSpec) -> Result<(Self, SacHyper)> {
        let (od, ad, bound) = dims(spec);
        let cfg = SacConfig {
            hidden: spec.hidden.clone(),
            ..SacConfig::desk(od, ad, bound)
        };
        Ok((
            SacState::new(&cfg, spec.n, spec.seed)?,
            SacHyper::uniform(spec.n, SacMemberHyper::for_action_dim(ad)),
        ))
    }

    fn member(&self, hyper: &SacHyper, i: usize) -> Result<(Self, SacHyper)> {
        Ok((self.select_members(&[i])?, hyper.select_members(&[i])))
    }

    fn member_params(&self) -> usize {
        self.policy.member_param_count() + 2 * self.critics[0].member_param_count()
    }
}

/// `k` synthetic batches of shape `[n, b, ·]`.
pub fn synthetic_batches<T: Real>(spec: &BenchSpec) -> Result<Vec<TransitionBatch<T>>> {
    let (od, ad, bound) = dims(spec);
    let (n, b) = (spec.n, spec.batch_size);
    let mut rng = stream(spec.seed, domain::BENCH, 0, 0);
    let mut draw = |shape: &[usize], lo: f64, hi: f64| {
        PopTensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    };
    Ok((0..spec.k)
        .map(|_| TransitionBatch {
            obs: draw(&[n, b, od], -2.0, 2.0),
            action: draw(&[n, b, ad], -bound, bound),
            reward: draw(&[n, b, 1], -3.0, 0.0),
            next_obs: draw(&[n, b, od], -2.0, 2.0),
            done: PopTensor::zeros(&[n, b, 1]),
        })
        .collect())
}

/// Estimated bytes for parameters, targets, optimizer moments and batches.
pub fn estimate_bytes<T: Real>(spec: &BenchSpec, member_params: usize) -> usize {
    let (od, ad, _) = dims(spec);
    let per_member = member_params * 5;
    let batch = spec.k * spec.batch_size * (2 * od + ad + 2);
    // Modes other than vectorized keep a second, per-member copy of the data.
    let copies = if spec.mode == BenchMode::Vectorized {
        1
    } else {
        2
    };
    spec.n * (per_member + batch) * copies * T::BYTES
}

/// Population state prepared for one mode.
enum Prepared<A: Agent<T>, T: Real> {
    Population {
        agent: A,
        hyper: A::Hyper,
        rngs: Vec<StreamRng>,
        batches: Vec<TransitionBatch<T>>,
    },
    Members(Vec<MemberJob<A, T>>),
}

struct MemberJob<A: Agent<T>, T: Real> {
    agent: A,
    hyper: A::Hyper,
    rng: StreamRng,
    batches: Vec<TransitionBatch<T>>,
}

impl<A: Agent<T>, T: Real> MemberJob<A, T> {
    fn run(&mut self) -> popvec_core::Result<()> {
        for b in &self.batches {
            self.agent
                .update_step(b, &self.hyper, std::slice::from_mut(&mut self.rng))?;
        }
        Ok(())
    }
}

fn prepare<T: Real, A: BenchAgent<T>>(spec: &BenchSpec) -> Result<Prepared<A, T>>
where
    A::Hyper: Send + Sync,
{
    let (agent, hyper) = A::build(spec)?;
    let need = estimate_bytes::<T>(spec, agent.member_params());
    if need > spec.memory_budget {
        return Err(Error::Resource(format!(
            "{} with n={} needs about {} MiB, budget is {} MiB",
            spec.mode,
            spec.n,
            need >> 20,
            spec.memory_budget >> 20
        )));
    }
    let batches = synthetic_batches::<T>(spec)?;
    let rngs = member_streams(spec.seed, domain::UPDATE, spec.n);
    if spec.mode == BenchMode::Vectorized {
        return Ok(Prepared::Population {
            agent,
            hyper,
            rngs,
            batches,
        });
    }
    let jobs = rngs
        .into_iter()
        .enumerate()
        .map(|(i, rng)| {
            let (a, h) = agent.member(&hyper, i)?;
            let mine = batches
                .iter()
                .map(|b| b.select_members(&[i]))
                .collect::<popvec_core::Result<Vec<_>>>()?;
            Ok(MemberJob {
                agent: a,
                hyper: h,
                rng,
                batches: mine,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared::Members(jobs))
}

impl<A: Agent<T> + Send, T: Real> Prepared<A, T>
where
    A::Hyper: Send + Sync,
{
    /// One repetition: `k` update steps for every member.
    fn rep(&mut self, mode: BenchMode) -> Result<()> {
        match self {
            Prepared::Population {
                agent,
                hyper,
                rngs,
                batches,
            } => {
                for b in batches.iter() {
                    agent.update_step(b, hyper, rngs)?;
                }
            }
            Prepared::Members(jobs) if mode == BenchMode::Sequential => {
                for j in jobs.iter_mut() {
                    j.run()?;
                }
            }
            Prepared::Members(jobs) => {
                let threads = hardware_threads().min(jobs.len()).max(1);
                let per = jobs.len().div_ceil(threads);
                thread::scope(|s| {
                    let handles: Vec<_> = jobs
                        .chunks_mut(per)
                        .map(|chunk| s.spawn(move || chunk.iter_mut().try_for_each(|j| j.run())))
                        .collect();
                    handles.into_iter().try_for_each(|h| {
                        h.join()
                            .map_err(|_| Error::Worker("bench member thread panicked".into()))?
                            .map_err(Error::from)
                    })
                })?;
            }
        }
        Ok(())
    }
}

fn run_timed<T: Real, A: BenchAgent<T>>(spec: &BenchSpec) -> Result<(BenchResult, Prepared<A, T>)>
where
    A::Hyper: Send + Sync,
{
    if spec.reps < 3 {
        return Err(popvec_core::Error::Config("bench needs at least 3 repetitions".into()).into());
    }
    if spec.n == 0 || spec.k == 0 || spec.batch_size == 0 {
        return Err(
            popvec_core::Error::Config("bench needs n, k and batch size >= 1".into()).into(),
        );
    }
    let mut prepared = prepare::<T, A>(spec)?;
    let t0 = Instant::now();
    prepared.rep(spec.mode)?;
    let warmup_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut times = Vec::with_capacity(spec.reps);
    let mut launches = None;
    for _ in 0..spec.reps {
        let before = kernel_launches();
        let t = Instant::now();
        prepared.rep(spec.mode)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        if spec.mode == BenchMode::Vectorized {
            launches = Some(kernel_launches() - before);
        }
    }
    let (median_ms, iqr_ms) = median_iqr(&times);
    Ok((
        BenchResult {
            mode: spec.mode,
            n: spec.n,
            k: spec.k,
            repetitions: spec.reps,
            times_ms: times,
            median_ms,
            iqr_ms,
            warmup_ms,
            kernel_launches: launches,
        },
        prepared,
    ))
}

/// Times `spec.reps` repetitions in 32-bit precision.
pub fn bench_update(spec: &BenchSpec) -> Result<BenchResult> {
    Ok(match spec.algorithm {
        Algorithm::Td3 => run_timed::<f32, Td3State<f32>>(spec)?.0,
        Algorithm::Sac => run_timed::<f32, SacState<f32>>(spec)?.0,
    })
}

/// Per-member parameter vectors after a run, in checkpoint order.
fn member_params<T: Real, A: BenchAgent<T>>(p: &Prepared<A, T>, n: usize) -> Result<Vec<Vec<f64>>>
where
    A::Hyper: Send + Sync,
{
    let flat = |a: &A, i: usize| -> Vec<f64> {
        a.named_tensors()
            .iter()
            .flat_map(|(_, t)| {
                // Shared critics have a population of one.
                let m = if t.n() == 1 { 0 } else { i };
                t.member(m).iter().map(|v| v.as_f64()).collect::<Vec<_>>()
            })
            .collect()
    };
    Ok(match p {
        Prepared::Population { agent, .. } => (0..n).map(|i| flat(agent, i)).collect(),
        Prepared::Members(jobs) => jobs.iter().map(|j| flat(&j.agent, 0)).collect(),
    })
}

/// Runs every mode in 64-bit on identical streams and returns the largest
/// absolute parameter difference from the vectorized run.
pub fn audit_modes(spec: &BenchSpec) -> Result<f64> {
    fn go<A: BenchAgent<f64>>(spec: &BenchSpec) -> Result<f64>
    where
        A::Hyper: Send + Sync,
    {
        let mut finals = Vec::new();
        for mode in BenchMode::ALL {
            let s = BenchSpec {
                mode,
                ..spec.clone()
            };
            let (_, p) = run_timed::<f64, A>(&s)?;
            finals.push(member_params(&p, spec.n)?);
        }
        let reference = &finals[1];
        Ok(finals
            .iter()
            .flat_map(|f| {
                f.iter()
                    .zip(reference)
                    .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            })
            .fold(0.0, f64::max))
    }
    match spec.algorithm {
        Algorithm::Td3 => go::<Td3State<f64>>(spec),
        Algorithm::Sac => go::<SacState<f64>>(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let (m, iqr) = median_iqr(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);
        let (m, _) = median_iqr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BenchMode::ALL {
            assert_eq!(m.name().parse::<BenchMode>().unwrap(), m);
        }
        assert!("gpu".parse::<BenchMode>().is_err());
    }

    #[test]
    fn too_few_reps_and_budget_are_errors() {
        let spec = BenchSpec {
            reps: 2,
            k: 1,
            ..BenchSpec::default()
        };
        assert!(bench_update(&spec).is_err());
        let spec = BenchSpec {
            n: 4,
            k: 1,
            reps: 3,
            memory_budget: 1024,
            ..BenchSpec::default()
        };
        assert!(matches!(bench_update(&spec), Err(Error::Resource(_))));
    }
}
