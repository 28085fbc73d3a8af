//! Truncation-selection population-based training.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use super::{sample_hyper, Evolvable, HyperPrior, Resample};
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const HISTORY: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct PbtState {
    pub returns: Vec<VecDeque<f64>>,
    pub steps_since_evolve: u64,
    pub evolve_interval: u64,
    pub truncation_fraction: f64,
}

/// Who was replaced by whom in one evolution round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvolvePlan {
    pub replaced: Vec<usize>,
    pub donors: Vec<usize>,
}

impl PbtState {
    pub fn new(n: usize, evolve_interval: u64, truncation_fraction: f64) -> Result<Self> {
        if !(truncation_fraction > 0.0 && truncation_fraction <= 0.5) {
            return Err(Error::Config(alloc::format!(
                "truncation fraction must lie in (0, 0.5], got {truncation_fraction}"
            )));
        }
        if evolve_interval == 0 {
            return Err(Error::Config("evolve interval must be positive".into()));
        }
        Ok(Self {
            returns: (0..n).map(|_| VecDeque::with_capacity(HISTORY)).collect(),
            steps_since_evolve: 0,
            evolve_interval,
            truncation_fraction,
        })
    }

    pub fn population(&self) -> usize {
        self.returns.len()
    }

    pub fn record_return(&mut self, member: usize, ret: f64) {
        let ring = &mut self.returns[member];
        if ring.len() == HISTORY {
            ring.pop_front();
        }
        ring.push_back(ret);
    }

    pub fn tick(&mut self, update_steps: u64) {
        self.steps_since_evolve += update_steps;
    }

    pub fn due(&self) -> bool {
        self.steps_since_evolve >= self.evolve_interval
    }

    pub fn mean_return(&self, member: usize) -> Option<f64> {
        let r = &self.returns[member];
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Members ordered best first by mean recorded return; ties go to the
    /// lower index.
    pub fn rank(&self) -> Result<Vec<usize>> {
        let means = (0..self.population())
            .map(|i| {
                self.mean_return(i)
                    .ok_or(Error::NotReady("member has no recorded returns"))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| {
            means[b]
                .partial_cmp(&means[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        Ok(order)
    }

    /// Number of members replaced (and of donors) per round.
    pub fn truncation_count(&self) -> usize {
        libm::ceil(self.truncation_fraction * self.population() as f64) as usize
    }

    /// Chooses replacements without touching any agent. Returns `None`, and
    /// resets nothing, when the population is too small for disjoint strata.
    pub fn plan(&mut self, rng: &mut StreamRng) -> Result<Option<EvolvePlan>> {
        let n = self.population();
        let k = self.truncation_count();
        if n < 4 || 2 * k > n {
            log::warn!("population of {n} too small for truncation selection; skipping");
            return Ok(None);
        }
        let order = self.rank()?;
        let top = &order[..k];
        let replaced: Vec<usize> = order[n - k..].to_vec();
        let donors = replaced
            .iter()
            .map(|_| top[rng.random_range(0..k)])
            .collect();
        for &r in &replaced {
            self.returns[r].clear();
        }
        self.steps_since_evolve = 0;
        Ok(Some(EvolvePlan { replaced, donors }))
    }
}

/// One evolution round: bottom members take a donor's weights, get fresh
/// hyperparameters from `prior` and zeroed optimizer moments.
pub fn pbt_evolve<A: Evolvable, H: Resample>(
    state: &mut PbtState,
    agent: &mut A,
    hyper: &mut [H],
    prior: &HyperPrior,
    rng: &mut StreamRng,
) -> Result<Option<EvolvePlan>> {
    let n = agent.population();
    if state.population() != n || hyper.len() != n {
        return Err(Error::Config(alloc::format!(
            "PBT tracks {} members, agent has {n}, hyper has {}",
            state.population(),
            hyper.len()
        )));
    }
    let Some(plan) = state.plan(rng)? else {
        return Ok(None);
    };
    for (&dst, &src) in plan.replaced.iter().zip(&plan.donors) {
        agent.copy_member(src, dst)?;
        agent.reset_member_optimizer(dst);
        hyper[dst] = sample_hyper(prior, hyper[src], rng)?;
    }
    Ok(Some(plan))
}
