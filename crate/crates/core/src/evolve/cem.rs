//! Cross-entropy method over flattened policy parameters with a diagonal
//! Gaussian.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::algos::normal;
use crate::rng::StreamRng;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CemState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elite mean squared deviation from the last update, before noise.
    pub spread: Vec<T>,
    /// Additive variance, decayed after each update.
    pub noise: f64,
    pub noise_init: f64,
    pub noise_final: f64,
    pub noise_decay: f64,
    pub updates: u64,
}

impl<T: Real> CemState<T> {
    /// Noise starts at `1e-2` and decays by `0.999` per update toward `1e-3`.
    pub fn new(mean: Vec<T>, init_var: f64) -> Result<Self> {
        Self::with_schedule(mean, init_var, 1e-2, 1e-3, 0.999)
    }

    pub fn with_schedule(
        mean: Vec<T>,
        init_var: f64,
        noise_init: f64,
        noise_final: f64,
        noise_decay: f64,
    ) -> Result<Self> {
        let ok = init_var >= 0.0
            && noise_final >= 0.0
            && noise_init >= noise_final
            && noise_decay > 0.0
            && noise_decay <= 1.0;
        if !ok || mean.is_empty() {
            return Err(Error::Config(alloc::format!(
                "invalid CEM setup: var {init_var}, noise {noise_init}->{noise_final} x{noise_decay}"
            )));
        }
        Ok(Self {
            var: alloc::vec![T::of(init_var); mean.len()],
            spread: alloc::vec![T::of(init_var); mean.len()],
            mean,
            noise: noise_init,
            noise_init,
            noise_final,
            noise_decay,
            updates: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `count` independent draws from `N(mean, diag(var + noise))`.
    pub fn sample(&self, count: usize, rng: &mut StreamRng) -> Result<Vec<Vec<T>>> {
        if count == 0 {
            return Err(Error::Config("CEM sample count must be at least 1".into()));
        }
        let noise = T::of(self.noise);
        let sd: Vec<T> = self.var.iter().map(|&v| (v + noise).sqrt()).collect();
        Ok((0..count)
            .map(|_| {
                self.mean
                    .iter()
                    .zip(&sd)
                    .map(|(&m, &s)| {
                        let e: T = normal(rng);
                        m + s * e
                    })
                    .collect()
            })
            .collect())
    }

    /// Noise level after `k` updates.
    pub fn noise_after(&self, k: u64) -> f64 {
        let k = i32::try_from(k).unwrap_or(i32::MAX);
        self.noise_final
            .max(self.noise_init * libm::pow(self.noise_decay, f64::from(k)))
    }

    /// Refits mean and variance on the better half of `candidates`.
    pub fn update(&mut self, candidates: &[Vec<T>], scores: &[f64]) -> Result<()> {
        let c = candidates.len();
        if c < 2 || !c.is_multiple_of(2) {
            return Err(Error::Config(alloc::format!(
                "CEM needs an even number of at least 2 candidates, got {c}"
            )));
        }
        if scores.len() != c || scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config(
                "CEM scores must be finite, one per candidate".into(),
            ));
        }
        if candidates.iter().any(|x| x.len() != self.dim()) {
            return Err(Error::Config("CEM candidate has the wrong length".into()));
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let elites: Vec<&Vec<T>> = order[..c / 2].iter().map(|&i| &candidates[i]).collect();
        let ne = T::of(elites.len() as f64);
        self.updates += 1;
        self.noise = self.noise_after(self.updates);
        let noise = T::of(self.noise);
        for j in 0..self.dim() {
            let m = elites.iter().map(|e| e[j]).sum::<T>() / ne;
            let v = elites.iter().map(|e| (e[j] - m) * (e[j] - m)).sum::<T>() / ne;
            self.mean[j] = m;
            self.spread[j] = v;
            self.var[j] = v + noise;
        }
        Ok(())
    }
}
