//! Population diversity as the log-volume spanned by behavioural embeddings
//! under a squared-exponential kernel.

use alloc::vec;
use alloc::vec::Vec;

use crate::mlp::PopMlp;
use crate::{Error, PopTensor, Real, Result};

/// Linear ramp from `start` to `end` over `horizon` steps, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl LambdaSchedule {
    pub fn constant(v: f64) -> Self {
        Self {
            start: v,
            end: v,
            horizon: 0,
        }
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.horizon {
            return self.end;
        }
        let f = step as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvdConfig<T> {
    /// `[1, M, ds]`.
    pub probes: PopTensor<T>,
    /// Frozen at first use when `None`.
    pub length_scale: Option<T>,
    pub jitter: T,
    pub schedule: LambdaSchedule,
}

impl<T: Real> DvdConfig<T> {
    /// `probes` holds `M` states of dimension `obs_dim`, row-major.
    pub fn new(probes: Vec<T>, obs_dim: usize, schedule: LambdaSchedule) -> Result<Self> {
        if obs_dim == 0 || probes.is_empty() || !probes.len().is_multiple_of(obs_dim) {
            return Err(Error::Config(alloc::format!(
                "{} probe values do not form states of dimension {obs_dim}",
                probes.len()
            )));
        }
        let m = probes.len() / obs_dim;
        Ok(Self {
            probes: PopTensor::from_vec(&[1, m, obs_dim], probes)?,
            length_scale: None,
            jitter: T::of(1e-6),
            schedule,
        })
    }

    fn tiled_probes(&self, n: usize) -> Result<PopTensor<T>> {
        PopTensor::stack(&vec![self.probes.clone(); n])
    }

    /// Diversity loss at `step` and its gradient on the policy parameters.
    pub fn policy_grads(
        &mut self,
        policy: &PopMlp<T>,
        step: u64,
        bound: T,
    ) -> Result<(T, PopMlp<T>)> {
        let n = policy.n();
        let (out, cache) = policy.forward(&self.tiled_probes(n)?)?;
        let emb = out.map(|v| v * bound);
        let d = emb.member_len();
        let flat = emb.clone().reshape(&[n, d])?;
        let ell = match self.length_scale {
            Some(l) => l,
            None => {
                let l = median_pairwise_distance(&flat)?;
                self.length_scale = Some(l);
                l
            }
        };
        let lambda = T::of(self.schedule.value(step));
        let (loss, g) = dvd_loss(&flat, ell, self.jitter, lambda)?;
        let g = g.reshape(emb.shape())?.map(|v| v * bound);
        let (grads, _) = policy.backward(&cache, &g)?;
        Ok((loss, grads))
    }
}

/// Deterministic actions of every member on the probe states, flattened to
/// `[N, M·da]`.
pub fn dvd_embed<T: Real>(
    policy: &PopMlp<T>,
    probes: &PopTensor<T>,
    bound: T,
) -> Result<PopTensor<T>> {
    let n = policy.n();
    let tiled = PopTensor::stack(&vec![probes.clone(); n])?;
    let out = policy.predict(&tiled)?;
    let d = out.member_len();
    out.map(|v| v * bound).reshape(&[n, d])
}

/// Median of the `N(N−1)/2` pairwise Euclidean distances between rows.
pub fn median_pairwise_distance<T: Real>(emb: &PopTensor<T>) -> Result<T> {
    let n = emb.n();
    let mut ds = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            ds.push(sq_dist(emb.member(i), emb.member(j)).sqrt());
        }
    }
    if ds.is_empty() {
        return Err(Error::Degenerate("need at least two members".into()));
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let k = ds.len();
    let med = if k % 2 == 1 {
        ds[k / 2]
    } else {
        (ds[k / 2 - 1] + ds[k / 2]) / T::of(2.0)
    };
    if !(med > T::zero()) {
        return Err(Error::Degenerate("all embeddings coincide".into()));
    }
    Ok(med)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `K[i,j] = exp(−‖eᵢ − eⱼ‖² / 2ℓ²)`.
pub fn rbf_kernel<T: Real>(emb: &PopTensor<T>, ell: T) -> Vec<T> {
    let n = emb.n();
    let inv = T::one() / (T::of(2.0) * ell * ell);
    let mut k = vec![T::zero(); n * n];
    for i in 0..n {
        k[i * n + i] = T::one();
        for j in i + 1..n {
            let v = (-sq_dist(emb.member(i), emb.member(j)) * inv).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Lower Cholesky factor of a symmetric `n×n` matrix.
pub fn cholesky<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: T = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > T::zero()) || !d.is_finite() {
                    return Err(Error::Degenerate(alloc::format!(
                        "kernel matrix not positive definite at pivot {i}"
                    )));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// `A⁻¹` from the Cholesky factor of `A`.
fn cholesky_inverse<T: Real>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); n * n];
    for c in 0..n {
        // Solve L y = e_c, then Lᵀ x = y.
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let e = if i == c { T::one() } else { T::zero() };
            let s: T = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (e - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: T = (i + 1..n).map(|k| l[k * n + i] * inv[k * n + c]).sum();
            inv[i * n + c] = (y[i] - s) / l[i * n + i];
        }
    }
    inv
}

/// `−λ·logdet(K + jitter·I)` over embeddings `[N, D]` and its gradient.
///
/// Members are factorised in lexicographic order of their embeddings, so
/// permuting the population permutes the gradient and leaves the loss
/// bit-for-bit unchanged.
pub fn dvd_loss<T: Real>(
    emb: &PopTensor<T>,
    ell: T,
    jitter: T,
    lambda: T,
) -> Result<(T, PopTensor<T>)> {
    let n = emb.n();
    if n < 2 {
        return Err(Error::Config("diversity needs at least two members".into()));
    }
    if !(ell > T::zero()) {
        return Err(Error::Config("kernel length scale must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        emb.member(a)
            .iter()
            .zip(emb.member(b))
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let sorted = emb.select_members(&order)?;
    let (loss, gs) = dvd_loss_ordered(&sorted, ell, jitter, lambda)?;
    let mut g = PopTensor::zeros(emb.shape());
    for (i, &src) in order.iter().enumerate() {
        g.member_mut(src).copy_from_slice(gs.member(i));
    }
    Ok((loss, g))
}

fn dvd_loss_ordered<T: Real>(
    emb: &PopTensor<T>,
    ell: T,
    jitter: T,
    lambda: T,
) -> Result<(T, PopTensor<T>)> {
    let n = emb.n();
    let k = rbf_kernel(emb, ell);
    let mut a = k.clone();
    for i in 0..n {
        a[i * n + i] += jitter;
    }
    let l = cholesky(&a, n)?;
    let logdet = T::of(2.0) * (0..n).map(|i| l[i * n + i].ln()).sum::<T>();
    let inv = cholesky_inverse(&l, n);
    let d = emb.member_len();
    let scale = T::of(2.0) / (ell * ell);
    let mut g = PopTensor::zeros(emb.shape());
    for i in 0..n {
        let ei = emb.member(i);
        let mut gi = vec![T::zero(); d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = -lambda * inv[i * n + j] * k[i * n + j] * scale;
            for (acc, (&xj, &xi)) in gi.iter_mut().zip(emb.member(j).iter().zip(ei)) {
                *acc += w * (xj - xi);
            }
        }
        g.member_mut(i).copy_from_slice(&gi);
    }
    Ok((-lambda * logdet, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_determinant() {
        // exp(−d²/2ℓ²) = 0.5 with ℓ = 1 → d² = 2 ln 2.
        let d = (2.0 * 2f64.ln()).sqrt();
        let e = PopTensor::from_vec(&[2, 1], vec![0.0, d]).unwrap();
        let (loss, _) = dvd_loss(&e, 1.0, 0.0, 0.7).unwrap();
        assert!((loss - (-0.7 * 0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_are_near_singular() {
        let e = PopTensor::from_vec(&[2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let (loss, _) = dvd_loss(&e, 1.0, 1e-6, 1.0).unwrap();
        assert!(loss > 10.0);
        assert!(matches!(
            dvd_loss(&e, 1.0, 0.0, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn schedule() {
        let s = LambdaSchedule {
            start: 1.0,
            end: 0.2,
            horizon: 100,
        };
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(50) - 0.6).abs() < 1e-12);
        assert_eq!(s.value(100), 0.2);
        assert_eq!(s.value(10_000), 0.2);
    }

    #[test]
    fn median_distance() {
        let e = PopTensor::from_vec(&[3, 1], vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(median_pairwise_distance(&e).unwrap(), 2.0);
    }
}
