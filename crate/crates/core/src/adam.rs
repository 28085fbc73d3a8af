//! Adam with a learning rate and step counter per population member.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::for_each_member;
use crate::{Error, PopTensor, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: PopTensor<T>,
    pub v: PopTensor<T>,
    /// Steps taken, per member.
    pub t: Vec<u64>,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(param_shape: &[usize]) -> Self {
        Self::with_betas(param_shape, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(param_shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: PopTensor::zeros(param_shape),
            v: PopTensor::zeros(param_shape),
            t: vec![0; param_shape[0]],
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            eps: T::of(eps),
        }
    }

    /// Clears moments and the step counter of one member.
    pub fn reset_member(&mut self, n: usize) {
        self.m.member_mut(n).fill(T::zero());
        self.v.member_mut(n).fill(T::zero());
        self.t[n] = 0;
    }

    pub fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        self.m.copy_member(src, dst)?;
        self.v.copy_member(src, dst)?;
        self.t[dst] = self.t[src];
        Ok(())
    }

    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        Ok(Self {
            m: self.m.select_members(members)?,
            v: self.v.select_members(members)?,
            t: members.iter().map(|&i| self.t[i]).collect(),
            ..*self
        })
    }

    pub fn stack(parts: &[Self]) -> Result<Self> {
        let ms: Vec<_> = parts.iter().map(|p| p.m.clone()).collect();
        let vs: Vec<_> = parts.iter().map(|p| p.v.clone()).collect();
        Ok(Self {
            m: PopTensor::stack(&ms)?,
            v: PopTensor::stack(&vs)?,
            t: parts.iter().flat_map(|p| p.t.iter().copied()).collect(),
            ..parts[0]
        })
    }
}

/// One Adam step on every member, member `n` using `lr[n]`.
pub fn adam_step<T: Real>(
    params: &mut PopTensor<T>,
    grads: &PopTensor<T>,
    state: &mut AdamState<T>,
    lr: &[T],
) -> Result<()> {
    adam_step_masked(params, grads, state, lr, None)
}

/// Adam step restricted to members with `active[n] == true`; inactive
/// members keep their parameters, moments and step count.
pub fn adam_step_masked<T: Real>(
    params: &mut PopTensor<T>,
    grads: &PopTensor<T>,
    state: &mut AdamState<T>,
    lr: &[T],
    active: Option<&[bool]>,
) -> Result<()> {
    let n = params.n();
    if grads.shape() != params.shape() || state.m.shape() != params.shape() {
        return Err(Error::shape("adam_step", params.shape(), grads.shape()));
    }
    if lr.len() != n {
        return Err(Error::Config(alloc::format!(
            "expected {n} learning rates, got {}",
            lr.len()
        )));
    }
    if let Some(a) = active {
        if a.len() != n {
            return Err(Error::Config(alloc::format!(
                "expected {n} mask entries, got {}",
                a.len()
            )));
        }
    }
    if let Some(bad) = lr.iter().find(|&&l| !(l > T::zero())) {
        return Err(Error::Config(alloc::format!(
            "learning rate must be positive, got {bad}"
        )));
    }
    let is_active = |i: usize| active.is_none_or(|a| a[i]);
    for (i, t) in state.t.iter_mut().enumerate() {
        if is_active(i) {
            *t += 1;
        }
    }

    let l = params.member_len();
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let ts = &state.t;
    let gd = grads.data();
    // Moments first, then parameters; both passes touch one member per task.
    crate::tensor::for_each_member2(state.m.data_mut(), l, state.v.data_mut(), l, |i, m, v| {
        if !is_active(i) {
            return;
        }
        for ((mj, vj), &g) in m.iter_mut().zip(v.iter_mut()).zip(&gd[i * l..(i + 1) * l]) {
            *mj = b1 * *mj + (T::one() - b1) * g;
            *vj = b2 * *vj + (T::one() - b2) * g * g;
        }
    });
    let (md, vd) = (state.m.data(), state.v.data());
    for_each_member(params.data_mut(), l, |i, p| {
        if !is_active(i) {
            return;
        }
        let t = ts[i] as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let rate = lr[i];
        let (m, v) = (&md[i * l..(i + 1) * l], &vd[i * l..(i + 1) * l]);
        for ((pj, &mj), &vj) in p.iter_mut().zip(m).zip(v) {
            *pj -= rate * (mj / bc1) / ((vj / bc2).sqrt() + eps);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = PopTensor::<f64>::full(&[2, 3], 1.5);
        let g = PopTensor::zeros(&[2, 3]);
        let mut s = AdamState::new(&[2, 3]);
        adam_step(&mut p, &g, &mut s, &[0.1, 0.2]).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.5));
        assert_eq!(s.t, vec![1, 1]);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut p = PopTensor::<f64>::zeros(&[1, 1]);
        let g = PopTensor::full(&[1, 1], 1.0);
        let mut s = AdamState::new(&[1, 1]);
        adam_step(&mut p, &g, &mut s, &[0.1]).unwrap();
        // m̂ = 1, v̂ = 1, Δ = -0.1 / (1 + 1e-8)
        assert!((p.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn members_use_their_own_rate() {
        let mut p = PopTensor::<f64>::zeros(&[2, 1]);
        let g = PopTensor::full(&[2, 1], 1.0);
        let mut s = AdamState::new(&[2, 1]);
        adam_step_masked(&mut p, &g, &mut s, &[1e-3, 0.1], Some(&[false, true])).unwrap();
        assert_eq!(p.data()[0], 0.0);
        assert!((p.data()[1] + 0.1).abs() < 1e-6);
        assert_eq!(s.t, vec![0, 1]);
    }

    #[test]
    fn rejects_non_positive_rate() {
        let mut p = PopTensor::<f64>::zeros(&[2, 1]);
        let g = PopTensor::zeros(&[2, 1]);
        let mut s = AdamState::new(&[2, 1]);
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, &[0.0, 0.1]),
            Err(Error::Config(_))
        ));
        assert!(adam_step(&mut p, &g, &mut s, &[0.1]).is_err());
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut p = PopTensor::<f64>::zeros(&[1, 4]);
        let mut s = AdamState::new(&[1, 4]);
        for k in 0..10 {
            let g = PopTensor::from_fn(&[1, 4], |j| (j as f64 - 1.5) * (k as f64 - 4.0));
            adam_step(&mut p, &g, &mut s, &[0.01]).unwrap();
        }
        assert!(s.v.data().iter().all(|&v| v >= 0.0));
    }
}
