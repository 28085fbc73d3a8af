//! Multilayer perceptrons for a whole population, stored layer by layer as
//! stacked weight `[N, in, out]` and bias `[N, 1, out]` tensors.
//!
//! Hidden layers use ReLU; the output layer is linear or tanh.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::adam::{adam_step_masked, AdamState};
use crate::rng::{self, domain};
use crate::tensor::{
    activation, activation_backward, pop_add_bias, pop_add_bias_backward, pop_matmul,
    pop_matmul_backward_input, pop_matmul_backward_weight, Activation,
};
use crate::{Error, PopTensor, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: PopTensor<T>,
    pub bias: PopTensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopMlp<T> {
    pub layers: Vec<Linear<T>>,
    pub output: OutputActivation,
}

/// Values retained by [`PopMlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    inputs: Vec<PopTensor<T>>,
    pre: Vec<PopTensor<T>>,
}

impl<T> ForwardCache<T> {
    pub fn layer_inputs(&self) -> &[PopTensor<T>] {
        &self.inputs
    }

    /// Affine outputs of every layer, before activation.
    pub fn pre_activations(&self) -> &[PopTensor<T>] {
        &self.pre
    }
}

/// Builds a population of MLPs with extents `dims = [in, h1, ..., out]`.
///
/// Weights are Kaiming-uniform with `a = √5`, i.e. uniform in
/// `±1/√fan_in`, and biases uniform in the same range. Member `i`, layer `l`
/// draws from its own stream keyed by `(seed, i, l)`.
pub fn init_pop_mlp<T: Real>(
    n: usize,
    dims: &[usize],
    output: OutputActivation,
    seed: u64,
) -> Result<PopMlp<T>> {
    if n == 0 {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Config(format!(
            "network needs at least input and output extents, got {dims:?}"
        )));
    }
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let mut weight = PopTensor::zeros(&[n, fan_in, fan_out]);
            let mut bias = PopTensor::zeros(&[n, 1, fan_out]);
            for i in 0..n {
                let mut rng = rng::stream(seed, domain::INIT, i as u64, l as u64);
                for v in weight.member_mut(i) {
                    *v = T::of(rng.random_range(-bound..bound));
                }
                for v in bias.member_mut(i) {
                    *v = T::of(rng.random_range(-bound..bound));
                }
            }
            Linear { weight, bias }
        })
        .collect();
    Ok(PopMlp { layers, output })
}

impl<T: Real> PopMlp<T> {
    pub fn n(&self) -> usize {
        self.layers[0].weight.n()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.layers.len() + 1);
        d.push(self.layers[0].weight.shape()[1]);
        d.extend(self.layers.iter().map(|l| l.weight.shape()[2]));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[2]
    }

    /// Parameters per member.
    pub fn member_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.member_len() + l.bias.member_len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                })
                .collect(),
            output: self.output,
        }
    }

    fn activation_of(&self, layer: usize) -> Option<Activation> {
        if layer + 1 < self.layers.len() {
            Some(Activation::Relu)
        } else {
            match self.output {
                OutputActivation::Identity => None,
                OutputActivation::Tanh => Some(Activation::Tanh),
            }
        }
    }

    /// Forward pass on `x: [N, B, in]`.
    pub fn forward(&self, x: &PopTensor<T>) -> Result<(PopTensor<T>, ForwardCache<T>)> {
        if x.shape().len() != 3 || x.n() != self.n() || x.shape()[2] != self.input_dim() {
            return Err(Error::shape(
                "pop_mlp_forward",
                x.shape(),
                &[self.n(), 0, self.input_dim()],
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = pop_add_bias(&pop_matmul(&h, &layer.weight)?, &layer.bias)?;
            let next = match self.activation_of(l) {
                Some(a) => activation(&z, a),
                None => z.clone(),
            };
            inputs.push(core::mem::replace(&mut h, next));
            pre.push(z);
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Output only, no cache.
    pub fn predict(&self, x: &PopTensor<T>) -> Result<PopTensor<T>> {
        Ok(self.forward(x)?.0)
    }

    fn check_cache(&self, cache: &ForwardCache<T>, grad_y: &PopTensor<T>) -> Result<()> {
        let stale = || Error::Usage("forward cache does not match this network".into());
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(stale());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let s = cache.inputs[l].shape();
            if s.len() != 3 || s[0] != self.n() || s[2] != layer.weight.shape()[1] {
                return Err(stale());
            }
        }
        let last = &cache.pre[self.layers.len() - 1];
        if grad_y.shape() != last.shape() {
            return Err(Error::shape(
                "pop_mlp_backward",
                grad_y.shape(),
                last.shape(),
            ));
        }
        Ok(())
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache<T>,
        grad_y: &PopTensor<T>,
        want_params: bool,
    ) -> Result<(Option<Self>, PopTensor<T>)> {
        self.check_cache(cache, grad_y)?;
        let mut grads = want_params.then(|| Vec::with_capacity(self.layers.len()));
        let mut g = grad_y.clone();
        for l in (0..self.layers.len()).rev() {
            if let Some(a) = self.activation_of(l) {
                g = activation_backward(&g, &cache.pre[l], a)?;
            }
            let layer = &self.layers[l];
            if let Some(grads) = grads.as_mut() {
                grads.push(Linear {
                    weight: pop_matmul_backward_weight(&g, &cache.inputs[l], &layer.weight)?,
                    bias: pop_add_bias_backward(&g)?,
                });
            }
            g = pop_matmul_backward_input(&g, &cache.inputs[l], &layer.weight)?;
        }
        let grads = grads.map(|mut layers| {
            layers.reverse();
            Self {
                layers,
                output: self.output,
            }
        });
        Ok((grads, g))
    }

    /// Reverse pass: gradients with respect to every parameter (same layout
    /// as `self`) and with respect to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_y: &PopTensor<T>,
    ) -> Result<(Self, PopTensor<T>)> {
        let (p, x) = self.backward_impl(cache, grad_y, true)?;
        Ok((p.expect("requested parameter gradients"), x))
    }

    /// Reverse pass for the input gradient only.
    pub fn backward_input(
        &self,
        cache: &ForwardCache<T>,
        grad_y: &PopTensor<T>,
    ) -> Result<PopTensor<T>> {
        Ok(self.backward_impl(cache, grad_y, false)?.1)
    }

    fn check_member(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.n(),
            });
        }
        Ok(())
    }

    /// Member `i` as a flat vector: layers in order, weight (row-major
    /// `[in, out]`) then bias.
    pub fn flatten_member(&self, i: usize) -> Result<Vec<T>> {
        self.check_member(i)?;
        let mut out = Vec::with_capacity(self.member_param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.member(i));
            out.extend_from_slice(l.bias.member(i));
        }
        Ok(out)
    }

    /// Overwrites member `i` from a vector in [`flatten_member`](Self::flatten_member) layout.
    pub fn unflatten_member(&mut self, i: usize, flat: &[T]) -> Result<()> {
        self.check_member(i)?;
        if flat.len() != self.member_param_count() {
            return Err(Error::shape(
                "unflatten_member",
                &[self.member_param_count()],
                &[flat.len()],
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let len = t.member_len();
                t.member_mut(i).copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }
        Ok(())
    }

    pub fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        self.check_member(src)?;
        self.check_member(dst)?;
        for l in &mut self.layers {
            l.weight.copy_member(src, dst)?;
            l.bias.copy_member(src, dst)?;
        }
        Ok(())
    }

    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    Ok(Linear {
                        weight: l.weight.select_members(members)?,
                        bias: l.bias.select_members(members)?,
                    })
                })
                .collect::<Result<_>>()?,
            output: self.output,
        })
    }

    /// Concatenates populations with identical architecture.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("cannot stack zero networks".into()))?;
        let layers = (0..first.layers.len())
            .map(|l| {
                let ws: Vec<_> = parts.iter().map(|p| p.layers[l].weight.clone()).collect();
                let bs: Vec<_> = parts.iter().map(|p| p.layers[l].bias.clone()).collect();
                Ok(Linear {
                    weight: PopTensor::stack(&ws)?,
                    bias: PopTensor::stack(&bs)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            output: first.output,
        })
    }

    /// All parameter tensors in flatten order.
    pub fn tensors(&self) -> impl Iterator<Item = &PopTensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut PopTensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> PopMlp<U> {
        PopMlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            output: self.output,
        }
    }
}

/// Adam state for every tensor of a [`PopMlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpAdam<T> {
    pub states: Vec<AdamState<T>>,
}

impl<T: Real> MlpAdam<T> {
    pub fn new(net: &PopMlp<T>) -> Self {
        Self {
            states: net.tensors().map(|t| AdamState::new(t.shape())).collect(),
        }
    }

    pub fn step(
        &mut self,
        net: &mut PopMlp<T>,
        grads: &PopMlp<T>,
        lr: &[T],
        active: Option<&[bool]>,
    ) -> Result<()> {
        for ((p, g), s) in net
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.states.iter_mut())
        {
            adam_step_masked(p, g, s, lr, active)?;
        }
        Ok(())
    }

    pub fn reset_member(&mut self, i: usize) {
        for s in &mut self.states {
            s.reset_member(i);
        }
    }

    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        Ok(Self {
            states: self
                .states
                .iter()
                .map(|s| s.select_members(members))
                .collect::<Result<_>>()?,
        })
    }

    pub fn stack(parts: &[Self]) -> Result<Self> {
        let states = (0..parts[0].states.len())
            .map(|k| {
                let col: Vec<_> = parts.iter().map(|p| p.states[k].clone()).collect();
                AdamState::stack(&col)
            })
            .collect::<Result<_>>()?;
        Ok(Self { states })
    }
}

/// `target ← tau·online + (1 − tau)·target`, member `i` using `tau[i]`, only
/// for members with `active[i]`.
pub fn soft_update_mlp<T: Real>(
    target: &mut PopMlp<T>,
    online: &PopMlp<T>,
    tau: &[T],
    active: Option<&[bool]>,
) -> Result<()> {
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        soft_update_masked(t, o, tau, active)?;
    }
    Ok(())
}

/// `tau·online + (1 − tau)·target` with a single rate for every member.
pub fn soft_update<T: Real>(
    target: &PopTensor<T>,
    online: &PopTensor<T>,
    tau: T,
) -> Result<PopTensor<T>> {
    let mut out = target.clone();
    let taus = alloc::vec![tau; target.n()];
    soft_update_masked(&mut out, online, &taus, None)?;
    Ok(out)
}

pub(crate) fn soft_update_masked<T: Real>(
    target: &mut PopTensor<T>,
    online: &PopTensor<T>,
    tau: &[T],
    active: Option<&[bool]>,
) -> Result<()> {
    if target.shape() != online.shape() || tau.len() != target.n() {
        return Err(Error::shape("soft_update", target.shape(), online.shape()));
    }
    if let Some(bad) = tau.iter().find(|&&t| !(t > T::zero() && t <= T::one())) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {bad}")));
    }
    for i in 0..target.n() {
        if active.is_some_and(|a| !a[i]) {
            continue;
        }
        let k = tau[i];
        let src = online.member(i);
        for (t, &o) in target.member_mut(i).iter_mut().zip(src) {
            *t = k * o + (T::one() - k) * *t;
        }
    }
    Ok(())
}
