//! Dense arrays with a leading population axis and the handful of kernels the
//! update rules need, each paired with its reverse rule.
//!
//! Kernels treat member slices independently: member `n` of an output is a
//! function of member `n` of the inputs only (except [`reduce_mean_members`]).
//! With the `parallel` feature the member loop is spread over the rayon pool;
//! each member is still computed by exactly one thread in a fixed order, so
//! results do not depend on the thread count.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PopTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> PopTensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::Config(alloc::format!(
                "population axis must be non-empty, got shape {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape[0] > 0, "empty population axis");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Stacks single-member slices (each `member_shape`) into a population.
    pub fn from_members(member_shape: &[usize], members: &[Vec<T>]) -> Result<Self> {
        let mut shape = vec![members.len()];
        shape.extend_from_slice(member_shape);
        let member_len: usize = member_shape.iter().product();
        let mut data = Vec::with_capacity(member_len * members.len());
        for m in members {
            if m.len() != member_len {
                return Err(Error::shape("from_members", member_shape, &[m.len()]));
            }
            data.extend_from_slice(m);
        }
        Self::from_vec(&shape, data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Population size.
    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn member_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn member(&self, n: usize) -> &[T] {
        let l = self.member_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn member_mut(&mut self, n: usize) -> &mut [T] {
        let l = self.member_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.is_empty() || shape[0] == 0 {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// New tensor made of the listed members, in order.
    pub fn select_members(&self, members: &[usize]) -> Result<Self> {
        let l = self.member_len();
        let mut data = Vec::with_capacity(l * members.len());
        for &m in members {
            if m >= self.n() {
                return Err(Error::IndexOutOfRange {
                    index: m,
                    len: self.n(),
                });
            }
            data.extend_from_slice(self.member(m));
        }
        let mut shape = self.shape.clone();
        shape[0] = members.len();
        Self::from_vec(&shape, data)
    }

    /// Concatenates populations along axis 0.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("cannot stack zero tensors".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            n += p.n();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Self::from_vec(&shape, data)
    }

    pub fn copy_member(&mut self, src: usize, dst: usize) -> Result<()> {
        let n = self.n();
        for i in [src, dst] {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
        }
        if src != dst {
            let l = self.member_len();
            self.data.copy_within(src * l..(src + 1) * l, dst * l);
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> PopTensor<U> {
        PopTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

// Launch accounting. One call of a population kernel counts once no matter
// how many members it covers.
#[cfg(feature = "std")]
std::thread_local! {
    static LAUNCHES: core::cell::Cell<u64> = const { core::cell::Cell::new(0) };
}
#[cfg(not(feature = "std"))]
static LAUNCHES: core::sync::atomic::AtomicU64 = core::sync::atomic::AtomicU64::new(0);

#[inline]
fn count_launch() {
    #[cfg(feature = "std")]
    LAUNCHES.with(|c| c.set(c.get() + 1));
    #[cfg(not(feature = "std"))]
    LAUNCHES.fetch_add(1, core::sync::atomic::Ordering::Relaxed);
}

/// Number of population kernels launched so far (per thread when `std` is on).
pub fn kernel_launches() -> u64 {
    #[cfg(feature = "std")]
    return LAUNCHES.with(|c| c.get());
    #[cfg(not(feature = "std"))]
    return LAUNCHES.load(core::sync::atomic::Ordering::Relaxed);
}

/// Runs `f(member, chunk)` over consecutive member chunks of `out`.
pub(crate) fn for_each_member<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if out.len() > chunk {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(n, c)| f(n, c));
        return;
    }
    for (n, c) in out.chunks_mut(chunk).enumerate() {
        f(n, c);
    }
}

/// Like [`for_each_member`] with two outputs split at the same member boundaries.
pub(crate) fn for_each_member2<T, F>(a: &mut [T], ca: usize, b: &mut [T], cb: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T]) + Sync + Send,
{
    if ca == 0 || cb == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if a.len() > ca {
        use rayon::prelude::*;
        a.par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(n, (x, y))| f(n, x, y));
        return;
    }
    for (n, (x, y)) in a.chunks_mut(ca).zip(b.chunks_mut(cb)).enumerate() {
        f(n, x, y);
    }
}

fn dims3<T: Real>(op: &'static str, t: &PopTensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, b, c] => Ok((n, b, c)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0, 0])),
    }
}

/// `out[n] = x[n] · w[n]` for `x: [N,B,I]`, `w: [N,I,O]`.
pub fn pop_matmul<T: Real>(x: &PopTensor<T>, w: &PopTensor<T>) -> Result<PopTensor<T>> {
    let (n, b, i) = dims3("pop_matmul", x)?;
    let (nw, iw, o) = dims3("pop_matmul", w)?;
    if n != nw || i != iw {
        return Err(Error::shape("pop_matmul", x.shape(), w.shape()));
    }
    count_launch();
    let mut out = PopTensor::zeros(&[n, b, o]);
    let (xd, wd) = (x.data(), w.data());
    for_each_member(out.data_mut(), b * o, |m, dst| {
        let xm = &xd[m * b * i..(m + 1) * b * i];
        let wm = &wd[m * i * o..(m + 1) * i * o];
        for r in 0..b {
            let row = &mut dst[r * o..(r + 1) * o];
            for (k, &xv) in xm[r * i..(r + 1) * i].iter().enumerate() {
                for (acc, &wv) in row.iter_mut().zip(&wm[k * o..(k + 1) * o]) {
                    *acc += xv * wv;
                }
            }
        }
    });
    Ok(out)
}

/// Reverse rule of [`pop_matmul`]: `(grad_out · wᵀ, xᵀ · grad_out)` per member.
pub fn pop_matmul_backward<T: Real>(
    grad_out: &PopTensor<T>,
    x: &PopTensor<T>,
    w: &PopTensor<T>,
) -> Result<(PopTensor<T>, PopTensor<T>)> {
    let gx = pop_matmul_backward_input(grad_out, x, w)?;
    let gw = pop_matmul_backward_weight(grad_out, x, w)?;
    Ok((gx, gw))
}

fn check_matmul_grad<T: Real>(
    grad_out: &PopTensor<T>,
    x: &PopTensor<T>,
    w: &PopTensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (n, b, i) = dims3("pop_matmul_backward", x)?;
    let (nw, iw, o) = dims3("pop_matmul_backward", w)?;
    if n != nw || i != iw || grad_out.shape() != [n, b, o] {
        return Err(Error::shape(
            "pop_matmul_backward",
            grad_out.shape(),
            &[n, b, o],
        ));
    }
    Ok((n, b, i, o))
}

pub(crate) fn pop_matmul_backward_input<T: Real>(
    grad_out: &PopTensor<T>,
    x: &PopTensor<T>,
    w: &PopTensor<T>,
) -> Result<PopTensor<T>> {
    let (n, b, i, o) = check_matmul_grad(grad_out, x, w)?;
    count_launch();
    let mut gx = PopTensor::zeros(&[n, b, i]);
    let (gd, wd) = (grad_out.data(), w.data());
    for_each_member(gx.data_mut(), b * i, |m, dst| {
        let gm = &gd[m * b * o..(m + 1) * b * o];
        let wm = &wd[m * i * o..(m + 1) * i * o];
        for r in 0..b {
            let grow = &gm[r * o..(r + 1) * o];
            for (k, slot) in dst[r * i..(r + 1) * i].iter_mut().enumerate() {
                let mut acc = T::zero();
                for (&g, &wv) in grow.iter().zip(&wm[k * o..(k + 1) * o]) {
                    acc += g * wv;
                }
                *slot = acc;
            }
        }
    });
    Ok(gx)
}

pub(crate) fn pop_matmul_backward_weight<T: Real>(
    grad_out: &PopTensor<T>,
    x: &PopTensor<T>,
    w: &PopTensor<T>,
) -> Result<PopTensor<T>> {
    let (n, b, i, o) = check_matmul_grad(grad_out, x, w)?;
    count_launch();
    let mut gw = PopTensor::zeros(&[n, i, o]);
    let (gd, xd) = (grad_out.data(), x.data());
    for_each_member(gw.data_mut(), i * o, |m, dst| {
        let gm = &gd[m * b * o..(m + 1) * b * o];
        let xm = &xd[m * b * i..(m + 1) * b * i];
        for r in 0..b {
            let grow = &gm[r * o..(r + 1) * o];
            for (k, &xv) in xm[r * i..(r + 1) * i].iter().enumerate() {
                for (acc, &g) in dst[k * o..(k + 1) * o].iter_mut().zip(grow) {
                    *acc += xv * g;
                }
            }
        }
    });
    Ok(gw)
}

/// Broadcast-adds `bias: [N,1,O]` over the batch axis of `x: [N,B,O]`.
pub fn pop_add_bias<T: Real>(x: &PopTensor<T>, bias: &PopTensor<T>) -> Result<PopTensor<T>> {
    let (n, b, o) = dims3("pop_add_bias", x)?;
    if bias.shape() != [n, 1, o] {
        return Err(Error::shape("pop_add_bias", x.shape(), bias.shape()));
    }
    count_launch();
    let mut out = x.clone();
    let bd = bias.data();
    for_each_member(out.data_mut(), b * o, |m, dst| {
        let bm = &bd[m * o..(m + 1) * o];
        for row in dst.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(bm) {
                *v += bv;
            }
        }
    });
    Ok(out)
}

/// Reverse rule of [`pop_add_bias`] with respect to the bias: sums over the batch axis.
pub fn pop_add_bias_backward<T: Real>(grad_out: &PopTensor<T>) -> Result<PopTensor<T>> {
    let (n, b, o) = dims3("pop_add_bias_backward", grad_out)?;
    count_launch();
    let mut gb = PopTensor::zeros(&[n, 1, o]);
    let gd = grad_out.data();
    for_each_member(gb.data_mut(), o, |m, dst| {
        for row in gd[m * b * o..(m + 1) * b * o].chunks(o) {
            for (acc, &g) in dst.iter_mut().zip(row) {
                *acc += g;
            }
        }
    });
    Ok(gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`; relu'(0) is 0.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

pub fn activation<T: Real>(x: &PopTensor<T>, kind: Activation) -> PopTensor<T> {
    count_launch();
    let mut out = x.clone();
    let l = x.member_len();
    for_each_member(out.data_mut(), l, |_, dst| {
        for v in dst.iter_mut() {
            *v = kind.apply(*v);
        }
    });
    out
}

/// `grad_out ⊙ kind'(x)` where `x` is the activation's input.
pub fn activation_backward<T: Real>(
    grad_out: &PopTensor<T>,
    x: &PopTensor<T>,
    kind: Activation,
) -> Result<PopTensor<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(
            "activation_backward",
            grad_out.shape(),
            x.shape(),
        ));
    }
    count_launch();
    let mut out = grad_out.clone();
    let l = x.member_len();
    let xd = x.data();
    for_each_member(out.data_mut(), l, |m, dst| {
        for (g, &xv) in dst.iter_mut().zip(&xd[m * l..(m + 1) * l]) {
            *g *= kind.derivative(xv);
        }
    });
    Ok(out)
}

/// Arithmetic mean over the population axis. The result has the member shape
/// `x.shape()[1..]`; members are summed in index order.
pub fn reduce_mean_members<T: Real>(x: &PopTensor<T>) -> Vec<T> {
    count_launch();
    let l = x.member_len();
    let mut acc = vec![T::zero(); l];
    for m in 0..x.n() {
        for (a, &v) in acc.iter_mut().zip(x.member(m)) {
            *a += v;
        }
    }
    let inv = T::of(x.n() as f64);
    for a in acc.iter_mut() {
        *a /= inv;
    }
    acc
}

/// Joins `a: [N,B,P]` and `b: [N,B,Q]` into `[N,B,P+Q]`.
pub fn concat_last<T: Real>(a: &PopTensor<T>, b: &PopTensor<T>) -> Result<PopTensor<T>> {
    let (n, rows, p) = dims3("concat_last", a)?;
    let (nb, rb, q) = dims3("concat_last", b)?;
    if n != nb || rows != rb {
        return Err(Error::shape("concat_last", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(n * rows * (p + q));
    for (ra, rb) in a.data().chunks(p.max(1)).zip(b.data().chunks(q.max(1))) {
        data.extend_from_slice(&ra[..p]);
        data.extend_from_slice(&rb[..q]);
    }
    PopTensor::from_vec(&[n, rows, p + q], data)
}

/// Inverse of [`concat_last`]: splits the last axis at `at`.
pub fn split_last<T: Real>(x: &PopTensor<T>, at: usize) -> Result<(PopTensor<T>, PopTensor<T>)> {
    let (n, rows, c) = dims3("split_last", x)?;
    if at > c {
        return Err(Error::shape("split_last", x.shape(), &[at]));
    }
    let mut a = Vec::with_capacity(n * rows * at);
    let mut b = Vec::with_capacity(n * rows * (c - at));
    for row in x.data().chunks(c) {
        a.extend_from_slice(&row[..at]);
        b.extend_from_slice(&row[at..]);
    }
    Ok((
        PopTensor::from_vec(&[n, rows, at], a)?,
        PopTensor::from_vec(&[n, rows, c - at], b)?,
    ))
}
