//! Layer primitives with hand-written backward passes.
//!
//! Feature maps are channel-major (`C x N`, row-major). Convolution kernels are
//! stored `C_out x C_in x K`, i.e. a `C_out x (C_in K)` matrix that multiplies
//! the im2col expansion of the input.

use crate::error::{usage, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    len: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, len: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * len {
            return usage(format!("{} values for a {channels} x {len} feature map", data.len()));
        }
        Ok(Self { channels, len, data })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self { channels, len, data: vec![T::zero(); channels * len] }
    }

    /// Single-channel map holding a spectrum.
    pub fn from_signal(signal: &[T]) -> Self {
        Self { channels: 1, len: signal.len(), data: signal.to_vec() }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!((self.channels, self.len), (other.channels, other.len));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Tap offsets of a "same"-padded dilated kernel: `(k - (K-1)/2) * dilation`.
fn tap_offset(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - ((kernel - 1) / 2) as isize) * dilation as isize
}

/// `(C_in K) x N` matrix of shifted, zero-padded input rows.
fn im2col<T: Real>(x: &FeatureMap<T>, kernel: usize, dilation: usize) -> Vec<T> {
    let n = x.len;
    let mut cols = vec![T::zero(); x.channels * kernel * n];
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for k in 0..kernel {
            let off = tap_offset(k, kernel, dilation);
            let row = &mut cols[(ci * kernel + k) * n..(ci * kernel + k + 1) * n];
            let lo = (-off).max(0) as usize;
            let hi = (n as isize - off).min(n as isize).max(0) as usize;
            for t in lo..hi.max(lo) {
                row[t] = src[(t as isize + off) as usize];
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input positions.
fn col2im<T: Real>(dcols: &[T], channels: usize, n: usize, kernel: usize, dilation: usize) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(channels, n);
    for ci in 0..channels {
        for k in 0..kernel {
            let off = tap_offset(k, kernel, dilation);
            let row = &dcols[(ci * kernel + k) * n..(ci * kernel + k + 1) * n];
            let lo = (-off).max(0) as usize;
            let hi = (n as isize - off).min(n as isize).max(0) as usize;
            let dst = &mut dx.data[ci * n..(ci + 1) * n];
            for t in lo..hi.max(lo) {
                let s = (t as isize + off) as usize;
                dst[s] = dst[s] + row[t];
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Zero-padded dilated cross-correlation keeping the input length.
///
/// `weight` is `c_out x c_in x kernel`; `bias` has `c_out` entries.
pub fn conv1d_same<T: Real>(
    x: &FeatureMap<T>,
    weight: &[T],
    bias: &[T],
    c_out: usize,
    kernel: usize,
    dilation: usize,
    activation: Activation,
) -> FeatureMap<T> {
    let (c_in, n) = (x.channels, x.len);
    assert_eq!(weight.len(), c_out * c_in * kernel, "conv weight shape");
    assert_eq!(bias.len(), c_out, "conv bias shape");
    let mut out = FeatureMap::zeros(c_out, n);
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(b);
    }
    let ck = c_in * kernel;
    if kernel == 1 {
        T::gemm(c_out, ck, n, T::one(), weight, ck, 1, &x.data, n, 1, T::one(), &mut out.data, n, 1);
    } else {
        let cols = im2col(x, kernel, dilation);
        T::gemm(c_out, ck, n, T::one(), weight, ck, 1, &cols, n, 1, T::one(), &mut out.data, n, 1);
    }
    if activation == Activation::Relu {
        for v in &mut out.data {
            if !(*v > T::zero()) {
                *v = T::zero();
            }
        }
    }
    out
}

/// Gradients of [`conv1d_same`] given the gradient w.r.t. its pre-activation output.
///
/// Accumulates into `grad_w`/`grad_b` and returns the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_same_backward<T: Real>(
    x: &FeatureMap<T>,
    weight: &[T],
    d_pre: &FeatureMap<T>,
    kernel: usize,
    dilation: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input_grad: bool,
) -> Option<FeatureMap<T>> {
    let (c_in, n) = (x.channels, x.len);
    let c_out = d_pre.channels;
    let ck = c_in * kernel;
    let owned;
    let cols: &[T] = if kernel == 1 {
        &x.data
    } else {
        owned = im2col(x, kernel, dilation);
        &owned
    };
    // dW += dY * cols^T
    T::gemm(c_out, n, ck, T::one(), &d_pre.data, n, 1, cols, 1, n, T::one(), grad_w, ck, 1);
    for (co, gb) in grad_b.iter_mut().enumerate() {
        *gb = *gb + d_pre.data[co * n..(co + 1) * n].iter().copied().sum::<T>();
    }
    if !want_input_grad {
        return None;
    }
    // dcols = W^T * dY
    let mut dcols = vec![T::zero(); ck * n];
    T::gemm(ck, c_out, n, T::one(), weight, 1, ck, &d_pre.data, n, 1, T::zero(), &mut dcols, n, 1);
    if kernel == 1 {
        Some(FeatureMap { channels: c_in, len: n, data: dcols })
    } else {
        Some(col2im(&dcols, c_in, n, kernel, dilation))
    }
}

/// Zeroes gradient entries where the ReLU output was not positive (subgradient 0 at 0).
pub fn relu_backward_in_place<T: Real>(relu_out: &FeatureMap<T>, grad: &mut FeatureMap<T>) {
    for (g, &y) in grad.data.iter_mut().zip(&relu_out.data) {
        if !(y > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Sums the first and second halves of the channel axis: `out[c] = x[c] + x[c + F]`.
pub fn half_sum<T: Real>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if !x.channels.is_multiple_of(2) {
        return usage(format!("half_sum needs an even channel count, got {}", x.channels));
    }
    let half = x.channels / 2 * x.len;
    let data = x.data[..half].iter().zip(&x.data[half..]).map(|(&a, &b)| a + b).collect();
    Ok(FeatureMap { channels: x.channels / 2, len: x.len, data })
}

/// Both halves receive the output gradient unchanged.
pub fn half_sum_backward<T: Real>(d_out: &FeatureMap<T>) -> FeatureMap<T> {
    let mut data = Vec::with_capacity(2 * d_out.data.len());
    data.extend_from_slice(&d_out.data);
    data.extend_from_slice(&d_out.data);
    FeatureMap { channels: 2 * d_out.channels, len: d_out.len, data }
}

/// Non-overlapping max pooling; ties route to the first maximal element, a
/// trailing partial window is dropped. Returns the pooled map and argmax indices.
pub fn maxpool<T: Real>(x: &FeatureMap<T>, size: usize) -> Result<(FeatureMap<T>, Vec<usize>)> {
    if size == 0 || x.len < size {
        return usage(format!("cannot pool length {} with window {size}", x.len));
    }
    let out_len = x.len / size;
    let mut data = Vec::with_capacity(x.channels * out_len);
    let mut argmax = Vec::with_capacity(x.channels * out_len);
    for c in 0..x.channels {
        let row = x.channel(c);
        for i in 0..out_len {
            let mut best = i * size;
            for j in i * size + 1..(i + 1) * size {
                if row[j] > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            argmax.push(c * x.len + best);
        }
    }
    Ok((FeatureMap { channels: x.channels, len: out_len, data }, argmax))
}

pub fn maxpool_backward<T: Real>(d_out: &FeatureMap<T>, argmax: &[usize], input_len: usize) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(d_out.channels, input_len);
    for (&g, &i) in d_out.data.iter().zip(argmax) {
        dx.data[i] = dx.data[i] + g;
    }
    dx
}

/// `y[m] = sum_i h[i] W[i, m] + b[m]` with `W` stored `in x out`.
pub fn dense<T: Real>(h: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let m = bias.len();
    assert_eq!(weight.len(), h.len() * m, "dense weight shape");
    let mut y = bias.to_vec();
    T::gemm(1, h.len(), m, T::one(), h, h.len(), 1, weight, m, 1, T::one(), &mut y, m, 1);
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn dense_backward<T: Real>(h: &[T], weight: &[T], d_y: &[T], grad_w: &mut [T], grad_b: &mut [T]) -> Vec<T> {
    let (n_in, m) = (h.len(), d_y.len());
    T::gemm(n_in, 1, m, T::one(), h, 1, 1, d_y, m, 1, T::one(), grad_w, m, 1);
    for (gb, &d) in grad_b.iter_mut().zip(d_y) {
        *gb = *gb + d;
    }
    let mut dh = vec![T::zero(); n_in];
    T::gemm(n_in, m, 1, T::one(), weight, m, 1, d_y, 1, 1, T::zero(), &mut dh, 1, 1);
    dh
}
