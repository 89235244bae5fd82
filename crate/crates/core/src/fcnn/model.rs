//! Forward and exact backward pass of the fractal CNN.
//!
//! Each fractal block chains `conv(d) -> ReLU -> half_sum` once per dilation,
//! adds every half-summed output to a linear 1x1 shortcut of the block input,
//! and is followed by max pooling. The head is flatten, inverted dropout and a
//! linear dense layer.

use crate::error::{usage, Result};
use crate::noise::RandomSource;
use crate::scalar::Real;

use super::layers::{
    conv1d_same, conv1d_same_backward, dense, dense_backward, half_sum, half_sum_backward, maxpool, maxpool_backward,
    relu_backward_in_place, Activation, FeatureMap,
};
use super::params::{BlockSlots, ConvSlot, FcnnConfig, FcnnParams};

/// Activations cached by a training-mode forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    flat: Vec<T>,
    dropout_mask: Vec<T>,
    dropped: Vec<T>,
    output: Vec<T>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    input: FeatureMap<T>,
    /// Post-ReLU output of each chained convolution.
    conv_out: Vec<FeatureMap<T>>,
    /// Half-summed outputs; entry `k` feeds convolution `k + 1`.
    merged: Vec<FeatureMap<T>>,
    pre_pool_len: usize,
    argmax: Vec<usize>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn output(&self) -> &[T] {
        &self.output
    }

    pub fn dropout_mask(&self) -> &[T] {
        &self.dropout_mask
    }

    /// Flattened features entering the dropout layer.
    pub fn features(&self) -> &[T] {
        &self.flat
    }

    /// Features after dropout, as seen by the dense head.
    pub fn dropped_features(&self) -> &[T] {
        &self.dropped
    }
}

fn conv<T: Real>(params: &FcnnParams<T>, slot: &ConvSlot, x: &FeatureMap<T>, act: Activation) -> FeatureMap<T> {
    conv1d_same(x, params.tensor(slot.weight), params.tensor(slot.bias), slot.c_out, slot.kernel, slot.dilation, act)
}

/// Cached convolution outputs, half-sum outputs and block input of one block.
type BlockCache<T> = (Vec<FeatureMap<T>>, Vec<FeatureMap<T>>, FeatureMap<T>);

fn block_forward<T: Real>(
    params: &FcnnParams<T>,
    slots: &BlockSlots,
    x: FeatureMap<T>,
    keep: bool,
) -> (FeatureMap<T>, Option<BlockCache<T>>) {
    let mut out = conv(params, &slots.shortcut, &x, Activation::Linear);
    let mut conv_out = Vec::new();
    let mut merged: Vec<FeatureMap<T>> = Vec::new();
    for slot in &slots.convs {
        let input = merged.last().unwrap_or(&x);
        let c = conv(params, slot, input, Activation::Relu);
        let p = half_sum(&c).expect("conv output has 2F channels");
        out.add_assign(&p);
        if keep {
            conv_out.push(c);
        }
        merged.push(p);
    }
    let trace = keep.then_some((conv_out, merged, x));
    (out, trace)
}

/// Output of one fractal block (before pooling).
pub fn fractal_block_forward<T: Real>(params: &FcnnParams<T>, block: usize, x: &FeatureMap<T>) -> FeatureMap<T> {
    block_forward(params, &params.layout().blocks[block], x.clone(), false).0
}

fn run<T: Real>(
    params: &FcnnParams<T>,
    cfg: &FcnnConfig,
    spectrum: &[T],
    mask: Option<Vec<T>>,
) -> Result<(Vec<T>, Option<ForwardTrace<T>>)> {
    if spectrum.len() != cfg.input_length {
        return usage(format!("spectrum length {} but model expects {}", spectrum.len(), cfg.input_length));
    }
    let layout = params.layout().clone();
    let keep = mask.is_some();
    let mut x = FeatureMap::from_signal(spectrum);
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for slots in &layout.blocks {
        let (out, trace) = block_forward(params, slots, x, keep);
        let pre_pool_len = out.len();
        let (pooled, argmax) = maxpool(&out, cfg.pool_size)?;
        if let Some((conv_out, merged, input)) = trace {
            blocks.push(BlockTrace { input, conv_out, merged, pre_pool_len, argmax });
        }
        x = pooled;
    }
    let flat = x.into_data();
    let head_w = params.tensor(layout.head_weight);
    let head_b = params.tensor(layout.head_bias);
    match mask {
        None => Ok((dense(&flat, head_w, head_b), None)),
        Some(mask) => {
            if mask.len() != flat.len() {
                return usage(format!("dropout mask has {} entries, expected {}", mask.len(), flat.len()));
            }
            let dropped: Vec<T> = flat.iter().zip(&mask).map(|(&h, &m)| h * m).collect();
            let output = dense(&dropped, head_w, head_b);
            let trace = ForwardTrace { blocks, flat, dropout_mask: mask, dropped, output: output.clone() };
            Ok((output, Some(trace)))
        }
    }
}

/// Inverted-dropout mask: each unit is zeroed with probability `rate`, survivors scaled by `1 / (1 - rate)`.
pub fn dropout_mask<T: Real>(rate: f64, len: usize, rng: &mut RandomSource) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.uniform() < rate { T::zero() } else { keep }).collect()
}

/// Deterministic inference; dropout is the identity. Output is in internal units.
pub fn forward_eval<T: Real>(params: &FcnnParams<T>, cfg: &FcnnConfig, spectrum: &[T]) -> Result<Vec<T>> {
    Ok(run(params, cfg, spectrum, None)?.0)
}

/// Training-mode forward with a fresh dropout mask drawn from `rng`.
pub fn forward_train<T: Real>(
    params: &FcnnParams<T>,
    cfg: &FcnnConfig,
    spectrum: &[T],
    rng: &mut RandomSource,
) -> Result<ForwardTrace<T>> {
    let mask = dropout_mask(cfg.dropout_rate, cfg.flatten_dim(), rng);
    forward_with_mask(params, cfg, spectrum, mask)
}

/// Training-mode forward with a caller-supplied dropout mask.
pub fn forward_with_mask<T: Real>(
    params: &FcnnParams<T>,
    cfg: &FcnnConfig,
    spectrum: &[T],
    mask: Vec<T>,
) -> Result<ForwardTrace<T>> {
    Ok(run(params, cfg, spectrum, Some(mask))?.1.expect("trace kept in training mode"))
}

fn block_backward<T: Real>(
    params: &FcnnParams<T>,
    slots: &BlockSlots,
    trace: &BlockTrace<T>,
    d_out: &FeatureMap<T>,
    grads: &mut FcnnParams<T>,
    want_input_grad: bool,
) -> Option<FeatureMap<T>> {
    let sc = &slots.shortcut;
    let (gw, gb) = grads.tensor_pair_mut(sc.weight, sc.bias);
    let mut d_in = conv1d_same_backward(&trace.input, params.tensor(sc.weight), d_out, 1, 1, gw, gb, want_input_grad);

    // gradient reaching each half-summed output: direct path from the Add plus the next conv
    let mut d_merged = d_out.clone();
    for k in (0..slots.convs.len()).rev() {
        let slot = &slots.convs[k];
        let mut d_pre = half_sum_backward(&d_merged);
        relu_backward_in_place(&trace.conv_out[k], &mut d_pre);
        let input = if k == 0 { &trace.input } else { &trace.merged[k - 1] };
        let need = k > 0 || want_input_grad;
        let (gw, gb) = grads.tensor_pair_mut(slot.weight, slot.bias);
        let d_x =
            conv1d_same_backward(input, params.tensor(slot.weight), &d_pre, slot.kernel, slot.dilation, gw, gb, need);
        if k > 0 {
            d_merged = d_out.clone();
            d_merged.add_assign(&d_x.expect("requested"));
        } else if let Some(dx) = d_x {
            match d_in.as_mut() {
                Some(acc) => acc.add_assign(&dx),
                None => d_in = Some(dx),
            }
        }
    }
    d_in
}

/// Accumulates into `grads` the gradient of `sum_m d_output[m] * output[m]` for one traced sample.
pub fn backward_sample<T: Real>(
    params: &FcnnParams<T>,
    cfg: &FcnnConfig,
    trace: &ForwardTrace<T>,
    d_output: &[T],
    grads: &mut FcnnParams<T>,
) -> Result<()> {
    let layout = params.layout().clone();
    if d_output.len() != cfg.output_dim || trace.blocks.len() != layout.blocks.len() {
        return usage("trace does not match the model configuration");
    }
    let (gw, gb) = grads.tensor_pair_mut(layout.head_weight, layout.head_bias);
    let d_dropped = dense_backward(&trace.dropped, params.tensor(layout.head_weight), d_output, gw, gb);
    let d_flat: Vec<T> = d_dropped.iter().zip(&trace.dropout_mask).map(|(&d, &m)| d * m).collect();
    let last = layout.blocks.len() - 1;
    let mut d = FeatureMap::new(
        *layout.blocks.last().map(|b| &b.filters).expect("at least one block"),
        cfg.length_after_block(last),
        d_flat,
    )?;
    for b in (0..layout.blocks.len()).rev() {
        let bt = &trace.blocks[b];
        let d_block = maxpool_backward(&d, &bt.argmax, bt.pre_pool_len);
        match block_backward(params, &layout.blocks[b], bt, &d_block, grads, b > 0) {
            Some(dx) => d = dx,
            None => break,
        }
    }
    Ok(())
}

/// Gradient of the batch MSE (over samples and outputs) w.r.t. every parameter.
pub fn backward<T: Real>(
    params: &FcnnParams<T>,
    cfg: &FcnnConfig,
    traces: &[ForwardTrace<T>],
    targets: &[Vec<T>],
) -> Result<FcnnParams<T>> {
    if traces.len() != targets.len() || traces.is_empty() {
        return usage(format!("{} traces for {} targets", traces.len(), targets.len()));
    }
    let mut grads = params.zeros_like();
    let norm = T::lit(2.0 / (traces.len() * cfg.output_dim) as f64);
    for (trace, target) in traces.iter().zip(targets) {
        if target.len() != cfg.output_dim {
            return usage("target width does not match output_dim");
        }
        let d: Vec<T> = trace.output.iter().zip(target).map(|(&y, &t)| (y - t) * norm).collect();
        backward_sample(params, cfg, trace, &d, &mut grads)?;
    }
    Ok(grads)
}

/// Forward and backward over a batch, one trace alive at a time.
/// Returns the batch MSE (internal units) and its gradient.
pub fn loss_and_gradient<T: Real>(
    params: &FcnnParams<T>,
    cfg: &FcnnConfig,
    inputs: &[&[T]],
    targets: &[Vec<T>],
    masks: Vec<Vec<T>>,
) -> Result<(T, FcnnParams<T>)> {
    if inputs.len() != targets.len() || inputs.len() != masks.len() || inputs.is_empty() {
        return usage("batch inputs, targets and masks must have equal nonzero length");
    }
    let mut grads = params.zeros_like();
    let count = inputs.len() * cfg.output_dim;
    let norm = T::lit(2.0 / count as f64);
    let mut sse = T::zero();
    for ((x, target), mask) in inputs.iter().zip(targets).zip(masks) {
        let trace = forward_with_mask(params, cfg, x, mask)?;
        let d: Vec<T> = trace
            .output
            .iter()
            .zip(target)
            .map(|(&y, &t)| {
                sse = sse + (y - t) * (y - t);
                (y - t) * norm
            })
            .collect();
        backward_sample(params, cfg, &trace, &d, &mut grads)?;
    }
    Ok((sse / T::lit(count as f64), grads))
}

/// Mean squared error over every entry.
pub fn mse_loss<T: Real>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return usage(format!("mse over {} predictions and {} targets", pred.len(), target.len()));
    }
    let sse: T = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(sse / T::lit(pred.len() as f64))
}

/// Default stabilizer of the coefficient of determination (mol/L squared scale).
pub const DEFAULT_THETA: f64 = 1e-7;

/// `D = 1 - sum (C - C')^2 / (theta + sum (C - mean C)^2)` over all entries.
pub fn coefficient_of_determination<T: Real>(pred: &[T], target: &[T], theta: T) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return usage(format!("D over {} predictions and {} targets", pred.len(), target.len()));
    }
    let mean = target.iter().copied().sum::<T>() / T::lit(target.len() as f64);
    let sse: T = pred.iter().zip(target).map(|(&p, &t)| (t - p) * (t - p)).sum();
    let sst: T = target.iter().map(|&t| (t - mean) * (t - mean)).sum();
    Ok(T::one() - sse / (theta + sst))
}
