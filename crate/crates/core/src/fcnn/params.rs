use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::noise::RandomSource;
use crate::scalar::Real;

/// Architecture hyper-parameters of the fractal 1-D CNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcnnConfig {
    pub input_length: usize,
    pub output_dim: usize,
    /// Filters of each fractal block; the block's convolutions use twice as many.
    pub block_filters: Vec<usize>,
    pub kernel_size: usize,
    /// One chained convolution per entry, in order.
    pub dilations: Vec<usize>,
    pub pool_size: usize,
    pub dropout_rate: f64,
    /// mol/L represented by one internal output unit.
    pub target_scale: f64,
}

impl Default for FcnnConfig {
    fn default() -> Self {
        Self {
            input_length: crate::spectral::DEFAULT_GRID_LEN,
            output_dim: 2,
            block_filters: vec![16, 32, 64, 128],
            kernel_size: 3,
            dilations: vec![1, 2, 4],
            pool_size: 2,
            dropout_rate: 0.5,
            target_scale: 1e-5,
        }
    }
}

impl FcnnConfig {
    pub fn with_shape(input_length: usize, output_dim: usize) -> Self {
        Self { input_length, output_dim, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_filters.is_empty() || self.block_filters.contains(&0) {
            return usage("block_filters must be a nonempty list of positive counts");
        }
        if self.output_dim == 0 {
            return usage("output_dim must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return usage(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return usage("dilations must be a nonempty list of positive rates");
        }
        if self.pool_size == 0 {
            return usage("pool_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return usage(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.target_scale > 0.0) {
            return usage("target_scale must be positive");
        }
        if self.final_length() == 0 {
            return usage(format!(
                "input length {} vanishes after {} pools of {}",
                self.input_length,
                self.block_filters.len(),
                self.pool_size
            ));
        }
        Ok(())
    }

    /// Sequence length after block `k` (0-based) and its pool.
    pub fn length_after_block(&self, k: usize) -> usize {
        (0..=k).fold(self.input_length, |n, _| n / self.pool_size)
    }

    pub fn final_length(&self) -> usize {
        self.length_after_block(self.block_filters.len() - 1)
    }

    pub fn flatten_dim(&self) -> usize {
        self.final_length() * self.block_filters.last().copied().unwrap_or(0)
    }

    pub fn block_input_channels(&self, block: usize) -> usize {
        if block == 0 {
            1
        } else {
            self.block_filters[block - 1]
        }
    }
}

/// Name, shape and offset of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Location of one convolution's weight and bias tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSlot {
    pub weight: usize,
    pub bias: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSlots {
    pub filters: usize,
    pub convs: Vec<ConvSlot>,
    pub shortcut: ConvSlot,
}

/// Tensor inventory for a config, in checkpoint order: per block the chained
/// convolutions then the shortcut, then the dense head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub blocks: Vec<BlockSlots>,
    pub head_weight: usize,
    pub head_bias: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &FcnnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec { name, shape, offset };
            offset += spec.len();
            tensors.push(spec);
            tensors.len() - 1
        };
        let mut blocks = Vec::new();
        for (b, &f) in cfg.block_filters.iter().enumerate() {
            let c_in = cfg.block_input_channels(b);
            let mut convs = Vec::new();
            for (k, &d) in cfg.dilations.iter().enumerate() {
                let ci = if k == 0 { c_in } else { f };
                let weight = push(format!("block{b}.conv{k}.weight"), vec![2 * f, ci, cfg.kernel_size]);
                let bias = push(format!("block{b}.conv{k}.bias"), vec![2 * f]);
                convs.push(ConvSlot { weight, bias, c_in: ci, c_out: 2 * f, kernel: cfg.kernel_size, dilation: d });
            }
            let weight = push(format!("block{b}.shortcut.weight"), vec![f, c_in, 1]);
            let bias = push(format!("block{b}.shortcut.bias"), vec![f]);
            let shortcut = ConvSlot { weight, bias, c_in, c_out: f, kernel: 1, dilation: 1 };
            blocks.push(BlockSlots { filters: f, convs, shortcut });
        }
        let head_weight = push("head.weight".into(), vec![cfg.flatten_dim(), cfg.output_dim]);
        let head_bias = push("head.bias".into(), vec![cfg.output_dim]);
        Ok(Self { tensors, blocks, head_weight, head_bias, total: offset })
    }

    /// `(fan_in, fan_out)` of a weight tensor, counting the kernel's receptive field.
    fn fans(shape: &[usize]) -> (usize, usize) {
        match shape {
            [c_out, c_in, k] => (c_in * k, c_out * k),
            [n_in, n_out] => (*n_in, *n_out),
            _ => (1, 1),
        }
    }
}

/// All trainable parameters in one flat vector addressed through a [`ParamLayout`].
/// Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnnParams<T> {
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Real> FcnnParams<T> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![T::zero(); layout.total];
        Self { layout, data }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<T>) -> Result<Self> {
        if data.len() != layout.total {
            return usage(format!("{} parameter values for a layout of {}", data.len(), layout.total));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, index: usize) -> &[T] {
        &self.data[self.layout.tensors[index].range()]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [T] {
        let r = self.layout.tensors[index].range();
        &mut self.data[r]
    }

    /// Two disjoint tensors, the first mutable.
    pub(crate) fn tensor_pair_mut(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        let ra = self.layout.tensors[a].range();
        let rb = self.layout.tensors[b].range();
        assert!(ra.end <= rb.start || rb.end <= ra.start, "overlapping tensors");
        if ra.start < rb.start {
            let (lo, hi) = self.data.split_at_mut(rb.start);
            (&mut lo[ra], &mut hi[..rb.end - rb.start])
        } else {
            let (lo, hi) = self.data.split_at_mut(ra.start);
            (&mut hi[..ra.end - ra.start], &mut lo[rb])
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Glorot-uniform weights on `[-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`; zero biases.
pub fn init_params<T: Real>(cfg: &FcnnConfig, seed: u64) -> Result<FcnnParams<T>> {
    let layout = Arc::new(ParamLayout::new(cfg)?);
    let mut params = FcnnParams::zeros(layout.clone());
    let mut rng = RandomSource::new(seed);
    for (i, spec) in layout.tensors.iter().enumerate() {
        if spec.shape.len() == 1 {
            continue;
        }
        let (fan_in, fan_out) = ParamLayout::fans(&spec.shape);
        let a = glorot_limit(fan_in, fan_out);
        for w in params.tensor_mut(i) {
            let mut v = a * (2.0 * rng.uniform() - 1.0);
            while v.abs() >= a {
                v = a * (2.0 * rng.uniform() - 1.0);
            }
            *w = T::lit(v);
        }
    }
    Ok(params)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
