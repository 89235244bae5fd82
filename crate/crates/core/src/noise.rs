//! Intensity-dependent Gaussian detector noise.
//!
//! A clean absorbance is converted to a transmitted intensity, perturbed
//! multiplicatively as `I (1 + n)` with `n ~ N(0, sigma^2)`, and converted back.
//! The relative amplitude `sigma` falls linearly from `e_max` at the detector
//! floor `i_min` to `e_min` at full scale `i_max`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::scalar::Real;
use crate::spectral::{AbsorbanceSpectrum, DEFAULT_I0};

/// Smallest admissible `1 + n` before taking the logarithm.
pub const MIN_PERTURBATION: f64 = 1e-6;

/// How `sigma` is derived from the normalized intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLaw {
    /// `sigma = e_max - i_norm (e_max - e_min)`: relative std falling with intensity.
    #[default]
    Amplitude,
    /// `sigma^2 = i_norm (e_max - e_min) + e_max`, taken literally.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub e_max: f64,
    pub e_min: f64,
    pub i_min: f64,
    pub i_max: f64,
    pub i0: f64,
    pub noise_law: NoiseLaw,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            e_max: 0.02,
            e_min: 0.005,
            i_min: 3000.0,
            i_max: 45000.0,
            i0: DEFAULT_I0,
            noise_law: NoiseLaw::Amplitude,
        }
    }
}

impl NoiseParams {
    /// Constant relative noise `sigma` at every intensity.
    pub fn constant(sigma: f64) -> Self {
        Self { e_max: sigma, e_min: sigma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        // e_min == e_max is accepted so that a flat (or zero) noise level can be configured
        if !(0.0 <= self.e_min && self.e_min <= self.e_max && self.e_max < 1.0) {
            return usage(format!(
                "noise fractions must satisfy 0 <= e_min <= e_max < 1 (got {} / {})",
                self.e_min, self.e_max
            ));
        }
        if !(0.0 < self.i_min && self.i_min < self.i_max) {
            return usage(format!(
                "intensity bounds must satisfy 0 < i_min < i_max (got {} / {})",
                self.i_min, self.i_max
            ));
        }
        if !(self.i0 > 0.0) {
            return usage(format!("i0 must be positive, got {}", self.i0));
        }
        Ok(())
    }
}

/// Deterministic stream of uniform and standard-normal variates.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; identical `(seed, stream)` pairs give identical children.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed ^ stream.rotate_left(17), rng }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer on `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        items.shuffle(&mut self.rng);
    }
}

/// `(I - i_min) / (i_max - i_min)` clamped to `[0, 1]`.
pub fn normalize_intensity<T: Real>(intensity: T, p: &NoiseParams) -> T {
    let norm = (intensity - T::lit(p.i_min)) / T::lit(p.i_max - p.i_min);
    norm.max(T::zero()).min(T::one())
}

/// Relative standard deviation of the multiplicative noise at a normalized intensity.
pub fn noise_fraction<T: Real>(i_norm: T, p: &NoiseParams) -> T {
    let (e_max, e_min) = (T::lit(p.e_max), T::lit(p.e_min));
    match p.noise_law {
        NoiseLaw::Amplitude => e_max - i_norm * (e_max - e_min),
        NoiseLaw::AsPrinted => (i_norm * (e_max - e_min) + e_max).sqrt(),
    }
}

/// Relative noise amplitude expected for a given transmitted intensity.
pub fn sigma_at_intensity<T: Real>(intensity: T, p: &NoiseParams) -> T {
    noise_fraction(normalize_intensity(intensity, p), p)
}

/// Draws one multiplicative perturbation `1 + n` for a transmitted intensity.
fn perturbation<T: Real>(intensity: T, p: &NoiseParams, rng: &mut RandomSource) -> T {
    let n = sigma_at_intensity(intensity, p) * T::lit(rng.normal());
    (T::one() + n).max(T::lit(MIN_PERTURBATION))
}

/// Noisy absorbance: one independent draw per wavelength, in grid order.
///
/// `log10(i0 / (I (1 + n)))` is evaluated as `A - log10(1 + n)`, which is the same
/// quantity and leaves the input untouched when a draw is exactly zero.
pub fn apply_sensor_noise<T: Real>(
    clean: &AbsorbanceSpectrum<T>,
    p: &NoiseParams,
    rng: &mut RandomSource,
) -> Result<AbsorbanceSpectrum<T>> {
    p.validate()?;
    let i0 = T::lit(p.i0);
    let ten = T::lit(10.0);
    let values = clean
        .values()
        .iter()
        .map(|&a| {
            let intensity = i0 / ten.powf(a);
            a - perturbation(intensity, p, rng).log10()
        })
        .collect();
    AbsorbanceSpectrum::new(clean.grid().clone(), values)
}
