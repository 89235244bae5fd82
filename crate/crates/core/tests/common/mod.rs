#![allow(dead_code)]

use mcspec::fcnn::{dropout_mask, init_params, loss_and_gradient, FcnnConfig};
use mcspec::noise::RandomSource;

/// Small network used for finite-difference checks.
pub fn tiny_config() -> FcnnConfig {
    FcnnConfig { block_filters: vec![2, 2, 2, 2], ..FcnnConfig::with_shape(64, 2) }
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor; only matters when both gradients vanish.
pub const FD_FLOOR: f64 = 1e-8;

pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central differences of the batch MSE with a frozen batch and frozen dropout masks,
/// taken at initialized weights with random biases.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(seed: u64, step: f64, floor: f64) -> GradientCheck {
    let cfg = tiny_config();
    let mut params = init_params::<f64>(&cfg, seed).unwrap();
    let mut rng = RandomSource::new(seed ^ 0xF00D);
    // zero biases put units exactly on the ReLU kink; move off it
    let layout = params.layout().clone();
    for (i, t) in layout.tensors.iter().enumerate() {
        if t.name.ends_with(".bias") {
            for b in params.tensor_mut(i) {
                *b = 0.2 * (rng.uniform() - 0.5);
            }
        }
    }
    let batch = 3;
    let inputs: Vec<Vec<f64>> =
        (0..batch).map(|_| (0..cfg.input_length).map(|_| rng.uniform() * 0.8).collect()).collect();
    let targets: Vec<Vec<f64>> =
        (0..batch).map(|_| (0..cfg.output_dim).map(|_| rng.uniform() * 5.0).collect()).collect();
    let masks: Vec<Vec<f64>> =
        (0..batch).map(|_| dropout_mask(cfg.dropout_rate, cfg.flatten_dim(), &mut rng)).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let loss = |p: &mcspec::fcnn::FcnnParams<f64>| loss_and_gradient(p, &cfg, &refs, &targets, masks.clone()).unwrap();
    let (_, grads) = loss(&params);
    let analytic = grads.data().to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss(&probe).0;
        probe.data_mut()[i] = orig - step;
        let down = loss(&probe).0;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    GradientCheck { max_rel_error, worst_index, analytic, numeric }
}

use std::sync::Arc;

use mcspec::calibration::fit_extinction;
use mcspec::dataset::{generate_simulated_dataset, SamplingPlan};
use mcspec::noise::{apply_sensor_noise, noise_fraction, NoiseParams};
use mcspec::spectral::{
    dye_stand_in_bands, synthetic_profile_set, AbsorbanceSpectrum, ExtinctionProfileSet, PathLength, WavelengthGrid,
};

/// Empirical and model relative intensity standard deviation at a normalized intensity.
pub fn relative_intensity_std(i_norm: f64, draws: usize, seed: u64) -> (f64, f64) {
    let p = NoiseParams::default();
    let intensity = p.i_min + i_norm * (p.i_max - p.i_min);
    let a = (p.i0 / intensity).log10();
    let grid = Arc::new(WavelengthGrid::<f64>::uniform(0.0, 1.0, draws).unwrap());
    let clean = AbsorbanceSpectrum::new(grid, vec![a; draws]).unwrap();
    let noisy = apply_sensor_noise(&clean, &p, &mut RandomSource::new(seed)).unwrap();
    let rel: Vec<f64> = noisy.values().iter().map(|&an| p.i0 / 10f64.powf(an) / intensity - 1.0).collect();
    let mean = rel.iter().sum::<f64>() / draws as f64;
    let var = rel.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (draws - 1) as f64;
    (var.sqrt(), noise_fraction(i_norm, &p))
}

pub fn stand_in_profiles(len: usize) -> ExtinctionProfileSet<f64> {
    let grid = Arc::new(WavelengthGrid::uniform(400.0, 850.0, len).unwrap());
    synthetic_profile_set(grid, &dye_stand_in_bands()).unwrap()
}

/// Refits the stand-in profiles from simulated mixtures. Returns the worst error over
/// all wavelengths relative to each species' peak, and the relative error at each peak.
pub fn calibration_errors(noise: Option<&NoiseParams>, samples: usize, seed: u64) -> (f64, Vec<f64>) {
    let eps = stand_in_profiles(456);
    let plan = SamplingPlan { n_total: samples, seed, ..SamplingPlan::default() };
    let path = PathLength::default();
    let ds = generate_simulated_dataset(&eps, &plan, path, noise, &mut RandomSource::new(seed)).unwrap();
    let fit = fit_extinction(ds.species(), ds.samples(), path).unwrap();
    let mut worst = 0.0f64;
    let mut peaks = Vec::new();
    for i in 0..eps.species_count() {
        let truth = eps.profile(i);
        let (peak_idx, peak) =
            truth.iter().copied().enumerate().fold((0, 0.0), |b, (j, v)| if v > b.1 { (j, v) } else { b });
        for (f, t) in fit.profile(i).iter().zip(truth) {
            worst = worst.max((f - t).abs() / peak);
        }
        peaks.push((fit.profile(i)[peak_idx] - peak).abs() / peak);
    }
    (worst, peaks)
}
