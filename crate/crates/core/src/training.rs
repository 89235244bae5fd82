//! Adam, the multi-phase schedule with best-checkpoint selection, and evaluation metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{usage, Result};
use crate::fcnn::{
    coefficient_of_determination, dropout_mask, forward_eval, loss_and_gradient, FcnnModel, DEFAULT_THETA,
};
use crate::noise::{apply_sensor_noise, NoiseParams, RandomSource};
use crate::predict::ConcentrationEstimator;
use crate::scalar::Real;
use crate::spectral::{AbsorbanceSpectrum, WavelengthGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return usage(format!("learning rate must be positive, got {}", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return usage(format!("betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return usage(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return usage(format!(
            "adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (one, lr, eps) = (T::one(), T::lit(hyper.lr), T::lit(hyper.eps));
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasePlan {
    /// One learning rate per phase, consumed in order.
    pub learning_rates: Vec<f64>,
    pub epochs_per_phase: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            epochs_per_phase: 200,
            steps_per_epoch: 100,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl PhasePlan {
    /// Reduced schedule: 3 phases of 20 epochs x 50 steps.
    pub fn desk(seed: u64) -> Self {
        Self { epochs_per_phase: 20, steps_per_epoch: 50, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() {
            return usage("plan needs at least one phase");
        }
        for &lr in &self.learning_rates {
            AdamHyper::with_lr(lr).validate()?;
        }
        if self.steps_per_epoch == 0 || self.batch_size == 0 {
            return usage("steps_per_epoch and batch_size must be positive");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.learning_rates.len() * self.epochs_per_phase
    }
}

/// One epoch of training; losses are in squared internal units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub phase: usize,
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut w: W) -> Result<()> {
    writeln!(w, "phase,epoch,train_mse,val_mse")?;
    for r in rows {
        writeln!(w, "{},{},{:.17e},{:.17e}", r.phase, r.epoch, r.train_mse, r.val_mse)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome<T> {
    pub model: FcnnModel<T>,
    /// Validation MSE of the starting parameters.
    pub initial_val_mse: f64,
    pub best_val_mse: f64,
    /// 0 when no epoch beat the starting parameters.
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: FcnnModel<T>,
    pub initial_val_mse: f64,
    pub best_val_mse: f64,
    /// Best validation MSE handed over at the end of each phase.
    pub phase_best: Vec<f64>,
    pub history: Vec<HistoryRow>,
}

fn check_compatible<T: Real>(model: &FcnnModel<T>, ds: &Dataset<T>, what: &str) -> Result<()> {
    if ds.is_empty() {
        return usage(format!("{what} dataset is empty"));
    }
    if ds.grid().len() != model.config.input_length {
        return usage(format!(
            "{what} dataset has {} wavelengths, model expects {}",
            ds.grid().len(),
            model.config.input_length
        ));
    }
    if ds.species() != model.species.as_slice() {
        return usage(format!("{what} dataset species {:?} differ from model {:?}", ds.species(), model.species));
    }
    Ok(())
}

fn internal_targets<T: Real>(ds: &Dataset<T>, target_scale: f64) -> Vec<Vec<T>> {
    let inv = T::lit(target_scale).recip();
    ds.samples().iter().map(|s| s.conc.values().iter().map(|&c| c * inv).collect()).collect()
}

/// Eval-mode MSE over a dataset in squared internal units.
pub fn validation_mse<T: Real>(model: &FcnnModel<T>, ds: &Dataset<T>) -> Result<f64> {
    check_compatible(model, ds, "validation")?;
    let targets = internal_targets(ds, model.config.target_scale);
    let mut sse = 0.0;
    for (s, t) in ds.samples().iter().zip(&targets) {
        let y = forward_eval(&model.params, &model.config, s.spectrum.values())?;
        sse += y.iter().zip(t).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>();
    }
    Ok(sse / (ds.len() * model.config.output_dim) as f64)
}

/// Trains one phase with a fresh optimizer and keeps the parameters with the lowest
/// end-of-epoch validation MSE; the starting parameters are the first candidate.
#[allow(clippy::too_many_arguments)]
pub fn train_phase<T: Real>(
    model: &FcnnModel<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    hyper: &AdamHyper,
    phase: usize,
    epochs: usize,
    plan: &PhasePlan,
    rng: &mut RandomSource,
) -> Result<PhaseOutcome<T>> {
    hyper.validate()?;
    plan.validate()?;
    check_compatible(model, train, "training")?;
    let initial_val_mse = validation_mse(model, val)?;
    let targets = internal_targets(train, model.config.target_scale);
    let mut current = model.clone();
    let mut state = AdamState::new(current.params.len());
    let mut best = (model.params.clone(), initial_val_mse, 0);
    let mut history = Vec::with_capacity(epochs);
    let flat = current.config.flatten_dim();
    for epoch in 1..=epochs {
        let mut train_sum = 0.0;
        for _ in 0..plan.steps_per_epoch {
            let idx: Vec<usize> = (0..plan.batch_size).map(|_| rng.index(train.len())).collect();
            let inputs: Vec<&[T]> = idx.iter().map(|&i| train.samples()[i].spectrum.values()).collect();
            let batch_targets: Vec<Vec<T>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let masks = idx.iter().map(|_| dropout_mask(current.config.dropout_rate, flat, rng)).collect();
            let (loss, grads) = loss_and_gradient(&current.params, &current.config, &inputs, &batch_targets, masks)?;
            adam_step(current.params.data_mut(), grads.data(), &mut state, hyper)?;
            train_sum += loss.as_f64();
        }
        let val_mse = validation_mse(&current, val)?;
        history.push(HistoryRow { phase, epoch, train_mse: train_sum / plan.steps_per_epoch as f64, val_mse });
        if val_mse < best.1 {
            best = (current.params.clone(), val_mse, epoch);
        }
    }
    let mut out = model.clone();
    out.params = best.0;
    Ok(PhaseOutcome { model: out, initial_val_mse, best_val_mse: best.1, best_epoch: best.2, history })
}

/// Runs every phase of `plan`, each starting from the previous phase's best checkpoint.
pub fn train_full<T: Real>(
    model: FcnnModel<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    plan: &PhasePlan,
) -> Result<TrainOutcome<T>> {
    plan.validate()?;
    let root = RandomSource::new(plan.seed);
    let mut current = model;
    let mut history = Vec::with_capacity(plan.total_epochs());
    let mut phase_best = Vec::with_capacity(plan.learning_rates.len());
    let mut initial_val_mse = None;
    for (k, &lr) in plan.learning_rates.iter().enumerate() {
        let mut rng = root.fork(k as u64);
        let outcome =
            train_phase(&current, train, val, &AdamHyper::with_lr(lr), k + 1, plan.epochs_per_phase, plan, &mut rng)?;
        initial_val_mse.get_or_insert(outcome.initial_val_mse);
        phase_best.push(outcome.best_val_mse);
        history.extend(outcome.history);
        current = outcome.model;
    }
    let best_val_mse = *phase_best.last().expect("plan has a phase");
    let meta = &mut current.metadata;
    meta.insert("train_seed".into(), plan.seed.to_string());
    meta.insert("batch_sampling".into(), "uniform-with-replacement".into());
    meta.insert("checkpoint_criterion".into(), "epoch-end-validation-mse".into());
    meta.insert(
        "plan".into(),
        format!(
            "lrs={:?} epochs={} steps={} batch={}",
            plan.learning_rates, plan.epochs_per_phase, plan.steps_per_epoch, plan.batch_size
        ),
    );
    meta.insert("best_val_mse".into(), format!("{best_val_mse:e}"));
    Ok(TrainOutcome {
        model: current,
        initial_val_mse: initial_val_mse.expect("plan has a phase"),
        best_val_mse,
        phase_best,
        history,
    })
}

/// Validation metrics in mol/L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: Vec<f64>,
    /// Coefficient of determination over all entries.
    pub d: f64,
    pub d_per_species: Vec<f64>,
}

/// Predictions for every sample, row-major `[sample][species]`, in mol/L.
pub fn predict_all<T: Real, E: ConcentrationEstimator<T> + ?Sized>(est: &E, ds: &Dataset<T>) -> Result<Vec<Vec<f64>>> {
    if est.species_count() != ds.species().len() {
        return usage(format!("estimator has {} outputs, dataset {} species", est.species_count(), ds.species().len()));
    }
    ds.samples().iter().map(|s| Ok(est.estimate(&s.spectrum)?.values().iter().map(|v| v.as_f64()).collect())).collect()
}

pub fn evaluate<T: Real, E: ConcentrationEstimator<T> + ?Sized>(est: &E, ds: &Dataset<T>) -> Result<Metrics> {
    if ds.is_empty() {
        return usage("cannot evaluate on an empty dataset");
    }
    let pred = predict_all(est, ds)?;
    let m = ds.species().len();
    let truth: Vec<Vec<f64>> =
        ds.samples().iter().map(|s| s.conc.values().iter().map(|v| v.as_f64()).collect()).collect();
    let n = ds.len() as f64;
    let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    let mut rmse = Vec::with_capacity(m);
    let mut d_per_species = Vec::with_capacity(m);
    for j in 0..m {
        let (p, t) = (column(&pred, j), column(&truth, j));
        let sse: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
        rmse.push((sse / n).sqrt());
        d_per_species.push(coefficient_of_determination(&p, &t, DEFAULT_THETA)?);
    }
    let p_all: Vec<f64> = pred.concat();
    let t_all: Vec<f64> = truth.concat();
    let mse = p_all.iter().zip(&t_all).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p_all.len() as f64;
    let d = coefficient_of_determination(&p_all, &t_all, DEFAULT_THETA)?;
    Ok(Metrics { mse, rmse, d, d_per_species })
}

/// One clean zero-absorbance spectrum followed by `noisy` noise-augmented copies.
pub fn blank_ensemble<T: Real>(
    grid: &std::sync::Arc<WavelengthGrid<T>>,
    noise: &NoiseParams,
    noisy: usize,
    rng: &mut RandomSource,
) -> Result<Vec<AbsorbanceSpectrum<T>>> {
    let clean = AbsorbanceSpectrum::zeros(grid.clone());
    let mut out = Vec::with_capacity(noisy + 1);
    for _ in 0..noisy {
        out.push(apply_sensor_noise(&clean, noise, rng)?);
    }
    out.insert(0, clean);
    Ok(out)
}

/// Number of noisy replicas in the default blank ensemble.
pub const DEFAULT_NOISY_BLANKS: usize = 99;

/// Per species, the largest concentration predicted over the blank ensemble.
pub fn min_detectable_concentration<T: Real, E: ConcentrationEstimator<T> + ?Sized>(
    est: &E,
    blanks: &[AbsorbanceSpectrum<T>],
) -> Result<Vec<f64>> {
    if blanks.is_empty() {
        return usage("blank ensemble is empty");
    }
    let mut best = vec![f64::NEG_INFINITY; est.species_count()];
    for b in blanks {
        for (acc, v) in best.iter_mut().zip(est.estimate(b)?.values()) {
            *acc = acc.max(v.as_f64());
        }
    }
    Ok(best)
}

/// RMSE over the samples above the detection threshold; `rmse` is `None` when none qualify.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionError {
    pub rmse: Option<f64>,
    pub samples: usize,
}

pub fn detection_error<T: Real, E: ConcentrationEstimator<T> + ?Sized>(
    est: &E,
    ds: &Dataset<T>,
    min_detectable: &[f64],
) -> Result<Vec<DetectionError>> {
    if ds.is_empty() {
        return usage("cannot compute detection error on an empty dataset");
    }
    if min_detectable.len() != ds.species().len() {
        return usage(format!("{} thresholds for {} species", min_detectable.len(), ds.species().len()));
    }
    let pred = predict_all(est, ds)?;
    Ok(min_detectable
        .iter()
        .enumerate()
        .map(|(j, &thr)| {
            let (mut sse, mut count) = (0.0, 0usize);
            for (s, p) in ds.samples().iter().zip(&pred) {
                let truth = s.conc.values()[j].as_f64();
                if truth > thr {
                    sse += (p[j] - truth).powi(2);
                    count += 1;
                }
            }
            DetectionError { rmse: (count > 0).then(|| (sse / count as f64).sqrt()), samples: count }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_simulated_dataset, LabeledSample, Provenance, SamplingPlan};
    use crate::fcnn::FcnnConfig;
    use crate::spectral::{dye_stand_in_bands, synthetic_profile_set, ConcentrationVector, PathLength};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn reference_adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, h: &AdamHyper) {
        for i in 0..p.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - h.beta1.powi(t));
            let vh = v[i] / (1.0 - h.beta2.powi(t));
            p[i] -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let h = AdamHyper::default();
        let mut p = [0.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &h).unwrap();
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_sign_property() {
        let h = AdamHyper::default();
        let mut p = vec![0.3f64, -1.2, 5.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, &h).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 5.0]);
        let g = [2.5, -1e-3, 7.0];
        let before = p.clone();
        adam_step(&mut p, &g, &mut AdamState::new(3), &h).unwrap();
        for i in 0..3 {
            assert_eq!((p[i] - before[i]).signum(), -g[i].signum());
        }
    }

    #[test]
    fn adam_matches_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let h = AdamHyper::with_lr(3e-3);
        let n = 257;
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut q = p.clone();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let mut s = AdamState::new(n);
        for t in 1..=25 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            adam_step(&mut p, &g, &mut s, &h).unwrap();
            reference_adam(&mut q, &g, &mut m, &mut v, t, &h);
        }
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = [0.0f64; 2];
        assert!(adam_step(&mut p, &[1.0], &mut AdamState::new(2), &AdamHyper::default()).is_err());
    }

    #[test]
    fn plan_defaults() {
        let p = PhasePlan::default();
        assert_eq!(p.learning_rates, vec![1e-3, 1e-4, 1e-5]);
        assert_eq!(p.total_epochs(), 600);
        assert_eq!((p.steps_per_epoch, p.batch_size), (100, 10));
        let d = PhasePlan::desk(1);
        assert_eq!((d.epochs_per_phase, d.steps_per_epoch), (20, 50));
        assert!(PhasePlan { batch_size: 0, ..p.clone() }.validate().is_err());
        assert!(PhasePlan { learning_rates: vec![], ..p }.validate().is_err());
    }

    fn tiny_setup(n: usize, seed: u64) -> (FcnnModel<f64>, Dataset<f64>, Dataset<f64>) {
        let grid = Arc::new(WavelengthGrid::uniform(400.0, 850.0, 64).unwrap());
        let eps = synthetic_profile_set(grid, &dye_stand_in_bands()).unwrap();
        let plan = SamplingPlan { n_total: n, seed, ..SamplingPlan::default() };
        let ds =
            generate_simulated_dataset(&eps, &plan, PathLength::default(), None, &mut RandomSource::new(seed)).unwrap();
        let (tr, va) = crate::dataset::split(&ds, 0.8, seed).unwrap();
        let cfg = FcnnConfig { block_filters: vec![2, 2, 2, 2], ..FcnnConfig::with_shape(64, 2) };
        (FcnnModel::new(cfg, eps.species().to_vec(), seed).unwrap(), tr, va)
    }

    fn tiny_plan(epochs: usize) -> PhasePlan {
        PhasePlan { epochs_per_phase: epochs, steps_per_epoch: 4, batch_size: 4, seed: 9, ..PhasePlan::default() }
    }

    #[test]
    fn zero_epoch_plan_returns_initial_model() {
        let (model, tr, va) = tiny_setup(40, 1);
        let out = train_full(model.clone(), &tr, &va, &tiny_plan(0)).unwrap();
        assert_eq!(out.model.params, model.params);
        assert!(out.history.is_empty());
        assert_eq!(out.best_val_mse, out.initial_val_mse);
    }

    #[test]
    fn checkpoint_is_best_of_phase_and_deterministic() {
        let (model, tr, va) = tiny_setup(60, 2);
        let plan = tiny_plan(3);
        let a = train_full(model.clone(), &tr, &va, &plan).unwrap();
        let b = train_full(model, &tr, &va, &plan).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 9);
        for (k, &best) in a.phase_best.iter().enumerate() {
            for r in a.history.iter().filter(|r| r.phase == k + 1) {
                assert!(best <= r.val_mse);
            }
        }
        for w in a.phase_best.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(validation_mse(&a.model, &va).unwrap(), a.best_val_mse);
        assert_eq!(a.history.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn history_csv_layout() {
        let rows = [HistoryRow { phase: 1, epoch: 2, train_mse: 0.5, val_mse: 0.25 }];
        let mut buf = Vec::new();
        write_history_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "phase,epoch,train_mse,val_mse");
        assert!(lines[1].starts_with("1,2,5.0"));
    }

    struct Echo(Vec<Vec<f64>>, std::cell::Cell<usize>);

    impl ConcentrationEstimator<f64> for Echo {
        fn species_count(&self) -> usize {
            self.0[0].len()
        }
        fn estimate(&self, _: &AbsorbanceSpectrum<f64>) -> Result<ConcentrationVector<f64>> {
            let k = self.1.get();
            self.1.set(k + 1);
            Ok(ConcentrationVector(self.0[k % self.0.len()].clone()))
        }
    }

    fn labeled(concs: &[[f64; 2]]) -> Dataset<f64> {
        let grid = Arc::new(WavelengthGrid::uniform(400.0, 850.0, 16).unwrap());
        let samples = concs
            .iter()
            .map(|c| {
                LabeledSample::new(ConcentrationVector(c.to_vec()), AbsorbanceSpectrum::zeros(grid.clone())).unwrap()
            })
            .collect();
        Dataset::new(grid, vec!["IC".into(), "NR".into()], Provenance::SimClean, samples).unwrap()
    }

    #[test]
    fn metrics_match_direct_sums() {
        let truth = [[1e-5, 2e-5], [3e-5, 0.0], [0.0, 9e-5], [2e-5, 4e-5]];
        let pred = vec![vec![1.1e-5, 1.8e-5], vec![2.7e-5, 1e-6], vec![2e-6, 8.5e-5], vec![2e-5, 4.4e-5]];
        let ds = labeled(&truth);
        let m = evaluate(&Echo(pred.clone(), Default::default()), &ds).unwrap();
        let mut sse = [0.0; 2];
        for (p, t) in pred.iter().zip(&truth) {
            for j in 0..2 {
                sse[j] += (p[j] - t[j]) * (p[j] - t[j]);
            }
        }
        for j in 0..2 {
            let want = (sse[j] / 4.0).sqrt();
            assert!((m.rmse[j] - want).abs() <= 1e-12 * want);
        }
        let want_mse = (sse[0] + sse[1]) / 8.0;
        assert!((m.mse - want_mse).abs() <= 1e-12 * want_mse);
        let all: Vec<f64> = truth.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / 8.0;
        let sst: f64 = all.iter().map(|t| (t - mean) * (t - mean)).sum();
        let want_d = 1.0 - (sse[0] + sse[1]) / (1e-7 + sst);
        assert!((m.d - want_d).abs() <= 1e-12 * want_d.abs());
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let truth = [[1e-5, 2e-5], [3e-5, 0.0], [0.0, 9e-5]];
        let ds = labeled(&truth);
        let perfect = Echo(truth.iter().map(|c| c.to_vec()).collect(), Default::default());
        let m = evaluate(&perfect, &ds).unwrap();
        assert_eq!(m.rmse, vec![0.0, 0.0]);
        assert_eq!(m.d, 1.0);
        // mean predictor: D = theta / (theta + SST), which vanishes once SST dominates theta
        let wide = [[1e-2, 2e-2], [3e-2, 0.0], [0.0, 9e-2]];
        let ds = labeled(&wide);
        let all: Vec<f64> = wide.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / 6.0;
        let sst: f64 = all.iter().map(|t| (t - mean) * (t - mean)).sum();
        let m = evaluate(&Echo(vec![vec![mean, mean]], Default::default()), &ds).unwrap();
        assert!((m.d - 1e-7 / (1e-7 + sst)).abs() < 1e-12);
        assert!(m.d.abs() < 1e-3);
    }

    #[test]
    fn detection_metrics() {
        let grid = Arc::new(WavelengthGrid::uniform(400.0, 850.0, 16).unwrap());
        let blanks = vec![AbsorbanceSpectrum::zeros(grid.clone())];
        let single = Echo(vec![vec![3e-7, -1e-7]], Default::default());
        assert_eq!(min_detectable_concentration(&single, &blanks).unwrap(), vec![3e-7, -1e-7]);
        assert!(min_detectable_concentration(&single, &[]).is_err());

        let truth = [[1e-5, 2e-5], [3e-5, 0.0]];
        let ds = labeled(&truth);
        let perfect = Echo(truth.iter().map(|c| c.to_vec()).collect(), Default::default());
        let e = detection_error(&perfect, &ds, &[0.0, 0.0]).unwrap();
        assert_eq!(e[0], DetectionError { rmse: Some(0.0), samples: 2 });
        assert_eq!(e[1], DetectionError { rmse: Some(0.0), samples: 1 });
        let e = detection_error(&perfect, &ds, &[1.0, 1.0]).unwrap();
        assert_eq!(e[0], DetectionError { rmse: None, samples: 0 });
    }

    #[test]
    fn blank_ensemble_shape() {
        let grid = Arc::new(WavelengthGrid::<f64>::uniform(400.0, 850.0, 32).unwrap());
        let b = blank_ensemble(&grid, &NoiseParams::default(), 99, &mut RandomSource::new(1)).unwrap();
        assert_eq!(b.len(), 100);
        assert!(b[0].values().iter().all(|&v| v == 0.0));
        assert!(b[1].values().iter().any(|&v| v != 0.0));
    }
}
