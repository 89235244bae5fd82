use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use mcspec::calibration::{condition_report, fit_extinction, negative_coefficient_counts, LeastSquaresUnmixer};
use mcspec::dataset::{generate_simulated_dataset, split, Dataset, Stratum};
use mcspec::fcnn::FcnnModel;
use mcspec::modem::run_link;
use mcspec::noise::RandomSource;
use mcspec::spectral::{ExtinctionProfileSet, PathLength};
use mcspec::training::{
    blank_ensemble, detection_error, evaluate, min_detectable_concentration, train_full, write_history_csv,
    DetectionError, Metrics,
};
use mcspec::ConcentrationEstimator;

use crate::config::{
    self, config_error, is_least_squares, resolve, EvalConfig, FitExtinctionConfig, GenDatasetConfig, ProfileSource,
    SimulateLinkConfig, TrainConfig,
};
use crate::{Cli, Command};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

pub fn run(cli: &Cli) -> Result<()> {
    let out = Output::new(&cli.out, cli.quiet);
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::FitExtinction => fit_extinction_cmd(config::load(cfg_path)?, &out),
        Command::GenDataset => gen_dataset(config::load(cfg_path)?, cli.seed, &out),
        Command::Train => train(config::load(cfg_path)?, cli.seed, &out),
        Command::Eval { model, dataset } => {
            let (mut cfg, base): (EvalConfig, PathBuf) = config::load(cfg_path)?;
            // command-line paths are relative to the working directory
            if let Some(m) = model {
                cfg.model = Some(absolute(m)?);
            }
            if let Some(d) = dataset {
                cfg.dataset = Some(absolute(d)?);
            }
            eval(cfg, base, cli.seed, &out)
        }
        Command::SimulateLink => simulate_link(config::load(cfg_path)?, cli.seed, &out),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if is_least_squares(p) || p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    Ok(std::env::current_dir()?.join(p))
}

struct Output {
    dir: PathBuf,
    quiet: bool,
}

impl Output {
    fn new(dir: &Path, quiet: bool) -> Self {
        Self { dir: dir.to_path_buf(), quiet }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// Path of an output file; names must stay inside the output directory.
    fn path(&self, name: &str) -> Result<PathBuf> {
        let rel = Path::new(name);
        if name.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return config_error(format!("output name {name:?} must be a relative path without `..`"));
        }
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<fs::File>)> {
        let p = self.path(name)?;
        let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok((p, BufWriter::new(f)))
    }

    fn write_with(&self, name: &str, body: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<PathBuf> {
        let (p, mut w) = self.create(name)?;
        body(&mut w)?;
        w.flush().with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn json<S: Serialize>(&self, name: &str, value: &S) -> Result<PathBuf> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn echo_config<S: Serialize>(&self, cfg: &S) -> Result<()> {
        let text = toml::to_string_pretty(cfg).context("serializing resolved config")?;
        self.write_with(RESOLVED_CONFIG, |w| Ok(w.write_all(text.as_bytes())?))?;
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset<f64>> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn path_length(cm: f64) -> Result<PathLength<f64>> {
    Ok(PathLength::new(cm)?)
}

#[derive(Serialize)]
struct ConditionOutput {
    samples: usize,
    species: Vec<String>,
    condition_number: f64,
    column_norms: Vec<f64>,
    eigenvalues: Vec<f64>,
    negative_coefficients: Vec<usize>,
}

fn fit_extinction_cmd((mut cfg, base): (FitExtinctionConfig, PathBuf), out: &Output) -> Result<()> {
    cfg.dataset = resolve(&base, &cfg.dataset);
    out.echo_config(&cfg)?;
    let ds = load_dataset(&cfg.dataset)?;
    let eps = fit_extinction(ds.species(), ds.samples(), path_length(cfg.path_length_cm)?)?;
    let report = condition_report(ds.samples())?;
    let csv = out.write_with("extinction.csv", |w| Ok(eps.write_csv(w)?))?;
    out.json(
        "condition.json",
        &ConditionOutput {
            samples: ds.len(),
            species: ds.species().to_vec(),
            condition_number: report.condition_number,
            column_norms: report.column_norms,
            eigenvalues: report.eigenvalues,
            negative_coefficients: negative_coefficient_counts(&eps),
        },
    )?;
    out.say(format!(
        "fitted {} profiles over {} wavelengths from {} samples (condition number {:.3e}) -> {}",
        eps.species_count(),
        eps.grid().len(),
        ds.len(),
        report.condition_number,
        csv.display()
    ));
    Ok(())
}

fn stratum_label(s: Stratum, species: &[String]) -> String {
    match s {
        Stratum::Mixed => "mixed".into(),
        Stratum::Pure(i) => format!("pure_{}", species[i]),
        Stratum::Blank => "blank".into(),
    }
}

fn gen_dataset((mut cfg, base): (GenDatasetConfig, PathBuf), seed: Option<u64>, out: &Output) -> Result<()> {
    if let Some(s) = seed {
        cfg.plan.seed = s;
    }
    cfg.profiles = cfg.profiles.resolved(&base);
    cfg.plan.validate()?;
    if let Some(n) = &cfg.noise {
        n.validate()?;
    }
    let target = out.path(&cfg.output)?;
    out.echo_config(&cfg)?;
    let eps = cfg.profiles.load(&base)?;
    let mut rng = RandomSource::new(cfg.plan.seed);
    let ds =
        generate_simulated_dataset(&eps, &cfg.plan, path_length(cfg.path_length_cm)?, cfg.noise.as_ref(), &mut rng)?;
    ds.save(&target).with_context(|| format!("writing {}", target.display()))?;
    if cfg.csv {
        let name = format!("{}.csv", cfg.output);
        out.write_with(&name, |w| Ok(ds.write_csv(w)?))?;
    }
    out.say(format!(
        "wrote {} ({} samples, {} wavelengths, {})",
        target.display(),
        ds.len(),
        ds.grid().len(),
        ds.provenance()
    ));
    for (stratum, count) in cfg.plan.stratum_counts() {
        out.say(format!("  {:<12} {count}", stratum_label(stratum, ds.species())));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    train_samples: usize,
    validation_samples: usize,
    initial_val_mse: f64,
    best_val_mse: f64,
    phase_best_val_mse: Vec<f64>,
    validation: Metrics,
}

fn train((mut cfg, base): (TrainConfig, PathBuf), seed: Option<u64>, out: &Output) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.plan.seed = s;
    }
    cfg.dataset = resolve(&base, &cfg.dataset);
    cfg.validation = cfg.validation.map(|v| resolve(&base, &v));
    cfg.plan.validate()?;
    out.echo_config(&cfg)?;

    let ds = load_dataset(&cfg.dataset)?;
    let (train_ds, val_ds) = match &cfg.validation {
        Some(v) => {
            let val = load_dataset(v)?;
            if !val.grid().same_as(ds.grid()) || val.species() != ds.species() {
                return config_error("validation dataset differs from the training dataset in grid or species");
            }
            (ds, val)
        }
        None => split(&ds, cfg.train_fraction, cfg.seed)?,
    };
    if train_ds.is_empty() || val_ds.is_empty() {
        return config_error(format!("split left {} training and {} validation samples", train_ds.len(), val_ds.len()));
    }
    let model_cfg = cfg.model.build(train_ds.grid().len(), train_ds.species().len());
    let model = FcnnModel::new(model_cfg, train_ds.species().to_vec(), cfg.seed)?;
    out.say(format!(
        "training on {} samples, validating on {} ({} phases x {} epochs x {} steps)",
        train_ds.len(),
        val_ds.len(),
        cfg.plan.learning_rates.len(),
        cfg.plan.epochs_per_phase,
        cfg.plan.steps_per_epoch
    ));
    let outcome = train_full(model, &train_ds, &val_ds, &cfg.plan)?;
    let metrics = evaluate(&outcome.model, &val_ds)?;

    let model_path = out.path("model.fcnn")?;
    outcome.model.save(&model_path).with_context(|| format!("writing {}", model_path.display()))?;
    out.write_with("history.csv", |w| Ok(write_history_csv(&outcome.history, w)?))?;
    out.json(
        "metrics.json",
        &TrainMetrics {
            train_samples: train_ds.len(),
            validation_samples: val_ds.len(),
            initial_val_mse: outcome.initial_val_mse,
            best_val_mse: outcome.best_val_mse,
            phase_best_val_mse: outcome.phase_best.clone(),
            validation: metrics.clone(),
        },
    )?;
    out.say(format!(
        "final validation mse {:.6e} (internal units), D {:.6}, rmse {:?} mol/L -> {}",
        outcome.best_val_mse,
        metrics.d,
        metrics.rmse,
        model_path.display()
    ));
    Ok(())
}

enum Estimator {
    Network(FcnnModel<f64>),
    LeastSquares(LeastSquaresUnmixer<f64>),
}

impl Estimator {
    fn as_dyn(&self) -> &dyn ConcentrationEstimator<f64> {
        match self {
            Estimator::Network(m) => m,
            Estimator::LeastSquares(u) => u,
        }
    }

    fn input_length(&self) -> usize {
        match self {
            Estimator::Network(m) => m.config.input_length,
            Estimator::LeastSquares(u) => u.profiles().grid().len(),
        }
    }

    fn species(&self) -> &[String] {
        match self {
            Estimator::Network(m) => &m.species,
            Estimator::LeastSquares(u) => u.profiles().species(),
        }
    }

    fn check(&self, grid_len: usize, species: &[String], what: &str) -> Result<()> {
        if self.input_length() != grid_len {
            return config_error(format!(
                "estimator expects {} wavelengths, {what} has {grid_len}",
                self.input_length()
            ));
        }
        if self.species() != species {
            return config_error(format!("estimator species {:?} differ from {what} {:?}", self.species(), species));
        }
        Ok(())
    }
}

fn load_estimator(model: &Path, profiles: &ProfileSource, path_cm: f64, base: &Path) -> Result<Estimator> {
    if is_least_squares(model) {
        let eps = profiles.load(base)?;
        return Ok(Estimator::LeastSquares(LeastSquaresUnmixer::new(eps, path_length(path_cm)?)?));
    }
    let p = resolve(base, model);
    let m = FcnnModel::load(&p).with_context(|| format!("loading model {}", p.display()))?;
    Ok(Estimator::Network(m))
}

#[derive(Serialize)]
struct EvalOutput {
    samples: usize,
    species: Vec<String>,
    mse: f64,
    rmse: Vec<f64>,
    d: f64,
    d_per_species: Vec<f64>,
    min_detectable: Vec<f64>,
    detection_error: Vec<DetectionError>,
}

fn eval(mut cfg: EvalConfig, base: PathBuf, seed: Option<u64>, out: &Output) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let Some(model) = cfg.model.clone() else {
        return config_error("no model given (config `model` or --model)");
    };
    let Some(dataset) = cfg.dataset.clone() else {
        return config_error("no dataset given (config `dataset` or --dataset)");
    };
    cfg.blank_noise.validate()?;
    cfg.model = Some(if is_least_squares(&model) { model.clone() } else { resolve(&base, &model) });
    cfg.dataset = Some(resolve(&base, &dataset));
    cfg.profiles = cfg.profiles.resolved(&base);
    out.echo_config(&cfg)?;

    let est = load_estimator(&model, &cfg.profiles, cfg.path_length_cm, &base)?;
    let ds = load_dataset(cfg.dataset.as_deref().expect("set above"))?;
    est.check(ds.grid().len(), ds.species(), "dataset")?;
    if let Estimator::LeastSquares(u) = &est {
        if !u.profiles().grid().same_as(ds.grid()) {
            return config_error("profile wavelengths differ from the dataset grid");
        }
    }
    let metrics = evaluate(est.as_dyn(), &ds)?;
    let mut rng = RandomSource::new(cfg.seed);
    let blanks = blank_ensemble(ds.grid(), &cfg.blank_noise, cfg.noisy_blanks, &mut rng)?;
    let min_detectable = min_detectable_concentration(est.as_dyn(), &blanks)?;
    let detection = detection_error(est.as_dyn(), &ds, &min_detectable)?;
    let report = EvalOutput {
        samples: ds.len(),
        species: ds.species().to_vec(),
        mse: metrics.mse,
        rmse: metrics.rmse,
        d: metrics.d,
        d_per_species: metrics.d_per_species,
        min_detectable,
        detection_error: detection,
    };
    let p = out.json("metrics.json", &report)?;
    out.say(format!(
        "{} samples: D {:.6}, rmse {:?}, min detectable {:?} mol/L -> {}",
        report.samples,
        report.d,
        report.rmse,
        report.min_detectable,
        p.display()
    ));
    Ok(())
}

fn simulate_link((mut cfg, base): (SimulateLinkConfig, PathBuf), seed: Option<u64>, out: &Output) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scenario = cfg.scenario()?;
    scenario.link.validate()?;
    for t in &scenario.transmitters {
        t.config.validate()?;
    }
    let model = cfg.model.clone();
    if !is_least_squares(&model) {
        cfg.model = resolve(&base, &model);
    }
    cfg.profiles = cfg.profiles.resolved(&base);
    // echo the expanded scenario rather than the preset name alone
    cfg.transmitters = Some(scenario.transmitters.clone());
    cfg.link = Some(scenario.link.clone());
    out.echo_config(&cfg)?;

    let eps: ExtinctionProfileSet<f64> = cfg.profiles.load(&base)?;
    let est = load_estimator(&model, &cfg.profiles, scenario.link.path_length_cm, &base)?;
    est.check(eps.grid().len(), eps.species(), "profile set")?;
    let mut rng = RandomSource::new(cfg.seed);
    let run = run_link(est.as_dyn(), &scenario, &eps, &mut rng)?;
    out.write_with("trace.csv", |w| Ok(run.write_trace_csv(eps.species(), w)?))?;
    out.write_with("decisions.csv", |w| Ok(run.write_decisions_csv(w)?))?;
    let p = out.json("summary.json", &run.summary)?;
    let s = &run.summary;
    out.say(format!(
        "sent {:?}, decoded {:?}: {} bits in {} symbols, {} errors, BER {} -> {}",
        s.message,
        s.decoded_message,
        s.bits,
        s.symbols,
        s.bit_errors,
        s.ber,
        p.display()
    ));
    Ok(())
}
