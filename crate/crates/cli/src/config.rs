//! Run configuration files (TOML). Relative paths inside a config file are
//! resolved against the directory holding that file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mcspec::dataset::SamplingPlan;
use mcspec::fcnn::FcnnConfig;
use mcspec::modem::{LinkConfig, LinkScenario, TransmitterSetup};
use mcspec::noise::NoiseParams;
use mcspec::spectral::{
    dye_stand_in_bands, synthetic_profile_set, ExtinctionProfileSet, WavelengthGrid, DEFAULT_PATH_LENGTH_CM,
};
use mcspec::training::PhasePlan;

/// A config file that could not be read as the expected structure.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()).into())
}

/// Reads a config file, or returns the defaults when no file is given.
/// Also returns the directory against which relative paths are resolved.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, PathBuf)> {
    let Some(path) = path else {
        return Ok((T::default(), PathBuf::from(".")));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_path_length() -> f64 {
    DEFAULT_PATH_LENGTH_CM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    #[default]
    Desk,
    Full,
}

/// Where extinction profiles come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileSource {
    /// Gaussian bands standing in for the two dyes, peaked at 608 and 496 nm.
    StandIn {
        #[serde(default)]
        grid: GridChoice,
    },
    /// A profile CSV as written by `fit-extinction`.
    File { path: PathBuf },
}

impl Default for ProfileSource {
    fn default() -> Self {
        ProfileSource::StandIn { grid: GridChoice::Desk }
    }
}

impl ProfileSource {
    pub fn load(&self, base: &Path) -> Result<ExtinctionProfileSet<f64>> {
        match self {
            ProfileSource::StandIn { grid } => {
                let g = match grid {
                    GridChoice::Desk => WavelengthGrid::desk(),
                    GridChoice::Full => WavelengthGrid::full(),
                };
                Ok(synthetic_profile_set(Arc::new(g), &dye_stand_in_bands())?)
            }
            ProfileSource::File { path } => {
                let p = resolve(base, path);
                let f = fs::File::open(&p).with_context(|| format!("opening profiles {}", p.display()))?;
                Ok(ExtinctionProfileSet::read_csv(std::io::BufReader::new(f))?)
            }
        }
    }

    pub fn resolved(&self, base: &Path) -> Self {
        match self {
            ProfileSource::File { path } => ProfileSource::File { path: resolve(base, path) },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitExtinctionConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_path_length")]
    pub path_length_cm: f64,
}

impl Default for FitExtinctionConfig {
    fn default() -> Self {
        Self { dataset: PathBuf::from("dataset.spcd"), path_length_cm: DEFAULT_PATH_LENGTH_CM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDatasetConfig {
    pub output: String,
    /// Also write the samples as CSV next to the binary file.
    pub csv: bool,
    pub path_length_cm: f64,
    pub profiles: ProfileSource,
    /// `plan.seed` seeds the concentration sampling and the noise draws.
    pub plan: SamplingPlan,
    /// Absent means noise-free spectra.
    pub noise: Option<NoiseParams>,
}

impl Default for GenDatasetConfig {
    fn default() -> Self {
        Self {
            output: "dataset.spcd".into(),
            csv: false,
            path_length_cm: DEFAULT_PATH_LENGTH_CM,
            profiles: ProfileSource::default(),
            plan: SamplingPlan::default(),
            noise: None,
        }
    }
}

/// Network hyperparameters; input length and output count come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub block_filters: Vec<usize>,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub pool_size: usize,
    pub dropout_rate: f64,
    pub target_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = FcnnConfig::default();
        Self {
            block_filters: d.block_filters,
            kernel_size: d.kernel_size,
            dilations: d.dilations,
            pool_size: d.pool_size,
            dropout_rate: d.dropout_rate,
            target_scale: d.target_scale,
        }
    }
}

impl ModelSection {
    pub fn build(&self, input_length: usize, output_dim: usize) -> FcnnConfig {
        FcnnConfig {
            input_length,
            output_dim,
            block_filters: self.block_filters.clone(),
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
            pool_size: self.pool_size,
            dropout_rate: self.dropout_rate,
            target_scale: self.target_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds weight initialization and the train/validation split; `plan.seed`
    /// seeds batch sampling.
    pub seed: u64,
    pub dataset: PathBuf,
    /// Separate validation file; when absent `dataset` is split by `train_fraction`.
    pub validation: Option<PathBuf>,
    pub train_fraction: f64,
    pub model: ModelSection,
    pub plan: PhasePlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("dataset.spcd"),
            validation: None,
            train_fraction: mcspec::dataset::DEFAULT_TRAIN_FRACTION,
            model: ModelSection::default(),
            plan: PhasePlan::desk(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds the noisy blanks.
    pub seed: u64,
    /// A `.fcnn` checkpoint, or `least-squares` to unmix with `profiles`.
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub profiles: ProfileSource,
    pub path_length_cm: f64,
    pub blank_noise: NoiseParams,
    pub noisy_blanks: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: None,
            dataset: None,
            profiles: ProfileSource::default(),
            path_length_cm: DEFAULT_PATH_LENGTH_CM,
            blank_noise: NoiseParams::default(),
            noisy_blanks: mcspec::training::DEFAULT_NOISY_BLANKS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateLinkConfig {
    /// Seeds the receiver noise.
    pub seed: u64,
    /// A `.fcnn` checkpoint, or `least-squares` to unmix with `profiles`.
    pub model: PathBuf,
    pub profiles: ProfileSource,
    /// Built-in scenario (`bcsk_sync`, `bcsk_desync`, `qcsk_sync`) used for any
    /// section left out below.
    pub preset: Option<String>,
    pub transmitters: Option<Vec<TransmitterSetup>>,
    pub link: Option<LinkConfig>,
}

impl Default for SimulateLinkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: PathBuf::from("least-squares"),
            profiles: ProfileSource::default(),
            preset: None,
            transmitters: None,
            link: None,
        }
    }
}

impl SimulateLinkConfig {
    pub fn scenario(&self) -> Result<LinkScenario> {
        let base = match &self.preset {
            Some(name) => match LinkScenario::preset(name) {
                Some(s) => s,
                None => return config_error(format!("unknown preset {name:?}")),
            },
            None => LinkScenario { transmitters: vec![], link: LinkConfig::default() },
        };
        let scenario = LinkScenario {
            transmitters: self.transmitters.clone().unwrap_or(base.transmitters),
            link: self.link.clone().unwrap_or(base.link),
        };
        if scenario.transmitters.is_empty() {
            return config_error("no transmitters: give a preset or a [[transmitters]] section");
        }
        Ok(scenario)
    }
}

pub fn is_least_squares(model: &Path) -> bool {
    model.as_os_str() == "least-squares"
}
