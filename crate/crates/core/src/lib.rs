//! Spectral simulation, fractal 1-D CNN concentration regression and
//! concentration-shift-keying demodulation for multi-transmitter molecular
//! communication links observed through a UV-Vis spectrometer.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the CLI and the stored file
//! formats use.
//!
//! ```no_run
//! use std::sync::Arc;
//!
//! use mcspec::dataset::{generate_simulated_dataset, split, SamplingPlan};
//! use mcspec::fcnn::{FcnnConfig, FcnnModel};
//! use mcspec::noise::{NoiseParams, RandomSource};
//! use mcspec::spectral::{dye_stand_in_bands, synthetic_profile_set, PathLength, WavelengthGrid};
//! use mcspec::training::{evaluate, train_full, PhasePlan};
//!
//! # fn main() -> mcspec::Result<()> {
//! let eps = synthetic_profile_set(Arc::new(WavelengthGrid::<f64>::desk()), &dye_stand_in_bands())?;
//! let plan = SamplingPlan { n_total: 4000, ..SamplingPlan::default() };
//! let noise = NoiseParams::default();
//! let ds = generate_simulated_dataset(&eps, &plan, PathLength::default(), Some(&noise), &mut RandomSource::new(1))?;
//! let (train, val) = split(&ds, 0.8, 2)?;
//!
//! let model = FcnnModel::new(FcnnConfig::with_shape(ds.grid().len(), 2), ds.species().to_vec(), 3)?;
//! let outcome = train_full(model, &train, &val, &PhasePlan::desk(4))?;
//! println!("D = {:.5}", evaluate(&outcome.model, &val)?.d);
//! # Ok(())
//! # }
//! ```

// NaN-rejecting guards are written as negated comparisons on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod fcnn;
pub mod linalg;
pub mod modem;
pub mod noise;
pub mod predict;
pub mod scalar;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
pub use predict::ConcentrationEstimator;
pub use scalar::Real;

pub type Grid = spectral::WavelengthGrid<f64>;
pub type Spectrum = spectral::AbsorbanceSpectrum<f64>;
pub type Concentrations = spectral::ConcentrationVector<f64>;
pub type Profiles = spectral::ExtinctionProfileSet<f64>;
pub type Sample = dataset::LabeledSample<f64>;
pub type SpectraDataset = dataset::Dataset<f64>;
pub type Model = fcnn::FcnnModel<f64>;
pub type Params = fcnn::FcnnParams<f64>;
pub type Unmixer = calibration::LeastSquaresUnmixer<f64>;
