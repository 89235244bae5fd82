//! `.fcnn` checkpoints.
//!
//! Layout: `b"FCNN"`, u32 LE manifest byte length, the UTF-8 JSON manifest, then
//! every tensor listed in the manifest as little-endian f64 in manifest order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::scalar::Real;
use crate::spectral::{AbsorbanceSpectrum, ConcentrationVector};

use super::model::forward_eval;
use super::params::{init_params, FcnnConfig, FcnnParams, ParamLayout};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: FcnnConfig,
    pub species: Vec<String>,
    pub target_scale: f64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (creator, training choices). No timestamps, so reruns are byte-identical.
    pub metadata: BTreeMap<String, String>,
}

/// A configured network with named outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnnModel<T> {
    pub config: FcnnConfig,
    pub species: Vec<String>,
    pub params: FcnnParams<T>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Real> FcnnModel<T> {
    pub fn new(config: FcnnConfig, species: Vec<String>, seed: u64) -> Result<Self> {
        if species.len() != config.output_dim {
            return usage(format!("{} species for output_dim {}", species.len(), config.output_dim));
        }
        let params = init_params(&config, seed)?;
        let mut metadata = BTreeMap::new();
        metadata.insert("created_by".into(), format!("mcspec {}", env!("CARGO_PKG_VERSION")));
        metadata.insert("init_seed".into(), seed.to_string());
        Ok(Self { config, species, params, metadata })
    }

    /// Network output in internal units.
    pub fn forward_internal(&self, spectrum: &[T]) -> Result<Vec<T>> {
        forward_eval(&self.params, &self.config, spectrum)
    }

    /// Predicted concentrations in mol/L. Negative values are passed through.
    pub fn predict(&self, spectrum: &AbsorbanceSpectrum<T>) -> Result<ConcentrationVector<T>> {
        let scale = T::lit(self.config.target_scale);
        Ok(ConcentrationVector(self.forward_internal(spectrum.values())?.into_iter().map(|v| v * scale).collect()))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: "fcnn".into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            species: self.species.clone(),
            target_scale: self.config.target_scale,
            tensors: self
                .params
                .layout()
                .tensors
                .iter()
                .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        for &v in self.params.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated { what: "checkpoint header", expected: 8 - bytes.len() });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, not an .fcnn checkpoint".into()));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() < mlen {
            return Err(Error::Truncated { what: "manifest", expected: mlen - body.len() });
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        if manifest.format != "fcnn" || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
        }
        let layout = Arc::new(ParamLayout::new(&manifest.config)?);
        let expected: Vec<TensorEntry> =
            layout.tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect();
        if expected != manifest.tensors {
            return Err(Error::Format("tensor list does not match the configured architecture".into()));
        }
        let blob = &body[mlen..];
        let need = layout.total * 8;
        if blob.len() < need {
            return Err(Error::Truncated { what: "tensor blob", expected: need - blob.len() });
        }
        if blob.len() > need {
            return Err(Error::Format(format!("{} trailing bytes after tensors", blob.len() - need)));
        }
        let data = blob.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        Ok(Self {
            config: manifest.config,
            species: manifest.species,
            params: FcnnParams::from_data(layout, data)?,
            metadata: manifest.metadata,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
