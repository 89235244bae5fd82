//! Labeled spectra: concentration sampling plans, simulated dataset generation,
//! shuffled splits and the `SPCD` binary container.
//!
//! `SPCD` layout, all little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"SPCD"` |
//! | version | u16 (= 1) |
//! | provenance | u8 (0 experimental, 1 sim_clean, 2 sim_noisy) |
//! | L, M, N | u32 each |
//! | wavelengths | L x f64 |
//! | species names | M x (u32 byte length + UTF-8 bytes) |
//! | records | N x (M x f64 concentrations, L x f64 absorbances) |

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::noise::{apply_sensor_noise, NoiseParams, RandomSource};
use crate::scalar::Real;
use crate::spectral::{
    absorbance_mix, AbsorbanceSpectrum, ConcentrationVector, ExtinctionProfileSet, PathLength, WavelengthGrid,
};

pub const SPCD_MAGIC: &[u8; 4] = b"SPCD";
pub const SPCD_VERSION: u16 = 1;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Experimental,
    SimClean,
    SimNoisy,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Experimental => 0,
            Provenance::SimClean => 1,
            Provenance::SimNoisy => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Provenance::Experimental),
            1 => Ok(Provenance::SimClean),
            2 => Ok(Provenance::SimNoisy),
            other => Err(Error::Format(format!("unknown provenance code {other}"))),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Experimental => "experimental",
            Provenance::SimClean => "sim_clean",
            Provenance::SimNoisy => "sim_noisy",
        })
    }
}

/// Concentration design for simulated datasets.
///
/// Samples fall into strata: mixtures (every species uniform on
/// `[0, overshoot * c_max]`), one pure stratum per species, and blanks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub n_total: usize,
    /// Per-species upper concentration of the nominal range (mol/L).
    pub c_max: Vec<f64>,
    pub overshoot: f64,
    pub mixed_fraction: f64,
    /// Fraction assigned to each single-species stratum.
    pub pure_fraction: f64,
    pub blank_fraction: f64,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            n_total: 12000,
            c_max: vec![7e-5, 2.5e-4],
            overshoot: 1.3,
            mixed_fraction: 0.70,
            pure_fraction: 0.125,
            blank_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Which stratum a sampled concentration vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    Mixed,
    Pure(usize),
    Blank,
}

impl SamplingPlan {
    pub fn species_count(&self) -> usize {
        self.c_max.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.species_count();
        if m == 0 {
            return usage("sampling plan needs at least one species");
        }
        if self.n_total < m + 1 {
            return usage(format!("n_total = {} must be at least M + 1 = {}", self.n_total, m + 1));
        }
        if self.c_max.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return usage("c_max entries must be positive");
        }
        if !(self.overshoot >= 1.0) {
            return usage(format!("overshoot must be >= 1, got {}", self.overshoot));
        }
        let fr = [self.mixed_fraction, self.pure_fraction, self.blank_fraction];
        if fr.iter().any(|&f| !(f >= 0.0)) {
            return usage("stratum fractions must be nonnegative");
        }
        let total = self.mixed_fraction + m as f64 * self.pure_fraction + self.blank_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return usage(format!("stratum fractions sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// Sample counts per stratum (mixed, pure per species, blank) by largest remainder.
    pub fn stratum_counts(&self) -> Vec<(Stratum, usize)> {
        let m = self.species_count();
        let mut strata = vec![(Stratum::Mixed, self.mixed_fraction)];
        strata.extend((0..m).map(|i| (Stratum::Pure(i), self.pure_fraction)));
        strata.push((Stratum::Blank, self.blank_fraction));
        let quotas: Vec<f64> = strata.iter().map(|(_, f)| f * self.n_total as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..strata.len()).collect();
        // stable sort keeps lower stratum indices first on equal remainders
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
        });
        for &i in order.iter().take(self.n_total.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        strata.into_iter().map(|(s, _)| s).zip(counts).collect()
    }
}

/// Draws concentration vectors for every stratum, then shuffles them.
pub fn sample_concentrations<T: Real>(
    plan: &SamplingPlan,
    rng: &mut RandomSource,
) -> Result<Vec<ConcentrationVector<T>>> {
    plan.validate()?;
    let m = plan.species_count();
    let upper: Vec<f64> = plan.c_max.iter().map(|c| c * plan.overshoot).collect();
    let mut out = Vec::with_capacity(plan.n_total);
    for (stratum, count) in plan.stratum_counts() {
        for _ in 0..count {
            let mut c = vec![T::zero(); m];
            match stratum {
                Stratum::Mixed => {
                    for (ci, &u) in c.iter_mut().zip(&upper) {
                        *ci = T::lit(rng.uniform() * u);
                    }
                }
                Stratum::Pure(i) => c[i] = T::lit(rng.uniform() * upper[i]),
                Stratum::Blank => {}
            }
            out.push(ConcentrationVector(c));
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<T> {
    pub conc: ConcentrationVector<T>,
    pub spectrum: AbsorbanceSpectrum<T>,
}

impl<T: Real> LabeledSample<T> {
    pub fn new(conc: ConcentrationVector<T>, spectrum: AbsorbanceSpectrum<T>) -> Result<Self> {
        if conc.values().iter().any(|&c| !(c >= T::zero()) || !c.is_finite()) {
            return usage("label concentrations must be finite and nonnegative");
        }
        Ok(Self { conc, spectrum })
    }
}

/// Labeled spectra on one grid with a fixed species order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    grid: Arc<WavelengthGrid<T>>,
    species: Vec<String>,
    provenance: Provenance,
    samples: Vec<LabeledSample<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        grid: Arc<WavelengthGrid<T>>,
        species: Vec<String>,
        provenance: Provenance,
        samples: Vec<LabeledSample<T>>,
    ) -> Result<Self> {
        if species.is_empty() {
            return usage("dataset needs at least one species");
        }
        for (k, s) in samples.iter().enumerate() {
            if s.conc.len() != species.len() {
                return usage(format!("sample {k} has {} concentrations", s.conc.len()));
            }
            if !s.spectrum.grid().same_as(&grid) {
                return usage(format!("sample {k} is on a different grid"));
            }
        }
        Ok(Self { grid, species, provenance, samples })
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid<T>> {
        &self.grid
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn samples(&self) -> &[LabeledSample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn with_samples(&self, samples: Vec<LabeledSample<T>>) -> Self {
        Self { grid: self.grid.clone(), species: self.species.clone(), provenance: self.provenance, samples }
    }

    /// Same labels with every spectrum block-averaged onto a decimated grid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let grid = Arc::new(self.grid.downsample(factor)?);
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let v = crate::spectral::downsample_values(s.spectrum.values(), factor)?;
                Ok(LabeledSample { conc: s.conc.clone(), spectrum: AbsorbanceSpectrum::new(grid.clone(), v)? })
            })
            .collect::<Result<_>>()?;
        Ok(Self { grid, species: self.species.clone(), provenance: self.provenance, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_spcd(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_spcd_bytes(&bytes)
    }

    pub fn write_spcd<W: Write>(&self, w: &mut W) -> Result<()> {
        let l = self.grid.len();
        let m = self.species.len();
        w.write_all(SPCD_MAGIC)?;
        w.write_all(&SPCD_VERSION.to_le_bytes())?;
        w.write_all(&[self.provenance.code()])?;
        for n in [l, m, self.samples.len()] {
            w.write_all(&u32::try_from(n).map_err(|_| Error::Usage("dataset too large".into()))?.to_le_bytes())?;
        }
        for &x in self.grid.wavelengths() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        for name in &self.species {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        for s in &self.samples {
            for &c in s.conc.values() {
                w.write_all(&c.as_f64().to_le_bytes())?;
            }
            for &a in s.spectrum.values() {
                w.write_all(&a.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_spcd_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != SPCD_MAGIC {
            return Err(Error::Format("bad magic, not an SPCD file".into()));
        }
        let version = r.u16("version")?;
        if version != SPCD_VERSION {
            return Err(Error::Format(format!("unsupported SPCD version {version}")));
        }
        let provenance = Provenance::from_code(r.take(1, "provenance")?[0])?;
        let l = r.u32("grid length")? as usize;
        let m = r.u32("species count")? as usize;
        let n = r.u32("sample count")? as usize;
        // refuse to allocate for a payload the file cannot possibly hold
        let need = l.saturating_add(n.saturating_mul(l.saturating_add(m))).saturating_mul(8);
        if r.remaining() < need {
            return Err(Error::Truncated { what: "payload", expected: need - r.remaining() });
        }
        let wavelengths = (0..l).map(|_| r.f64("wavelengths").map(T::lit)).collect::<Result<Vec<_>>>()?;
        let grid = Arc::new(WavelengthGrid::new(wavelengths).map_err(|e| Error::Format(e.to_string()))?);
        let mut species = Vec::with_capacity(m);
        for _ in 0..m {
            let len = r.u32("species name length")? as usize;
            let raw = r.take(len, "species name")?;
            species
                .push(String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("species name is not UTF-8".into()))?);
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let conc = (0..m).map(|_| r.f64("concentrations").map(T::lit)).collect::<Result<Vec<_>>>()?;
            let absorb = (0..l).map(|_| r.f64("absorbances").map(T::lit)).collect::<Result<Vec<_>>>()?;
            let spectrum = AbsorbanceSpectrum::new(grid.clone(), absorb).map_err(|e| Error::Format(e.to_string()))?;
            samples.push(
                LabeledSample::new(ConcentrationVector(conc), spectrum).map_err(|e| Error::Format(e.to_string()))?,
            );
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after records", r.remaining())));
        }
        Self::new(grid, species, provenance, samples)
    }

    /// Inspection export: `conc_<species>...,A_0,...,A_{L-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self
            .species
            .iter()
            .map(|s| format!("conc_{s}"))
            .chain((0..self.grid.len()).map(|j| format!("A_{j}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for s in &self.samples {
            let row: Vec<String> =
                s.conc.values().iter().chain(s.spectrum.values()).map(|v| format!("{:e}", v.as_f64())).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated { what, expected: n - self.remaining() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Beer-Lambert spectra for sampled concentrations, optionally passed through the
/// detector noise model. Concentrations are drawn first, then noise, from one stream.
pub fn generate_simulated_dataset<T: Real>(
    eps: &ExtinctionProfileSet<T>,
    plan: &SamplingPlan,
    path: PathLength<T>,
    noise: Option<&NoiseParams>,
    rng: &mut RandomSource,
) -> Result<Dataset<T>> {
    if plan.species_count() != eps.species_count() {
        return usage(format!("plan has {} species, extinction set has {}", plan.species_count(), eps.species_count()));
    }
    let concs = sample_concentrations::<T>(plan, rng)?;
    let mut samples = Vec::with_capacity(concs.len());
    for conc in concs {
        let clean = absorbance_mix(eps, &conc, path)?;
        let spectrum = match noise {
            Some(p) => apply_sensor_noise(&clean, p, rng)?,
            None => clean,
        };
        samples.push(LabeledSample { conc, spectrum });
    }
    let provenance = if noise.is_some() { Provenance::SimNoisy } else { Provenance::SimClean };
    Dataset::new(eps.grid().clone(), eps.species().to_vec(), provenance, samples)
}

/// Shuffled partition: the first `floor(train_fraction * N)` go to training.
pub fn split<T: Real>(ds: &Dataset<T>, train_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if ds.is_empty() {
        return usage("cannot split an empty dataset");
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return usage(format!("train fraction {train_fraction} outside [0, 1]"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    RandomSource::new(seed).shuffle(&mut idx);
    let n_train = (train_fraction * ds.len() as f64).floor() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| ds.samples[i].clone()).collect();
    Ok((ds.with_samples(pick(&idx[..n_train])), ds.with_samples(pick(&idx[n_train..]))))
}
