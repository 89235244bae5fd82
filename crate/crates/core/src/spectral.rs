//! Wavelength grids, Beer-Lambert absorbance synthesis and the
//! absorbance/intensity conversions used by the detector model.

use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{usage, Error, Result};
use crate::scalar::Real;

/// Pixel count of the reference spectrometer.
pub const DEFAULT_GRID_LEN: usize = 3648;
pub const DEFAULT_GRID_START_NM: f64 = 400.0;
pub const DEFAULT_GRID_END_NM: f64 = 850.0;
/// Decimation factor taking the full grid down to the 456-point desk grid.
pub const DESK_DOWNSAMPLE: usize = 8;
pub const MIN_GRID_LEN: usize = 16;

/// Default flow-cell length in cm.
pub const DEFAULT_PATH_LENGTH_CM: f64 = 0.25;
/// Default incident intensity, equal to the detector's full-scale reading.
pub const DEFAULT_I0: f64 = 45000.0;

/// Strictly increasing set of wavelengths (nm) shared by every spectrum on it.
#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthGrid<T> {
    wavelengths_nm: Vec<T>,
}

impl<T: Real> WavelengthGrid<T> {
    pub fn new(wavelengths_nm: Vec<T>) -> Result<Self> {
        if wavelengths_nm.len() < 2 {
            return usage(format!("grid needs at least 2 points, got {}", wavelengths_nm.len()));
        }
        if let Some(bad) = wavelengths_nm.iter().find(|w| !w.is_finite()) {
            return usage(format!("grid contains non-finite wavelength {bad}"));
        }
        if let Some(i) = wavelengths_nm.windows(2).position(|w| w[1] <= w[0]) {
            return usage(format!("grid not strictly increasing at index {}", i + 1));
        }
        Ok(Self { wavelengths_nm })
    }

    /// `len` points evenly spaced over `[start_nm, end_nm]`, both ends included.
    pub fn uniform(start_nm: f64, end_nm: f64, len: usize) -> Result<Self> {
        if len < 2 || end_nm <= start_nm {
            return usage(format!("invalid uniform grid {start_nm}..{end_nm} with {len} points"));
        }
        let step = (end_nm - start_nm) / (len - 1) as f64;
        Self::new((0..len).map(|i| T::lit(start_nm + step * i as f64)).collect())
    }

    /// 3648 points over 400-850 nm.
    pub fn full() -> Self {
        Self::uniform(DEFAULT_GRID_START_NM, DEFAULT_GRID_END_NM, DEFAULT_GRID_LEN).expect("default grid is valid")
    }

    /// The full grid decimated by 8 (456 points).
    pub fn desk() -> Self {
        Self::full().downsample(DESK_DOWNSAMPLE).expect("desk grid is valid")
    }

    pub fn len(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths_nm.is_empty()
    }

    pub fn wavelengths(&self) -> &[T] {
        &self.wavelengths_nm
    }

    pub fn first(&self) -> T {
        self.wavelengths_nm[0]
    }

    pub fn last(&self) -> T {
        self.wavelengths_nm[self.len() - 1]
    }

    pub fn contains(&self, wavelength_nm: T) -> bool {
        wavelength_nm >= self.first() && wavelength_nm <= self.last()
    }

    /// Index of the grid point closest to `wavelength_nm`.
    pub fn nearest_index(&self, wavelength_nm: T) -> usize {
        let mut best = 0;
        for (i, &w) in self.wavelengths_nm.iter().enumerate() {
            if (w - wavelength_nm).abs() < (self.wavelengths_nm[best] - wavelength_nm).abs() {
                best = i;
            }
        }
        best
    }

    /// Keeps every `factor`-th wavelength. Pair with [`downsample_values`] for data on the grid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let new_len = downsampled_len(self.len(), factor)?;
        Ok(Self { wavelengths_nm: (0..new_len).map(|j| self.wavelengths_nm[j * factor]).collect() })
    }

    /// Exact equality of wavelength values.
    pub fn same_as(&self, other: &Self) -> bool {
        self.wavelengths_nm == other.wavelengths_nm
    }
}

fn downsampled_len(len: usize, factor: usize) -> Result<usize> {
    if factor == 0 {
        return usage("downsample factor must be at least 1");
    }
    let new_len = len / factor;
    if new_len < MIN_GRID_LEN {
        return usage(format!("downsampling {len} points by {factor} leaves {new_len} < {MIN_GRID_LEN}"));
    }
    Ok(new_len)
}

/// Block-averages `values` over consecutive windows of `factor` points; a trailing partial
/// window is dropped, matching [`WavelengthGrid::downsample`].
pub fn downsample_values<T: Real>(values: &[T], factor: usize) -> Result<Vec<T>> {
    let new_len = downsampled_len(values.len(), factor)?;
    let scale = T::lit(factor as f64).recip();
    Ok(values.chunks_exact(factor).take(new_len).map(|w| w.iter().copied().sum::<T>() * scale).collect())
}

/// Base-10 absorbance on a wavelength grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbanceSpectrum<T> {
    grid: Arc<WavelengthGrid<T>>,
    values: Vec<T>,
}

impl<T: Real> AbsorbanceSpectrum<T> {
    pub fn new(grid: Arc<WavelengthGrid<T>>, values: Vec<T>) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("absorbance contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<WavelengthGrid<T>>) -> Self {
        let values = vec![T::zero(); grid.len()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Block-averaged spectrum on the downsampled grid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self { grid: Arc::new(self.grid.downsample(factor)?), values: downsample_values(&self.values, factor)? })
    }
}

/// Transmitted light intensity in detector counts.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensitySpectrum<T> {
    grid: Arc<WavelengthGrid<T>>,
    values: Vec<T>,
}

impl<T: Real> IntensitySpectrum<T> {
    pub fn new(grid: Arc<WavelengthGrid<T>>, values: Vec<T>) -> Result<Self> {
        check_len(&grid, values.len())?;
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid<T>> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

fn check_len<T: Real>(grid: &WavelengthGrid<T>, len: usize) -> Result<()> {
    if grid.len() != len {
        return usage(format!("spectrum has {len} values but grid has {} points", grid.len()));
    }
    Ok(())
}

/// Molar concentrations (mol/L), one entry per species.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationVector<T>(pub Vec<T>);

impl<T: Real> ConcentrationVector<T> {
    pub fn zeros(species: usize) -> Self {
        Self(vec![T::zero(); species])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, k: T) -> Self {
        Self(self.0.iter().map(|&c| c * k).collect())
    }
}

impl<T> From<Vec<T>> for ConcentrationVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// Optical path length in cm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLength<T>(T);

impl<T: Real> PathLength<T> {
    pub fn new(cm: T) -> Result<Self> {
        if !(cm > T::zero()) || !cm.is_finite() {
            return usage(format!("path length must be positive, got {cm}"));
        }
        Ok(Self(cm))
    }

    pub fn cm(self) -> T {
        self.0
    }
}

impl<T: Real> Default for PathLength<T> {
    fn default() -> Self {
        Self(T::lit(DEFAULT_PATH_LENGTH_CM))
    }
}

/// Per-species molar extinction coefficients (L/mol/cm) on a grid, stored row-major `M x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtinctionProfileSet<T> {
    grid: Arc<WavelengthGrid<T>>,
    species: Vec<String>,
    eps: Vec<Vec<T>>,
}

impl<T: Real> ExtinctionProfileSet<T> {
    pub fn new(grid: Arc<WavelengthGrid<T>>, species: Vec<String>, eps: Vec<Vec<T>>) -> Result<Self> {
        if species.is_empty() || species.len() != eps.len() {
            return usage(format!("{} species names for {} extinction profiles", species.len(), eps.len()));
        }
        for (name, row) in species.iter().zip(&eps) {
            check_len(&grid, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("profile `{name}` has non-finite values")));
            }
        }
        Ok(Self { grid, species, eps })
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid<T>> {
        &self.grid
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn species_count(&self) -> usize {
        self.species.len()
    }

    pub fn profile(&self, species: usize) -> &[T] {
        &self.eps[species]
    }

    pub fn profiles(&self) -> &[Vec<T>] {
        &self.eps
    }

    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self {
            grid: Arc::new(self.grid.downsample(factor)?),
            species: self.species.clone(),
            eps: self.eps.iter().map(|row| downsample_values(row, factor)).collect::<Result<_>>()?,
        })
    }

    /// Writes `wavelength_nm,eps_<species>...` CSV with round-trip precision.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "wavelength_nm")?;
        for s in &self.species {
            write!(out, ",eps_{s}")?;
        }
        writeln!(out)?;
        for (j, w) in self.grid.wavelengths().iter().enumerate() {
            write!(out, "{:.16e}", w.as_f64())?;
            for row in &self.eps {
                write!(out, ",{:.16e}", row[j].as_f64())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty extinction CSV".into()))??;
        let mut cols = header.trim().split(',');
        if cols.next() != Some("wavelength_nm") {
            return Err(Error::Format("extinction CSV must start with `wavelength_nm`".into()));
        }
        let species = cols
            .map(|c| {
                c.strip_prefix("eps_")
                    .map(str::to_owned)
                    .ok_or_else(|| Error::Format(format!("unexpected column `{c}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut wavelengths = Vec::new();
        let mut eps = vec![Vec::new(); species.len()];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields = line
                .trim()
                .split(',')
                .map(|f| f.parse::<f64>().map(T::lit))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", lineno + 2)))?;
            if fields.len() != species.len() + 1 {
                return Err(Error::Format(format!(
                    "row {} has {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    species.len() + 1
                )));
            }
            wavelengths.push(fields[0]);
            for (row, v) in eps.iter_mut().zip(&fields[1..]) {
                row.push(*v);
            }
        }
        Self::new(Arc::new(WavelengthGrid::new(wavelengths)?), species, eps)
    }
}

/// Beer-Lambert mixture absorbance: `A(j) = l * sum_i eps_i(j) * c_i`.
pub fn absorbance_mix<T: Real>(
    eps: &ExtinctionProfileSet<T>,
    conc: &ConcentrationVector<T>,
    path: PathLength<T>,
) -> Result<AbsorbanceSpectrum<T>> {
    if conc.len() != eps.species_count() {
        return usage(format!("{} concentrations for {} species", conc.len(), eps.species_count()));
    }
    let l = path.cm();
    let mut values = vec![T::zero(); eps.grid.len()];
    for (row, &c) in eps.eps.iter().zip(conc.values()) {
        for (v, &e) in values.iter_mut().zip(row) {
            *v = *v + e * c;
        }
    }
    for v in &mut values {
        *v = *v * l;
    }
    Ok(AbsorbanceSpectrum { grid: eps.grid.clone(), values })
}

/// `I = i0 / 10^A`.
pub fn absorbance_to_intensity<T: Real>(a: &AbsorbanceSpectrum<T>, i0: T) -> Result<IntensitySpectrum<T>> {
    if !(i0 > T::zero()) {
        return usage(format!("incident intensity must be positive, got {i0}"));
    }
    let ten = T::lit(10.0);
    Ok(IntensitySpectrum { grid: a.grid.clone(), values: a.values.iter().map(|&v| i0 / ten.powf(v)).collect() })
}

/// `A = log10(i0 / I)`; a nonpositive reading is a domain error.
pub fn intensity_to_absorbance<T: Real>(i: &IntensitySpectrum<T>, i0: T) -> Result<AbsorbanceSpectrum<T>> {
    if !(i0 > T::zero()) {
        return usage(format!("incident intensity must be positive, got {i0}"));
    }
    let values = i
        .values
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if v > T::zero() {
                Ok((i0 / v).log10())
            } else {
                Err(Error::Domain(format!("nonpositive intensity {v} at index {j}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AbsorbanceSpectrum { grid: i.grid.clone(), values })
}

/// Gaussian absorption band `peak_eps * exp(-(lambda - peak)^2 / (2 width^2))`.
pub fn synthetic_extinction_profile<T: Real>(
    grid: &WavelengthGrid<T>,
    peak_nm: T,
    peak_eps: T,
    width_nm: T,
) -> Result<Vec<T>> {
    if !(peak_eps > T::zero()) || !(width_nm > T::zero()) {
        return usage("peak_eps and width_nm must be positive");
    }
    if !grid.contains(peak_nm) {
        return usage(format!("peak {peak_nm} nm outside grid [{}, {}]", grid.first(), grid.last()));
    }
    let two = T::lit(2.0);
    Ok(grid
        .wavelengths()
        .iter()
        .map(|&w| {
            let z = (w - peak_nm) / width_nm;
            peak_eps * (-(z * z) / two).exp()
        })
        .collect())
}

/// Gaussian band parameters for one stand-in species.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub name: String,
    pub peak_nm: f64,
    pub peak_eps: f64,
    pub width_nm: f64,
}

impl BandSpec {
    pub fn new(name: &str, peak_nm: f64, peak_eps: f64, width_nm: f64) -> Self {
        Self { name: name.into(), peak_nm, peak_eps, width_nm }
    }
}

/// Indigo carmine and neutral red stand-ins: single Gaussian bands at the
/// dyes' extinction maxima (608 nm and 496 nm).
pub fn dye_stand_in_bands() -> Vec<BandSpec> {
    vec![BandSpec::new("IC", 608.0, 20000.0, 40.0), BandSpec::new("NR", 496.0, 6000.0, 45.0)]
}

pub fn synthetic_profile_set<T: Real>(
    grid: Arc<WavelengthGrid<T>>,
    bands: &[BandSpec],
) -> Result<ExtinctionProfileSet<T>> {
    let eps = bands
        .iter()
        .map(|b| synthetic_extinction_profile(&grid, T::lit(b.peak_nm), T::lit(b.peak_eps), T::lit(b.width_nm)))
        .collect::<Result<Vec<_>>>()?;
    ExtinctionProfileSet::new(grid, bands.iter().map(|b| b.name.clone()).collect(), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(grid: &Arc<WavelengthGrid<f64>>, eps: Vec<f64>) -> ExtinctionProfileSet<f64> {
        ExtinctionProfileSet::new(grid.clone(), vec!["X".into()], vec![eps]).unwrap()
    }

    fn stand_ins() -> ExtinctionProfileSet<f64> {
        synthetic_profile_set(Arc::new(WavelengthGrid::desk()), &dye_stand_in_bands()).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(WavelengthGrid::<f64>::new(vec![1.0]).is_err());
        assert!(WavelengthGrid::<f64>::new(vec![1.0, 1.0]).is_err());
        assert!(WavelengthGrid::<f64>::new(vec![1.0, f64::NAN]).is_err());
        assert!(WavelengthGrid::<f64>::new(vec![1.0, 2.0]).is_ok());
        let full = WavelengthGrid::<f64>::full();
        assert_eq!(full.len(), 3648);
        assert_eq!(full.first(), 400.0);
        assert!((full.last() - 850.0).abs() < 1e-9);
    }

    #[test]
    fn zero_concentration_gives_zero_spectrum() {
        let eps = stand_ins();
        let a = absorbance_mix(&eps, &ConcentrationVector::zeros(2), PathLength::default()).unwrap();
        assert!(a.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_species_point_value() {
        let grid = Arc::new(WavelengthGrid::uniform(500.0, 700.0, 3).unwrap());
        let eps = single(&grid, vec![0.0, 20000.0, 0.0]);
        let a = absorbance_mix(&eps, &vec![1e-5].into(), PathLength::new(0.25).unwrap()).unwrap();
        assert!((a.values()[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn mixture_is_sum_of_components() {
        let eps = stand_ins();
        let l = PathLength::default();
        let mix = absorbance_mix(&eps, &vec![3e-5, 1e-4].into(), l).unwrap();
        let ic = absorbance_mix(&eps, &vec![3e-5, 0.0].into(), l).unwrap();
        let nr = absorbance_mix(&eps, &vec![0.0, 1e-4].into(), l).unwrap();
        for j in 0..mix.len() {
            let sum = ic.values()[j] + nr.values()[j];
            assert!((mix.values()[j] - sum).abs() <= 1e-15 * sum.abs().max(1e-300) * 4.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let eps = stand_ins();
        let err = absorbance_mix(&eps, &vec![1.0].into(), PathLength::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(PathLength::new(0.0f64).is_err());
    }

    #[test]
    fn intensity_conversions() {
        let grid = Arc::new(WavelengthGrid::<f64>::uniform(400.0, 410.0, 3).unwrap());
        let a = AbsorbanceSpectrum::new(grid.clone(), vec![0.0f64, 1.0, 0.5]).unwrap();
        let i = absorbance_to_intensity(&a, 45000.0).unwrap();
        assert_eq!(i.values()[0], 45000.0);
        assert!((i.values()[1] - 4500.0).abs() < 1e-9);
        let back = intensity_to_absorbance(&i, 45000.0).unwrap();
        for (x, y) in back.values().iter().zip(a.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
        let i = IntensitySpectrum::new(grid.clone(), vec![45000.0, 4500.0, 0.0]).unwrap();
        assert!(matches!(intensity_to_absorbance(&i, 45000.0), Err(Error::Domain(_))));
        let i = IntensitySpectrum::new(grid, vec![45000.0, 4500.0, 4500.0]).unwrap();
        let a = intensity_to_absorbance(&i, 45000.0).unwrap();
        assert_eq!(a.values()[0], 0.0);
        assert!((a.values()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_band_shape() {
        let grid = WavelengthGrid::<f64>::uniform(400.0, 800.0, 401).unwrap();
        let p = synthetic_extinction_profile(&grid, 608.0, 20000.0, 40.0).unwrap();
        assert_eq!(p[208], 20000.0);
        assert!((p[248] / 20000.0 - (-0.5f64).exp()).abs() < 1e-14);
        assert!((p[168] / 20000.0 - (-0.5f64).exp()).abs() < 1e-14);
        assert!(synthetic_extinction_profile(&grid, 900.0, 1.0, 1.0).is_err());
        assert!(synthetic_extinction_profile(&grid, 600.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn stand_in_peaks_sit_at_dye_maxima() {
        let eps = synthetic_profile_set(Arc::new(WavelengthGrid::<f64>::full()), &dye_stand_in_bands()).unwrap();
        let argmax = |row: &[f64]| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let w = eps.grid().wavelengths();
        assert!((w[argmax(eps.profile(0))] - 608.0).abs() < 0.2);
        assert!((w[argmax(eps.profile(1))] - 496.0).abs() < 0.2);
    }

    #[test]
    fn downsampling() {
        let full = WavelengthGrid::<f64>::full();
        assert_eq!(full.downsample(1).unwrap(), full);
        assert_eq!(full.downsample(8).unwrap().len(), 456);
        assert_eq!(WavelengthGrid::<f64>::desk().len(), 456);
        assert!(full.downsample(300).is_err());
        assert!(full.downsample(0).is_err());
        let v = downsample_values(&vec![0.7f64; 3648], 8).unwrap();
        assert!(v.iter().all(|&x| (x - 0.7).abs() < 1e-15));
        assert_eq!(downsample_values(&(0..32).map(f64::from).collect::<Vec<_>>(), 2).unwrap()[0], 0.5);
    }

    #[test]
    fn profile_csv_round_trip() {
        let eps = stand_ins();
        let mut buf = Vec::new();
        eps.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("wavelength_nm,eps_IC,eps_NR\n"));
        let back = ExtinctionProfileSet::<f64>::read_csv(&buf[..]).unwrap();
        assert_eq!(back, eps);
        assert!(ExtinctionProfileSet::<f64>::read_csv(&b"lambda,eps_A\n1,2\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn homogeneity_and_nonnegativity(c1 in 0.0..1e-4f64, c2 in 0.0..3e-4f64, k in 0.0..10.0f64) {
            let eps = stand_ins();
            let l = PathLength::default();
            let base = absorbance_mix(&eps, &vec![c1, c2].into(), l).unwrap();
            let scaled = absorbance_mix(&eps, &vec![k * c1, k * c2].into(), l).unwrap();
            for (s, b) in scaled.values().iter().zip(base.values()) {
                prop_assert!(*b >= 0.0);
                prop_assert!((s - k * b).abs() <= 1e-12 * (k * b).abs().max(1e-300));
            }
        }

        #[test]
        fn intensity_round_trip(vals in proptest::collection::vec(1e-3..1e5f64, 2..40)) {
            let grid = Arc::new(WavelengthGrid::uniform(400.0, 800.0, vals.len()).unwrap());
            let i = IntensitySpectrum::new(grid, vals.clone()).unwrap();
            let a = intensity_to_absorbance(&i, 45000.0).unwrap();
            let back = absorbance_to_intensity(&a, 45000.0).unwrap();
            for (x, y) in back.values().iter().zip(&vals) {
                prop_assert!((x - y).abs() <= 1e-12 * y);
            }
        }
    }
}
