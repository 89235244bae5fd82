//! Per-wavelength least-squares estimation of extinction profiles from labeled
//! absorbance measurements, and the inverse problem (classical least-squares
//! unmixing of a spectrum into concentrations).

use serde::Serialize;

use crate::dataset::LabeledSample;
use crate::error::{usage, Error, Result};
use crate::linalg::{symmetric_eigen, Cholesky, SquareMatrix};
use crate::scalar::Real;
use crate::spectral::{AbsorbanceSpectrum, ConcentrationVector, ExtinctionProfileSet, PathLength};

/// Normal matrices with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Identifiability diagnostics of a concentration design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    /// `lambda_max / lambda_min` of `C^T C` (infinite when singular).
    pub condition_number: f64,
    /// Euclidean norm of each species' concentration column.
    pub column_norms: Vec<f64>,
    /// Eigenvalues of `C^T C`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Species most involved in the weakest eigen-direction.
    pub weakest_species: usize,
}

fn normal_matrix<T: Real>(concs: &[&ConcentrationVector<T>], m: usize) -> SquareMatrix<T> {
    let mut g = SquareMatrix::zeros(m);
    for c in concs {
        for i in 0..m {
            for k in 0..m {
                g.add(i, k, c.0[i] * c.0[k]);
            }
        }
    }
    g
}

fn species_count<T: Real>(concs: &[&ConcentrationVector<T>]) -> Result<usize> {
    let m = concs.first().map(|c| c.len()).ok_or_else(|| Error::Usage("no samples".into()))?;
    if m == 0 || concs.iter().any(|c| c.len() != m) {
        return usage("samples disagree on species count");
    }
    Ok(m)
}

fn report_for<T: Real>(g: &SquareMatrix<T>) -> ConditionReport {
    let m = g.dim();
    let column_norms = (0..m).map(|i| g.get(i, i).as_f64().sqrt()).collect();
    let (vals, vecs) = symmetric_eigen(g);
    let eigenvalues: Vec<f64> = vals.iter().map(|v| v.as_f64()).collect();
    let lo = eigenvalues[0];
    let hi = eigenvalues[m - 1];
    let condition_number = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let weakest_species = vecs[0]
        .iter()
        .enumerate()
        .fold((0, -1.0), |best, (i, v)| {
            let a = v.as_f64().abs();
            if a > best.1 + 1e-12 {
                (i, a)
            } else {
                best
            }
        })
        .0;
    ConditionReport { condition_number, column_norms, eigenvalues, weakest_species }
}

/// Condition number and column norms of the concentration design.
pub fn condition_report<T: Real>(samples: &[LabeledSample<T>]) -> Result<ConditionReport> {
    let concs: Vec<_> = samples.iter().map(|s| &s.conc).collect();
    let m = species_count(&concs)?;
    Ok(report_for(&normal_matrix(&concs, m)))
}

/// Fits `A(j) / l = sum_i eps_i(j) C_i` independently at every wavelength by solving the
/// `M x M` normal equations. Negative coefficients are kept as fitted.
pub fn fit_extinction<T: Real>(
    species: &[String],
    samples: &[LabeledSample<T>],
    path: PathLength<T>,
) -> Result<ExtinctionProfileSet<T>> {
    let concs: Vec<_> = samples.iter().map(|s| &s.conc).collect();
    let m = species_count(&concs)?;
    if species.len() != m {
        return usage(format!("{} species names for {m} concentration columns", species.len()));
    }
    if samples.len() < m {
        return usage(format!("need at least {m} samples, got {}", samples.len()));
    }
    let grid = samples[0].spectrum.grid().clone();
    if samples.iter().any(|s| !s.spectrum.grid().same_as(&grid)) {
        return usage("samples are on different grids");
    }
    let g = normal_matrix(&concs, m);
    let report = report_for(&g);
    let factor = if report.condition_number > MAX_CONDITION { None } else { Cholesky::new(&g) };
    let factor = factor.ok_or_else(|| Error::Calibration {
        species: species[report.weakest_species].clone(),
        condition: report.condition_number,
    })?;

    // rhs(i, j) = sum_s C_{s,i} A_s(j) / l
    let l_len = grid.len();
    let inv_l = path.cm().recip();
    let mut rhs = vec![vec![T::zero(); l_len]; m];
    for s in samples {
        for (row, &c) in rhs.iter_mut().zip(s.conc.values()) {
            for (r, &a) in row.iter_mut().zip(s.spectrum.values()) {
                *r = *r + c * a * inv_l;
            }
        }
    }
    let mut eps = vec![vec![T::zero(); l_len]; m];
    let mut col = vec![T::zero(); m];
    for j in 0..l_len {
        for i in 0..m {
            col[i] = rhs[i][j];
        }
        factor.solve_in_place(&mut col);
        for i in 0..m {
            eps[i][j] = col[i];
        }
    }
    ExtinctionProfileSet::new(grid, species.to_vec(), eps)
}

/// Number of negative fitted coefficients per species.
pub fn negative_coefficient_counts<T: Real>(eps: &ExtinctionProfileSet<T>) -> Vec<usize> {
    eps.profiles().iter().map(|row| row.iter().filter(|&&v| v < T::zero()).count()).collect()
}

/// Sum of squared residuals of the per-wavelength model at wavelength `j`.
pub fn residual_sum_of_squares<T: Real>(
    eps_at_j: &[T],
    samples: &[LabeledSample<T>],
    path: PathLength<T>,
    j: usize,
) -> T {
    samples
        .iter()
        .map(|s| {
            let model: T = s.conc.values().iter().zip(eps_at_j).map(|(&c, &e)| c * e).sum();
            let r = s.spectrum.values()[j] / path.cm() - model;
            r * r
        })
        .sum()
}

/// Classical least-squares unmixing: the concentrations minimizing the squared
/// Beer-Lambert residual over all wavelengths.
#[derive(Debug, Clone)]
pub struct LeastSquaresUnmixer<T> {
    eps: ExtinctionProfileSet<T>,
    path: PathLength<T>,
    factor: Cholesky<T>,
}

impl<T: Real> LeastSquaresUnmixer<T> {
    pub fn new(eps: ExtinctionProfileSet<T>, path: PathLength<T>) -> Result<Self> {
        let m = eps.species_count();
        let mut g = SquareMatrix::zeros(m);
        for i in 0..m {
            for k in 0..m {
                let v: T = eps.profile(i).iter().zip(eps.profile(k)).map(|(&a, &b)| a * b).sum();
                g.set(i, k, v);
            }
        }
        let report = report_for(&g);
        let factor = if report.condition_number > MAX_CONDITION { None } else { Cholesky::new(&g) };
        let factor = factor.ok_or_else(|| Error::Calibration {
            species: eps.species()[report.weakest_species].clone(),
            condition: report.condition_number,
        })?;
        Ok(Self { eps, path, factor })
    }

    pub fn species_count(&self) -> usize {
        self.eps.species_count()
    }

    pub fn profiles(&self) -> &ExtinctionProfileSet<T> {
        &self.eps
    }

    pub fn unmix(&self, spectrum: &AbsorbanceSpectrum<T>) -> Result<ConcentrationVector<T>> {
        if spectrum.len() != self.eps.grid().len() {
            return usage(format!(
                "spectrum length {} does not match profile grid {}",
                spectrum.len(),
                self.eps.grid().len()
            ));
        }
        let inv_l = self.path.cm().recip();
        let mut c: Vec<T> = self
            .eps
            .profiles()
            .iter()
            .map(|row| row.iter().zip(spectrum.values()).map(|(&e, &a)| e * a * inv_l).sum())
            .collect();
        self.factor.solve_in_place(&mut c);
        Ok(ConcentrationVector(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::RandomSource;
    use crate::spectral::{absorbance_mix, dye_stand_in_bands, synthetic_profile_set, WavelengthGrid};
    use std::sync::Arc;

    fn eps() -> ExtinctionProfileSet<f64> {
        let grid = Arc::new(WavelengthGrid::uniform(400.0, 850.0, 128).unwrap());
        synthetic_profile_set(grid, &dye_stand_in_bands()).unwrap()
    }

    fn samples_for(eps: &ExtinctionProfileSet<f64>, concs: &[[f64; 2]]) -> Vec<LabeledSample<f64>> {
        concs
            .iter()
            .map(|c| {
                let conc = ConcentrationVector(c.to_vec());
                let spectrum = absorbance_mix(eps, &conc, PathLength::default()).unwrap();
                LabeledSample { conc, spectrum }
            })
            .collect()
    }

    fn names() -> Vec<String> {
        vec!["IC".into(), "NR".into()]
    }

    #[test]
    fn recovers_generating_profiles_from_three_mixtures() {
        let eps = eps();
        let samples = samples_for(&eps, &[[5e-5, 1e-5], [1e-5, 2e-4], [3e-5, 1e-4]]);
        let fit = fit_extinction(&names(), &samples, PathLength::default()).unwrap();
        for i in 0..2 {
            let peak = eps.profile(i).iter().cloned().fold(0.0, f64::max);
            for (a, b) in fit.profile(i).iter().zip(eps.profile(i)) {
                assert!((a - b).abs() <= 1e-9 * peak, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn missing_species_is_unidentifiable() {
        let eps = eps();
        let samples = samples_for(&eps, &[[5e-5, 0.0], [1e-5, 0.0], [3e-5, 0.0]]);
        match fit_extinction(&names(), &samples, PathLength::default()) {
            Err(Error::Calibration { species, .. }) => assert_eq!(species, "NR"),
            other => panic!("expected calibration error, got {other:?}"),
        }
    }

    #[test]
    fn scale_invariance() {
        let eps = eps();
        let samples = samples_for(&eps, &[[5e-5, 1e-5], [1e-5, 2e-4], [3e-5, 1e-4], [7e-5, 2e-5]]);
        // perturb so the fit is not exact
        let mut rng = RandomSource::new(1);
        let noisy: Vec<_> = samples
            .iter()
            .map(|s| {
                let v = s.spectrum.values().iter().map(|a| a + 1e-3 * rng.normal()).collect();
                LabeledSample {
                    conc: s.conc.clone(),
                    spectrum: AbsorbanceSpectrum::new(s.spectrum.grid().clone(), v).unwrap(),
                }
            })
            .collect();
        let doubled: Vec<_> = noisy
            .iter()
            .map(|s| LabeledSample {
                conc: s.conc.scaled(2.0),
                spectrum: AbsorbanceSpectrum::new(
                    s.spectrum.grid().clone(),
                    s.spectrum.values().iter().map(|a| 2.0 * a).collect(),
                )
                .unwrap(),
            })
            .collect();
        let a = fit_extinction(&names(), &noisy, PathLength::default()).unwrap();
        let b = fit_extinction(&names(), &doubled, PathLength::default()).unwrap();
        for i in 0..2 {
            for (x, y) in a.profile(i).iter().zip(b.profile(i)) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn condition_reports() {
        let eps = eps();
        let orth = samples_for(&eps, &[[1e-5, 0.0], [0.0, 1e-5]]);
        let r = condition_report(&orth).unwrap();
        assert!((r.condition_number - 1.0).abs() < 1e-12);
        assert_eq!(r.column_norms, vec![1e-5, 1e-5]);

        let dup = samples_for(&eps, &[[1e-5, 1e-5], [2e-5, 2e-5], [3e-5, 3e-5]]);
        assert!(condition_report(&dup).unwrap().condition_number >= 1e12);

        let mut rng = RandomSource::new(31);
        let design: Vec<[f64; 2]> = (0..31).map(|_| [rng.uniform() * 7e-5, rng.uniform() * 2.5e-4]).collect();
        let r = condition_report(&samples_for(&eps, &design)).unwrap();
        assert!(r.condition_number.is_finite() && r.condition_number < MAX_CONDITION);
        assert!(fit_extinction(&names(), &samples_for(&eps, &design), PathLength::default()).is_ok());
    }

    #[test]
    fn residual_optimality_under_noise() {
        let eps = eps();
        let mut rng = RandomSource::new(8);
        let samples: Vec<_> = (0..20)
            .map(|_| {
                let conc = ConcentrationVector(vec![rng.uniform() * 7e-5, rng.uniform() * 2.5e-4]);
                let clean = absorbance_mix(&eps, &conc, PathLength::default()).unwrap();
                let v = clean.values().iter().map(|a| a + 2e-3 * rng.normal()).collect();
                LabeledSample { conc, spectrum: AbsorbanceSpectrum::new(clean.grid().clone(), v).unwrap() }
            })
            .collect();
        let fit = fit_extinction(&names(), &samples, PathLength::default()).unwrap();
        for j in (0..128).step_by(9) {
            let best: Vec<f64> = (0..2).map(|i| fit.profile(i)[j]).collect();
            let rss = residual_sum_of_squares(&best, &samples, PathLength::default(), j);
            for i in 0..2 {
                for sign in [-1.0, 1.0] {
                    let mut p = best.clone();
                    p[i] += sign * 1e-6 * p[i].abs();
                    assert!(residual_sum_of_squares(&p, &samples, PathLength::default(), j) >= rss);
                }
            }
        }
    }

    #[test]
    fn sub_grid_fit_is_restriction() {
        let eps = eps();
        let mut rng = RandomSource::new(2);
        let samples: Vec<_> = (0..10)
            .map(|_| {
                let conc = ConcentrationVector(vec![rng.uniform() * 7e-5, rng.uniform() * 2.5e-4]);
                let clean = absorbance_mix(&eps, &conc, PathLength::default()).unwrap();
                let v = clean.values().iter().map(|a| a + 1e-3 * rng.normal()).collect();
                LabeledSample { conc, spectrum: AbsorbanceSpectrum::new(clean.grid().clone(), v).unwrap() }
            })
            .collect();
        let full = fit_extinction(&names(), &samples, PathLength::default()).unwrap();
        let sub_grid = Arc::new(WavelengthGrid::new(eps.grid().wavelengths()[40..80].to_vec()).unwrap());
        let sub: Vec<_> = samples
            .iter()
            .map(|s| LabeledSample {
                conc: s.conc.clone(),
                spectrum: AbsorbanceSpectrum::new(sub_grid.clone(), s.spectrum.values()[40..80].to_vec()).unwrap(),
            })
            .collect();
        let part = fit_extinction(&names(), &sub, PathLength::default()).unwrap();
        for i in 0..2 {
            assert_eq!(part.profile(i), &full.profile(i)[40..80]);
        }
    }

    #[test]
    fn unmixer_inverts_beer_lambert() {
        let eps = eps();
        let unmixer = LeastSquaresUnmixer::new(eps.clone(), PathLength::default()).unwrap();
        let conc = ConcentrationVector(vec![2.4e-5, 5.7e-5]);
        let a = absorbance_mix(&eps, &conc, PathLength::default()).unwrap();
        let back = unmixer.unmix(&a).unwrap();
        for (x, y) in back.values().iter().zip(conc.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
