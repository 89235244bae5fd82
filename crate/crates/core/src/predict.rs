//! Common interface for anything that maps an absorbance spectrum to concentrations.

use crate::calibration::LeastSquaresUnmixer;
use crate::error::Result;
use crate::fcnn::FcnnModel;
use crate::scalar::Real;
use crate::spectral::{AbsorbanceSpectrum, ConcentrationVector};

pub trait ConcentrationEstimator<T: Real> {
    fn species_count(&self) -> usize;

    /// Concentrations in mol/L, one per species.
    fn estimate(&self, spectrum: &AbsorbanceSpectrum<T>) -> Result<ConcentrationVector<T>>;
}

impl<T: Real> ConcentrationEstimator<T> for FcnnModel<T> {
    fn species_count(&self) -> usize {
        self.species.len()
    }

    fn estimate(&self, spectrum: &AbsorbanceSpectrum<T>) -> Result<ConcentrationVector<T>> {
        self.predict(spectrum)
    }
}

impl<T: Real> ConcentrationEstimator<T> for LeastSquaresUnmixer<T> {
    fn species_count(&self) -> usize {
        LeastSquaresUnmixer::species_count(self)
    }

    fn estimate(&self, spectrum: &AbsorbanceSpectrum<T>) -> Result<ConcentrationVector<T>> {
        self.unmix(spectrum)
    }
}

impl<T: Real, E: ConcentrationEstimator<T> + ?Sized> ConcentrationEstimator<T> for &E {
    fn species_count(&self) -> usize {
        (**self).species_count()
    }

    fn estimate(&self, spectrum: &AbsorbanceSpectrum<T>) -> Result<ConcentrationVector<T>> {
        (**self).estimate(spectrum)
    }
}
