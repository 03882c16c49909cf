//! Nonlinearity measure and the decorrelating transform that orders
//! measurement elements from least to most nonlinear.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{sym_eig_ascending, symmetrize, MeasurementModel};

/// Transform `D`, its per-element nonlinearity spectrum and the number of
/// leading elements to process in the current round.
#[derive(Clone, Debug, PartialEq)]
pub struct DecorrelationResult {
    /// `d×d`, whitens the noise and diagonalizes `Ξ`.
    pub transform: DMatrix<f64>,
    /// Ascending per-element nonlinearities of the transformed model.
    pub spectrum: DVector<f64>,
    /// In `1..=d`.
    pub split: usize,
}

/// Total nonlinearity `η = tr(R⁻¹·Ξ)`.
pub fn nonlinearity(hessian_gram: &DMatrix<f64>, noise_cov: &DMatrix<f64>) -> Result<f64> {
    let d = hessian_gram.nrows();
    if hessian_gram.ncols() != d || noise_cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch("nonlinearity needs two d×d matrices".into()));
    }
    let chol = symmetrize(noise_cov)
        .cholesky()
        .ok_or(Error::NotPositiveSemiDefinite { min_eigenvalue: f64::NAN })?;
    Ok(chol.solve(hessian_gram).trace())
}

/// Builds `D = Uᵀ·√R⁻¹` from the ascending eigendecomposition of
/// `√R⁻¹·Ξ·√R⁻ᵀ` and picks the split: the count of eigenvalues at or below
/// `threshold`, but never less than one.
pub fn decorrelate(hessian_gram: &DMatrix<f64>, sqrt_noise: &DMatrix<f64>, threshold: f64) -> Result<DecorrelationResult> {
    let d = hessian_gram.nrows();
    if hessian_gram.ncols() != d || sqrt_noise.shape() != (d, d) {
        return Err(Error::DimensionMismatch("decorrelate needs two d×d matrices".into()));
    }
    let diag_max = sqrt_noise.diagonal().abs().max();
    let diag_min = sqrt_noise.diagonal().abs().min();
    if diag_min.is_nan() || diag_min <= 1e-14 * diag_max {
        return Err(Error::SingularNoiseSqrt);
    }
    let inv_sqrt = sqrt_noise
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::SingularNoiseSqrt)?;
    let whitened = symmetrize(&(&inv_sqrt * hessian_gram * inv_sqrt.transpose()));
    decorrelate_whitened(&whitened, Some(&inv_sqrt), threshold)
}

/// Same as [`decorrelate`] for a model whose noise is already white.
pub(crate) fn decorrelate_whitened(
    whitened_gram: &DMatrix<f64>,
    inv_sqrt_noise: Option<&DMatrix<f64>>,
    threshold: f64,
) -> Result<DecorrelationResult> {
    if threshold.is_nan() {
        return Err(Error::InvalidParameter("threshold is NaN".into()));
    }
    let (u, mut spectrum) = sym_eig_ascending(whitened_gram)?;
    // Ξ is a Gram matrix; negative eigenvalues are roundoff
    spectrum.iter_mut().for_each(|v| *v = v.max(0.0));
    let transform = match inv_sqrt_noise {
        Some(inv) => u.transpose() * inv,
        None => u.transpose(),
    };
    let passing = spectrum.iter().take_while(|&&v| v <= threshold).count();
    Ok(DecorrelationResult {
        transform,
        spectrum,
        split: passing.max(1),
    })
}

/// Applies the rows of a transform to a measurement model:
/// `h ↦ D·h`, `y ↦ D·y`, `R ↦ D·R·Dᵀ`.
pub fn transform_model(model: &MeasurementModel, rows: &DMatrix<f64>) -> Result<MeasurementModel> {
    if rows.ncols() != model.dim() || rows.nrows() > model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "transform is {}x{}, measurement has length {}",
            rows.nrows(),
            rows.ncols(),
            model.dim()
        )));
    }
    let func = model.func().clone();
    let d_rows = rows.clone();
    let value = rows * model.value();
    let noise = rows * model.noise_cov() * rows.transpose();
    MeasurementModel::new(Arc::new(move |x| &d_rows * func(x)), value, noise)
}
