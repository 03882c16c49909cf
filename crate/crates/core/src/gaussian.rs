//! Gaussian state and model types, plus the two matrix factorizations every
//! filter leans on: a Cholesky square root that tolerates roundoff-level
//! indefiniteness, and a symmetric eigendecomposition with ascending,
//! sign-canonical output.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Vector-valued callable used for measurement and transition functions.
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_REL_TOL: f64 = 1e-9;
const JITTER_SCALE: f64 = 1e-12;
const JITTER_ESCALATIONS: usize = 3;

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Mean and covariance of a Gaussian estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianState {
    /// Builds a state, symmetrizing `cov` and rejecting non-finite or
    /// indefinite covariances.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {n}, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite state".into()));
        }
        let cov = symmetrize(&cov);
        if n > 0 {
            let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
            let lo = eig.min();
            let hi = eig.max();
            if lo < -PSD_REL_TOL * hi.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: lo });
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }
}

/// Additive-noise measurement model `y = h(x) + ε`, `ε ~ N(0, R)`.
#[derive(Clone)]
pub struct MeasurementModel {
    func: VectorFn,
    value: DVector<f64>,
    noise_cov: DMatrix<f64>,
}

impl fmt::Debug for MeasurementModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementModel")
            .field("value", &self.value)
            .field("noise_cov", &self.noise_cov)
            .finish_non_exhaustive()
    }
}

impl MeasurementModel {
    /// The noise covariance must be symmetric positive definite.
    pub fn new(func: VectorFn, value: DVector<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let d = value.len();
        if noise_cov.nrows() != d || noise_cov.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "measurement has length {d}, noise covariance is {}x{}",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        let noise_cov = symmetrize(&noise_cov);
        if noise_cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveSemiDefinite {
                min_eigenvalue: SymmetricEigen::new(noise_cov).eigenvalues.min(),
            });
        }
        Ok(Self {
            func,
            value,
            noise_cov,
        })
    }

    /// Convenience constructor for `h(x) = H·x`.
    pub fn linear(h: DMatrix<f64>, value: DVector<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(Arc::new(move |x| &h * x), value, noise_cov)
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.func)(x)
    }

    pub fn func(&self) -> &VectorFn {
        &self.func
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

/// Linear time-invariant transition `x_t = F·x_{t-1} + w`, `w ~ N(0, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearStateModel {
    transition: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
}

impl LinearStateModel {
    pub fn new(transition: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        let n = transition.nrows();
        if transition.ncols() != n || noise_cov.shape() != (n, n) {
            return Err(Error::DimensionMismatch(
                "transition and noise covariance must be square and of equal size".into(),
            ));
        }
        let noise_cov = symmetrize(&noise_cov);
        let lo = SymmetricEigen::new(noise_cov.clone()).eigenvalues.min();
        if lo < -PSD_REL_TOL * max_abs(&noise_cov).max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: lo });
        }
        Ok(Self {
            transition,
            noise_cov,
        })
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Exact linear prediction `N(Fμ, FPFᵀ + W)`.
    pub fn predict(&self, prior: &GaussianState) -> Result<GaussianState> {
        let f = &self.transition;
        GaussianState::new(
            f * prior.mean(),
            f * prior.cov() * f.transpose() + &self.noise_cov,
        )
    }
}

/// Lower-triangular `L` with `L·Lᵀ = P`.
///
/// Falls back to adding `1e-12·tr(P)/n·I` (escalated ×10 up to three times)
/// when the plain factorization fails. An all-zero input returns zero.
pub fn matrix_sqrt(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(Error::DimensionMismatch("matrix_sqrt needs a square matrix".into()));
    }
    let asym = asymmetry(p);
    if asym > 1e-12 * (1.0 + max_abs(p)) {
        return Err(Error::NonSymmetricInput { asymmetry: asym });
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite matrix".into()));
    }
    if p.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let p = symmetrize(p);
    if let Some(chol) = p.clone().cholesky() {
        return Ok(chol.l());
    }
    let mut jitter = JITTER_SCALE * p.trace().abs() / n as f64;
    for _ in 0..=JITTER_ESCALATIONS {
        let shifted = &p + DMatrix::identity(n, n) * jitter;
        if let Some(chol) = shifted.cholesky() {
            return Ok(chol.l());
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveSemiDefinite {
        min_eigenvalue: SymmetricEigen::new(p).eigenvalues.min(),
    })
}

/// Symmetric eigendecomposition `S = U·diag(λ)·Uᵀ` with `λ` ascending.
///
/// Each eigenvector is signed so that its largest-magnitude entry (first one
/// on ties) is positive; equal eigenvalues keep the solver's order.
pub fn sym_eig_ascending(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = s.nrows();
    if s.ncols() != d {
        return Err(Error::DimensionMismatch("eigendecomposition needs a square matrix".into()));
    }
    let asym = asymmetry(s);
    if asym > SYMMETRY_TOL * (1.0 + max_abs(s)) {
        return Err(Error::NonSymmetricInput { asymmetry: asym });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite matrix".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut u = DMatrix::zeros(d, d);
    let mut lambda = DVector::zeros(d);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let peak = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let lead = col
            .iter()
            .position(|v| v.abs() >= peak * (1.0 - 1e-12))
            .unwrap_or(0);
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        u.set_column(dst, &col);
        lambda[dst] = eig.eigenvalues[src];
    }
    Ok((u, lambda))
}

/// Solves `S·X = B` for symmetric positive definite `S`, reporting
/// [`Error::SingularInnovation`] when `S` is numerically singular.
pub(crate) fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = symmetrize(s);
    let eig = SymmetricEigen::new(s.clone()).eigenvalues;
    let hi = eig.max();
    let lo = eig.min();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition.is_nan() || condition > 1e12 {
        return Err(Error::SingularInnovation { condition });
    }
    let chol = s
        .cholesky()
        .ok_or(Error::SingularInnovation { condition })?;
    Ok(chol.solve(b))
}

/// Kalman-form correction shared by every Gaussian update:
/// `K = C·S⁻¹`, `μ⁺ = μ + K(y − ŷ)`, `P⁺ = P − K·S·Kᵀ`, where `C` is the
/// state/measurement cross covariance.
pub(crate) fn kalman_correct(
    prior: &GaussianState,
    cross_cov: &DMatrix<f64>,
    innovation_cov: &DMatrix<f64>,
    residual: &DVector<f64>,
) -> Result<GaussianState> {
    // Kᵀ = S⁻¹·Cᵀ since S is symmetric
    let gain = spd_solve(innovation_cov, &cross_cov.transpose())?.transpose();
    let mean = prior.mean() + &gain * residual;
    let cov = prior.cov() - &gain * innovation_cov * gain.transpose();
    GaussianState::new(mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sqrt_of_identity_and_scaled_identity() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(matrix_sqrt(&i3).unwrap(), i3);
        let l = matrix_sqrt(&(&i3 * 16.0)).unwrap();
        assert!((l - &i3 * 4.0).abs().max() < 1e-15);
    }

    #[test]
    fn sqrt_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..6 {
            let g = random_matrix(&mut rng, n, n);
            let a = &g * g.transpose();
            let l = matrix_sqrt(&a).unwrap();
            // oracle: explicit multiply-back
            let back = &l * l.transpose();
            assert!((back - &a).abs().max() <= 1e-10 * (1.0 + max_abs(&a)));
            for i in 0..n {
                assert!(l[(i, i)] >= 0.0);
                for j in (i + 1)..n {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn sqrt_handles_singular_psd_via_jitter() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let p = &v * v.transpose();
        let l = matrix_sqrt(&p).unwrap();
        assert!((&l * l.transpose() - &p).abs().max() < 1e-8);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            matrix_sqrt(&p),
            Err(Error::NotPositiveSemiDefinite { .. })
        ));
    }

    #[test]
    fn eig_identity() {
        let (u, l) = sym_eig_ascending(&DMatrix::identity(2, 2)).unwrap();
        assert!((u - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-15);
        assert_eq!(l, DVector::from_vec(vec![1.0, 1.0]));
    }

    #[test]
    fn eig_of_rank_one_example() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, -4.0, -4.0, 4.0]);
        let (u, l) = sym_eig_ascending(&s).unwrap();
        assert!(l[0].abs() < 1e-12 && (l[1] - 8.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = DMatrix::from_row_slice(2, 2, &[h, h, h, -h]);
        assert!((u - expected).abs().max() < 1e-12);
    }

    #[test]
    fn eig_sorts_diagonal_input() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let (u, l) = sym_eig_ascending(&s).unwrap();
        assert_eq!(l, DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((u - expected).abs().max() < 1e-15);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            sym_eig_ascending(&s),
            Err(Error::NonSymmetricInput { .. })
        ));
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..7 {
            let a = random_matrix(&mut rng, d, d) * 5.0;
            let s = symmetrize(&a);
            let (u, l) = sym_eig_ascending(&s).unwrap();
            let back = &u * DMatrix::from_diagonal(&l) * u.transpose();
            assert!((back - &s).abs().max() <= 1e-9 * (1.0 + max_abs(&s)));
            let orth = u.transpose() * &u - DMatrix::identity(d, d);
            assert!(orth.abs().max() < 1e-10);
            assert!(l.as_slice().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn eig_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = symmetrize(&random_matrix(&mut rng, 4, 4));
        let a = sym_eig_ascending(&s).unwrap();
        let b = sym_eig_ascending(&s).unwrap();
        assert_eq!(a, b);
        for j in 0..4 {
            let col = a.0.column(j);
            let lead = col.iter().cloned().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn state_symmetrizes_and_validates() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0 + 1e-13, 2.0]);
        let s = GaussianState::new(DVector::zeros(2), cov).unwrap();
        assert_eq!(s.cov()[(0, 1)], s.cov()[(1, 0)]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianState::new(DVector::zeros(2), bad).is_err());
        assert!(GaussianState::new(DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn measurement_model_requires_spd_noise() {
        let h = DMatrix::identity(2, 2);
        assert!(MeasurementModel::linear(h.clone(), DVector::zeros(2), DMatrix::zeros(2, 2)).is_err());
        assert!(MeasurementModel::linear(h, DVector::zeros(2), DMatrix::identity(2, 2)).is_ok());
    }
}
