//! Derivative-free second-order statistical linearization.
//!
//! A function `h` is probed at the mean, at `μ ± γ·Lᵢ` for every column `Lᵢ`
//! of the covariance square root, and at `μ + γ·Lᵢ + γ·Lⱼ` for `i < j`.
//! From those `1 + 2n + n(n−1)/2` evaluations we recover
//!
//! * `M ≈ J·L` (central differences), and
//! * `Q_k ≈ Lᵀ·H_k·L` (second differences),
//!
//! which are exact when `h` is a polynomial of degree at most two. The trace
//! vector `ξ_k = tr Q_k` and Gram matrix `Ξ_kl = tr Q_k·Q_l` stand in for the
//! Hessian terms of the second-order extended Kalman filter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{kalman_correct, matrix_sqrt, symmetrize, GaussianState, MeasurementModel};

/// Default probe spread; preserves the fourth moment of a Gaussian.
pub const DEFAULT_GAMMA: f64 = 1.732_050_807_568_877_2;

/// Numerical first- and second-order terms of a function around a mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationSummary {
    /// `d×n`, approximates `J·L`.
    pub sqrt_jacobian: DMatrix<f64>,
    /// One symmetric `n×n` matrix per output, approximates `Lᵀ·H_k·L`.
    pub sqrt_hessians: Vec<DMatrix<f64>>,
    /// `ξ_k = tr Q_k`.
    pub hessian_trace: DVector<f64>,
    /// `Ξ_kl = tr(Q_k·Q_l)`.
    pub hessian_gram: DMatrix<f64>,
    pub h_at_mean: DVector<f64>,
    /// The square root `L` the probes were placed along.
    pub sqrt_cov: DMatrix<f64>,
    pub evaluations: usize,
}

impl LinearizationSummary {
    pub fn output_dim(&self) -> usize {
        self.h_at_mean.len()
    }

    /// Drops the second-order terms, which turns the update into a
    /// first-order (EKF-style) one.
    pub fn first_order(mut self) -> Self {
        let d = self.output_dim();
        self.hessian_trace = DVector::zeros(d);
        self.hessian_gram = DMatrix::zeros(d, d);
        self
    }
}

fn check_finite(value: &DVector<f64>, probe: impl FnOnce() -> String, point: &DVector<f64>) -> Result<()> {
    if value.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteEvaluation {
            probe: probe(),
            point: point.iter().copied().collect(),
        })
    }
}

/// Probes `h` around `mean` along the columns of `sqrt_cov` scaled by `gamma`.
pub fn linearize<F>(h: F, mean: &DVector<f64>, sqrt_cov: &DMatrix<f64>, gamma: f64) -> Result<LinearizationSummary>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let n = mean.len();
    if sqrt_cov.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "state has length {n}, square root is {}x{}",
            sqrt_cov.nrows(),
            sqrt_cov.ncols()
        )));
    }

    let h0 = h(mean);
    check_finite(&h0, || "mean".into(), mean)?;
    let d = h0.len();

    let deltas: Vec<DVector<f64>> = (0..n).map(|i| sqrt_cov.column(i) * gamma).collect();
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for (i, delta) in deltas.iter().enumerate() {
        let p = mean + delta;
        let hp = h(&p);
        check_finite(&hp, || format!("+delta{i}"), &p)?;
        let m = mean - delta;
        let hm = h(&m);
        check_finite(&hm, || format!("-delta{i}"), &m)?;
        if hp.len() != d || hm.len() != d {
            return Err(Error::DimensionMismatch("function output length changed between probes".into()));
        }
        plus.push(hp);
        minus.push(hm);
    }
    let mut evaluations = 1 + 2 * n;

    let inv_gamma = 1.0 / gamma;
    let inv_gamma2 = inv_gamma * inv_gamma;
    let mut sqrt_jacobian = DMatrix::zeros(d, n);
    for i in 0..n {
        let col = (&plus[i] - &minus[i]) * (0.5 * inv_gamma);
        sqrt_jacobian.set_column(i, &col);
    }

    let mut sqrt_hessians = vec![DMatrix::zeros(n, n); d];
    for i in 0..n {
        let diag = (&plus[i] + &minus[i] - &h0 * 2.0) * inv_gamma2;
        for (k, q) in sqrt_hessians.iter_mut().enumerate() {
            q[(i, i)] = diag[k];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let p = mean + &deltas[i] + &deltas[j];
            let hij = h(&p);
            check_finite(&hij, || format!("+delta{i}+delta{j}"), &p)?;
            evaluations += 1;
            let off = (&hij - &plus[i] - &plus[j] + &h0) * inv_gamma2;
            for (k, q) in sqrt_hessians.iter_mut().enumerate() {
                q[(i, j)] = off[k];
                q[(j, i)] = off[k];
            }
        }
    }

    let hessian_trace = DVector::from_iterator(d, sqrt_hessians.iter().map(|q| q.trace()));
    let mut hessian_gram = DMatrix::zeros(d, d);
    for k in 0..d {
        for l in k..d {
            // Q_k, Q_l symmetric: tr(Q_k Q_l) is the elementwise inner product
            let v = sqrt_hessians[k].dot(&sqrt_hessians[l]);
            hessian_gram[(k, l)] = v;
            hessian_gram[(l, k)] = v;
        }
    }

    Ok(LinearizationSummary {
        sqrt_jacobian,
        sqrt_hessians,
        hessian_trace,
        hessian_gram,
        h_at_mean: h0,
        sqrt_cov: sqrt_cov.clone(),
        evaluations,
    })
}

/// Second-order update using a precomputed linearization at the prior mean:
/// `ŷ = h(μ) + ½ξ`, `S = MMᵀ + ½Ξ + R`, `K = L·Mᵀ·S⁻¹`.
pub fn ekf2_update(prior: &GaussianState, model: &MeasurementModel, lin: &LinearizationSummary) -> Result<GaussianState> {
    let d = model.dim();
    if lin.output_dim() != d || lin.sqrt_cov.nrows() != prior.dim() {
        return Err(Error::DimensionMismatch(
            "linearization does not match prior and measurement model".into(),
        ));
    }
    let m = &lin.sqrt_jacobian;
    let predicted = &lin.h_at_mean + &lin.hessian_trace * 0.5;
    let innovation_cov = m * m.transpose() + &lin.hessian_gram * 0.5 + model.noise_cov();
    let cross_cov = &lin.sqrt_cov * m.transpose();
    kalman_correct(prior, &cross_cov, &innovation_cov, &(model.value() - predicted))
}

/// Linearizes at the prior and applies [`ekf2_update`].
pub fn numerical_ekf2_update(prior: &GaussianState, model: &MeasurementModel, gamma: f64) -> Result<GaussianState> {
    let sqrt_cov = matrix_sqrt(prior.cov())?;
    let lin = linearize(|x| model.eval(x), prior.mean(), &sqrt_cov, gamma)?;
    ekf2_update(prior, model, &lin)
}

/// Second-order prediction through a nonlinear transition:
/// `μ⁻ = f(μ) + ½ξ`, `P⁻ = MMᵀ + ½Ξ + W`.
pub fn ekf2_predict<F>(prior: &GaussianState, f: F, noise_cov: &DMatrix<f64>, gamma: f64) -> Result<GaussianState>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sqrt_cov = matrix_sqrt(prior.cov())?;
    let lin = linearize(f, prior.mean(), &sqrt_cov, gamma)?;
    let n = lin.output_dim();
    if noise_cov.shape() != (n, n) {
        return Err(Error::DimensionMismatch("transition noise covariance has wrong size".into()));
    }
    let m = &lin.sqrt_jacobian;
    let mean = &lin.h_at_mean + &lin.hessian_trace * 0.5;
    let cov = m * m.transpose() + &lin.hessian_gram * 0.5 + noise_cov;
    GaussianState::new(mean, symmetrize(&cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn scalar_state(mean: f64, var: f64) -> GaussianState {
        GaussianState::new(scalar(mean), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn fig4(x: &DVector<f64>) -> DVector<f64> {
        let x = x[0];
        DVector::from_vec(vec![x * x - 2.0 * x - 4.0, -x * x + 1.5])
    }

    #[test]
    fn linear_function_has_no_second_order_terms() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let l = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.5, 1.0, 0.0, -0.3, 0.2, 0.7]);
        let lin = linearize(|x| &a * x, &mean, &l, DEFAULT_GAMMA).unwrap();
        assert!((&lin.sqrt_jacobian - &a * &l).abs().max() < 1e-12);
        for q in &lin.sqrt_hessians {
            assert!(q.abs().max() < 1e-12);
        }
        assert!(lin.hessian_trace.abs().max() < 1e-12);
        assert!(lin.hessian_gram.abs().max() < 1e-20);
        assert_eq!(lin.evaluations, 1 + 2 * 3 + 3);
    }

    #[test]
    fn two_element_polynomial_at_unit_prior() {
        let lin = linearize(fig4, &scalar(1.0), &DMatrix::identity(1, 1), DEFAULT_GAMMA).unwrap();
        // analytic: J(1) = [0, -2], H = [2, -2], P = 1
        assert!((lin.sqrt_jacobian[(0, 0)]).abs() < 1e-12);
        assert!((lin.sqrt_jacobian[(1, 0)] + 2.0).abs() < 1e-12);
        assert!((lin.sqrt_hessians[0][(0, 0)] - 2.0).abs() < 1e-12);
        assert!((lin.sqrt_hessians[1][(0, 0)] + 2.0).abs() < 1e-12);
        assert!((lin.hessian_trace - DVector::from_vec(vec![2.0, -2.0])).abs().max() < 1e-12);
        let gram = DMatrix::from_row_slice(2, 2, &[4.0, -4.0, -4.0, 4.0]);
        assert!((&lin.hessian_gram - gram).abs().max() < 1e-11);
    }

    #[test]
    fn trace_and_gram_are_built_from_q() {
        let h = |x: &DVector<f64>| DVector::from_vec(vec![x[0].sin() * x[1], x[0].exp(), x[1].powi(3)]);
        let l = DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.2, 0.4]);
        let lin = linearize(h, &DVector::from_vec(vec![0.1, 0.5]), &l, DEFAULT_GAMMA).unwrap();
        for i in 0..3 {
            assert_eq!(lin.hessian_trace[i], lin.sqrt_hessians[i].trace());
            for j in 0..3 {
                let direct = (&lin.sqrt_hessians[i] * &lin.sqrt_hessians[j]).trace();
                assert!((lin.hessian_gram[(i, j)] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let h = |x: &DVector<f64>| scalar(x[0].ln());
        let err = linearize(h, &scalar(1.0), &DMatrix::identity(1, 1), DEFAULT_GAMMA).unwrap_err();
        match err {
            Error::NonFiniteEvaluation { probe, .. } => assert_eq!(probe, "-delta0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(linearize(fig4, &scalar(1.0), &DMatrix::identity(1, 1), 0.0).is_err());
    }

    #[test]
    fn linear_update_is_exact_kalman() {
        let model = MeasurementModel::linear(DMatrix::identity(1, 1), scalar(0.0), DMatrix::identity(1, 1)).unwrap();
        let post = numerical_ekf2_update(&scalar_state(0.0, 1.0), &model, DEFAULT_GAMMA).unwrap();
        assert!(post.mean()[0].abs() < 1e-15);
        assert!((post.cov()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transformed_linear_element_update() {
        let s2 = 2f64.sqrt();
        let model = MeasurementModel::new(
            Arc::new(move |x: &DVector<f64>| scalar(s2 * (-x[0] - 1.25))),
            scalar(0.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let post = numerical_ekf2_update(&scalar_state(1.0, 1.0), &model, DEFAULT_GAMMA).unwrap();
        assert!((post.mean()[0] + 0.5).abs() < 1e-12);
        assert!((post.cov()[(0, 0)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_at_stationary_point_leaves_prior() {
        let model = MeasurementModel::new(
            Arc::new(|x: &DVector<f64>| scalar(x[0] * x[0])),
            scalar(1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let prior = scalar_state(0.0, 1.0);
        let lin = linearize(|x| model.eval(x), prior.mean(), &DMatrix::identity(1, 1), DEFAULT_GAMMA).unwrap();
        // ŷ = h(0) + ½·tr Q = 1; S = 0 + ½·tr(Q²) + R = 2 + 1
        assert!((lin.h_at_mean[0] + 0.5 * lin.hessian_trace[0] - 1.0).abs() < 1e-12);
        assert!((0.5 * lin.hessian_gram[(0, 0)] + 1.0 - 3.0).abs() < 1e-12);
        let post = ekf2_update(&prior, &model, &lin).unwrap();
        assert!((post.mean()[0]).abs() < 1e-15);
        assert!((post.cov()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linear_prediction_is_exact() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let prior = GaussianState::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let pred = ekf2_predict(&prior, |x| &f * x, &DMatrix::zeros(2, 2), DEFAULT_GAMMA).unwrap();
        assert!((pred.mean() - &f * prior.mean()).abs().max() < 1e-12);
        assert!((pred.cov() - &f * prior.cov() * f.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn squared_gaussian_prediction_matches_chi_square_moments() {
        let pred = ekf2_predict(
            &scalar_state(0.0, 1.0),
            |x| scalar(x[0] * x[0]),
            &DMatrix::zeros(1, 1),
            DEFAULT_GAMMA,
        )
        .unwrap();
        assert!((pred.mean()[0] - 1.0).abs() < 1e-12);
        assert!((pred.cov()[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_order_drops_hessian_terms() {
        let lin = linearize(fig4, &scalar(1.0), &DMatrix::identity(1, 1), DEFAULT_GAMMA)
            .unwrap()
            .first_order();
        assert_eq!(lin.hessian_trace, DVector::zeros(2));
        assert_eq!(lin.hessian_gram, DMatrix::zeros(2, 2));
    }
}
