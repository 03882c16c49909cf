#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pukf::baselines::AnalyticMeasurementModel;
use pukf::{GaussianState, MeasurementModel};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_vector(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn normal_matrix(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// `GGᵀ + floor·I` with Gaussian `G`.
pub fn random_spd(n: usize, floor: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = normal_matrix(n, n, rng);
    &g * g.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_symmetric(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = normal_matrix(n, n, rng);
    (&a + a.transpose()) * 0.5
}

/// Orthonormal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthonormal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    normal_matrix(n, n, rng).qr().q()
}

/// Random invertible matrix with singular values bounded away from zero.
pub fn random_invertible(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    loop {
        let d = normal_matrix(n, n, rng);
        let sv = d.clone().svd(false, false).singular_values;
        if sv.min() > 0.3 && sv.max() < 5.0 {
            return d;
        }
    }
}

pub fn random_prior(n: usize, rng: &mut impl Rng) -> GaussianState {
    GaussianState::new(normal_vector(n, rng), random_spd(n, 0.2, rng)).unwrap()
}

/// `h(x) = a + Bx + ½·(xᵀC_k x)_k` with symmetric `C_k`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub offset: DVector<f64>,
    pub linear: DMatrix<f64>,
    pub curvature: Vec<DMatrix<f64>>,
}

impl Quadratic {
    pub fn random(n: usize, d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            offset: normal_vector(d, rng),
            linear: normal_matrix(d, n, rng),
            curvature: (0..d).map(|_| random_symmetric(n, rng) * scale).collect(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let quad = DVector::from_iterator(self.offset.len(), self.curvature.iter().map(|c| 0.5 * x.dot(&(c * x))));
        &self.offset + &self.linear * x + quad
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.linear.clone();
        for (k, c) in self.curvature.iter().enumerate() {
            let row = c * x;
            for i in 0..x.len() {
                j[(k, i)] += row[i];
            }
        }
        j
    }

    /// Model with every output replaced by `Σ_k T_ik h_k`.
    pub fn mixed(&self, t: &DMatrix<f64>) -> Self {
        Self {
            offset: t * &self.offset,
            linear: t * &self.linear,
            curvature: (0..t.nrows())
                .map(|i| {
                    self.curvature
                        .iter()
                        .enumerate()
                        .map(|(k, c)| c * t[(i, k)])
                        .fold(DMatrix::zeros(self.linear.ncols(), self.linear.ncols()), |a, b| a + b)
                })
                .collect(),
        }
    }

    pub fn model(&self, y: DVector<f64>, r: DMatrix<f64>) -> AnalyticMeasurementModel {
        let q = self.clone();
        let qj = self.clone();
        let hs = self.curvature.clone();
        AnalyticMeasurementModel::new(
            MeasurementModel::new(Arc::new(move |x| q.eval(x)), y, r).unwrap(),
            Arc::new(move |x| qj.jacobian(x)),
            Arc::new(move |_| hs.clone()),
        )
    }
}

/// Textbook Kalman update, written without the library's helpers.
pub fn kalman(prior: &GaussianState, h: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let p = prior.cov();
    let s = h * p * h.transpose() + r;
    let k = p * h.transpose() * s.try_inverse().unwrap();
    let mean = prior.mean() + &k * (y - h * prior.mean());
    let n = p.nrows();
    let cov = (DMatrix::identity(n, n) - &k * h) * p;
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// `‖a − b‖_max ≤ tol·max(1, ‖b‖_max)`.
pub fn close_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let scale = b.amax().max(1.0);
    (a - b).amax() <= tol * scale
}

pub fn close_vec(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    let scale = b.amax().max(1.0);
    (a - b).amax() <= tol * scale
}

pub fn same_state(a: &GaussianState, b: &GaussianState, tol: f64) -> bool {
    close_vec(a.mean(), b.mean(), tol) && close_mat(a.cov(), b.cov(), tol)
}
