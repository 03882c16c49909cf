//! Comparison filters: analytic EKF and EKF2, iterated EKF, recursive update
//! filter, unscented Kalman filter and a bootstrap particle filter.

mod particle;
mod ukf;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{kalman_correct, GaussianState, MeasurementModel};

pub use particle::{bootstrap_pf_step, systematic_resample, ParticleCloud, PfStep};
pub use ukf::{ukf_update, unscented_moments, SigmaPointParams, UnscentedMoments};

pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type HessianFn = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// Measurement model with closed-form Jacobian and per-output Hessians.
#[derive(Clone)]
pub struct AnalyticMeasurementModel {
    model: MeasurementModel,
    jacobian: MatrixFn,
    hessians: HessianFn,
}

impl fmt::Debug for AnalyticMeasurementModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticMeasurementModel")
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl AnalyticMeasurementModel {
    pub fn new(model: MeasurementModel, jacobian: MatrixFn, hessians: HessianFn) -> Self {
        Self {
            model,
            jacobian,
            hessians,
        }
    }

    pub fn model(&self) -> &MeasurementModel {
        &self.model
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }

    pub fn hessians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (self.hessians)(x)
    }

    /// Same model with a different measurement value.
    pub fn with_value(&self, value: DVector<f64>) -> Result<Self> {
        Ok(Self {
            model: MeasurementModel::new(self.model.func().clone(), value, self.model.noise_cov().clone())?,
            jacobian: self.jacobian.clone(),
            hessians: self.hessians.clone(),
        })
    }

    /// Multiplies the model by `transform`: `D·h`, `D·J`, `Σ_k D_ik·H_k`,
    /// `D·y`, `D·R·Dᵀ`.
    pub fn transformed(&self, transform: &DMatrix<f64>) -> Result<Self> {
        let d = self.model.dim();
        if transform.ncols() != d {
            return Err(Error::DimensionMismatch("transform width must equal measurement length".into()));
        }
        let t = transform.clone();
        let func = self.model.func().clone();
        let model = MeasurementModel::new(
            Arc::new(move |x| &t * func(x)),
            transform * self.model.value(),
            transform * self.model.noise_cov() * transform.transpose(),
        )?;
        let t = transform.clone();
        let jac = self.jacobian.clone();
        let t2 = transform.clone();
        let hess = self.hessians.clone();
        Ok(Self {
            model,
            jacobian: Arc::new(move |x| &t * jac(x)),
            hessians: Arc::new(move |x| {
                let hs = hess(x);
                (0..t2.nrows())
                    .map(|i| {
                        hs.iter()
                            .enumerate()
                            .fold(DMatrix::zeros(x.len(), x.len()), |acc, (k, h)| acc + h * t2[(i, k)])
                    })
                    .collect()
            }),
        })
    }
}

fn first_order_update(
    prior: &GaussianState,
    model: &AnalyticMeasurementModel,
    linearization_point: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<GaussianState> {
    let j = model.jacobian(linearization_point);
    let p = prior.cov();
    let predicted = model.model.eval(linearization_point) + &j * (prior.mean() - linearization_point);
    let innovation_cov = &j * p * j.transpose() + noise_cov;
    let cross_cov = p * j.transpose();
    kalman_correct(prior, &cross_cov, &innovation_cov, &(model.model.value() - predicted))
}

/// First-order update linearized at the prior mean.
pub fn ekf_update(prior: &GaussianState, model: &AnalyticMeasurementModel) -> Result<GaussianState> {
    first_order_update(prior, model, prior.mean(), model.model.noise_cov())
}

/// Second-order update with `ξ_i = tr(P·H_i)` and `Ξ_ij = tr(P·H_i·P·H_j)`.
pub fn ekf2_update_analytic(prior: &GaussianState, model: &AnalyticMeasurementModel) -> Result<GaussianState> {
    let mu = prior.mean();
    let p = prior.cov();
    let j = model.jacobian(mu);
    let ph: Vec<DMatrix<f64>> = model.hessians(mu).iter().map(|h| p * h).collect();
    let d = ph.len();
    if d != model.model.dim() {
        return Err(Error::DimensionMismatch("one Hessian per measurement element expected".into()));
    }
    let trace = DVector::from_iterator(d, ph.iter().map(|m| m.trace()));
    let mut gram = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = (&ph[a] * &ph[b]).trace();
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let predicted = model.model.eval(mu) + trace * 0.5;
    let innovation_cov = &j * p * j.transpose() + gram * 0.5 + model.model.noise_cov();
    let cross_cov = p * j.transpose();
    kalman_correct(prior, &cross_cov, &innovation_cov, &(model.model.value() - predicted))
}

/// Iterated EKF: each iteration relinearizes at the previous iterate
/// (Gauss-Newton on the MAP cost). The covariance uses the Jacobian of the
/// last iteration, so one iteration is exactly [`ekf_update`].
pub fn iekf_update(prior: &GaussianState, model: &AnalyticMeasurementModel, iterations: usize) -> Result<GaussianState> {
    if iterations == 0 {
        return Err(Error::InvalidParameter("IEKF needs at least one iteration".into()));
    }
    let mut point = prior.mean().clone();
    let mut post = None;
    for _ in 0..iterations {
        let next = first_order_update(prior, model, &point, model.model.noise_cov())?;
        point = next.mean().clone();
        post = Some(next);
    }
    Ok(post.expect("at least one iteration"))
}

/// Recursive update filter: `steps` first-order updates with noise
/// `steps·R`, each relinearized at the previous partial posterior.
pub fn ruf_update(prior: &GaussianState, model: &AnalyticMeasurementModel, steps: usize) -> Result<GaussianState> {
    if steps == 0 {
        return Err(Error::InvalidParameter("RUF needs at least one step".into()));
    }
    let inflated = model.model.noise_cov() * steps as f64;
    let mut state = prior.clone();
    for _ in 0..steps {
        state = first_order_update(&state, model, &state.mean().clone(), &inflated)?;
    }
    Ok(state)
}
