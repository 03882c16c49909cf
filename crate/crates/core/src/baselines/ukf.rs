use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{kalman_correct, matrix_sqrt, GaussianState, MeasurementModel};

/// Scaled unscented transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaPointParams {
    pub alpha: f64,
    pub kappa: f64,
    pub beta: f64,
}

impl Default for SigmaPointParams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            kappa: 0.0,
            beta: 2.0,
        }
    }
}

impl SigmaPointParams {
    /// `λ = α²(n+κ) − n`.
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    /// Mean and covariance weights for `2n+1` points.
    pub fn weights(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::InvalidParameter("alpha must be positive".into()));
        }
        let lambda = self.lambda(n);
        let spread = n as f64 + lambda;
        if !spread.is_finite() || spread <= 0.0 {
            return Err(Error::InvalidParameter(format!("n + lambda = {spread} must be positive")));
        }
        let w0m = lambda / spread;
        let w0c = w0m + 1.0 - self.alpha * self.alpha + self.beta;
        let wi = 0.5 / spread;
        let mut wm = vec![wi; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = w0m;
        wc[0] = w0c;
        Ok((wm, wc))
    }
}

/// Predicted moments of `h(x)` for `x ~ prior`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnscentedMoments {
    pub mean: DVector<f64>,
    /// Covariance of `h(x)`, without measurement noise.
    pub cov: DMatrix<f64>,
    /// Cross covariance of `x` and `h(x)`.
    pub cross_cov: DMatrix<f64>,
}

pub fn unscented_moments<F>(prior: &GaussianState, h: F, params: &SigmaPointParams) -> Result<UnscentedMoments>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = prior.dim();
    let (wm, wc) = params.weights(n)?;
    let scale = (n as f64 + params.lambda(n)).sqrt();
    let root = matrix_sqrt(prior.cov())? * scale;
    let mu = prior.mean();

    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mu.clone());
    for i in 0..n {
        points.push(mu + root.column(i));
    }
    for i in 0..n {
        points.push(mu - root.column(i));
    }
    let outputs: Vec<DVector<f64>> = points.iter().map(&h).collect();
    if let Some(bad) = outputs.iter().position(|y| y.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteEvaluation {
            probe: format!("sigma point {bad}"),
            point: points[bad].iter().copied().collect(),
        });
    }
    let d = outputs[0].len();
    let mean = outputs.iter().zip(&wm).fold(DVector::zeros(d), |acc, (y, w)| acc + y * *w);

    let mut cov = DMatrix::zeros(d, d);
    let mut cross_cov = DMatrix::zeros(n, d);
    for ((p, y), w) in points.iter().zip(&outputs).zip(&wc) {
        let dy = y - &mean;
        let dx = p - mu;
        cov += &dy * dy.transpose() * *w;
        cross_cov += dx * dy.transpose() * *w;
    }
    Ok(UnscentedMoments { mean, cov, cross_cov })
}

/// Unscented Kalman filter measurement update with `2n+1` sigma points.
pub fn ukf_update(prior: &GaussianState, model: &MeasurementModel, params: &SigmaPointParams) -> Result<GaussianState> {
    let m = unscented_moments(prior, |x| model.eval(x), params)?;
    let innovation_cov = m.cov + model.noise_cov();
    kalman_correct(prior, &m.cross_cov, &innovation_cov, &(model.value() - m.mean))
}
