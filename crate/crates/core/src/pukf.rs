//! Partitioned update Kalman filter.
//!
//! Each round linearizes the remaining measurement at the current estimate,
//! decorrelates it so that its elements are ordered by nonlinearity, applies
//! a second-order update with the leading elements whose nonlinearity is
//! below the threshold (at least one), and carries the rest over to the next
//! round with white noise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::decorrelation::decorrelate_whitened;
use crate::error::{Error, Result};
use crate::gaussian::{kalman_correct, matrix_sqrt, symmetrize, GaussianState, LinearStateModel, MeasurementModel};
use crate::linearization::{linearize, DEFAULT_GAMMA};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PukfConfig {
    /// Elements with nonlinearity at or below this are processed together.
    /// `-inf` processes one element per round, `+inf` gives a single
    /// second-order update.
    pub threshold: f64,
    pub gamma: f64,
    /// Safeguard on the number of rounds; `None` means the measurement
    /// dimension.
    pub max_rounds: Option<usize>,
}

impl Default for PukfConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            gamma: DEFAULT_GAMMA,
            max_rounds: None,
        }
    }
}

impl PukfConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        Self {
            threshold,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() {
            return Err(Error::InvalidParameter("threshold is NaN".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.max_rounds == Some(0) {
            return Err(Error::InvalidParameter("max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// One partial update.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// Ascending nonlinearities of the measurement remaining at round start.
    pub spectrum: DVector<f64>,
    pub split: usize,
    pub posterior: GaussianState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartialUpdateTrace {
    pub rounds: Vec<RoundRecord>,
}

impl PartialUpdateTrace {
    pub fn total_processed(&self) -> usize {
        self.rounds.iter().map(|r| r.split).sum()
    }
}

/// Partitioned measurement update.
pub fn pukf_update(
    prior: &GaussianState,
    model: &MeasurementModel,
    cfg: &PukfConfig,
) -> Result<(GaussianState, PartialUpdateTrace)> {
    cfg.validate()?;
    let d0 = model.dim();
    if d0 == 0 {
        return Err(Error::DimensionMismatch("measurement has no elements".into()));
    }
    let max_rounds = cfg.max_rounds.unwrap_or(d0);

    let sqrt_noise = matrix_sqrt(model.noise_cov())?;
    // after the first round the remaining noise is white
    let mut inv_sqrt_noise = Some(
        sqrt_noise
            .solve_lower_triangular(&DMatrix::identity(d0, d0))
            .ok_or(Error::SingularNoiseSqrt)?,
    );

    let mut state = prior.clone();
    let mut func = model.func().clone();
    let mut value = model.value().clone();
    let mut trace = PartialUpdateTrace::default();

    while !value.is_empty() {
        if trace.rounds.len() >= max_rounds {
            return Err(Error::RoundLimitExceeded(max_rounds));
        }
        let d = value.len();
        let sqrt_cov = matrix_sqrt(state.cov())?;
        let lin = linearize(|x| func(x), state.mean(), &sqrt_cov, cfg.gamma)?;
        let whitened = match &inv_sqrt_noise {
            Some(inv) => symmetrize(&(inv * &lin.hessian_gram * inv.transpose())),
            None => lin.hessian_gram.clone(),
        };
        let dec = decorrelate_whitened(&whitened, inv_sqrt_noise.as_ref(), cfg.threshold)?;
        let k = dec.split;

        let lead = dec.transform.rows(0, k).into_owned();
        let predicted = &lead * (&lin.h_at_mean + &lin.hessian_trace * 0.5);
        let projected = &lead * &lin.sqrt_jacobian;
        let innovation_cov = &projected * projected.transpose()
            + DMatrix::from_diagonal(&dec.spectrum.rows(0, k).into_owned()) * 0.5
            + DMatrix::identity(k, k);
        let cross_cov = &sqrt_cov * projected.transpose();
        let residual = &lead * &value - predicted;
        state = kalman_correct(&state, &cross_cov, &innovation_cov, &residual)?;

        trace.rounds.push(RoundRecord {
            spectrum: dec.spectrum.clone(),
            split: k,
            posterior: state.clone(),
        });

        if k == d {
            break;
        }
        let rest = dec.transform.rows(k, d - k).into_owned();
        value = &rest * &value;
        let inner = func;
        func = Arc::new(move |x| &rest * inner(x));
        inv_sqrt_noise = None;
    }
    Ok((state, trace))
}

/// Exact linear prediction followed by [`pukf_update`].
pub fn pukf_step(
    prior: &GaussianState,
    state_model: &LinearStateModel,
    meas: &MeasurementModel,
    cfg: &PukfConfig,
) -> Result<GaussianState> {
    let predicted = state_model.predict(prior)?;
    pukf_update(&predicted, meas, cfg).map(|(post, _)| post)
}
