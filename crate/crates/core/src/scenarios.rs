//! Simulation setups: a polynomial measurement scenario, two bearings-only
//! tracking geometries, and a purely linear sanity scenario.
//!
//! The first measurement of every track is taken at the initial state drawn
//! from the prior; later steps apply the linear transition first.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::AnalyticMeasurementModel;
use crate::error::{Error, Result};
use crate::gaussian::{matrix_sqrt, GaussianState, LinearStateModel, MeasurementModel};

/// Bearing noise standard deviation: two degrees.
pub const BEARING_STD: f64 = 2.0 * PI / 180.0;

pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_RUNS: usize = 1000;

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `run` under `master`: `splitmix64(master ⊕ splitmix64(run))`.
pub fn run_seed(master: u64, run: u64) -> u64 {
    splitmix64(master ^ splitmix64(run))
}

/// Independent sub-stream of a run seed (truth, particle filters, ...).
pub fn stream_seed(run_seed: u64, stream: u64) -> u64 {
    splitmix64(run_seed ^ splitmix64(stream.wrapping_add(0x5151_5151)))
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioKind {
    /// Six quadratic measurements of a 3-D state with correlated noise.
    Polynomial,
    /// Bearings to each sensor from the position block of a 4-D
    /// constant-velocity state.
    Bearings { sensors: Vec<[f64; 2]> },
    /// The linear part of the polynomial model alone.
    Linear,
}

/// User-facing overrides of a built-in scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensors: Option<Vec<[f64; 2]>>,
    /// Bearing noise standard deviation in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearing_std_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    pub prior: GaussianState,
    pub state_model: LinearStateModel,
    /// Measurement noise covariance.
    pub noise_cov: DMatrix<f64>,
    pub steps: usize,
    pub runs: usize,
    /// State indices of the planar position, when the scenario has one.
    pub position_dims: Option<[usize; 2]>,
}

/// True state and realized measurement at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthStep {
    pub state: DVector<f64>,
    pub measurement: DVector<f64>,
}

pub const SCENARIO_NAMES: [&str; 4] = ["polynomial", "bearings-far-near", "bearings-near-near", "linear"];

/// Builds a scenario by name with optional overrides.
pub fn scenario_by_name(name: &str, overrides: &ScenarioOverrides) -> Result<ScenarioSpec> {
    let mut spec = match name {
        "polynomial" => scenario_polynomial(),
        "bearings-far-near" => scenario_bearings_far_near(),
        "bearings-near-near" => scenario_bearings_near_near(),
        "linear" => scenario_linear(),
        other => return Err(Error::Config(format!("unknown scenario '{other}'"))),
    };
    if let Some(sensors) = &overrides.sensors {
        match &mut spec.kind {
            ScenarioKind::Bearings { sensors: s } => {
                if sensors.is_empty() {
                    return Err(Error::Config("at least one sensor is required".into()));
                }
                *s = sensors.clone();
            }
            _ => return Err(Error::Config(format!("scenario '{name}' has no sensors"))),
        }
    }
    if let ScenarioKind::Bearings { sensors } = &spec.kind {
        let std = overrides.bearing_std_deg.map_or(BEARING_STD, |deg| deg * PI / 180.0);
        if std.is_nan() || std <= 0.0 {
            return Err(Error::Config("bearing noise must be positive".into()));
        }
        spec.noise_cov = DMatrix::identity(sensors.len(), sensors.len()) * (std * std);
    } else if overrides.bearing_std_deg.is_some() {
        return Err(Error::Config(format!("scenario '{name}' has no bearing noise")));
    }
    if let Some(steps) = overrides.steps {
        if steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        spec.steps = steps;
    }
    if let Some(runs) = overrides.runs {
        if runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        spec.runs = runs;
    }
    Ok(spec)
}

fn polynomial_linear_part() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        6,
        3,
        &[
            2.0, 1.0, 1.0, //
            1.0, 2.0, 1.0, //
            1.0, 1.0, 2.0, //
            1.0, 1.0, 1.0, //
            1.0, 1.0, 1.0, //
            1.0, 1.0, 1.0,
        ],
    )
}

/// Coefficient of `x_j²` in output `i`.
fn polynomial_square_part() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        6,
        3,
        &[
            0.5, 0.5, 0.5, //
            0.5, 0.5, 0.5, //
            0.5, 0.5, 0.5, //
            1.0, 0.5, 0.5, //
            0.5, 1.0, 0.5, //
            0.5, 0.5, 1.0,
        ],
    )
}

/// `8I + 1`.
fn polynomial_noise() -> DMatrix<f64> {
    DMatrix::identity(6, 6) * 8.0 + DMatrix::from_element(6, 6, 1.0)
}

/// The polynomial measurement function (noise free).
pub fn polynomial_measurement(x: &DVector<f64>) -> DVector<f64> {
    let sq = x.map(|v| v * v);
    polynomial_linear_part() * x + polynomial_square_part() * sq
}

pub fn scenario_polynomial() -> ScenarioSpec {
    ScenarioSpec {
        name: "polynomial".into(),
        kind: ScenarioKind::Polynomial,
        prior: GaussianState::new(DVector::zeros(3), DMatrix::identity(3, 3) * 16.0).expect("valid prior"),
        state_model: LinearStateModel::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 16.0)
            .expect("valid transition"),
        noise_cov: polynomial_noise(),
        steps: DEFAULT_STEPS,
        runs: DEFAULT_RUNS,
        position_dims: None,
    }
}

pub fn scenario_linear() -> ScenarioSpec {
    ScenarioSpec {
        name: "linear".into(),
        kind: ScenarioKind::Linear,
        ..scenario_polynomial()
    }
}

/// `[[I, I], [0, I]]` on a 2-D position/velocity state.
fn constant_velocity() -> DMatrix<f64> {
    let mut f = DMatrix::identity(4, 4);
    f[(0, 2)] = 1.0;
    f[(1, 3)] = 1.0;
    f
}

fn block_noise(pos: f64, cross: f64, vel: f64) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(4, 4);
    for i in 0..2 {
        w[(i, i)] = pos;
        w[(i + 2, i + 2)] = vel;
        w[(i, i + 2)] = cross;
        w[(i + 2, i)] = cross;
    }
    w
}

fn bearings(name: &str, sensors: Vec<[f64; 2]>, noise: DMatrix<f64>) -> ScenarioSpec {
    let d = sensors.len();
    ScenarioSpec {
        name: name.into(),
        kind: ScenarioKind::Bearings { sensors },
        prior: GaussianState::new(DVector::zeros(4), DMatrix::identity(4, 4) * 10.0).expect("valid prior"),
        state_model: LinearStateModel::new(constant_velocity(), noise).expect("valid transition"),
        noise_cov: DMatrix::identity(d, d) * (BEARING_STD * BEARING_STD),
        steps: DEFAULT_STEPS,
        runs: DEFAULT_RUNS,
        position_dims: Some([0, 1]),
    }
}

/// One sensor close to the prior and one far away, low process noise.
pub fn scenario_bearings_far_near() -> ScenarioSpec {
    bearings(
        "bearings-far-near",
        vec![[4.0, 0.0], [0.0, -40.0]],
        block_noise(1.0 / 300.0, 1.0 / 200.0, 1.0 / 100.0),
    )
}

/// Two sensors close to the prior, higher process noise.
pub fn scenario_bearings_near_near() -> ScenarioSpec {
    bearings(
        "bearings-near-near",
        vec![[3.0, 3.0], [-3.0, 3.0]],
        block_noise(1.0 / 3.0, 1.0 / 2.0, 1.0),
    )
}

fn bearing_to(x: &DVector<f64>, sensor: &[f64; 2]) -> f64 {
    (x[1] - sensor[1]).atan2(x[0] - sensor[0])
}

impl ScenarioSpec {
    pub fn state_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn measurement_dim(&self) -> usize {
        self.noise_cov.nrows()
    }

    /// Noise-free measurement function. Bearings are in `(−π, π]`.
    pub fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ScenarioKind::Polynomial => polynomial_measurement(x),
            ScenarioKind::Linear => polynomial_linear_part() * x,
            ScenarioKind::Bearings { sensors } => {
                DVector::from_iterator(sensors.len(), sensors.iter().map(|s| bearing_to(x, s)))
            }
        }
    }

    /// Adds measurement noise to `measure(x)`; bearings are wrapped.
    pub fn sample_measurement(&self, x: &DVector<f64>, rng: &mut impl Rng) -> Result<DVector<f64>> {
        let d = self.measurement_dim();
        let root = matrix_sqrt(&self.noise_cov)?;
        let z = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        let mut y = self.measure(x) + root * z;
        if matches!(self.kind, ScenarioKind::Bearings { .. }) {
            y.iter_mut().for_each(|v| *v = wrap_angle(*v));
        }
        Ok(y)
    }

    /// Measurement model for a realized value. Bearing outputs take the
    /// branch of the arctangent closest to the realized value, so residuals
    /// are wrapped to `(−π, π]`.
    pub fn measurement_model(&self, value: DVector<f64>) -> Result<AnalyticMeasurementModel> {
        if value.len() != self.measurement_dim() {
            return Err(Error::DimensionMismatch("measurement length does not match scenario".into()));
        }
        let r = self.noise_cov.clone();
        match &self.kind {
            ScenarioKind::Polynomial => {
                let sq = polynomial_square_part();
                let lin = polynomial_linear_part();
                let lin_j = lin.clone();
                let sq_j = sq.clone();
                let sq_h = sq.clone();
                Ok(AnalyticMeasurementModel::new(
                    MeasurementModel::new(Arc::new(polynomial_measurement), value, r)?,
                    Arc::new(move |x: &DVector<f64>| {
                        let mut j = lin_j.clone();
                        for i in 0..6 {
                            for k in 0..3 {
                                j[(i, k)] += 2.0 * sq_j[(i, k)] * x[k];
                            }
                        }
                        j
                    }),
                    Arc::new(move |_: &DVector<f64>| {
                        (0..6)
                            .map(|i| DMatrix::from_diagonal(&(sq_h.row(i).transpose() * 2.0)))
                            .collect()
                    }),
                ))
            }
            ScenarioKind::Linear => {
                let lin = polynomial_linear_part();
                let lin_j = lin.clone();
                Ok(AnalyticMeasurementModel::new(
                    MeasurementModel::linear(lin, value, r)?,
                    Arc::new(move |_| lin_j.clone()),
                    Arc::new(|_| vec![DMatrix::zeros(3, 3); 6]),
                ))
            }
            ScenarioKind::Bearings { sensors } => {
                let n = self.state_dim();
                let s_f = sensors.clone();
                let anchor = value.clone();
                let s_j = sensors.clone();
                let s_h = sensors.clone();
                Ok(AnalyticMeasurementModel::new(
                    MeasurementModel::new(
                        Arc::new(move |x: &DVector<f64>| {
                            DVector::from_iterator(
                                s_f.len(),
                                s_f.iter()
                                    .zip(anchor.iter())
                                    .map(|(s, a)| a + wrap_angle(bearing_to(x, s) - a)),
                            )
                        }),
                        value,
                        r,
                    )?,
                    Arc::new(move |x: &DVector<f64>| {
                        let mut j = DMatrix::zeros(s_j.len(), n);
                        for (k, s) in s_j.iter().enumerate() {
                            let (dx, dy) = (x[0] - s[0], x[1] - s[1]);
                            let r2 = dx * dx + dy * dy;
                            j[(k, 0)] = -dy / r2;
                            j[(k, 1)] = dx / r2;
                        }
                        j
                    }),
                    Arc::new(move |x: &DVector<f64>| {
                        s_h.iter()
                            .map(|s| {
                                let (dx, dy) = (x[0] - s[0], x[1] - s[1]);
                                let r4 = (dx * dx + dy * dy).powi(2);
                                let mut h = DMatrix::zeros(n, n);
                                h[(0, 0)] = 2.0 * dx * dy / r4;
                                h[(1, 1)] = -2.0 * dx * dy / r4;
                                h[(0, 1)] = (dy * dy - dx * dx) / r4;
                                h[(1, 0)] = h[(0, 1)];
                                h
                            })
                            .collect()
                    }),
                ))
            }
        }
    }

    /// Draws a measurement at `x` and wraps it in a model.
    pub fn generate_measurement(&self, x: &DVector<f64>, rng: &mut impl Rng) -> Result<AnalyticMeasurementModel> {
        let y = self.sample_measurement(x, rng)?;
        self.measurement_model(y)
    }
}

/// Ground truth and measurements for one track, fully determined by `seed`.
pub fn simulate_truth(spec: &ScenarioSpec, seed: u64) -> Result<Vec<TruthStep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.state_dim();
    let prior_root = matrix_sqrt(spec.prior.cov())?;
    let noise_root = matrix_sqrt(spec.state_model.noise_cov())?;
    let draw = |rng: &mut ChaCha8Rng| DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));

    let mut x = spec.prior.mean() + &prior_root * draw(&mut rng);
    let mut out = Vec::with_capacity(spec.steps);
    for t in 0..spec.steps {
        if t > 0 {
            x = spec.state_model.transition() * &x + &noise_root * draw(&mut rng);
        }
        let measurement = spec.sample_measurement(&x, &mut rng)?;
        out.push(TruthStep {
            state: x.clone(),
            measurement,
        });
    }
    Ok(out)
}
