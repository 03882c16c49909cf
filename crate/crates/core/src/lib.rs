//! Partitioned update Kalman filtering.
//!
//! Numerical second-order linearization of a measurement model, a
//! decorrelating transform that orders measurement elements by their
//! nonlinearity, and a filter that processes the least nonlinear elements
//! first. Reference filters, simulation scenarios, metrics and a seeded
//! Monte-Carlo campaign runner are included for comparisons.

pub mod baselines;
pub mod decorrelation;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod harness;
pub mod linearization;
pub mod par;
pub mod pukf;
pub mod scenarios;

pub use error::{Error, Result};
pub use gaussian::{matrix_sqrt, sym_eig_ascending, GaussianState, LinearStateModel, MeasurementModel, VectorFn};
pub use linearization::{linearize, numerical_ekf2_update, LinearizationSummary, DEFAULT_GAMMA};
pub use pukf::{pukf_step, pukf_update, PartialUpdateTrace, PukfConfig};
