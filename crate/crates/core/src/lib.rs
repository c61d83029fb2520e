//! Conformal prediction and conformal training toolkit.
//!
//! The crate is organized around a small feedforward softmax classifier and
//! the pieces needed to train and calibrate it for small prediction sets:
//!
//! - [`core_math`]: smoothed indicator, pinball loss, empirical quantiles.
//! - [`scores`]: HPS / APS / RAPS conformity scores.
//! - [`model`]: MLP classifier with exact analytic gradients.
//! - [`losses`]: cross-entropy, DM conformal alignment, quantile regression,
//!   ConfTr-SA and CUT training objectives.
//! - [`trainer`]: CE / ConfTr / CUT / DPSM training loops with per-epoch
//!   diagnostic traces.
//! - [`conformal`]: split conformal calibration and prediction sets.
//! - [`metrics`]: MargCov, set sizes, CovGap, SSCV, WSC.
//! - [`theory`]: mini-batch quantile distribution, error-scaling experiments,
//!   Holderian error bound probes and related diagnostics.
//! - [`data`]: synthetic Gaussian-mixture generation, CSV I/O, splitting.
//! - [`run`]: config / manifest plumbing shared with the CLI binary.

pub mod conformal;
pub mod core_math;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod run;
pub mod scores;
pub mod seeding;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
