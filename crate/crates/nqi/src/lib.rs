//! Keystroke-dynamics motor assessment.
//!
//! Turns raw key press/release logs into a per-subject motor index (nQi) and
//! provides the statistical machinery to evaluate it against clinical labels:
//!
//! * [`keystroke`] — log and metadata ingestion, validation, typing speed.
//! * [`featurize`] — hold-time windowing and the 7-dimensional feature vector.
//! * [`svr`] — deterministic linear epsilon-SVR trained by dual coordinate
//!   ascent, with KKT certificates.
//! * [`ensemble`] — bagged SVR ensemble, scoring, cross-validation, model
//!   files.
//! * [`evalstats`] — ROC/AUC, bootstrap intervals, paired AUC tests, optimal
//!   cut-points, rank tests, and covariate-adjusted logistic regression.
//! * [`synthcohort`] — synthetic typing cohorts for end-to-end checks.
//! * [`report`] — text/JSON/CSV rendering of evaluation outputs.
//! * [`cli`] — command implementations used by the `nqi` binary.

pub mod cli;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod evalstats;
pub mod featurize;
pub mod fsutil;
pub mod keystroke;
pub mod report;
pub mod seeds;
pub mod svr;
pub mod synthcohort;

pub use config::RunConfig;
pub use error::{Error, Result};
