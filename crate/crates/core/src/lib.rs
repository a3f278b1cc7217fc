//! Cost-sensitive learning and background filtering for long-tail predicate
//! classification, with the evaluation measures needed to judge them.
//!
//! The crate is organised bottom-up:
//!
//! * [`cost_model`] turns class frequencies into a misclassification cost
//!   matrix and the positive/negative weight vectors of the weighted loss.
//! * [`loss`] implements the cost-sensitive binary cross entropy together with
//!   the plain BCE and softmax cross-entropy baselines and their gradients.
//! * [`model`] is a small linear / one-hidden-layer classifier trained by SGD.
//! * [`predict`] maps score vectors to decisions (argmax or background
//!   filtering) and ranks per-image triplets.
//! * [`metrics`] holds recall@K, mPCR, precision/F1, calibration error,
//!   confusion matrices and Welch's t-test.
//! * [`data_io`] generates synthetic long-tail datasets and reads/writes
//!   every file format used by the command-line tool.
//! * [`pipeline`] glues the above together for the CLI and the acceptance
//!   suite.

pub mod cli;
pub mod cost_model;
pub mod data_io;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod predict;

pub use error::{Error, Result};
