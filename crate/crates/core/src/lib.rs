//! Retrieval-augmented linear forecasting for time series.
//!
//! The input window is compared against every earlier window of the
//! training series; the continuations of the best matches are blended by a
//! temperature softmax and fused with a channel-shared linear forecaster.

pub mod error;
pub mod eval;
pub mod model;
pub mod retrieval;
pub mod series;
pub mod synthetic;

pub use error::{RaftError, Result};
pub use series::TimeSeries;
