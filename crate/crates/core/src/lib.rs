//! Multimodal stock-direction forecasting.
//!
//! Hourly OHLC bars are turned into one of three model inputs (normalized
//! numeric features, serialized text records or rendered line charts),
//! encoded into fixed-width embedding sequences and classified by LSTM heads.
//! Predictions are replayed as six-hour trades and scored with F1, MCC,
//! balanced accuracy, per-direction precision and pip balance.

pub mod analysis;
pub mod autograd;
pub mod baselines;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod forecaster;
pub mod market_data;
pub mod pipeline;
pub mod representation;

pub use error::{Error, Result};
