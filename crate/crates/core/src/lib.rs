//! Continuous-time recurrent forecasting with derivative-matching losses.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gru;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod ops;
pub mod run;
pub mod spline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
