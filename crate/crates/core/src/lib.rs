//! Latent phase-shift rollback: detect abrupt reversals of a decoder's
//! residual-stream direction during generation, roll the KV cache back one
//! step, and re-decode with a steering vector added at the monitored layer.

pub mod calibration;
pub mod detector;
pub mod engine;
pub mod error;
pub mod eval;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod steering;

pub use error::{LpsrError, Result};
