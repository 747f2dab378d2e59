//! Multi-head soft mixture-of-experts (MAMMOTH) for multiple-instance
//! learning, with baseline layers, MIL aggregators, a trainer, a synthetic
//! bag benchmark and analysis tools.

pub mod autodiff;
pub mod bench;
pub mod cluster;
pub mod error;
pub mod gradcheck;
pub mod igi;
pub mod layers;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
