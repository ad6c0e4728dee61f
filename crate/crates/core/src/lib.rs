//! A spiking encoder-decoder network for depth from stereo event streams,
//! with its own reverse-mode autodiff, surrogate-gradient training and
//! firing-rate profiling.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; `f64` is used for gradient verification.

pub mod autodiff;
pub mod error;
pub mod evalx;
pub mod events;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod snn;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision network used for training and inference.
pub type Net = model::StereoSpikeNet<f32>;
/// Double-precision network for verification.
pub type Net64 = model::StereoSpikeNet<f64>;
/// Single-precision tape.
pub type Tape = autodiff::Tape<f32>;
