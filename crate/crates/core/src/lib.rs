//! Space-time video resampling at desk scale: a jointly trainable
//! anti-aliasing downsampler and pixel-shuffle upsampler, classical
//! resampling baselines, a Fourier aliasing analyzer, and quality metrics.

pub mod autodiff;
pub mod baselines;
pub mod downsampler;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod parallel;
pub mod spectral;
pub mod tensor;
pub mod trainer;
pub mod upsampler;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
