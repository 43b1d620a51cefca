//! Super-resolution of thick-slice MRI volumes with a pooling-free residual
//! 3D U-Net, trained against noisy high-resolution references.

pub mod config;
pub mod degrade;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod rng;
pub mod train;
pub mod volume;

pub use error::{Result, SrnrError};
