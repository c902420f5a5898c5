//! Landmark-guided face inpainting: a landmark predictor, a conditioned
//! generator and patch discriminator, their losses and training loops,
//! evaluation metrics and landmark-conditioned augmentation.

pub mod augment;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluate;
pub mod generator;
pub mod imaging;
pub mod landmark_net;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
