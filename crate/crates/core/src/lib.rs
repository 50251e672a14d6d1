//! Illumination-adaptive enhancement: a full-resolution local branch that
//! predicts per-pixel multiply/add maps, a global branch whose learned queries
//! decode a colour matrix and gamma, and the surrounding ISP simulator,
//! training loop and quality metrics.

pub mod error;
pub mod image_io;
pub mod isp;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use iat_tensor as tensor;
