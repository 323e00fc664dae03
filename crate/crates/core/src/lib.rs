//! Sparse-view fan-beam CT reconstruction with physics-guided Poisson-flow sampling.

// Negated comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod error;
pub mod fbp;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod poisson;
pub mod scenario;
pub mod tv;

pub use error::{Error, Result};
pub use geometry::{FanBeamGeometry, SystemMatrix, ViewMask};
pub use imaging::{Image, Sinogram, Unit};
