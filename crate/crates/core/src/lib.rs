//! Field-aware transformer for click-through-rate prediction.

pub mod analysis;
pub mod attention;
pub mod datagen;
pub mod error;
pub mod fields;
pub mod hypernet;
pub mod model;
pub mod numerics;

pub use error::{FatError, Result};
pub use numerics::Matrix;
