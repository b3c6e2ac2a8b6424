//! Multi-task liver-tumour segmentation, enhancement regression and
//! classification from four-phase dynamic images, trained on synthetic
//! contrast-kinetics phantoms.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Buffers, ParameterSet, Tensor};
