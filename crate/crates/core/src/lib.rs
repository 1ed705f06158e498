//! Stability-certified RNN output-feedback controllers trained by projected
//! policy gradient.

pub mod conic;
pub mod error;
pub mod iqc;
pub mod lmi;
pub mod matkit;
pub mod plants;
pub mod rnnctl;
pub mod serde_mat;
pub mod trainer;

pub use error::{Error, Result};
