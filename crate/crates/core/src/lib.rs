//! Two-stage transferable adversarial attacks against small fully
//! convolutional segmentation models, with the data, training and
//! evaluation machinery needed to measure transfer between them.

pub mod attacks;
pub mod error;
pub mod harness;
pub mod models;
pub mod synthdata;
pub mod tensorcore;

pub use error::{Error, Result};
