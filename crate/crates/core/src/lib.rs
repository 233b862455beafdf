//! Explainable multilabel audio segmentation with an NMF-constrained proxy.

pub mod classes;
pub mod corpus;
pub mod distill;
pub mod dsp;
pub mod error;
pub mod evalseg;
pub mod explain;
pub mod nmf;
pub mod segnet;
pub mod tensor;

pub use classes::{Class, NUM_CLASSES};
pub use error::{Error, Result};
