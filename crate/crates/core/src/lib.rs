//! Small-scale video masked autoencoders with shifted patch tokenization and
//! memory-augmented few-shot meta-learning.

pub mod autodiff;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod mann;
pub mod masking;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
