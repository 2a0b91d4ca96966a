//! Twin cascaded attention captioning decoder with visual grounding, a
//! single-channel baseline, and everything needed to train and score them on
//! a synthetic grounded-scene corpus.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grounding;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
