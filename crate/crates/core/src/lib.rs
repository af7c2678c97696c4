//! Dual-expert attribute attention networks for zero-shot and generalized
//! zero-shot classification: model, objectives, clustering, training,
//! evaluation and dataset I/O.

pub mod clustering;
pub mod dan;
pub mod data;
pub mod dedn;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use dedn::{ClusterPartition, DednModel, Mode, ModelDims};
pub use error::{Error, Result};
pub use tensor::Tensor;
