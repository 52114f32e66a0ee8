pub mod bench;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod latent;
pub mod mar;
pub mod mllm;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{AttnMask, Graph, Grads, TrainFilter, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
