//! Dense tensors, the differentiable operator set and the recording tape.

pub mod conv;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod testutil;

pub use conv::ConvSpec;
pub use graph::{Graph, Var};
pub use kernels::BnState;
pub use params::{BnId, ParamId, ParamStore};
pub use tensor::Tensor;
