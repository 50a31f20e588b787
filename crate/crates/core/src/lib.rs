//! Displacement-invariant matching cost learning (DICL) for optical flow.
//!
//! A shared 2D matching net scores every displacement hypothesis of a 7x7
//! window independently, a learned 49x49 projection (DAP) reweights the
//! costs per pixel, and a soft-argmin turns them into sub-pixel flow inside a
//! five-level coarse-to-fine warping pyramid. Gradients come from the small
//! reverse-mode engine in [`diffcore`]; every model is generic over `f32`/`f64`.

pub mod baselinecosts;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diclcost;
pub mod diffcore;
pub mod error;
pub mod featurenet;
pub mod flowdata;
pub mod flowhead;
pub mod pyramidflow;
pub mod scalar;
pub mod train;

pub use error::{DiclError, Result};
pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph64 = diffcore::Graph<f64>;
pub type FlowNet64 = pyramidflow::FlowNet<f64>;
pub type FlowNet32 = pyramidflow::FlowNet<f32>;
pub type FlowSample64 = flowdata::FlowSample<f64>;
pub type FlowSample32 = flowdata::FlowSample<f32>;
