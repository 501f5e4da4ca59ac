//! Pseudo-3D feature pyramid detector for lesions in CT slice stacks, with
//! a CPU autograd tape, synthetic data, depth transfer, evaluation and cost
//! profiling.

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod profiler;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_backbone, build_detector, Architecture, ModelGraph};
pub use tensor::{Tape, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/backbone.md")]
    struct Backbone;
    #[doc = include_str!("../../../book/src/detector.md")]
    struct Detector;
    #[doc = include_str!("../../../book/src/transfer.md")]
    struct Transfer;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/profiling.md")]
    struct Profiling;
}
