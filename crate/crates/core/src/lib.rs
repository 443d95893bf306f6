//! Streaming SGD for convolutional networks.
//!
//! The layers before a chosen split point run tile by tile over the input
//! image. Tile outputs are stitched into the split-layer activation map, the
//! remaining layers run once on that map, and the backward pass re-splits the
//! split-map gradient and recomputes each tile's activations instead of keeping
//! them. Results match whole-image training: the reconstructed map is
//! bit-identical and parameter gradients agree up to summation order.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod data;
pub mod engine;
pub mod equivalence;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod memory;
pub mod network;
pub mod nn;
pub mod planner;
pub mod reference;
pub mod tensor;

pub use engine::{accumulate_minibatch, sgd_step, streaming_step, ParamGrads, StreamingRunRecord};
pub use error::{Error, Result};
pub use geometry::{Interval, Region};
pub use memory::{estimate_streaming, estimate_whole_image, reduction_report, MemoryEstimate};
pub use network::{LayerParams, LayerSpec, NetParams, NetworkSpec};
pub use planner::{build_tile_plan, validate_tile_plan, Grid, Tile, TilePlan};
pub use tensor::{DType, Dims, Scalar, Tensor4};
