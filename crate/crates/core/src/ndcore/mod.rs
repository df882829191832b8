//! Dense tensors, counter-based random streams, convolution and the PTNS
//! file format.

pub mod conv;
pub mod ptns;
pub mod rng;
pub mod tensor;

pub use conv::{conv3d, conv3d_backward, ConvGrads, Padding};
pub use rng::{gaussian, RngStream};
pub use tensor::{pairwise_sum, BinaryOp, ReduceOp, Shape, Tensor};
