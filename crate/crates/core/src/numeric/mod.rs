//! Dense arrays, resampling, seeded randomness and the finite-difference
//! oracle.

mod conv;
mod fdiff;
mod resize;
mod rng;
mod tensor;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use fdiff::{finite_diff_gradient, DEFAULT_STEP};
pub use resize::{flip_horizontal, nearest_index, resize_bilinear};
pub use rng::{derive_seed, Rng};
pub(crate) use tensor::dot;
pub use tensor::{matmul, matmul_nt, matmul_tn, softmax_channels, DType, Element, Tensor};
