//! Deterministic dense kernels and gradient-check infrastructure.

pub mod gradcheck;
pub mod movt;
pub mod ops;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport};
pub use ops::{
    avg_pool_2x, bilinear_interpolate, global_avg_pool, matmul, scaled_dot_attention, softmax,
};
pub use tensor::{FeatureMap, Tensor};
