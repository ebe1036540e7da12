//! Dense numeric kernels with hand-written backward passes.
//!
//! Every kernel is a pure function of its inputs. Reductions over the batch
//! run in row order so that results are bit-reproducible.

mod gradcheck;
mod kernels;
mod matrix;
mod params;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use kernels::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, layer_norm_forward, linear, linear_backward,
    linear_backward_input, softmax_xent, LayerNormOutput, LinearGrads, GELU_CUBIC, GELU_SQRT_2_OVER_PI,
};
pub use matrix::Matrix;
pub use params::{sgd_step, sgd_update, ParamBlock};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
