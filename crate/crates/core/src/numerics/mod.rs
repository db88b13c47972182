//! Dense-array math substrate: every operation has a forward function and a
//! hand-written backward.

pub mod activation;
pub mod conv;
pub mod fd;
pub mod linear;
pub mod norm;
pub mod sample;
pub mod softmax;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use fd::{finite_diff_grad, max_rel_error, max_rel_error_scaled, rel_errors, rel_errors_scaled, GradCheck};
pub use linear::{linear, linear_backward, LinearGrads};
pub use norm::{layer_norm, layer_norm_backward, LayerNormGrads};
pub use sample::{bilinear_sample, bilinear_sample_backward, SampleGrads};
pub use softmax::{softmax_lastdim, softmax_lastdim_backward};
