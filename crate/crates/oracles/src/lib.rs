//! Independent reference implementations used only by test suites:
//! central-difference gradients, brute-force convolution, and small
//! statistics helpers. Nothing here calls the tape's backward path.

mod conv_naive;
mod fd;
mod quant_ref;
mod stats;

pub use conv_naive::conv2d_naive;
pub use fd::{check_grads_against, fd_grad, FdReport};
pub use quant_ref::{entropy_ref, nearest_ref, perplexity_ref, rq_ref, sq_posterior_ref};
pub use stats::{mean_and_se, moving_average};
