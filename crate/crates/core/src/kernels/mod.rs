//! Mixture kernels, base measures and conjugate updates.
//!
//! A [`Model`] is a product of independent kernel blocks, each covering a
//! disjoint set of variables (location coordinates and marks). Every block
//! pairs a kernel family with its base measure; the mixture component
//! parameters are one [`BlockParams`] per block.

mod beta;
mod gaussian;
mod marks;
mod model;
mod sarmanov;
mod uniform_scale;

pub use beta::{beta_kernel_cdf, beta_pdf, beta_shapes, ln_beta_pdf};
pub use gaussian::{
    ln_logit_normal_pdf, logit_normal_cdf, logit_normal_pdf, GaussianStats, NormalInvWishart,
    StudentT, Transform, MAX_DIM,
};
pub use marks::{ln_gamma_poisson_marginal, ln_mark_kernel_pdf, ln_trunc_poisson, mark_kernel_pdf, MarkKernel};
pub use model::*;
pub use sarmanov::{ln_sarmanov_beta_pdf, rho_bounds, sarmanov_beta_pdf, SarmanovParams};
pub use uniform_scale::{ln_uniform_scale_pdf, uniform_scale_cdf, uniform_scale_pdf, Direction};
