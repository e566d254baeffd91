//! From-scratch MLP with batch normalization: the shared classifier all
//! protocol phases operate on.
//!
//! Architecture: repeated `[Dense -> BatchNorm -> ReLU]` blocks followed by a
//! single-unit `Dense -> Sigmoid` head. The sigmoid output is the probability
//! of the real class. Everything is f64 and deterministic given a seed.

mod adam;
mod backward;
mod batch;
mod forward;
mod loss;
mod params;
mod spec;

pub use adam::{adam_step, AdamState};
pub use backward::backward;
pub use batch::Batch;
pub use forward::{forward, BlockCache, ForwardCache, ForwardMode, ForwardPass, RunningStats};
pub use loss::{bce_loss, entropy_loss};
pub use params::{init_network, Gradients, LayerParams, ParamMask, Parameters, TensorKind};
pub use spec::NetworkSpec;

/// Added to the batch variance before the square root.
pub const BN_EPS: f64 = 1e-5;

/// Running statistics update: `new = (1 - momentum) * old + momentum * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}
