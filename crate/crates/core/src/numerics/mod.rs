//! Minimal dense tensors with reverse-mode differentiation.

mod graph;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use graph::log_sum_exp;

use crate::error::Result;

/// Masked token-level cross entropy.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    /// `-(1/|Y|) Σ log P(y_i)` over unmasked positions.
    pub loss: Var,
    /// `(1/|Y|) Σ log P(y_i)`, the negation of `loss`.
    pub avg_log_prob: Var,
    /// Per-position `log P(y_i)`.
    pub log_probs: Var,
}

/// Cross entropy of `logits [T×V]` against `targets`; positions whose mask
/// bit is clear are ignored.
pub fn cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<CrossEntropy> {
    let log_probs = g.pick_log_softmax(logits, targets)?;
    let avg_log_prob = g.masked_mean(log_probs, mask)?;
    let loss = g.scale(avg_log_prob, -T::one());
    Ok(CrossEntropy {
        loss,
        avg_log_prob,
        log_probs,
    })
}
