//! Dense tensors and reverse-mode automatic differentiation.

mod element;
pub mod gradcheck;
pub mod rng;
mod tape;
mod tensor;

pub use element::{gemm, DType, Element};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheck, GradCheckReport};
pub use rng::Streams;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::{Error, Result};

/// Projection weights of one multi-head self-attention layer. Heads occupy
/// contiguous column groups of the `[D, D]` matrices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `softmax(Q Kᵀ / √d_h) V` per head, concatenated and output-projected.
pub fn multi_head_attention<T: Element>(
    tape: &Tape<T>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(x).last().copied().unwrap_or(0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let q = tape.linear(x, p.wq, Some(p.bq))?;
    let k = tape.linear(x, p.wk, Some(p.bk))?;
    let v = tape.linear(x, p.wv, Some(p.bv))?;
    let a = tape.attention(q, k, v, heads)?;
    tape.linear(a, p.wo, Some(p.bo))
}

/// Cosine similarity of two vectors of equal length.
pub fn cosine_similarity<T: Element>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape("cosine_similarity", &sa, &sb));
    }
    let n: usize = sa.iter().product();
    let a = tape.reshape(a, &[1, n])?;
    let b = tape.reshape(b, &[1, n])?;
    let a = tape.l2_normalize(a)?;
    let b = tape.l2_normalize(b)?;
    let p = tape.mul(a, b)?;
    Ok(tape.sum(p))
}
