//! Layers composed from graph primitives.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Uniform initialisation in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// `x w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Unmasked multi-head self-attention over the rows of `x: [tokens, dim]`.
pub fn mhsa(g: &mut Graph, x: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let dim = g.value(x).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(AutodiffError::Config(format!(
            "model dimension {dim} is not divisible by {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let q = linear(g, x, w.wq, Some(w.bq))?;
    let k = linear(g, x, w.wk, Some(w.bk))?;
    let v = linear(g, x, w.wv, Some(w.bv))?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, joined, w.wo, Some(w.bo))
}
