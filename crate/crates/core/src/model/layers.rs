use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};

/// `x [M, Din] . w [Din, Dout] + b [Dout]`
pub fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let y = g.matmul(x, w)?;
    g.add_tiled(y, b)
}

/// Shapes of one attention call, kept for instrumentation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    /// `[groups * heads, len, len]` row-stochastic attention weights.
    pub probs: Var,
    pub groups: usize,
    pub len: usize,
    pub heads: usize,
}

impl AttentionRecord {
    /// Score entries counted once per group (heads share the pattern).
    pub fn entries(&self) -> usize {
        self.groups * self.len * self.len
    }
}

/// Self-attention inside each of `groups` consecutive runs of `len` rows of
/// `x [groups * len, D]`; rows never attend across runs.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    groups: usize,
    len: usize,
    heads: usize,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
) -> Result<(Var, AttentionRecord), NumericsError> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let qkv = linear(g, x, qkv_w, qkv_b)?;
    let qkv = g.reshape(qkv, &[groups, len, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let per = groups * heads * len * dh;
    let qkv = g.reshape(qkv, &[3, per])?;
    let mut split = [x; 3];
    for (k, slot) in split.iter_mut().enumerate() {
        let part = g.gather_rows(qkv, &std::sync::Arc::from(vec![k]))?;
        *slot = g.reshape(part, &[groups * heads, len, dh])?;
    }
    let [q, k, v] = split;
    let kt = g.transpose(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, F::lit(1.0 / (dh as f64).sqrt()))?;
    let probs = g.softmax(scores)?;
    let ctx = g.bmm(probs, v)?;
    let ctx = g.reshape(ctx, &[groups, heads, len, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[groups * len, d])?;
    let out = linear(g, ctx, proj_w, proj_b)?;
    Ok((out, AttentionRecord { probs, groups, len, heads }))
}

pub(crate) fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
