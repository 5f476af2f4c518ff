//! Pre-norm transformer building blocks shared by the image encoder, the MAE
//! reconstruction decoder, and the toy text decoders.

use crate::error::{Error, Result};
use crate::numkernel::{Bound, Graph, ParamStore, Rng, Tensor, Var, LN_EPS};

/// Large negative logit used to block attention to future positions.
const MASKED_LOGIT: f32 = -1e9;

pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let w: Vec<f32> = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    store.insert(
        format!("{prefix}.weight"),
        Tensor::new(vec![fan_in, fan_out], w)?,
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::full(&[dim], 1.0))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))
}

pub(crate) fn init_normal(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    std: f32,
    rng: &mut Rng,
) -> Result<()> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    store.insert(name, Tensor::new(shape.to_vec(), data)?)
}

pub(crate) fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Result<()> {
    init_norm(store, &format!("{prefix}.norm1"), dim)?;
    for proj in ["q", "k", "v", "proj"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), dim, dim, rng)?;
    }
    init_norm(store, &format!("{prefix}.norm2"), dim)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), dim, hidden, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), hidden, dim, rng)
}

/// Parameter count of one block, matching [`init_block`].
pub(crate) fn block_param_count(dim: usize, hidden: usize) -> usize {
    2 * dim + 4 * (dim * dim + dim) + 2 * dim + (dim * hidden + hidden) + (hidden * dim + dim)
}

/// `x · W + b` on a `[N, in]` input.
pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let (sx, sw) = (g.shape(x), g.shape(w));
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(Error::Incompatible(format!(
            "`{prefix}` expects input width {}, got shape {sx:?}",
            sw.first().copied().unwrap_or(0)
        )));
    }
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Two-layer GELU MLP.
pub(crate) fn mlp(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Multi-head self-attention over a `[N, D]` sequence.
pub(crate) fn attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Geometry(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = linear(g, p, &format!("{prefix}.q"), x)?;
    let k = linear(g, p, &format!("{prefix}.k"), x)?;
    let v = linear(g, p, &format!("{prefix}.v"), x)?;
    let q = g.reshape(q, &[n, heads, dh])?;
    let q = g.permute(q, &[1, 0, 2])?;
    let k = g.reshape(k, &[n, heads, dh])?;
    let kt = g.permute(k, &[1, 2, 0])?;
    let v = g.reshape(v, &[n, heads, dh])?;
    let v = g.permute(v, &[1, 0, 2])?;

    let scores = g.bmm(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
    if causal && n > 1 {
        let mut mask = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                mask.data_mut()[i * n + j] = MASKED_LOGIT;
            }
        }
        let mask = g.constant(mask);
        scores = g.add(scores, mask)?;
    }
    let weights = g.softmax(scores);
    let out = g.bmm(weights, v)?;
    let out = g.permute(out, &[1, 0, 2])?;
    let out = g.reshape(out, &[n, d])?;
    linear(g, p, &format!("{prefix}.proj"), out)
}

/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
pub(crate) fn block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.norm1"), x)?;
    let h = attention(g, p, &format!("{prefix}.attn"), h, heads, causal)?;
    let x = g.add(x, h)?;
    let h = norm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(x, h)
}
