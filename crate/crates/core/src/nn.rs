//! Transformer building blocks over named parameters.
//!
//! Layers are stateless: each takes a [`Binding`] and a name prefix and
//! reads `{prefix}.w`, `{prefix}.b`, and so on. Initializers write the
//! same names into a [`ParamStore`].

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{AttnMask, Graph, Var};
use crate::params::{glorot, Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    din: usize,
    dout: usize,
) {
    p.insert(format!("{prefix}.w"), glorot(rng, &[din, dout], din, dout));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

pub fn init_layer_norm<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, dim: usize) {
    p.insert(format!("{prefix}.g"), Tensor::full(&[dim], T::one()));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

/// `x [n, din] -> x W + b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, bias)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.get(&format!("{prefix}.g"))?;
    let beta = b.get(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, T::of(LN_EPS))
}

/// Attention sublayer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub groups: usize,
    pub heads: usize,
}

pub fn init_attention<T: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        init_linear(p, rng, &format!("{prefix}.{part}"), d, d);
    }
}

/// Multi-head attention with input and output projections. Returns the
/// output `[groups*lq, d]` and the node whose attention weights can be read
/// back with [`Graph::attention_weights`].
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    query: Var,
    memory: Var,
    shape: AttnShape,
    mask: &AttnMask,
) -> Result<(Var, Var)> {
    let q = linear(g, b, &format!("{prefix}.q"), query)?;
    let k = linear(g, b, &format!("{prefix}.k"), memory)?;
    let v = linear(g, b, &format!("{prefix}.v"), memory)?;
    let att = g.attention(q, k, v, shape.groups, shape.heads, mask)?;
    let out = linear(g, b, &format!("{prefix}.o"), att)?;
    Ok((out, att))
}

pub fn init_ffn<T: Scalar, R: Rng + ?Sized>(p: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize, hidden: usize) {
    init_linear(p, rng, &format!("{prefix}.1"), d, hidden);
    init_linear(p, rng, &format!("{prefix}.2"), hidden, d);
}

pub fn ffn<T: Scalar>(g: &mut Graph<T>, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{prefix}.1"), x)?;
    let h = g.relu(h)?;
    linear(g, b, &format!("{prefix}.2"), h)
}

pub fn init_encoder_layer<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
) {
    init_layer_norm(p, &format!("{prefix}.ln1"), d);
    init_attention(p, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(p, &format!("{prefix}.ln2"), d);
    init_ffn(p, rng, &format!("{prefix}.ffn"), d, hidden);
}

/// Pre-norm self-attention block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    x: Var,
    shape: AttnShape,
    mask: &AttnMask,
) -> Result<Var> {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let (a, _) = multi_head_attention(g, b, &format!("{prefix}.attn"), h, h, shape, mask)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x)?;
    let f = ffn(g, b, &format!("{prefix}.ffn"), h)?;
    g.add(x, f)
}

pub fn init_decoder_layer<T: Scalar, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
) {
    init_layer_norm(p, &format!("{prefix}.ln1"), d);
    init_attention(p, rng, &format!("{prefix}.cross"), d);
    init_layer_norm(p, &format!("{prefix}.ln2"), d);
    init_ffn(p, rng, &format!("{prefix}.ffn"), d, hidden);
}

/// Pre-norm cross-attention block over an already normalized `memory`.
/// Returns the updated query and the cross-attention node.
pub fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    query: Var,
    memory: Var,
    shape: AttnShape,
    mask: &AttnMask,
) -> Result<(Var, Var)> {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), query)?;
    let (a, att) = multi_head_attention(g, b, &format!("{prefix}.cross"), h, memory, shape, mask)?;
    let y = g.add(query, a)?;
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), y)?;
    let f = ffn(g, b, &format!("{prefix}.ffn"), h)?;
    Ok((g.add(y, f)?, att))
}
