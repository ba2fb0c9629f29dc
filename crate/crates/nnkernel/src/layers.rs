//! Transformer building blocks over a [`Graph`]. Parameters are addressed
//! by dotted names under a caller-chosen prefix.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ParameterStore, Real};

/// Large negative additive mask value; exp underflows to exactly zero.
pub const MASKED: f64 = -1e9;

pub fn init_linear<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.init_xavier(&format!("{name}.w"), d_in, d_out, rng)?;
    store.init_const(&format!("{name}.b"), &[d_out], 0.0)
}

/// `x · W + b` for `x: n×d_in`.
pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParameterStore, name: &str, d: usize) -> Result<()> {
    store.init_const(&format!("{name}.g"), &[d], 1.0)?;
    store.init_const(&format!("{name}.b"), &[d], 0.0)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.g"))?;
    let beta = g.param(store, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn init_attention<R: Rng>(store: &mut ParameterStore, name: &str, d: usize, rng: &mut R) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), d, d, rng)?;
    }
    Ok(())
}

/// softmax(q·kᵀ/√d_k + mask)·v for one head. Returns the output and the
/// attention probabilities node.
pub fn scaled_dot_product_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let dk = g.shape(q)[1];
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::of(1.0 / (dk as f64).sqrt()))?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let probs = g.softmax(scores, 1)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// Multi-head attention from `query` (Sq×d) onto `memory` (Sk×d).
/// Returns the projected output and one probability node per head.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore,
    name: &str,
    query: Var,
    memory: Var,
    n_heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(query)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(invalid("multi_head_attention", format!("d={d} not divisible by {n_heads} heads")));
    }
    let hd = d / n_heads;
    let q = linear(g, store, &format!("{name}.q"), query)?;
    let k = linear(g, store, &format!("{name}.k"), memory)?;
    let v = linear(g, store, &format!("{name}.v"), memory)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let (out, p) = scaled_dot_product_attention(g, qh, kh, vh, mask)?;
        heads.push(out);
        probs.push(p);
    }
    let merged = if n_heads == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let out = linear(g, store, &format!("{name}.o"), merged)?;
    Ok((out, probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

pub fn init_feed_forward<R: Rng>(
    store: &mut ParameterStore,
    name: &str,
    d: usize,
    ff: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{name}.fc1"), d, ff, rng)?;
    init_linear(store, &format!("{name}.fc2"), ff, d, rng)
}

pub fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParameterStore,
    name: &str,
    x: Var,
    act: Activation,
    dropout: f64,
) -> Result<Var> {
    let h = linear(g, store, &format!("{name}.fc1"), x)?;
    let h = match act {
        Activation::Relu => g.relu(h)?,
        Activation::Gelu => g.gelu(h)?,
    };
    let h = g.dropout(h, dropout)?;
    linear(g, store, &format!("{name}.fc2"), h)
}

/// Additive causal mask for `n` positions: entry (i, j) is masked for j > i.
pub fn causal_mask<T: Real>(g: &mut Graph<T>, n: usize) -> Result<Var> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = T::of(MASKED);
        }
    }
    g.constant(&[n, n], m)
}
