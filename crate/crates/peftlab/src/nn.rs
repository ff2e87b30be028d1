//! Transformer building blocks shared by the VQA and diffusion models.
//!
//! Parameters are created under hierarchical names so freezing, LoRA
//! injection, and checkpointing can address them by prefix. Attention
//! projections are always named `query` / `key` / `value` / `output`.

use crate::error::{Error, Result};
use crate::lora::{adapted_matmul, AdapterSet};
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use rand::Rng;

pub const WEIGHT_INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e30;

// ── Parameter initialization ────────────────────────────────────────

pub fn init_linear<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) {
    params.register(
        name,
        Tensor::randn(&[in_dim, out_dim], WEIGHT_INIT_STD, rng),
    );
}

/// Fan-in scaled init (std = 1/sqrt(in_dim)) for networks that need the
/// input signal to survive the first projection.
pub fn init_linear_fan_in<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) {
    let std = 1.0 / (in_dim as f64).sqrt();
    params.register(name, Tensor::randn(&[in_dim, out_dim], std, rng));
}

pub fn init_bias(params: &mut ParamSet, name: &str, dim: usize) {
    params.register(name, Tensor::zeros(&[dim]));
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.register(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
    params.register(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

/// Registers the four projections of one attention block.
pub fn init_attention<R: Rng>(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) {
    for proj in ["query", "key", "value", "output"] {
        init_linear(params, &format!("{prefix}.{proj}"), dim, dim, rng);
    }
}

/// Attention projections with fan-in scaled init.
pub fn init_attention_fan_in<R: Rng>(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) {
    for proj in ["query", "key", "value", "output"] {
        init_linear_fan_in(params, &format!("{prefix}.{proj}"), dim, dim, rng);
    }
}

pub fn init_mlp<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_linear(params, &format!("{prefix}.w1"), dim, hidden, rng);
    init_bias(params, &format!("{prefix}.b1"), hidden);
    init_linear(params, &format!("{prefix}.w2"), hidden, dim, rng);
    init_bias(params, &format!("{prefix}.b2"), dim);
}

/// Feed-forward with fan-in scaled init.
pub fn init_mlp_fan_in<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_linear_fan_in(params, &format!("{prefix}.w1"), dim, hidden, rng);
    init_bias(params, &format!("{prefix}.b1"), hidden);
    init_linear_fan_in(params, &format!("{prefix}.w2"), hidden, dim, rng);
    init_bias(params, &format!("{prefix}.b2"), dim);
}

// ── Forward helpers ─────────────────────────────────────────────────

pub fn linear(
    g: &mut Graph,
    params: &ParamSet,
    adapters: &AdapterSet,
    x: Var,
    name: &str,
) -> Result<Var> {
    adapted_matmul(g, x, params, adapters, name)
}

pub fn linear_with_bias(
    g: &mut Graph,
    params: &ParamSet,
    adapters: &AdapterSet,
    x: Var,
    w_name: &str,
    b_name: &str,
) -> Result<Var> {
    let y = adapted_matmul(g, x, params, adapters, w_name)?;
    let b = g.param(params.get(b_name)?);
    g.add_bias(y, b)
}

pub fn layer_norm(g: &mut Graph, params: &ParamSet, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(params.get(&format!("{prefix}.gamma"))?);
    let beta = g.param(params.get(&format!("{prefix}.beta"))?);
    g.layer_norm(x, gamma, beta)
}

/// Strictly causal additive mask: position t sees keys 0..=t.
fn causal_mask(g: &mut Graph, t: usize) -> Result<Var> {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    g.leaf(data, &[t, t], false)
}

/// Multi-head scaled dot-product attention per `softmax(QK^T/sqrt(d_k))V`,
/// heads concatenated then output-projected. Queries come from `q_in`
/// (T x d), keys/values from `kv_in` (N x d); with `causal` the two must
/// coincide in length.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamSet,
    adapters: &AdapterSet,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = *g
        .shape(q_in)
        .last()
        .ok_or_else(|| Error::Shape("attention on empty shape".into()))?;
    if g.shape(kv_in).last() != Some(&d) {
        return Err(Error::Shape(format!(
            "attention width mismatch: queries {:?} vs keys/values {:?}",
            g.shape(q_in),
            g.shape(kv_in)
        )));
    }
    if d % n_heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} not divisible by {n_heads} heads"
        )));
    }
    let d_k = d / n_heads;
    let t = g.shape(q_in)[0];
    let n = g.shape(kv_in)[0];
    if causal && t != n {
        return Err(Error::Shape(format!(
            "causal attention requires square scores, got {t} x {n}"
        )));
    }

    let q = linear(g, params, adapters, q_in, &format!("{prefix}.query"))?;
    let k = linear(g, params, adapters, kv_in, &format!("{prefix}.key"))?;
    let v = linear(g, params, adapters, kv_in, &format!("{prefix}.value"))?;

    let mask = if causal {
        Some(causal_mask(g, t)?)
    } else {
        None
    };
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.cols(q, h * d_k, d_k)?;
        let kh = g.cols(k, h * d_k, d_k)?;
        let vh = g.cols(v, h * d_k, d_k)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
        if let Some(m) = mask {
            scaled = g.add(scaled, m)?;
        }
        let weights = g.softmax(scaled, 1)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let concat = g.concat_cols(&heads)?;
    linear(g, params, adapters, concat, &format!("{prefix}.output"))
}

/// Two-layer GELU feed-forward.
pub fn mlp(
    g: &mut Graph,
    params: &ParamSet,
    adapters: &AdapterSet,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = linear_with_bias(
        g,
        params,
        adapters,
        x,
        &format!("{prefix}.w1"),
        &format!("{prefix}.b1"),
    )?;
    let h = g.gelu(h);
    linear_with_bias(
        g,
        params,
        adapters,
        h,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
    )
}

/// Sinusoidal position/time features of width `dim`.
pub fn sinusoidal_features(position: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    out
}
