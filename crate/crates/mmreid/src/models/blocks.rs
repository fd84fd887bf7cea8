//! Transformer building blocks shared by the visual encoder and the LM.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::models::params::ParamSet;

pub const LN_EPS: f64 = 1e-5;
/// FFN hidden width as a multiple of the embed dim.
pub const FFN_MULT: usize = 4;

/// `x @ {prefix}.w + {prefix}.b` with the bias broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, params: &ParamSet, prefix: &str) -> Result<Var> {
    let w = params.bind(tape, &format!("{prefix}.w"))?;
    let b = params.bind(tape, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_broadcast(y, b)
}

pub fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert_randn(format!("{prefix}.w"), vec![d_in, d_out], d_in, rng);
    params.insert_zeros(format!("{prefix}.b"), vec![1, d_out]);
}

pub fn layer_norm(tape: &mut Tape, x: Var, params: &ParamSet, prefix: &str) -> Result<Var> {
    let g = params.bind(tape, &format!("{prefix}.g"))?;
    let b = params.bind(tape, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.insert_full(format!("{prefix}.g"), vec![1, d], 1.0);
    params.insert_zeros(format!("{prefix}.b"), vec![1, d]);
}

/// Multi-head self-attention over `x` `[L, d]`, heads concatenated back to
/// `d` and mixed by an output projection.
fn attention(
    tape: &mut Tape,
    x: Var,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let (_, d) = tape.shape(x);
    let dh = d / heads;
    let q = linear(tape, x, params, &format!("{prefix}.q"))?;
    let k = linear(tape, x, params, &format!("{prefix}.k"))?;
    let v = linear(tape, x, params, &format!("{prefix}.v"))?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = if causal {
            tape.causal_softmax_rows(scaled)?
        } else {
            tape.softmax_rows(scaled)?
        };
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    linear(tape, merged, params, &format!("{prefix}.o"))
}

/// Pre-norm block: `x + attn(ln1(x))` then `x + ffn(ln2(x))` with a GELU
/// between the two FFN linears.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    params: &ParamSet,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let normed = layer_norm(tape, x, params, &format!("{prefix}.ln1"))?;
    let att = attention(tape, normed, params, prefix, heads, causal)?;
    let x = tape.add(x, att)?;

    let normed = layer_norm(tape, x, params, &format!("{prefix}.ln2"))?;
    let h = linear(tape, normed, params, &format!("{prefix}.ffn1"))?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, params, &format!("{prefix}.ffn2"))?;
    tape.add(x, h)
}

pub fn init_transformer_block(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    init_layer_norm(params, &format!("{prefix}.ln1"), d);
    for part in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.{part}"), d, d, rng);
    }
    init_layer_norm(params, &format!("{prefix}.ln2"), d);
    init_linear(params, &format!("{prefix}.ffn1"), d, FFN_MULT * d, rng);
    init_linear(params, &format!("{prefix}.ffn2"), FFN_MULT * d, d, rng);
}
