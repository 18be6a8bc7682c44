//! Scaled dot-product, multi-head and low-rank projected attention.
//!
//! Tensors carry arbitrary leading batch axes. Per-head tensors are laid out
//! `[.., h, n, d]`.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive bias applied to masked scores.
pub const MASK_BIAS: f64 = -1e9;

thread_local! {
    static PEAK_WEIGHT_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Reset the per-thread record of the largest attention weight matrix.
pub fn reset_attention_probe() {
    PEAK_WEIGHT_BYTES.with(|c| c.set(0));
}

/// Bytes of the largest per-head attention weight matrix materialized on this
/// thread since the last reset (`n_q x n` for full, `n_q x p` for projected).
pub fn attention_probe_peak() -> usize {
    PEAK_WEIGHT_BYTES.with(|c| c.get())
}

pub(crate) fn record_weight_buffer(rows: usize, cols: usize) {
    let bytes = rows * cols * std::mem::size_of::<f64>();
    PEAK_WEIGHT_BYTES.with(|c| c.set(c.get().max(bytes)));
}

/// Boolean attention mask, `allowed[i * n + j]` for query `i` and key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::invalid("mask size does not match its dimensions"));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a)) {
            return Err(Error::invalid(format!("attention mask row {r} masks every key")));
        }
        Ok(Mask { rows, cols, allowed })
    }

    /// Query `i` may attend to keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
        Mask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    fn bias(&self) -> Result<Tensor> {
        Tensor::new(
            &[self.rows, self.cols],
            self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }).collect(),
        )
    }
}

fn last2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., a, b] => Ok((*a, *b)),
        _ => Err(Error::shape("attention", shape, &[])),
    }
}

/// `softmax(q k^T / sqrt(d_k) + mask) v` over the last two axes.
///
/// `q: [.., n_q, d_k]`, `k: [.., n, d_k]`, `v: [.., n, d_v]`.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
    let (nq, dk) = last2(tape.shape(q))?;
    let (n, dk2) = last2(tape.shape(k))?;
    let (n2, _) = last2(tape.shape(v))?;
    if dk != dk2 || n != n2 {
        return Err(Error::shape("attention", tape.shape(q), tape.shape(k)));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    if let Some(mask) = mask {
        if mask.rows != nq || mask.cols != n {
            return Err(Error::shape("attention mask", &[mask.rows, mask.cols], &[nq, n]));
        }
        let bias = tape.constant(mask.bias()?);
        scores = tape.add_broadcast(scores, bias)?;
    }
    let weights = tape.softmax(scores)?;
    record_weight_buffer(nq, n);
    tape.matmul(weights, v)
}

/// Attention against keys and values that were already compressed to `p` slots.
///
/// `q: [.., n_q, d_k]`, `kp: [.., d_k, p]` (projected keys, transposed),
/// `vp: [.., p, d_v]`.
pub fn projected_attention(tape: &mut Tape, q: Var, kp: Var, vp: Var) -> Result<Var> {
    let (nq, dk) = last2(tape.shape(q))?;
    let (dk2, p) = last2(tape.shape(kp))?;
    if dk != dk2 || last2(tape.shape(vp))?.0 != p {
        return Err(Error::shape("projected attention", tape.shape(q), tape.shape(kp)));
    }
    let scores = tape.matmul(q, kp)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax(scores)?;
    record_weight_buffer(nq, p);
    tape.matmul(weights, vp)
}

/// Compress per-head keys and values along the sequence axis.
///
/// `k: [.., h, n, d_k]`, `v: [.., h, n, d_v]`, `f`, `g`: `[h, n, p]` per head or
/// `[n, p]` shared. Returns `(k^T f, (v^T g)^T)` shaped `[.., h, d_k, p]` and
/// `[.., h, p, d_v]`.
pub fn project_keys_values(tape: &mut Tape, k: Var, v: Var, f: Var, g: Var) -> Result<(Var, Var)> {
    let (n, _) = last2(tape.shape(k))?;
    for proj in [f, g] {
        let (pn, p) = last2(tape.shape(proj))?;
        if pn != n {
            return Err(Error::shape("projection", tape.shape(k), tape.shape(proj)));
        }
        if p > n {
            return Err(Error::invalid(format!(
                "projected length p={p} exceeds sequence length n={n}"
            )));
        }
    }
    let kt = tape.transpose(k)?;
    let kp = tape.matmul(kt, f)?;
    let vt = tape.transpose(v)?;
    let vg = tape.matmul(vt, g)?;
    let vp = tape.transpose(vg)?;
    Ok((kp, vp))
}

/// Learned weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `[D, h * d_k]`
    pub wq: Var,
    /// `[D, h * d_k]`
    pub wk: Var,
    /// `[D, h * d_v]`
    pub wv: Var,
    /// `[h * d_v, D]`
    pub wo: Var,
    pub heads: usize,
}

/// `[B, n, h * d] -> [B, h, n, d]`
pub fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape("split_heads", &s, &[heads]));
    }
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, n, d] -> [B, n, h * d]`
pub fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("merge_heads", &s, &[]));
    }
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Accept `[n, D]` or `[B, n, D]`; return the batched view and whether it was lifted.
fn batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    let s = tape.shape(x).to_vec();
    match s.len() {
        2 => Ok((tape.reshape(x, &[1, s[0], s[1]])?, true)),
        3 => Ok((x, false)),
        _ => Err(Error::shape("attention input", &s, &[])),
    }
}

fn unbatched(tape: &mut Tape, x: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = tape.shape(x).to_vec();
        tape.reshape(x, &s[1..])
    } else {
        Ok(x)
    }
}

/// Per-head query, key and value projections.
pub fn project_qkv(tape: &mut Tape, xq: Var, xkv: Var, params: &AttentionParams) -> Result<(Var, Var, Var)> {
    let q = tape.matmul(xq, params.wq)?;
    let k = tape.matmul(xkv, params.wk)?;
    let v = tape.matmul(xkv, params.wv)?;
    Ok((
        split_heads(tape, q, params.heads)?,
        split_heads(tape, k, params.heads)?,
        split_heads(tape, v, params.heads)?,
    ))
}

/// Concatenate heads and apply the output projection.
pub fn combine_heads(tape: &mut Tape, heads: Var, params: &AttentionParams) -> Result<Var> {
    let merged = merge_heads(tape, heads)?;
    tape.matmul(merged, params.wo)
}

/// Multi-head attention, `xq: [B?, n_q, D]`, `xkv: [B?, n, D]` -> `[B?, n_q, D]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    xq: Var,
    xkv: Var,
    params: &AttentionParams,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (xq, lifted) = batched(tape, xq)?;
    let (xkv, _) = batched(tape, xkv)?;
    let (q, k, v) = project_qkv(tape, xq, xkv, params)?;
    let heads = scaled_dot_product_attention(tape, q, k, v, mask)?;
    let out = combine_heads(tape, heads, params)?;
    unbatched(tape, out, lifted)
}

/// Multi-head attention with keys and values compressed by `f` and `g`
/// (`[h, n, p]` per head, or `[n, p]` shared by every head).
pub fn linear_attention(tape: &mut Tape, xq: Var, xkv: Var, params: &AttentionParams, f: Var, g: Var) -> Result<Var> {
    let (xq, lifted) = batched(tape, xq)?;
    let (xkv, _) = batched(tape, xkv)?;
    for proj in [f, g] {
        let s = tape.shape(proj);
        if !(s.len() == 2 || (s.len() == 3 && s[0] == params.heads)) {
            return Err(Error::shape("linear_attention projection", s, &[params.heads]));
        }
    }
    let (q, k, v) = project_qkv(tape, xq, xkv, params)?;
    let (kp, vp) = project_keys_values(tape, k, v, f, g)?;
    let heads = projected_attention(tape, q, kp, vp)?;
    let out = combine_heads(tape, heads, params)?;
    unbatched(tape, out, lifted)
}
