//! Masked multi-head attention, pre-LN blocks, and the directional towers.
//!
//! Masking is additive: disallowed logits get -1e9 before softmax. The zero
//! sentinel guarantees every query row has a logit of exactly 0, so after max
//! subtraction masked entries underflow to exactly 0.0 probability — masked
//! keys contribute nothing to values or gradients, bit for bit.

use super::{apply_dropout, Bound, ModelConfig, NEG_MASK};
use crate::rng::DropoutCtx;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::Batch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// State at i sees tokens ..=i.
    Forward,
    /// State at i sees tokens i.. .
    Backward,
}

/// Per-layer tower activations for one batch, all [B, T, d].
pub struct TowerState {
    /// layers[0] is the embedded input; layers[l] the output of block l.
    pub layers: Vec<Var>,
    /// Final layer norm over the last block's output.
    pub top: Var,
}

/// Fixed position table: pe[t,2k] = sin(t/10000^(2k/d)), pe[t,2k+1] = cos(same).
pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("position dim {d} must be even")));
    }
    let mut data = vec![T::zero(); len * d];
    for t in 0..len {
        for k in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[t * d + 2 * k] = T::from_f64(angle.sin());
            data[t * d + 2 * k + 1] = T::from_f64(angle.cos());
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Additive attention mask for one tower, [B, T, T+1]; key column 0 is the
/// always-open zero sentinel, real key j sits at column j+1.
pub fn tower_mask<T: Scalar>(batch: &Batch, dir: Direction) -> Tensor<T> {
    let (b, t) = (batch.rows, batch.width);
    let neg = T::from_f64(NEG_MASK);
    let mut m = vec![T::zero(); b * t * (t + 1)];
    for r in 0..b {
        let len = batch.lengths[r];
        for i in 0..t {
            let row = (r * t + i) * (t + 1);
            for j in 0..t {
                let dir_ok = match dir {
                    Direction::Forward => j <= i,
                    Direction::Backward => j >= i,
                };
                let open = dir_ok && j < len && i < len;
                if !open {
                    m[row + 1 + j] = neg;
                }
            }
        }
    }
    Tensor::new(vec![b, t, t + 1], m).expect("mask shape is consistent by construction")
}

/// Multi-head attention with a zero sentinel key/value.
///
/// `queries` [B, Tq, d], `memory` [B, Tm, d], `mask` [B, Tq, Tm+1] additive.
/// Parameters live under `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
pub(super) fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    n_heads: usize,
    queries: Var,
    memory: Var,
    mask: Var,
    attn_dropout: f64,
    drop: &DropoutCtx,
) -> Result<Var> {
    let d = *tape.shape(queries).last().unwrap();
    let dh = d / n_heads;
    let b = tape.shape(queries)[0];
    let tm = tape.shape(memory)[1];

    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let q = tape.matmul(queries, p("wq"), false)?;
    let q = tape.add_row(q, p("bq"))?;
    let k = tape.matmul(memory, p("wk"), false)?;
    let k = tape.add_row(k, p("bk"))?;
    let v = tape.matmul(memory, p("wv"), false)?;
    let v = tape.add_row(v, p("bv"))?;

    let zero_kv = tape.constant(Tensor::zeros(&[b, 1, dh]));
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.narrow(q, 2, h * dh, dh)?;
        let kh = tape.narrow(k, 2, h * dh, dh)?;
        let vh = tape.narrow(v, 2, h * dh, dh)?;
        let kz = tape.concat(&[zero_kv, kh], 1)?;
        let vz = tape.concat(&[zero_kv, vh], 1)?;
        let scores = tape.matmul(qh, kz, true)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let masked = tape.add(scaled, mask)?;
        let probs = tape.softmax(masked, 2)?;
        let probs = apply_dropout(tape, probs, attn_dropout, drop)?;
        debug_assert_eq!(tape.shape(probs), &[b, tape.shape(queries)[1], tm + 1]);
        heads.push(tape.matmul(probs, vz, false)?);
    }
    let ctx = tape.concat(&heads, 2)?;
    let out = tape.matmul(ctx, p("wo"), false)?;
    tape.add_row(out, p("bo"))
}

fn layer_norm_named<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    name: &str,
    x: Var,
) -> Result<Var> {
    tape.layer_norm(x, bound.var(&format!("{name}.g")), bound.var(&format!("{name}.b")), 1e-5)
}

/// ReLU FFN with activation dropout, parameters under `{prefix}.{w1,b1,w2,b2}`.
pub(super) fn ffn<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    relu_dropout: f64,
    drop: &DropoutCtx,
) -> Result<Var> {
    let p = |s: &str| bound.var(&format!("{prefix}.{s}"));
    let h = tape.matmul(x, p("w1"), false)?;
    let h = tape.add_row(h, p("b1"))?;
    let h = tape.relu(h);
    let h = apply_dropout(tape, h, relu_dropout, drop)?;
    let o = tape.matmul(h, p("w2"), false)?;
    tape.add_row(o, p("b2"))
}

/// One pre-LN block: x + drop(attn(LN(x))), then x + drop(ffn(LN(x))).
fn block<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mask: Var,
    drop: &DropoutCtx,
) -> Result<Var> {
    let h = layer_norm_named(tape, bound, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(
        tape,
        bound,
        &format!("{prefix}.attn"),
        cfg.n_heads,
        h,
        h,
        mask,
        cfg.attn_dropout,
        drop,
    )?;
    let a = apply_dropout(tape, a, cfg.dropout, drop)?;
    let x = tape.add(x, a)?;
    let h2 = layer_norm_named(tape, bound, &format!("{prefix}.ln2"), x)?;
    let f = ffn(tape, bound, &format!("{prefix}.ffn"), h2, cfg.relu_dropout, drop)?;
    let f = apply_dropout(tape, f, cfg.dropout, drop)?;
    tape.add(x, f)
}

/// Run one directional tower over embedded inputs `x` [B, T, d].
pub fn tower_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    x: Var,
    dir: Direction,
    batch: &Batch,
    drop: &DropoutCtx,
) -> Result<TowerState> {
    if batch.width > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_len {}",
            batch.width, cfg.max_len
        )));
    }
    let name = match dir {
        Direction::Forward => "fwd",
        Direction::Backward => "bwd",
    };
    let mask = tape.constant(tower_mask::<T>(batch, dir));
    let mut layers = vec![x];
    let mut cur = x;
    for l in 0..cfg.n_blocks {
        cur = block(tape, bound, cfg, &format!("{name}.b{l}"), cur, mask, drop)?;
        layers.push(cur);
    }
    let top = layer_norm_named(tape, bound, &format!("{name}.final_ln"), cur)?;
    Ok(TowerState { layers, top })
}
