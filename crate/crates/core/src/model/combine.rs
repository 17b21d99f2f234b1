//! Combination attention: predict token i from both towers without seeing it.
//!
//! Memory is the time-concatenation of the towers' final states
//! [F_1..F_T ; B_1..B_T] plus the zero sentinel. In training mode the mask
//! for target i admits only F_j with j ≤ i-1 and B_j with j ≥ i+1 — every
//! state that excludes token i. The query for target i is built from the
//! nearest admissible states F_{i-1} and B_{i+1}, substituting the zero state
//! where a neighbor does not exist (sequence edges, per-example lengths).
//! Fine-tuning removes the target masking (pad masking stays), turning the
//! same layer into an ordinary bidirectional feature extractor.

use super::attention::{ffn, multi_head_attention, TowerState};
use super::{apply_dropout, Bound, ModelConfig, QueryMode, NEG_MASK};
use crate::rng::DropoutCtx;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::Batch;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Cloze training: token i is masked out of query and memory for target i.
    TrainMasked,
    /// Feature extraction: only pad masking remains.
    FinetuneUnmasked,
}

/// Additive mask over the combination memory, [B, T, 2T+1].
///
/// Column 0 is the zero sentinel; columns 1..=T are F_0..F_{T-1}; columns
/// T+1..=2T are B_0..B_{T-1}. `sabotage` deliberately admits F_i for target
/// i — a planted leak that the invariant checks must catch.
pub fn combine_mask<T: Scalar>(batch: &Batch, mode: CombineMode, sabotage: bool) -> Tensor<T> {
    let (b, t) = (batch.rows, batch.width);
    let w = 2 * t + 1;
    let neg = T::from_f64(NEG_MASK);
    let mut m = vec![T::zero(); b * t * w];
    for r in 0..b {
        let len = batch.lengths[r];
        for i in 0..t {
            let row = (r * t + i) * w;
            for j in 0..t {
                let fwd_ok = match mode {
                    CombineMode::TrainMasked => {
                        if sabotage {
                            j <= i
                        } else {
                            j + 1 <= i
                        }
                    }
                    CombineMode::FinetuneUnmasked => true,
                };
                let bwd_ok = match mode {
                    CombineMode::TrainMasked => j >= i + 1,
                    CombineMode::FinetuneUnmasked => true,
                };
                let real = j < len && i < len;
                if !(fwd_ok && real) {
                    m[row + 1 + j] = neg;
                }
                if !(bwd_ok && real) {
                    m[row + 1 + t + j] = neg;
                }
            }
        }
    }
    Tensor::new(vec![b, t, w], m).expect("mask shape is consistent by construction")
}

/// Shift tower states to the query positions, zeroing missing neighbors.
///
/// Forward query at i is F_{i-1} (zero state at i = 0 and at pad rows);
/// backward query at i is B_{i+1} (zero state at i+1 ≥ length).
fn shifted_queries<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &Batch,
    f_top: Var,
    b_top: Var,
) -> Result<(Var, Var)> {
    let (b, t) = (batch.rows, batch.width);
    let d = *tape.shape(f_top).last().unwrap();
    let zeros_row = tape.constant(Tensor::zeros(&[b, 1, d]));

    let f_shift = if t == 1 {
        tape.constant(Tensor::zeros(&[b, 1, d]))
    } else {
        let head = tape.narrow(f_top, 1, 0, t - 1)?;
        tape.concat(&[zeros_row, head], 1)?
    };
    let b_shift = if t == 1 {
        tape.constant(Tensor::zeros(&[b, 1, d]))
    } else {
        let tail = tape.narrow(b_top, 1, 1, t - 1)?;
        tape.concat(&[tail, zeros_row], 1)?
    };

    let mut f_valid = vec![T::zero(); b * t * d];
    let mut b_valid = vec![T::zero(); b * t * d];
    for r in 0..b {
        let len = batch.lengths[r];
        for i in 0..t {
            let on = |v: &mut [T]| {
                for x in &mut v[(r * t + i) * d..(r * t + i + 1) * d] {
                    *x = T::one();
                }
            };
            if i < len {
                on(&mut f_valid);
            }
            if i + 1 < len {
                on(&mut b_valid);
            }
        }
    }
    let fv = tape.constant(Tensor::new(vec![b, t, d], f_valid)?);
    let bv = tape.constant(Tensor::new(vec![b, t, d], b_valid)?);
    Ok((tape.mul(f_shift, fv)?, tape.mul(b_shift, bv)?))
}

/// Combination block over precomputed tower states; returns features [B, T, d].
pub fn combine_features<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    fwd: &TowerState,
    bwd: &TowerState,
    batch: &Batch,
    mode: CombineMode,
    drop: &DropoutCtx,
) -> Result<Var> {
    let mask = combine_mask::<T>(batch, mode, false);
    combine_features_with_mask(tape, bound, cfg, fwd, bwd, batch, mask, drop)
}

/// Same, but with a caller-supplied mask (used by the invariant checks to
/// plant a deliberate leak).
#[allow(clippy::too_many_arguments)]
pub fn combine_features_with_mask<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    fwd: &TowerState,
    bwd: &TowerState,
    batch: &Batch,
    mask: Tensor<T>,
    drop: &DropoutCtx,
) -> Result<Var> {
    if tape.shape(fwd.top) != tape.shape(bwd.top) {
        return Err(crate::Error::shape(
            "combine",
            tape.shape(fwd.top),
            tape.shape(bwd.top),
        ));
    }
    let (f_q, b_q) = shifted_queries(tape, batch, fwd.top, bwd.top)?;
    let q_base = match cfg.query_mode {
        QueryMode::Sum => tape.add(f_q, b_q)?,
        QueryMode::Concat => {
            let cat = tape.concat(&[f_q, b_q], 2)?;
            let proj = tape.matmul(cat, bound.var("comb.qproj.w"), false)?;
            tape.add_row(proj, bound.var("comb.qproj.b"))?
        }
    };
    let mem = tape.concat(&[fwd.top, bwd.top], 1)?;

    let hq = tape.layer_norm(q_base, bound.var("comb.ln_q.g"), bound.var("comb.ln_q.b"), 1e-5)?;
    let hm = tape.layer_norm(mem, bound.var("comb.ln_m.g"), bound.var("comb.ln_m.b"), 1e-5)?;
    let maskv = tape.constant(mask);
    let a = multi_head_attention(
        tape,
        bound,
        "comb.attn",
        cfg.final_heads,
        hq,
        hm,
        maskv,
        cfg.attn_dropout,
        drop,
    )?;
    let a = apply_dropout(tape, a, cfg.dropout, drop)?;
    let x = tape.add(q_base, a)?;
    let h2 = tape.layer_norm(x, bound.var("comb.ln2.g"), bound.var("comb.ln2.b"), 1e-5)?;
    let f = ffn(tape, bound, "comb.ffn", h2, cfg.relu_dropout, drop)?;
    let f = apply_dropout(tape, f, cfg.dropout, drop)?;
    tape.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_inputs, tower_forward, Direction, Model, QueryMode};
    use crate::testutil::{batch_of, tiny_config, toy_vocab};
    use crate::text::Vocab;

    fn features_for(
        model: &Model<f32>,
        vocab: &Vocab,
        ids: &[u32],
        mode: CombineMode,
        sabotage: bool,
    ) -> Vec<Vec<f32>> {
        let batch = batch_of(&[ids], vocab);
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let drop = crate::rng::DropoutCtx::eval();
        let x = encode_inputs(&mut tape, &bound, &model.config, &batch, &drop).unwrap();
        let f = tower_forward(&mut tape, &bound, &model.config, x, Direction::Forward, &batch, &drop).unwrap();
        let b = tower_forward(&mut tape, &bound, &model.config, x, Direction::Backward, &batch, &drop).unwrap();
        let mask = combine_mask::<f32>(&batch, mode, sabotage);
        let feats =
            combine_features_with_mask(&mut tape, &bound, &model.config, &f, &b, &batch, mask, &drop)
                .unwrap();
        let d = model.config.d_model;
        let data = tape.value(feats).data();
        (0..batch.width)
            .map(|i| data[i * d..(i + 1) * d].to_vec())
            .collect()
    }

    #[test]
    fn train_masked_features_ignore_own_token() {
        let vocab = toy_vocab(16);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 31).unwrap();
        let a: Vec<u32> = vec![5, 6, 7, 8, 9];
        let mut b = a.clone();
        b[2] = 13; // batch position 3 after the marker
        let fa = features_for(&model, &vocab, &a, CombineMode::TrainMasked, false);
        let fb = features_for(&model, &vocab, &b, CombineMode::TrainMasked, false);
        assert_eq!(fa[3], fb[3], "feature at the perturbed position leaked its own token");
        // neighbors must see the change
        assert_ne!(fa[2], fb[2]);
        assert_ne!(fa[4], fb[4]);
    }

    #[test]
    fn unmasked_features_see_own_token() {
        let vocab = toy_vocab(16);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 31).unwrap();
        let a: Vec<u32> = vec![5, 6, 7, 8, 9];
        let mut b = a.clone();
        b[2] = 13;
        let fa = features_for(&model, &vocab, &a, CombineMode::FinetuneUnmasked, false);
        let fb = features_for(&model, &vocab, &b, CombineMode::FinetuneUnmasked, false);
        assert_ne!(fa[3], fb[3], "unmasked mode should expose the token to its own position");
    }

    #[test]
    fn sabotaged_mask_leaks() {
        let vocab = toy_vocab(16);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 31).unwrap();
        let a: Vec<u32> = vec![5, 6, 7, 8, 9];
        let mut b = a.clone();
        b[2] = 13;
        let fa = features_for(&model, &vocab, &a, CombineMode::TrainMasked, true);
        let fb = features_for(&model, &vocab, &b, CombineMode::TrainMasked, true);
        assert_ne!(fa[3], fb[3], "planted leak went undetected");
    }

    #[test]
    fn single_content_token_is_finite_in_both_query_modes() {
        let vocab = toy_vocab(8);
        for qm in [QueryMode::Sum, QueryMode::Concat] {
            let mut cfg = tiny_config(vocab.len());
            cfg.query_mode = qm;
            let model = Model::<f32>::init(cfg, 9).unwrap();
            let feats = features_for(&model, &vocab, &[5], CombineMode::TrainMasked, false);
            for row in &feats {
                assert!(row.iter().all(|v| v.is_finite()), "non-finite feature under {qm:?}");
            }
        }
    }

    #[test]
    fn pad_rows_leave_real_features_unchanged() {
        let vocab = toy_vocab(16);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 77).unwrap();
        let short: Vec<u32> = vec![5, 6, 7];
        let long: Vec<u32> = vec![8, 9, 10, 11, 12, 13];
        let solo = {
            let batch = batch_of(&[&short], &vocab);
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let drop = crate::rng::DropoutCtx::eval();
            let x = encode_inputs(&mut tape, &bound, &model.config, &batch, &drop).unwrap();
            let f = tower_forward(&mut tape, &bound, &model.config, x, Direction::Forward, &batch, &drop).unwrap();
            let b = tower_forward(&mut tape, &bound, &model.config, x, Direction::Backward, &batch, &drop).unwrap();
            let feats = combine_features(&mut tape, &bound, &model.config, &f, &b, &batch, CombineMode::TrainMasked, &drop).unwrap();
            tape.value(feats).data()[..5 * model.config.d_model].to_vec()
        };
        let padded = {
            let batch = batch_of(&[&short, &long], &vocab);
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let drop = crate::rng::DropoutCtx::eval();
            let x = encode_inputs(&mut tape, &bound, &model.config, &batch, &drop).unwrap();
            let f = tower_forward(&mut tape, &bound, &model.config, x, Direction::Forward, &batch, &drop).unwrap();
            let b = tower_forward(&mut tape, &bound, &model.config, x, Direction::Backward, &batch, &drop).unwrap();
            let feats = combine_features(&mut tape, &bound, &model.config, &f, &b, &batch, CombineMode::TrainMasked, &drop).unwrap();
            tape.value(feats).data()[..5 * model.config.d_model].to_vec()
        };
        assert_eq!(solo, padded, "padding altered combination features at real positions");
    }
}
