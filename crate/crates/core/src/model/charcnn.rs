//! Character-level token encoder: per-width convolutions over char
//! embeddings, max-over-time pooling, one highway layer, projection to model
//! width. Pooling applies directly to conv outputs, no activation between.

use super::{Bound, ModelConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::CHAR_TABLE_SIZE;
use crate::{Error, Result};

/// Encode `n_tokens` tokens given their padded char id rows, concatenated in
/// `char_ids` (length n_tokens * max_word_len). Returns [n_tokens, d_model].
pub fn char_cnn_encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    char_ids: &[usize],
    n_tokens: usize,
) -> Result<Var> {
    let l = cfg.max_word_len;
    if char_ids.len() != n_tokens * l {
        return Err(Error::shape(
            "char ids",
            &[n_tokens * l],
            &[char_ids.len()],
        ));
    }
    if let Some(&bad) = char_ids.iter().find(|&&c| c >= CHAR_TABLE_SIZE) {
        return Err(Error::Data(format!("char id {bad} outside table of {CHAR_TABLE_SIZE}")));
    }
    let dc = cfg.char_dim;
    let rows = tape.index_select(bound.var("char.table"), char_ids.to_vec())?;
    let x = tape.reshape(rows, vec![n_tokens, l, dc])?;

    let mut pooled = Vec::with_capacity(cfg.char_filters.len());
    for &(w, ch) in &cfg.char_filters {
        let cols = tape.unfold1d(x, w)?;
        let conv = tape.matmul(cols, bound.var(&format!("char.conv{w}.w")), false)?;
        let conv = tape.add_row(conv, bound.var(&format!("char.conv{w}.b")))?;
        let conv = tape.reshape(conv, vec![n_tokens, l - w + 1, ch])?;
        pooled.push(tape.max_pool_time(conv)?);
    }
    let cat = tape.concat(&pooled, 1)?;

    // highway: y = g * relu(Wh x + bh) + (1 - g) * x
    let hpre = tape.matmul(cat, bound.var("char.highway.wh"), false)?;
    let hpre = tape.add_row(hpre, bound.var("char.highway.bh"))?;
    let h = tape.relu(hpre);
    let gpre = tape.matmul(cat, bound.var("char.highway.wg"), false)?;
    let gpre = tape.add_row(gpre, bound.var("char.highway.bg"))?;
    let g = tape.sigmoid(gpre);
    let gh = tape.mul(g, h)?;
    let gshape = tape.shape(g).to_vec();
    let ones = tape.constant(Tensor::full(&gshape, T::one()));
    let neg_g = tape.scale(g, -1.0);
    let carry_gate = tape.add(ones, neg_g)?;
    let carry = tape.mul(carry_gate, cat)?;
    let y = tape.add(gh, carry)?;

    let out = tape.matmul(y, bound.var("char.proj.w"), false)?;
    tape.add_row(out, bound.var("char.proj.b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderKind, Model};
    use crate::tensor::grad_check;
    use crate::testutil::tiny_config;
    use crate::text::encode_chars;

    fn char_cfg(vocab: usize) -> ModelConfig {
        let mut cfg = tiny_config(vocab);
        cfg.encoder = EncoderKind::CharCnn;
        cfg.classifier = crate::model::ClassifierKind::Adaptive;
        cfg.bands = vec![crate::model::BandSpec::Rest { dim: cfg.d_model }];
        cfg
    }

    fn ids_for(tokens: &[&str], max_len: usize) -> Vec<usize> {
        tokens
            .iter()
            .flat_map(|t| encode_chars(t, max_len).into_iter().map(|c| c as usize))
            .collect()
    }

    #[test]
    fn rows_depend_only_on_their_own_token() {
        let cfg = char_cfg(16);
        let model = Model::<f32>::init(cfg.clone(), 21).unwrap();
        let d = cfg.d_model;
        let run = |tokens: &[&str]| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let ids = ids_for(tokens, cfg.max_word_len);
            let v = char_cnn_encode(&mut tape, &bound, &cfg, &ids, tokens.len()).unwrap();
            tape.value(v).data().to_vec()
        };
        let a = run(&["hat", "stand", "hat"]);
        let b = run(&["hat", "moon", "xyzzy"]);
        assert_eq!(a[..d], b[..d], "row 0 changed with unrelated neighbors");
        assert_eq!(a[..d], a[2 * d..3 * d], "same token, different rows");
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_id_buffer_length_is_rejected() {
        let cfg = char_cfg(16);
        let model = Model::<f32>::init(cfg.clone(), 21).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let ids = ids_for(&["hat"], cfg.max_word_len);
        assert!(char_cnn_encode(&mut tape, &bound, &cfg, &ids, 2).is_err());
    }

    #[test]
    fn char_path_gradients_match_finite_differences() {
        let cfg = char_cfg(12);
        let model = Model::<f64>::init(cfg.clone(), 33).unwrap();
        let params = model.param_list();
        let ids = ids_for(&["ab", "cde"], cfg.max_word_len);
        let report = grad_check(
            &params,
            |tape, vars| {
                let bound = model.rebind(vars.to_vec());
                let v = char_cnn_encode(tape, &bound, &cfg, &ids, 2)?;
                Ok(tape.mean(v))
            },
            1e-5,
            2,
        )
        .unwrap();
        for p in &report.params {
            assert!(
                p.max_rel_err < 1e-6,
                "{}: rel err {} at elem {}",
                p.name,
                p.max_rel_err,
                p.worst_elem
            );
        }
    }
}
