//! Output classifiers over combination features.
//!
//! Flat-tied reuses the input embedding table as the output matrix. Adaptive
//! splits the vocabulary into frequency bands: the head distribution covers
//! head types plus one pointer slot per tail band, and a tail type's log
//! probability is log p(pointer) + log p(type | band). Bands at full model
//! width carry no down-projection, so a single band covering the vocabulary
//! runs the exact flat arithmetic.

use super::{Bound, ClassifierKind, ModelConfig};
use crate::tensor::{Scalar, Tape, Var};
use crate::{Error, Result};

fn check_targets(vocab: usize, m: usize, targets: &[u32]) -> Result<()> {
    if targets.len() != m {
        return Err(Error::shape("classifier targets", &[m], &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Data(format!(
            "target id {bad} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// Band index for a type id, given resolved (start, count, dim) bands.
fn band_of(bands: &[(usize, usize, usize)], t: usize) -> usize {
    bands
        .iter()
        .position(|&(start, count, _)| t >= start && t < start + count)
        .expect("bands partition the vocabulary")
}

/// Projected features for one band: identity when the band is at full width.
fn band_input<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    proj_name: &str,
    features: Var,
) -> Result<Var> {
    match bound.try_var(proj_name) {
        Some(p) => tape.matmul(features, p, false),
        None => Ok(features),
    }
}

fn flat_log_probs<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
    let logits = tape.matmul(features, bound.var("embed.table"), true)?;
    let logits = tape.add_row(logits, bound.var("cls.bias"))?;
    tape.log_softmax(logits, 1)
}

fn head_log_probs<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var> {
    let h = band_input(tape, bound, "cls.head.proj", features)?;
    let logits = tape.matmul(h, bound.var("cls.head.emb"), true)?;
    let logits = tape.add_row(logits, bound.var("cls.head.bias"))?;
    tape.log_softmax(logits, 1)
}

fn tail_log_probs<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    k: usize,
    features: Var,
) -> Result<Var> {
    let h = band_input(tape, bound, &format!("cls.band{k}.proj"), features)?;
    let logits = tape.matmul(h, bound.var(&format!("cls.band{k}.emb")), true)?;
    let logits = tape.add_row(logits, bound.var(&format!("cls.band{k}.bias")))?;
    tape.log_softmax(logits, 1)
}

/// Mean negative log-likelihood of `targets` under features [M, d].
pub fn classifier_nll<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    features: Var,
    targets: &[u32],
) -> Result<Var> {
    let m = tape.shape(features)[0];
    check_targets(cfg.vocab_size, m, targets)?;
    match cfg.classifier {
        ClassifierKind::FlatTied => {
            let lp = flat_log_probs(tape, bound, features)?;
            let picked = tape.pick(lp, targets.iter().map(|&t| t as usize).collect())?;
            let total = tape.sum(picked);
            Ok(tape.scale(total, -1.0 / m as f64))
        }
        ClassifierKind::Adaptive => {
            let bands = cfg.resolve_bands()?;
            let head_count = bands[0].1;
            let head_lp = head_log_probs(tape, bound, features)?;
            // Head types pick their own column; tail types pick their band's
            // pointer column, then add the within-band term below.
            let head_cols: Vec<usize> = targets
                .iter()
                .map(|&t| {
                    let t = t as usize;
                    let k = band_of(&bands, t);
                    if k == 0 {
                        t
                    } else {
                        head_count + k - 1
                    }
                })
                .collect();
            let picked_head = tape.pick(head_lp, head_cols)?;
            let mut total = tape.sum(picked_head);
            for k in 1..bands.len() {
                let (start, _, _) = bands[k];
                let rows: Vec<usize> = targets
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| band_of(&bands, t as usize) == k)
                    .map(|(i, _)| i)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let locals: Vec<usize> =
                    rows.iter().map(|&i| targets[i] as usize - start).collect();
                let sub = tape.index_select(features, rows)?;
                let lp = tail_log_probs(tape, bound, k, sub)?;
                let picked = tape.pick(lp, locals)?;
                let band_sum = tape.sum(picked);
                total = tape.add(total, band_sum)?;
            }
            Ok(tape.scale(total, -1.0 / m as f64))
        }
    }
}

/// Log-probabilities over the whole vocabulary, [M, V]. Row-wise mass must
/// sum to one; the acceptance suite holds this to 1e-6.
pub fn full_log_probs<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    features: Var,
) -> Result<Var> {
    match cfg.classifier {
        ClassifierKind::FlatTied => flat_log_probs(tape, bound, features),
        ClassifierKind::Adaptive => {
            let bands = cfg.resolve_bands()?;
            let head_count = bands[0].1;
            let m = tape.shape(features)[0];
            let head_lp = head_log_probs(tape, bound, features)?;
            let mut parts = vec![tape.narrow(head_lp, 1, 0, head_count)?];
            for k in 1..bands.len() {
                let (_, count, _) = bands[k];
                let ptr = tape.narrow(head_lp, 1, head_count + k - 1, 1)?;
                let ones = tape.constant(crate::tensor::Tensor::full(&[1, count], T::one()));
                let spread = tape.matmul(ptr, ones, false)?;
                let lp = tail_log_probs(tape, bound, k, features)?;
                parts.push(tape.add(spread, lp)?);
            }
            let out = tape.concat(&parts, 1)?;
            debug_assert_eq!(tape.shape(out), &[m, cfg.vocab_size]);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BandSpec, ClassifierKind, Model};
    use crate::tensor::Tensor;
    use crate::testutil::tiny_config;

    fn random_features(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, "clstest");
        Tensor::randn(&[m, d], 1.0, &mut rng)
    }

    #[test]
    fn full_vocab_mass_sums_to_one() {
        let mut cfg = tiny_config(64);
        cfg.classifier = ClassifierKind::Adaptive;
        cfg.bands = vec![
            BandSpec::Counted { count: 16, dim: 8 },
            BandSpec::Counted { count: 24, dim: 4 },
            BandSpec::Rest { dim: 2 },
        ];
        let model = Model::<f64>::init(cfg, 5).unwrap();
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape);
        let feats = tape.leaf(random_features(7, model.config.d_model, 11));
        let lp = full_log_probs(&mut tape, &bound, &model.config, feats).unwrap();
        let v = model.config.vocab_size;
        let data = tape.value(lp).data();
        for row in 0..7 {
            let mass: f64 = data[row * v..(row + 1) * v].iter().map(|l| l.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-9, "row {row} mass {mass}");
        }
    }

    #[test]
    fn nll_matches_full_log_probs() {
        let mut cfg = tiny_config(32);
        cfg.classifier = ClassifierKind::Adaptive;
        cfg.bands = vec![BandSpec::Counted { count: 10, dim: 8 }, BandSpec::Rest { dim: 4 }];
        let model = Model::<f64>::init(cfg, 6).unwrap();
        let targets: Vec<u32> = vec![3, 9, 10, 31, 4, 30];
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape);
        let feats = tape.leaf(random_features(targets.len(), model.config.d_model, 12));
        let nll = classifier_nll(&mut tape, &bound, &model.config, feats, &targets).unwrap();
        let lp = full_log_probs(&mut tape, &bound, &model.config, feats).unwrap();
        let v = model.config.vocab_size;
        let data = tape.value(lp).data();
        let expect: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -data[i * v + t as usize])
            .sum::<f64>()
            / targets.len() as f64;
        let got = tape.value(nll).data()[0];
        assert!((got - expect).abs() < 1e-12, "nll {got} vs assembled {expect}");
    }

    #[test]
    fn single_band_is_bitwise_flat() {
        // One band at model width, parameters copied from the flat setup:
        // identical arithmetic path, identical bits.
        let mut flat_cfg = tiny_config(24);
        flat_cfg.classifier = ClassifierKind::FlatTied;
        let flat = Model::<f32>::init(flat_cfg, 3).unwrap();

        let mut ada_cfg = tiny_config(24);
        ada_cfg.classifier = ClassifierKind::Adaptive;
        ada_cfg.bands = vec![BandSpec::Rest { dim: ada_cfg.d_model }];
        let mut ada = Model::<f32>::init(ada_cfg, 3).unwrap();
        let table = flat.params.get("embed.table").unwrap().clone();
        let bias = flat.params.get("cls.bias").unwrap().clone();
        *ada.params.get_mut("cls.head.emb").unwrap() = table;
        *ada.params.get_mut("cls.head.bias").unwrap() = bias;

        let targets: Vec<u32> = vec![0, 5, 23, 7];
        let feats = random_features(targets.len(), flat.config.d_model, 44).cast::<f32>();

        let run = |model: &Model<f32>| {
            let mut tape = Tape::<f32>::new();
            let bound = model.bind(&mut tape);
            let f = tape.leaf(feats.clone());
            let nll = classifier_nll(&mut tape, &bound, &model.config, f, &targets).unwrap();
            tape.value(nll).data()[0].to_bits()
        };
        assert_eq!(run(&flat), run(&ada), "degenerate banding diverged from flat");
    }

    #[test]
    fn tail_band_loss_is_pointer_plus_within_band() {
        // head {0, 1}, tail {2..5}; hand-check the hierarchy on one feature
        let mut cfg = tiny_config(6);
        cfg.classifier = ClassifierKind::Adaptive;
        cfg.bands = vec![
            BandSpec::Counted { count: 2, dim: cfg.d_model },
            BandSpec::Rest { dim: cfg.d_model },
        ];
        let model = Model::<f64>::init(cfg, 8).unwrap();
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape);
        let feats = tape.leaf(random_features(1, model.config.d_model, 2));

        let nll = classifier_nll(&mut tape, &bound, &model.config, feats, &[4]).unwrap();

        let head_lp = head_log_probs(&mut tape, &bound, feats).unwrap();
        let tail_lp = tail_log_probs(&mut tape, &bound, 1, feats).unwrap();
        let hp = tape.value(head_lp).data().to_vec();
        let tp = tape.value(tail_lp).data().to_vec();
        // head columns: [type 0, type 1, pointer]; local index of 4 is 2
        let expect = -(hp[2] + tp[2]);
        let got = tape.value(nll).data()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let cfg = tiny_config(16);
        let model = Model::<f32>::init(cfg, 1).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let feats = tape.leaf(Tensor::zeros(&[2, model.config.d_model]));
        let err = classifier_nll(&mut tape, &bound, &model.config, feats, &[0, 16]);
        assert!(err.is_err());
    }
}
