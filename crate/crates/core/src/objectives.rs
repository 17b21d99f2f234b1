//! Pretraining losses and perplexity accounting.
//!
//! Three objectives share one encoder pass and one classifier:
//! - cloze: combination features predict every non-pad token, markers
//!   included, with the token itself masked out of its own context;
//! - bilm: each tower alone predicts its next token (forward state at i
//!   predicts i+1, backward state at i predicts i-1), no combination layer;
//! - triplet: cloze + lambda * (fwd bilm + bwd bilm), all in one graph.

use crate::model::{
    classifier_nll, combine_features, encode_inputs, tower_forward, Bound, CombineMode,
    Direction, Model, ModelConfig,
};
use crate::rng::DropoutCtx;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{make_batches, Batch, Example};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Cloze,
    Bilm,
    Triplet { lambda: f64 },
}

impl Objective {
    pub fn parse(name: &str) -> Result<Objective> {
        match name {
            "cloze" => Ok(Objective::Cloze),
            "bilm" => Ok(Objective::Bilm),
            "triplet" => Ok(Objective::Triplet { lambda: DEFAULT_LAMBDA }),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected cloze, bilm, or triplet)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Cloze => "cloze",
            Objective::Bilm => "bilm",
            Objective::Triplet { .. } => "triplet",
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Objective::Triplet { lambda } => *lambda,
            _ => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Objective::Triplet { lambda } = self {
            if *lambda < 0.0 || !lambda.is_finite() {
                return Err(Error::Config(format!("triplet lambda {lambda} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// NLL sum and token count for one prediction family.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponent {
    pub nll_sum: f64,
    pub tokens: usize,
}

impl LossComponent {
    pub fn perplexity(&self) -> Option<f64> {
        if self.tokens == 0 {
            None
        } else {
            Some((self.nll_sum / self.tokens as f64).exp())
        }
    }

    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.nll_sum / self.tokens as f64
        }
    }

    fn absorb(&mut self, other: LossComponent) {
        self.nll_sum += other.nll_sum;
        self.tokens += other.tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub objective: String,
    pub lambda: f64,
    /// The optimized quantity: per-token mean terms combined per objective.
    pub total: f64,
    pub cloze: LossComponent,
    pub fwd: LossComponent,
    pub bwd: LossComponent,
}

impl LossReport {
    fn empty(objective: Objective) -> LossReport {
        LossReport {
            objective: objective.name().to_string(),
            lambda: objective.lambda(),
            total: 0.0,
            cloze: LossComponent::default(),
            fwd: LossComponent::default(),
            bwd: LossComponent::default(),
        }
    }

    fn recompute_total(&mut self) {
        self.total = match self.objective.as_str() {
            "bilm" => self.fwd.mean() + self.bwd.mean(),
            _ => self.cloze.mean() + self.lambda * (self.fwd.mean() + self.bwd.mean()),
        };
    }

    fn merge(&mut self, other: &LossReport) {
        self.cloze.absorb(other.cloze);
        self.fwd.absorb(other.fwd);
        self.bwd.absorb(other.bwd);
    }

    /// Structured form for embedding into metrics records.
    pub fn to_value(&self) -> serde_json::Value {
        let comp = |c: &LossComponent| {
            serde_json::json!({
                "nll_sum": c.nll_sum,
                "tokens": c.tokens,
                "ppl": c.perplexity(),
            })
        };
        serde_json::json!({
            "objective": self.objective,
            "lambda": self.lambda,
            "total": self.total,
            "cloze": comp(&self.cloze),
            "fwd": comp(&self.fwd),
            "bwd": comp(&self.bwd),
        })
    }

    /// One line-delimited JSON record for the metrics log.
    pub fn to_json(&self) -> String {
        self.to_value().to_string()
    }
}

/// Feature-row indices into the flattened [B*T, d] states, with targets.
struct Selection {
    rows: Vec<usize>,
    targets: Vec<u32>,
}

fn select(batch: &Batch, pick: impl Fn(usize, usize) -> Option<usize>) -> Selection {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for r in 0..batch.rows {
        let len = batch.lengths[r];
        for i in 0..len {
            if let Some(t) = pick(i, len) {
                rows.push(r * batch.width + i);
                targets.push(batch.ids[r * batch.width + t]);
            }
        }
    }
    Selection { rows, targets }
}

fn cloze_selection(batch: &Batch) -> Selection {
    select(batch, |i, _| Some(i))
}

fn fwd_selection(batch: &Batch) -> Selection {
    select(batch, |i, len| (i + 1 < len).then_some(i + 1))
}

fn bwd_selection(batch: &Batch) -> Selection {
    select(batch, |i, _| i.checked_sub(1))
}

/// Mean NLL over the selection, or None when nothing is predictable.
fn component_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    states: Var,
    sel: Selection,
) -> Result<Option<(Var, LossComponent)>> {
    if sel.rows.is_empty() {
        return Ok(None);
    }
    let bt: usize = tape.shape(states)[..2].iter().product();
    let flat = tape.reshape(states, vec![bt, cfg.d_model])?;
    let feats = tape.index_select(flat, sel.rows)?;
    let mean = classifier_nll(tape, bound, cfg, feats, &sel.targets)?;
    let comp = LossComponent {
        nll_sum: tape.value(mean).data()[0].as_f64() * sel.targets.len() as f64,
        tokens: sel.targets.len(),
    };
    Ok(Some((mean, comp)))
}

fn zero_scalar<T: Scalar>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Build the training loss graph for one batch. Returns the scalar loss to
/// differentiate plus the batch-level accounting.
pub fn objective_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    objective: Objective,
    drop: &DropoutCtx,
) -> Result<(Var, LossReport)> {
    objective.validate()?;
    let mut report = LossReport::empty(objective);
    let x = encode_inputs(tape, bound, cfg, batch, drop)?;
    let f_state = tower_forward(tape, bound, cfg, x, Direction::Forward, batch, drop)?;
    let b_state = tower_forward(tape, bound, cfg, x, Direction::Backward, batch, drop)?;

    let mut cloze_term = None;
    let mut bilm_terms = None;
    if !matches!(objective, Objective::Bilm) {
        let feats = combine_features(
            tape,
            bound,
            cfg,
            &f_state,
            &b_state,
            batch,
            CombineMode::TrainMasked,
            drop,
        )?;
        let (var, comp) = component_loss(tape, bound, cfg, feats, cloze_selection(batch))?
            .expect("every batch row has at least one real token");
        report.cloze = comp;
        cloze_term = Some(var);
    }
    if !matches!(objective, Objective::Cloze) {
        let f = component_loss(tape, bound, cfg, f_state.top, fwd_selection(batch))?;
        let b = component_loss(tape, bound, cfg, b_state.top, bwd_selection(batch))?;
        if let Some((_, c)) = f {
            report.fwd = c;
        }
        if let Some((_, c)) = b {
            report.bwd = c;
        }
        let fv = f.map(|(v, _)| v).unwrap_or_else(|| zero_scalar(tape));
        let bv = b.map(|(v, _)| v).unwrap_or_else(|| zero_scalar(tape));
        bilm_terms = Some(tape.add(fv, bv)?);
    }

    let total = match objective {
        Objective::Cloze => cloze_term.unwrap(),
        Objective::Bilm => bilm_terms.unwrap(),
        Objective::Triplet { lambda } => {
            let scaled = tape.scale(bilm_terms.unwrap(), lambda);
            tape.add(cloze_term.unwrap(), scaled)?
        }
    };
    report.total = tape.value(total).data()[0].as_f64();
    Ok((total, report))
}

/// Deterministic held-out perplexity: dropout off, canonical example order,
/// corpus-level sums. Input order never affects the result.
pub fn evaluate_perplexity<T: Scalar>(
    model: &Model<T>,
    heldout: &[Example],
    objective: Objective,
    max_tokens_per_batch: usize,
) -> Result<LossReport> {
    objective.validate()?;
    if heldout.is_empty() {
        return Err(Error::Data("empty held-out set".into()));
    }
    let mut canon: Vec<Example> = heldout.to_vec();
    canon.sort_by(|a, b| a.ids.len().cmp(&b.ids.len()).then_with(|| a.ids.cmp(&b.ids)));
    let batches = make_batches(&canon, max_tokens_per_batch)?;
    let drop = DropoutCtx::eval();
    let mut report = LossReport::empty(objective);
    for batch in &batches {
        let mut tape = Tape::<T>::new();
        let bound = model.bind(&mut tape);
        let (_, r) = objective_loss(&mut tape, &bound, &model.config, batch, objective, &drop)?;
        report.merge(&r);
    }
    report.recompute_total();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BandSpec, ClassifierKind, EncoderKind};
    use crate::testutil::{batch_of, example_of, tiny_config, toy_vocab};
    use crate::text::{Vocab, PAD, RESERVED};

    fn eval_ctx() -> DropoutCtx {
        DropoutCtx::eval()
    }

    fn run_total(
        model: &Model<f32>,
        vocab: &Vocab,
        ids: &[&[u32]],
        objective: Objective,
    ) -> (f64, LossReport) {
        let batch = batch_of(ids, vocab);
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let (v, r) =
            objective_loss(&mut tape, &bound, &model.config, &batch, objective, &eval_ctx())
                .unwrap();
        (tape.value(v).data()[0] as f64, r)
    }

    #[test]
    fn selection_indices_match_hand_trace() {
        let vocab = toy_vocab(16);
        // content lengths 1 and 3 -> wrapped 3 and 5, width 5
        let batch = batch_of(&[&[5], &[6, 7, 8]], &vocab);
        assert_eq!(batch.width, 5);

        let c = cloze_selection(&batch);
        assert_eq!(c.rows, vec![0, 1, 2, 5, 6, 7, 8, 9]);
        assert_eq!(c.targets, vec![0, 5, 0, 0, 6, 7, 8, 0]);

        let f = fwd_selection(&batch);
        assert_eq!(f.rows, vec![0, 1, 5, 6, 7, 8]);
        assert_eq!(f.targets, vec![5, 0, 6, 7, 8, 0]);

        let b = bwd_selection(&batch);
        assert_eq!(b.rows, vec![1, 2, 6, 7, 8, 9]);
        assert_eq!(b.targets, vec![0, 5, 0, 6, 7, 8]);
    }

    #[test]
    fn bilm_minimal_sequence_accounting() {
        let vocab = toy_vocab(8);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 3).unwrap();
        let (_, r) = run_total(&model, &vocab, &[&[5]], Objective::Bilm);
        // <s> a <s>: fwd predicts a then the closing marker; bwd mirrors
        assert_eq!(r.fwd.tokens, 2);
        assert_eq!(r.bwd.tokens, 2);
        assert_eq!(r.cloze.tokens, 0);
        assert!(r.total.is_finite());
    }

    #[test]
    fn triplet_total_is_cloze_plus_scaled_bilm_means() {
        let vocab = toy_vocab(12);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 5).unwrap();
        let (total, r) =
            run_total(&model, &vocab, &[&[5, 6, 7], &[8, 9]], Objective::Triplet { lambda: 0.15 });
        let assembled = r.cloze.mean() + 0.15 * (r.fwd.mean() + r.bwd.mean());
        assert!((total - assembled).abs() < 1e-6, "{total} vs {assembled}");
    }

    #[test]
    fn hand_means_give_known_triplet_total() {
        let mut r = LossReport::empty(Objective::Triplet { lambda: 0.15 });
        r.cloze = LossComponent { nll_sum: 4.0, tokens: 4 };
        r.fwd = LossComponent { nll_sum: 6.0, tokens: 3 };
        r.bwd = LossComponent { nll_sum: 9.0, tokens: 3 };
        r.recompute_total();
        assert_eq!(r.total, 1.75);
    }

    #[test]
    fn lambda_zero_is_bitwise_cloze() {
        let vocab = toy_vocab(12);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 5).unwrap();
        let ids: &[&[u32]] = &[&[5, 6, 7, 8]];
        let (t0, _) = run_total(&model, &vocab, ids, Objective::Triplet { lambda: 0.0 });
        let (tc, _) = run_total(&model, &vocab, ids, Objective::Cloze);
        assert_eq!(t0.to_bits(), tc.to_bits());
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let vocab = toy_vocab(12);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 5).unwrap();
        let batch = batch_of(&[&[5, 6]], &vocab);
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let err = objective_loss(
            &mut tape,
            &bound,
            &model.config,
            &batch,
            Objective::Triplet { lambda: -0.1 },
            &eval_ctx(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn pad_columns_never_move_the_loss() {
        let vocab = toy_vocab(12);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 7).unwrap();
        let tight = batch_of(&[&[5, 6, 7]], &vocab);
        let mut wide = tight.clone();
        wide.width += 3;
        wide.ids = {
            let mut v = Vec::new();
            for r in 0..tight.rows {
                v.extend_from_slice(&tight.ids[r * tight.width..(r + 1) * tight.width]);
                v.extend([PAD; 3]);
            }
            v
        };
        wide.mask = {
            let mut v = Vec::new();
            for r in 0..tight.rows {
                v.extend_from_slice(&tight.mask[r * tight.width..(r + 1) * tight.width]);
                v.extend([false; 3]);
            }
            v
        };
        for objective in [Objective::Cloze, Objective::Bilm] {
            let run = |batch: &Batch| {
                let mut tape = Tape::<f32>::new();
                let bound = model.bind(&mut tape);
                let (v, _) =
                    objective_loss(&mut tape, &bound, &model.config, batch, objective, &eval_ctx())
                        .unwrap();
                tape.value(v).data()[0].to_bits()
            };
            assert_eq!(run(&tight), run(&wide), "{objective:?} moved under pad columns");
        }
    }

    #[test]
    fn packing_never_changes_corpus_perplexity() {
        let vocab = toy_vocab(16);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 11).unwrap();
        let examples: Vec<Example> = vec![
            example_of(&[5, 6, 7, 8, 9, 10], &vocab),
            example_of(&[6, 7, 8, 9, 10, 11, 12], &vocab),
            example_of(&[7, 8, 9, 10, 11, 12, 13, 5], &vocab),
            example_of(&[8, 9, 10, 11, 12, 13, 5, 6, 7], &vocab),
        ];
        // budget 11 = longest wrapped length: every batch is a single example
        let singles = evaluate_perplexity(&model, &examples, Objective::Cloze, 11).unwrap();
        let packed = evaluate_perplexity(&model, &examples, Objective::Cloze, 10_000).unwrap();
        assert_eq!(singles.cloze.tokens, packed.cloze.tokens);
        let (a, b) = (singles.cloze.mean(), packed.cloze.mean());
        assert!((a - b).abs() / a.abs() < 1e-5, "packing moved mean NLL: {a} vs {b}");
    }

    #[test]
    fn heldout_order_never_changes_the_report() {
        let vocab = toy_vocab(16);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 13).unwrap();
        let examples: Vec<Example> = vec![
            example_of(&[5, 6, 7], &vocab),
            example_of(&[8, 9], &vocab),
            example_of(&[10, 11, 12, 13], &vocab),
        ];
        let mut shuffled = examples.clone();
        shuffled.rotate_left(2);
        let a = evaluate_perplexity(&model, &examples, Objective::Triplet { lambda: 0.15 }, 64)
            .unwrap();
        let b = evaluate_perplexity(&model, &shuffled, Objective::Triplet { lambda: 0.15 }, 64)
            .unwrap();
        assert_eq!(a, b);
        let c = evaluate_perplexity(&model, &examples, Objective::Triplet { lambda: 0.15 }, 64)
            .unwrap();
        assert_eq!(a, c, "same inputs twice diverged");
    }

    #[test]
    fn empty_heldout_is_rejected() {
        let vocab = toy_vocab(8);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 1).unwrap();
        assert!(evaluate_perplexity(&model, &[], Objective::Cloze, 64).is_err());
    }

    #[test]
    fn zero_logit_classifier_scores_exactly_vocab_size() {
        let vocab = toy_vocab(24);
        let mut cfg = tiny_config(vocab.len());
        cfg.encoder = EncoderKind::CharCnn;
        cfg.classifier = ClassifierKind::Adaptive;
        cfg.bands = vec![BandSpec::Rest { dim: cfg.d_model }];
        let mut model = Model::<f32>::init(cfg, 17).unwrap();
        let emb = model.params.get_mut("cls.head.emb").unwrap();
        *emb = crate::tensor::Tensor::zeros(emb.shape());
        let examples = vec![example_of(&[5, 6, 7, 8], &vocab), example_of(&[9, 10], &vocab)];
        let r = evaluate_perplexity(&model, &examples, Objective::Cloze, 64).unwrap();
        let v = vocab.len() as f64;
        let ppl = r.cloze.perplexity().unwrap();
        assert!((ppl - v).abs() / v < 1e-5, "uniform classifier gave ppl {ppl}, vocab {v}");
    }

    #[test]
    fn untrained_model_scores_near_vocab_size() {
        let vocab = toy_vocab(20);
        let model = Model::<f32>::init(tiny_config(vocab.len()), 19).unwrap();
        let examples = vec![
            example_of(&[5, 6, 7, 8, 9], &vocab),
            example_of(&[10, 11, 12, 13], &vocab),
            example_of(&[14, 15, 16], &vocab),
        ];
        let r = evaluate_perplexity(&model, &examples, Objective::Cloze, 64).unwrap();
        let ppl = r.cloze.perplexity().unwrap();
        let v = vocab.len() as f64;
        assert!(
            (ppl - v).abs() / v < 0.2,
            "freshly initialized model should be near-uniform: ppl {ppl}, vocab {v}"
        );
    }

    #[test]
    fn all_objectives_finite_for_every_length_up_to_max() {
        let vocab = toy_vocab(12);
        let mut cfg = tiny_config(vocab.len());
        cfg.max_len = 12;
        let model = Model::<f32>::init(cfg, 23).unwrap();
        let drop = DropoutCtx::new(9, 0, true);
        for len in 1..=model.config.max_len {
            let ids: Vec<u32> = (0..len).map(|i| if i == 0 { 0 } else { 5 + (i as u32 % 7) }).collect();
            let tokens: Vec<String> = ids
                .iter()
                .map(|&t| {
                    if t == 0 {
                        RESERVED[0].to_string()
                    } else {
                        format!("w{t}")
                    }
                })
                .collect();
            let batch = Batch {
                ids: ids.clone(),
                tokens: vec![tokens],
                rows: 1,
                width: len,
                lengths: vec![len],
                mask: vec![true; len],
            };
            for objective in
                [Objective::Cloze, Objective::Bilm, Objective::Triplet { lambda: 0.15 }]
            {
                let mut tape = Tape::<f32>::new();
                let bound = model.bind(&mut tape);
                let (total, r) =
                    objective_loss(&mut tape, &bound, &model.config, &batch, objective, &drop)
                        .unwrap();
                assert!(r.total.is_finite(), "len {len} {objective:?} loss not finite");
                tape.backward(total).unwrap();
                for &v in bound.vars() {
                    assert!(
                        tape.grad_or_zeros(v).iter().all(|g| g.is_finite()),
                        "len {len} {objective:?} produced non-finite gradient"
                    );
                }
            }
        }
    }
}
