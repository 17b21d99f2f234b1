//! Executable invariant suites over freshly initialized models.
//!
//! Three suites, each a batch of randomized trials with exact or
//! finite-difference oracles:
//! - leakage: masked-mode cloze log-probs at position i never move when
//!   token i is substituted, plus a planted-leak negative control that must
//!   be caught and localized;
//! - causality: perturbing token j leaves every forward layer strictly left
//!   of j and every backward layer strictly right of j bit-identical;
//! - gradcheck: full-model central differences in f64 under all three
//!   pretraining objectives.

use crate::model::{
    combine_features_with_mask, combine_mask, encode_inputs, full_log_probs, tower_forward,
    ClassifierKind, CombineMode, Direction, Model, ModelConfig,
};
use crate::objectives::{objective_loss, Objective};
use crate::rng::{substream, DropoutCtx};
use crate::tensor::{grad_check, Tape};
use crate::text::{Batch, BOS};
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Leakage,
    Causality,
    GradCheck,
    All,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Suite> {
        match name {
            "leakage" => Ok(Suite::Leakage),
            "causality" => Ok(Suite::Causality),
            "gradcheck" => Ok(Suite::GradCheck),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (expected leakage, causality, gradcheck, or all)"
            ))),
        }
    }
}

/// One checked invariant: pass/fail plus the measured residual.
#[derive(Debug, Clone)]
pub struct Finding {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    /// Max observed deviation: absolute logit/state delta for the exact
    /// suites, max relative error for gradcheck.
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub findings: Vec<Finding>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.findings.iter().all(|f| f.passed)
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.findings.extend(other.findings);
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::json!({
            "passed": self.passed(),
            "findings": self.findings.iter().map(|f| serde_json::json!({
                "suite": f.suite,
                "name": f.name,
                "passed": f.passed,
                "residual": f.residual,
                "detail": f.detail,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn to_json(&self) -> String {
        self.to_value().to_string()
    }
}

/// Small model with randomized depth/heads so the invariants are checked
/// across configurations, not one lucky layout.
fn random_tiny_model(trial: u64, seed: u64) -> Result<Model<f32>> {
    let mut cfg = ModelConfig::desk(20);
    cfg.d_model = 16;
    cfg.n_blocks = 1 + (trial % 2) as usize;
    cfg.n_heads = if trial % 3 == 0 { 4 } else { 2 };
    cfg.final_heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_len = 32;
    Model::init(cfg, seed ^ (trial.wrapping_mul(0x9e3779b97f4a7c15)))
}

/// Single-row batch around raw content ids, markers added.
fn wrapped_batch(content: &[u32]) -> Batch {
    let mut ids = Vec::with_capacity(content.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(content);
    ids.push(BOS);
    let tokens: Vec<String> = ids.iter().map(|&t| format!("w{t}")).collect();
    let width = ids.len();
    Batch {
        ids,
        tokens: vec![tokens],
        rows: 1,
        width,
        lengths: vec![width],
        mask: vec![true; width],
    }
}

fn random_content(r: &mut impl Rng, vocab: u32) -> Vec<u32> {
    let len = r.gen_range(2..=6);
    (0..len).map(|_| r.gen_range(4..vocab)).collect()
}

/// Per-position cloze log-probs [T][V] under the training mask.
fn cloze_log_probs(model: &Model<f32>, batch: &Batch, sabotage: bool) -> Result<Vec<Vec<f32>>> {
    let cfg = &model.config;
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape);
    let drop = DropoutCtx::eval();
    let x = encode_inputs(&mut tape, &bound, cfg, batch, &drop)?;
    let f = tower_forward(&mut tape, &bound, cfg, x, Direction::Forward, batch, &drop)?;
    let b = tower_forward(&mut tape, &bound, cfg, x, Direction::Backward, batch, &drop)?;
    let mask = combine_mask::<f32>(batch, CombineMode::TrainMasked, sabotage);
    let feats = combine_features_with_mask(&mut tape, &bound, cfg, &f, &b, batch, mask, &drop)?;
    let flat = tape.reshape(feats, vec![batch.width, cfg.d_model])?;
    let lp = full_log_probs(&mut tape, &bound, cfg, flat)?;
    let v = cfg.vocab_size;
    let data = tape.value(lp).data();
    Ok((0..batch.width).map(|i| data[i * v..(i + 1) * v].to_vec()).collect())
}

fn max_abs_delta(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Substitute the content token at wrapped position `pos`, avoiding a no-op.
fn substituted(content: &[u32], pos: usize, r: &mut impl Rng, vocab: u32) -> Vec<u32> {
    let mut out = content.to_vec();
    let old = out[pos - 1];
    loop {
        let cand = r.gen_range(4..vocab);
        if cand != old {
            out[pos - 1] = cand;
            return out;
        }
    }
}

/// Perturbation suites need at least two distinct content ids to substitute.
fn check_perturbable(model: &Model<f32>) -> Result<()> {
    if model.config.vocab_size < 6 {
        return Err(Error::Config(format!(
            "vocabulary of {} is too small for substitution trials",
            model.config.vocab_size
        )));
    }
    Ok(())
}

type ModelSource<'a> = &'a dyn Fn(u64) -> Result<Model<f32>>;

pub fn leakage_suite(trials: usize, seed: u64) -> Result<CheckReport> {
    leakage_with(&|trial| random_tiny_model(trial, seed), trials, seed)
}

/// Same trials, but every one runs on the given model (a loaded checkpoint).
pub fn leakage_suite_on(model: &Model<f32>, trials: usize, seed: u64) -> Result<CheckReport> {
    check_perturbable(model)?;
    leakage_with(&|_| Ok(model.clone()), trials, seed)
}

fn leakage_with(model_for: ModelSource, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut failure: Option<String> = None;
    for trial in 0..trials as u64 {
        let mut r = substream(seed, "check-leakage", trial);
        let model = model_for(trial)?;
        let vocab = model.config.vocab_size as u32;
        let content = random_content(&mut r, vocab);
        let pos = r.gen_range(1..=content.len());
        let batch_a = wrapped_batch(&content);
        let batch_b = wrapped_batch(&substituted(&content, pos, &mut r, vocab));
        let la = cloze_log_probs(&model, &batch_a, false)?;
        let lb = cloze_log_probs(&model, &batch_b, false)?;
        let delta = max_abs_delta(&la[pos], &lb[pos]);
        worst = worst.max(delta);
        let exact = la[pos].iter().zip(&lb[pos]).all(|(x, y)| x.to_bits() == y.to_bits());
        if !exact && failure.is_none() {
            failure = Some(format!(
                "trial {trial}: target position {pos} moved by {delta:e} under substitution"
            ));
        }
    }
    let mut report = CheckReport::default();
    report.findings.push(Finding {
        suite: "leakage",
        name: format!("cloze log-probs ignore the target token ({trials} trials)"),
        passed: failure.is_none(),
        residual: worst,
        detail: failure.unwrap_or_else(|| "bit-identical at every target".into()),
    });

    // Negative control: a mask that admits the target's own forward state
    // must be caught, and the harness must localize the leak.
    let mut r = substream(seed, "check-leakage-control", 0);
    let model = model_for(0)?;
    let vocab = model.config.vocab_size as u32;
    let content = random_content(&mut r, vocab);
    let pos = r.gen_range(1..=content.len());
    let batch_a = wrapped_batch(&content);
    let batch_b = wrapped_batch(&substituted(&content, pos, &mut r, vocab));
    let la = cloze_log_probs(&model, &batch_a, true)?;
    let lb = cloze_log_probs(&model, &batch_b, true)?;
    let delta = max_abs_delta(&la[pos], &lb[pos]);
    report.findings.push(Finding {
        suite: "leakage",
        name: "planted leak is detected".into(),
        passed: delta > 0.0,
        residual: delta,
        detail: if delta > 0.0 {
            format!("sabotaged mask leaks the target at position {pos}")
        } else {
            format!("sabotaged mask went undetected at position {pos}; harness is blind")
        },
    });
    Ok(report)
}

/// All layer states of one tower, embedding, blocks, and final norm,
/// flattened per position.
fn tower_states(model: &Model<f32>, batch: &Batch, dir: Direction) -> Result<Vec<Vec<f32>>> {
    let cfg = &model.config;
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape);
    let drop = DropoutCtx::eval();
    let x = encode_inputs(&mut tape, &bound, cfg, batch, &drop)?;
    let state = tower_forward(&mut tape, &bound, cfg, x, dir, batch, &drop)?;
    let mut layers: Vec<Vec<f32>> = state
        .layers
        .iter()
        .map(|&l| tape.value(l).data().to_vec())
        .collect();
    layers.push(tape.value(state.top).data().to_vec());
    Ok(layers)
}

pub fn causality_suite(trials: usize, seed: u64) -> Result<CheckReport> {
    causality_with(&|trial| random_tiny_model(trial, seed), trials, seed)
}

pub fn causality_suite_on(model: &Model<f32>, trials: usize, seed: u64) -> Result<CheckReport> {
    check_perturbable(model)?;
    causality_with(&|_| Ok(model.clone()), trials, seed)
}

fn causality_with(model_for: ModelSource, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut failure: Option<String> = None;
    for trial in 0..trials as u64 {
        let mut r = substream(seed, "check-causality", trial);
        let model = model_for(trial)?;
        let vocab = model.config.vocab_size as u32;
        let d = model.config.d_model;
        let content = random_content(&mut r, vocab);
        let j = r.gen_range(1..=content.len());
        let batch_a = wrapped_batch(&content);
        let batch_b = wrapped_batch(&substituted(&content, j, &mut r, vocab));
        for dir in [Direction::Forward, Direction::Backward] {
            let sa = tower_states(&model, &batch_a, dir)?;
            let sb = tower_states(&model, &batch_b, dir)?;
            for (layer, (a, b)) in sa.iter().zip(&sb).enumerate() {
                for i in 0..batch_a.width {
                    let shielded = match dir {
                        Direction::Forward => i < j,
                        Direction::Backward => i > j,
                    };
                    if !shielded {
                        continue;
                    }
                    let (ra, rb) = (&a[i * d..(i + 1) * d], &b[i * d..(i + 1) * d]);
                    let delta = max_abs_delta(ra, rb);
                    worst = worst.max(delta);
                    if ra.iter().zip(rb).any(|(x, y)| x.to_bits() != y.to_bits())
                        && failure.is_none()
                    {
                        failure = Some(format!(
                            "trial {trial}: {dir:?} layer {layer} position {i} moved by {delta:e} when token {j} changed"
                        ));
                    }
                }
            }
        }
    }
    let mut report = CheckReport::default();
    report.findings.push(Finding {
        suite: "causality",
        name: format!("towers never see across their boundary ({trials} trials per direction)"),
        passed: failure.is_none(),
        residual: worst,
        detail: failure.unwrap_or_else(|| "bit-identical at every shielded position".into()),
    });
    Ok(report)
}

/// f64 config for finite differences: d=16, 2 blocks, 20 types.
fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk(20);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.final_heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_len = 32;
    cfg
}

fn gradcheck_batch() -> Batch {
    let a = wrapped_batch(&[5, 9, 13, 7]);
    let b = wrapped_batch(&[11, 6]);
    // two rows, hand-padded to the wider example
    let width = a.width;
    let mut ids = a.ids.clone();
    let mut row_b = b.ids.clone();
    row_b.resize(width, crate::text::PAD);
    ids.extend_from_slice(&row_b);
    let mut mask = vec![true; width];
    mask.extend((0..width).map(|i| i < b.width));
    Batch {
        ids,
        tokens: vec![a.tokens[0].clone(), b.tokens[0].clone()],
        rows: 2,
        width,
        lengths: vec![a.width, b.width],
        mask,
    }
}

fn gradcheck_one(
    cfg: &ModelConfig,
    label: &str,
    objective: Objective,
    seed: u64,
    max_elems_per_param: usize,
) -> Result<Finding> {
    let model = Model::<f64>::init(cfg.clone(), seed)?;
    let batch = gradcheck_batch();
    let params = model.param_list();
    let report = grad_check(
        &params,
        |tape, vars| {
            let bound = model.rebind(vars.to_vec());
            let (loss, _) =
                objective_loss(tape, &bound, cfg, &batch, objective, &DropoutCtx::eval())?;
            Ok(loss)
        },
        1e-5,
        max_elems_per_param,
    )?;
    let err = report.max_rel_err();
    let worst = report.worst_param();
    Ok(Finding {
        suite: "gradcheck",
        name: format!("{label} gradients match finite differences"),
        passed: err < 1e-4,
        residual: err,
        detail: match worst {
            Some(p) => format!(
                "worst tensor {} (element {}, rel err {:e}, {} probed)",
                p.name, p.worst_elem, p.max_rel_err, p.elems_checked
            ),
            None => "no parameters checked".into(),
        },
    })
}

pub fn gradcheck_suite_with(seed: u64, max_elems_per_param: usize) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let flat = gradcheck_config();
    for objective in [Objective::Cloze, Objective::Bilm, Objective::Triplet { lambda: 0.15 }] {
        report.findings.push(gradcheck_one(
            &flat,
            objective.name(),
            objective,
            seed,
            max_elems_per_param,
        )?);
    }
    // The banded classifier has its own backward paths; check it end to end.
    let mut banded = gradcheck_config();
    banded.classifier = ClassifierKind::Adaptive;
    banded.bands = vec![
        crate::model::BandSpec::Counted { count: 8, dim: 16 },
        crate::model::BandSpec::Rest { dim: 8 },
    ];
    report.findings.push(gradcheck_one(
        &banded,
        "banded-classifier cloze",
        Objective::Cloze,
        seed,
        max_elems_per_param,
    )?);
    Ok(report)
}

pub fn gradcheck_suite(seed: u64) -> Result<CheckReport> {
    gradcheck_suite_with(seed, 24)
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    if matches!(suite, Suite::Leakage | Suite::All) {
        report.merge(leakage_suite(trials, seed)?);
    }
    if matches!(suite, Suite::Causality | Suite::All) {
        report.merge(causality_suite(trials, seed)?);
    }
    if matches!(suite, Suite::GradCheck | Suite::All) {
        report.merge(gradcheck_suite(seed)?);
    }
    Ok(report)
}

/// Perturbation suites run on the given model; gradcheck always builds its
/// own tiny 64-bit models, whatever checkpoint is under inspection.
pub fn run_suite_on(
    model: &Model<f32>,
    suite: Suite,
    trials: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    if matches!(suite, Suite::Leakage | Suite::All) {
        report.merge(leakage_suite_on(model, trials, seed)?);
    }
    if matches!(suite, Suite::Causality | Suite::All) {
        report.merge(causality_suite_on(model, trials, seed)?);
    }
    if matches!(suite, Suite::GradCheck | Suite::All) {
        report.merge(gradcheck_suite(seed)?);
    }
    Ok(report)
}
