//! Downstream adaptation of a pretrained model.
//!
//! Sentence tasks read the combination layer at the boundary markers with
//! target masking disabled, pass the concatenated outputs through a
//! zero-initialized linear head, and fine-tune everything with Adam under a
//! warmup-then-cosine schedule over an (lr x seed) grid. Tagging tasks read
//! the combination output at every content position instead, under either
//! masking mode. A frozen-encoder variant trains only a softmax mixture over
//! layer outputs plus the head.
//!
//! The head starts at exactly zero, so the first loss is ln C no matter which
//! encoder sits underneath; the x16 feature scaling then amplifies early head
//! gradients without a second optimizer group.

mod data;
mod metrics;

pub use data::{
    encode_tagged, pair_example, parse_labeled, parse_tagged_raw, single_example, Label,
    LabeledExample, TagSet, TaggedExample,
};
pub use metrics::{accuracy, average_ranks, f1_binary, matthews, span_f1, spearman, Metric};

use crate::model::{
    apply_dropout, combine_features, encode_inputs, tower_forward, Bound, CombineMode, Direction,
    Model, ModelConfig, ParamSet,
};
use crate::rng::{substream, DropoutCtx};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{make_batches_by_count, Batch, Codec, Example, SEP};
use crate::trainer::{adam_step, warmup_cosine, AdamState};
use crate::{Error, Result};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    SingleClassification,
    PairClassification,
    Regression,
    TokenTagging,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<TaskKind> {
        match name {
            "single_classification" => Ok(TaskKind::SingleClassification),
            "pair_classification" => Ok(TaskKind::PairClassification),
            "regression" => Ok(TaskKind::Regression),
            "token_tagging" => Ok(TaskKind::TokenTagging),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::SingleClassification => "single_classification",
            TaskKind::PairClassification => "pair_classification",
            TaskKind::Regression => "regression",
            TaskKind::TokenTagging => "token_tagging",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Output width; 1 for regression.
    pub num_classes: usize,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        match self.kind {
            TaskKind::Regression => {
                c(self.num_classes == 1, format!("regression uses one output, not {}", self.num_classes))?;
                c(self.metric == Metric::Spearman, "regression scores with spearman".into())?;
            }
            TaskKind::TokenTagging => {
                c(self.num_classes >= 2, "tagging needs at least 2 tag classes".into())?;
                c(self.metric == Metric::Accuracy, "tagging scores with per-token accuracy".into())?;
            }
            _ => {
                c(self.num_classes >= 2, "classification needs at least 2 classes".into())?;
                c(self.metric != Metric::Spearman, "spearman needs real-valued predictions".into())?;
                if matches!(self.metric, Metric::F1 | Metric::Mcc) {
                    c(self.num_classes == 2, format!("{} is a binary metric", self.metric.name()))?;
                }
            }
        }
        Ok(())
    }

    /// Width of the head input: boundary pairs give 2d, pair tasks add the
    /// separator output for 3d, tagging reads single positions.
    pub fn feature_dim(&self, d_model: usize) -> usize {
        match self.kind {
            TaskKind::PairClassification => 3 * d_model,
            TaskKind::TokenTagging => d_model,
            _ => 2 * d_model,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub lr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Stop a cell once validation loss fails to improve over the previous
    /// epoch. Pair with a generous `epochs` cap.
    pub early_stop: bool,
    pub batch_size: usize,
    pub head_dropout: f64,
    /// Replaces every encoder dropout rate during fine-tuning.
    pub model_dropout: f64,
    pub feature_scale: f64,
    /// Second optimizer group: encoder lr = head lr x this. When set, the
    /// feature scaling is disabled; the two mechanisms are alternatives.
    pub model_lr_scale: Option<f64>,
    pub warmup_frac: f64,
    pub lr_start: f64,
    pub lr_floor: f64,
    /// Grid cells run this many at a time; results never depend on it.
    pub threads: usize,
}

impl FinetuneConfig {
    /// GLUE-style sentence tasks: short fixed schedule, encoder dropout off,
    /// head/encoder balance left to feature scaling.
    pub fn sentence() -> Self {
        FinetuneConfig {
            lr_grid: vec![1e-4, 5e-5, 3e-5],
            seeds: vec![1, 2, 3],
            epochs: 3,
            early_stop: false,
            batch_size: 16,
            head_dropout: 0.1,
            model_dropout: 0.0,
            feature_scale: 16.0,
            model_lr_scale: None,
            warmup_frac: 0.1,
            lr_start: 1e-7,
            lr_floor: 1e-6,
            threads: 1,
        }
    }

    /// Structured prediction: longer cap with early stopping, heavier
    /// dropout, explicit encoder lr group instead of feature scaling.
    pub fn structured() -> Self {
        FinetuneConfig {
            epochs: 25,
            early_stop: true,
            head_dropout: 0.3,
            model_dropout: 0.3,
            model_lr_scale: Some(1.0 / 16.0),
            ..FinetuneConfig::sentence()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(
            self.warmup_frac > 0.0 && self.warmup_frac < 1.0,
            format!("warmup fraction {} must lie in (0,1)", self.warmup_frac),
        )?;
        c(!self.lr_grid.is_empty(), "empty learning-rate grid".into())?;
        for &lr in &self.lr_grid {
            c(lr.is_finite() && lr > 0.0, format!("bad learning rate {lr}"))?;
        }
        c(!self.seeds.is_empty(), "need at least one seed".into())?;
        c(self.epochs > 0, "epochs must be positive".into())?;
        c(self.batch_size > 0, "batch size must be positive".into())?;
        for (name, v) in [("head_dropout", self.head_dropout), ("model_dropout", self.model_dropout)] {
            c((0.0..1.0).contains(&v), format!("{name} {v} outside [0,1)"))?;
        }
        c(
            self.feature_scale.is_finite() && self.feature_scale > 0.0,
            format!("bad feature scale {}", self.feature_scale),
        )?;
        if let Some(s) = self.model_lr_scale {
            c(s.is_finite() && s > 0.0, format!("bad encoder lr scale {s}"))?;
        }
        c(self.lr_start > 0.0, "lr start must be positive".into())?;
        c(self.lr_floor > 0.0, "lr floor must be positive".into())?;
        c(self.threads >= 1, "threads must be at least 1".into())?;
        Ok(())
    }

    pub fn effective_feature_scale(&self) -> f64 {
        if self.model_lr_scale.is_some() {
            1.0
        } else {
            self.feature_scale
        }
    }
}

/// Zero weights and bias: every logit is exactly 0.0 before the first update,
/// so the initial loss is ln C regardless of what the encoder produces.
pub fn init_head<T: Scalar>(spec: &TaskSpec, d_model: usize) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("head.w", Tensor::zeros(&[spec.feature_dim(d_model), spec.num_classes]))
        .expect("fresh set");
    p.insert("head.b", Tensor::zeros(&[spec.num_classes])).expect("fresh set");
    p
}

fn set_dropout(cfg: &mut ModelConfig, rate: f64) {
    cfg.dropout = rate;
    cfg.attn_dropout = rate;
    cfg.relu_dropout = rate;
}

/// Full pass to per-position combination outputs, [B, T, d].
fn combination_outputs<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: CombineMode,
    drop: &DropoutCtx,
) -> Result<Var> {
    let x = encode_inputs(tape, bound, cfg, batch, drop)?;
    let f = tower_forward(tape, bound, cfg, x, Direction::Forward, batch, drop)?;
    let b = tower_forward(tape, bound, cfg, x, Direction::Backward, batch, drop)?;
    combine_features(tape, bound, cfg, &f, &b, batch, mode, drop)
}

/// Boundary features for a batch of sentence-task inputs: combination output
/// at the leading and trailing markers, plus the separator for pair rows,
/// concatenated and scaled. Masking is off; the whole input is visible.
pub fn featurize_batch<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    seps: Option<&[usize]>,
    scale: f64,
    drop: &DropoutCtx,
) -> Result<Var> {
    let comb = combination_outputs(tape, bound, cfg, batch, CombineMode::FinetuneUnmasked, drop)?;
    let (b, t) = (batch.rows, batch.width);
    let flat = tape.reshape(comb, vec![b * t, cfg.d_model])?;
    let lead: Vec<usize> = (0..b).map(|r| r * t).collect();
    let trail: Vec<usize> = (0..b).map(|r| r * t + batch.lengths[r] - 1).collect();
    let mut parts = vec![tape.index_select(flat, lead)?, tape.index_select(flat, trail)?];
    if let Some(seps) = seps {
        if seps.len() != b {
            return Err(Error::Invariant(format!(
                "{} separator positions for {b} rows",
                seps.len()
            )));
        }
        let mut rows = Vec::with_capacity(b);
        for (r, &s) in seps.iter().enumerate() {
            if s >= batch.lengths[r] {
                return Err(Error::Invariant(format!(
                    "separator at {s} beyond row length {}",
                    batch.lengths[r]
                )));
            }
            rows.push(r * t + s);
        }
        parts.push(tape.index_select(flat, rows)?);
    }
    let cat = tape.concat(&parts, 1)?;
    Ok(tape.scale(cat, scale))
}

fn featurize_example<T: Scalar>(
    model: &Model<T>,
    example: &Example,
    sep: Option<usize>,
    scale: f64,
) -> Result<Tensor<T>> {
    if example.len() > model.config.max_len {
        return Err(Error::Data(format!(
            "input of {} tokens exceeds max_len {}; refusing to truncate",
            example.len(),
            model.config.max_len
        )));
    }
    let batches = make_batches_by_count(&[example], 1)?;
    let mut tape = Tape::<T>::new();
    let bound = model.bind(&mut tape);
    let drop = DropoutCtx::eval();
    let seps = sep.map(|s| vec![s]);
    let feats = featurize_batch(&mut tape, &bound, &model.config, &batches[0], seps.as_deref(), scale, &drop)?;
    Ok(tape.value(feats).clone())
}

/// Deterministic [1, 2d] feature row for one sentence.
pub fn featurize_single<T: Scalar>(
    model: &Model<T>,
    codec: &Codec,
    sentence: &str,
    scale: f64,
) -> Result<Tensor<T>> {
    let ex = single_example(codec, sentence)?;
    featurize_example(model, &ex, None, scale)
}

/// Deterministic [1, 3d] feature row for an ordered sentence pair.
pub fn featurize_pair<T: Scalar>(
    model: &Model<T>,
    codec: &Codec,
    a: &str,
    b: &str,
    scale: f64,
) -> Result<Tensor<T>> {
    let (ex, sep) = pair_example(codec, a, b)?;
    featurize_example(model, &ex, Some(sep), scale)
}

pub fn head_logits<T: Scalar>(
    tape: &mut Tape<T>,
    w: Var,
    b: Var,
    feats: Var,
    head_dropout: f64,
    drop: &DropoutCtx,
) -> Result<Var> {
    let h = apply_dropout(tape, feats, head_dropout, drop)?;
    let z = tape.matmul(h, w, false)?;
    tape.add_row(z, b)
}

fn classification_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, golds: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lp, golds.to_vec())?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / golds.len() as f64))
}

fn regression_loss<T: Scalar>(tape: &mut Tape<T>, preds: Var, golds: &[f64]) -> Result<Var> {
    if tape.shape(preds) != [golds.len(), 1] {
        return Err(Error::shape("regression_loss", tape.shape(preds), &[golds.len(), 1]));
    }
    let target: Vec<T> = golds.iter().map(|&g| T::from_f64(-g)).collect();
    let neg = tape.constant(Tensor::new(vec![golds.len(), 1], target)?);
    let diff = tape.add(preds, neg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &TaskSpec,
    logits: Var,
    labels: &[Label],
) -> Result<Var> {
    if spec.kind == TaskKind::Regression {
        let golds = labels
            .iter()
            .map(|l| match l {
                Label::Value(v) => Ok(*v),
                Label::Class(_) => Err(Error::Data("class label on a regression task".into())),
            })
            .collect::<Result<Vec<f64>>>()?;
        regression_loss(tape, logits, &golds)
    } else {
        let golds = labels
            .iter()
            .map(|l| match l {
                Label::Class(c) => Ok(*c),
                Label::Value(_) => Err(Error::Data("real-valued label on a classification task".into())),
            })
            .collect::<Result<Vec<usize>>>()?;
        classification_loss(tape, logits, &golds)
    }
}

fn grads_for<T: Scalar>(tape: &Tape<T>, params: &ParamSet<T>, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
    if params.len() != vars.len() {
        return Err(Error::Invariant(format!(
            "{} parameters against {} leaves",
            params.len(),
            vars.len()
        )));
    }
    params
        .iter()
        .zip(vars)
        .map(|((_, t), &v)| Tensor::new(t.shape().to_vec(), tape.grad_or_zeros(v)))
        .collect()
}

fn check_dataset(spec: &TaskSpec, data: &[LabeledExample], max_len: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    let pair = spec.kind == TaskKind::PairClassification;
    for (i, le) in data.iter().enumerate() {
        let fail = |msg: String| Err(Error::Data(format!("{what} example {i}: {msg}")));
        match (spec.kind, le.label) {
            (TaskKind::Regression, Label::Value(v)) if v.is_finite() => {}
            (TaskKind::Regression, l) => return fail(format!("bad regression target {l:?}")),
            (_, Label::Class(c)) if c < spec.num_classes => {}
            (_, l) => return fail(format!("bad label {l:?} for {} classes", spec.num_classes)),
        }
        match (pair, le.sep) {
            (true, Some(s)) => {
                if s >= le.example.ids.len() || le.example.ids[s] != SEP {
                    return fail(format!("separator position {s} does not hold <sep>"));
                }
            }
            (true, None) => return fail("pair example without a separator".into()),
            (false, Some(_)) => return fail("separator on a single-input task".into()),
            (false, None) => {}
        }
        if le.example.len() > max_len {
            return fail(format!(
                "{} tokens exceed max_len {max_len}; refusing to truncate",
                le.example.len()
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EvalScores {
    pub metric: f64,
    /// Mean NLL for classification, mean squared error for regression.
    pub loss: f64,
    pub n: usize,
}

fn argmax_first<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Dropout-free pass over a labeled set in its given order.
pub fn evaluate_labeled<T: Scalar>(
    model: &Model<T>,
    head: &ParamSet<T>,
    spec: &TaskSpec,
    data: &[LabeledExample],
    scale: f64,
    batch_size: usize,
) -> Result<EvalScores> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let pair = spec.kind == TaskKind::PairClassification;
    let regression = spec.kind == TaskKind::Regression;
    let drop = DropoutCtx::eval();
    let c = spec.num_classes;
    let mut pred_classes = Vec::new();
    let mut pred_values = Vec::new();
    let mut gold_classes = Vec::new();
    let mut gold_values = Vec::new();
    let mut loss_sum = 0.0f64;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let exs: Vec<&Example> = chunk.iter().map(|&i| &data[i].example).collect();
        let batch = make_batches_by_count(&exs, exs.len())?.pop().expect("one chunk, one batch");
        let seps: Option<Vec<usize>> = if pair {
            Some(chunk.iter().map(|&i| data[i].sep.expect("checked dataset")).collect())
        } else {
            None
        };
        let mut tape = Tape::<T>::new();
        let bound = model.bind(&mut tape);
        let hw = tape.constant(head.get("head.w")?.clone());
        let hb = tape.constant(head.get("head.b")?.clone());
        let feats = featurize_batch(&mut tape, &bound, &model.config, &batch, seps.as_deref(), scale, &drop)?;
        let logits = head_logits(&mut tape, hw, hb, feats, 0.0, &drop)?;
        let lv = tape.value(logits);
        for (r, &i) in chunk.iter().enumerate() {
            let row: Vec<f64> = lv.data()[r * c..(r + 1) * c].iter().map(|v| v.as_f64()).collect();
            match data[i].label {
                Label::Value(g) => {
                    let p = row[0];
                    if !p.is_finite() {
                        return Err(Error::NonFinite(format!("prediction for example {i}")));
                    }
                    pred_values.push(p);
                    gold_values.push(g);
                    loss_sum += (p - g) * (p - g);
                }
                Label::Class(g) => {
                    let lse = log_sum_exp(&row);
                    if !lse.is_finite() {
                        return Err(Error::NonFinite(format!("logits for example {i}")));
                    }
                    pred_classes.push(argmax_first(&lv.data()[r * c..(r + 1) * c]));
                    gold_classes.push(g);
                    loss_sum += lse - row[g];
                }
            }
        }
    }
    if regression && !gold_classes.is_empty() || !regression && !gold_values.is_empty() {
        return Err(Error::Data("mixed label kinds in one evaluation set".into()));
    }
    let metric = match spec.metric {
        Metric::Accuracy => accuracy(&pred_classes, &gold_classes)?,
        Metric::F1 => f1_binary(&pred_classes, &gold_classes)?,
        Metric::Mcc => matthews(&pred_classes, &gold_classes)?,
        Metric::Spearman => spearman(&pred_values, &gold_values)?,
    };
    Ok(EvalScores { metric, loss: loss_sum / data.len() as f64, n: data.len() })
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub lr: f64,
    pub seed: u64,
    /// Validation metric and loss after each completed epoch.
    pub val_metrics: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub metric: &'static str,
    pub cells: Vec<CellReport>,
    pub best_cell: usize,
}

impl FinetuneReport {
    pub fn best(&self) -> &CellReport {
        &self.cells[self.best_cell]
    }

    pub fn to_value(&self) -> serde_json::Value {
        let best = self.best();
        serde_json::json!({
            "metric": self.metric,
            "best": {
                "lr": best.lr,
                "seed": best.seed,
                "epoch": best.best_epoch,
                "score": best.best_metric,
            },
            "cells": self.cells.iter().map(|c| serde_json::json!({
                "lr": c.lr,
                "seed": c.seed,
                "val_metrics": c.val_metrics,
                "val_losses": c.val_losses,
                "best_epoch": c.best_epoch,
                "best_metric": c.best_metric,
                "stopped_early": c.stopped_early,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn to_json(&self) -> String {
        self.to_value().to_string()
    }
}

pub struct Finetuned<T> {
    pub model: Model<T>,
    pub head: ParamSet<T>,
    pub report: FinetuneReport,
}

struct CellOutcome<T> {
    report: CellReport,
    model: Model<T>,
    head: ParamSet<T>,
}

fn run_cell<T: Scalar>(
    pretrained: &Model<T>,
    spec: &TaskSpec,
    train: &[LabeledExample],
    val: &[LabeledExample],
    cfg: &FinetuneConfig,
    lr: f64,
    seed: u64,
) -> Result<CellOutcome<T>> {
    let mut model = pretrained.clone();
    set_dropout(&mut model.config, cfg.model_dropout);
    let mut head = init_head::<T>(spec, model.config.d_model);
    let mut opt_model = AdamState::new(&model.params);
    let mut opt_head = AdamState::new(&head);
    let scale = cfg.effective_feature_scale();
    let encoder_lr_scale = cfg.model_lr_scale.unwrap_or(1.0);
    let pair = spec.kind == TaskKind::PairClassification;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = (total_steps as f64 * cfg.warmup_frac).ceil() as usize;
    let mut gstep = 0usize;
    let mut val_metrics = Vec::new();
    let mut val_losses = Vec::new();
    let mut best: Option<(f64, usize, Model<T>, ParamSet<T>)> = None;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(seed, "finetune-order", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i].example).collect();
            let batch = make_batches_by_count(&exs, exs.len())?.pop().expect("one chunk, one batch");
            let seps: Option<Vec<usize>> = if pair {
                Some(chunk.iter().map(|&i| train[i].sep.expect("checked dataset")).collect())
            } else {
                None
            };
            let labels: Vec<Label> = chunk.iter().map(|&i| train[i].label).collect();
            let lr_now = warmup_cosine(gstep, warmup, total_steps, cfg.lr_start, lr, cfg.lr_floor);

            let mut tape = Tape::<T>::new();
            let bound = model.bind(&mut tape);
            let hw = tape.leaf(head.get("head.w")?.clone());
            let hb = tape.leaf(head.get("head.b")?.clone());
            let drop = DropoutCtx::new(seed, gstep as u64, true);
            let feats = featurize_batch(&mut tape, &bound, &model.config, &batch, seps.as_deref(), scale, &drop)?;
            let logits = head_logits(&mut tape, hw, hb, feats, cfg.head_dropout, &drop)?;
            let loss = batch_loss(&mut tape, spec, logits, &labels)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at lr {lr} seed {seed} step {gstep}"
                )));
            }
            tape.backward(loss)?;
            let mgrads = grads_for(&tape, &model.params, bound.vars())?;
            let hgrads = grads_for(&tape, &head, &[hw, hb])?;
            adam_step(&mut model.params, &mgrads, &mut opt_model, lr_now * encoder_lr_scale)?;
            adam_step(&mut head, &hgrads, &mut opt_head, lr_now)?;
            gstep += 1;
        }

        let scores = evaluate_labeled(&model, &head, spec, val, scale, cfg.batch_size)?;
        val_metrics.push(scores.metric);
        val_losses.push(scores.loss);
        if best.as_ref().map_or(true, |(m, ..)| scores.metric > *m) {
            best = Some((scores.metric, epoch, model.clone(), head.clone()));
        }
        if cfg.early_stop && epoch > 0 && val_losses[epoch] >= val_losses[epoch - 1] {
            stopped_early = true;
            break;
        }
    }

    let (best_metric, best_epoch, best_model, best_head) = best.expect("at least one epoch ran");
    Ok(CellOutcome {
        report: CellReport {
            lr,
            seed,
            val_metrics,
            val_losses,
            best_epoch,
            best_metric,
            stopped_early,
        },
        model: best_model,
        head: best_head,
    })
}

fn run_cells<T: Scalar>(
    pretrained: &Model<T>,
    spec: &TaskSpec,
    train: &[LabeledExample],
    val: &[LabeledExample],
    cfg: &FinetuneConfig,
    cells: &[(f64, u64)],
) -> Result<Vec<CellOutcome<T>>> {
    let workers = cfg.threads.min(cells.len());
    if workers <= 1 {
        return cells
            .iter()
            .map(|&(lr, seed)| run_cell(pretrained, spec, train, val, cfg, lr, seed))
            .collect();
    }
    // Cells are independent jobs; results land in their grid slot, so the
    // outcome is identical to the serial run whatever the interleaving.
    let mut slots: Vec<Option<Result<CellOutcome<T>>>> = Vec::new();
    slots.resize_with(cells.len(), || None);
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for w in 0..workers {
            handles.push(s.spawn(move || {
                let mut out = Vec::new();
                let mut i = w;
                while i < cells.len() {
                    let (lr, seed) = cells[i];
                    out.push((i, run_cell(pretrained, spec, train, val, cfg, lr, seed)));
                    i += workers;
                }
                out
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("grid worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|o| o.expect("every cell ran")).collect()
}

/// Grid fine-tuning: every (lr, seed) cell trains a private copy, each epoch
/// is scored on the validation set, and the best (cell, epoch) snapshot wins.
/// Ties keep the earliest cell in lr-major order, then the earliest epoch.
pub fn finetune_task<T: Scalar>(
    pretrained: &Model<T>,
    spec: &TaskSpec,
    train: &[LabeledExample],
    val: &[LabeledExample],
    cfg: &FinetuneConfig,
) -> Result<Finetuned<T>> {
    spec.validate()?;
    cfg.validate()?;
    if spec.kind == TaskKind::TokenTagging {
        return Err(Error::Config("tagging tasks train through token_tagging".into()));
    }
    check_dataset(spec, train, pretrained.config.max_len, "train")?;
    check_dataset(spec, val, pretrained.config.max_len, "validation")?;
    if val.len() < 2 {
        return Err(Error::Data(format!(
            "validation set of {} cannot be scored",
            val.len()
        )));
    }
    let cells: Vec<(f64, u64)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.seeds.iter().map(move |&s| (lr, s)))
        .collect();
    let outcomes = run_cells(pretrained, spec, train, val, cfg, &cells)?;
    let mut best_cell = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.report.best_metric > outcomes[best_cell].report.best_metric {
            best_cell = i;
        }
    }
    let report = FinetuneReport {
        metric: spec.metric.name(),
        cells: outcomes.iter().map(|o| o.report.clone()).collect(),
        best_cell,
    };
    let chosen = outcomes.into_iter().nth(best_cell).expect("best cell exists");
    Ok(Finetuned { model: chosen.model, head: chosen.head, report })
}

/// Number of states a layer mix spans: every block of both towers plus the
/// combination output.
pub fn mix_state_count(cfg: &ModelConfig) -> usize {
    2 * cfg.n_blocks + 1
}

/// Uniform mixture (zero logits) with unit global scale.
pub fn init_layer_mix<T: Scalar>(cfg: &ModelConfig) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("mix.w", Tensor::zeros(&[mix_state_count(cfg)])).expect("fresh set");
    p.insert("mix.scale", Tensor::full(&[1], T::one())).expect("fresh set");
    p
}

/// Softmax-weighted sum over per-layer outputs times a global scale,
/// [B, T, d]. Bind the model with `bind_frozen` to train only the mixture.
pub fn layer_mix_features<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mix_w: Var,
    mix_scale: Var,
    mode: CombineMode,
    drop: &DropoutCtx,
) -> Result<Var> {
    let x = encode_inputs(tape, bound, cfg, batch, drop)?;
    let f = tower_forward(tape, bound, cfg, x, Direction::Forward, batch, drop)?;
    let b = tower_forward(tape, bound, cfg, x, Direction::Backward, batch, drop)?;
    let comb = combine_features(tape, bound, cfg, &f, &b, batch, mode, drop)?;
    // layers[0] is the shared embedded input, not a block output.
    let mut states: Vec<Var> = Vec::with_capacity(mix_state_count(cfg));
    states.extend(&f.layers[1..]);
    states.extend(&b.layers[1..]);
    states.push(comb);
    if tape.shape(mix_w) != [states.len()] {
        return Err(Error::shape("layer_mix", tape.shape(mix_w), &[states.len()]));
    }
    let row = tape.reshape(mix_w, vec![1, states.len()])?;
    let weights = tape.softmax(row, 1)?;
    let mut acc: Option<Var> = None;
    for (i, &state) in states.iter().enumerate() {
        let w2 = tape.narrow(weights, 1, i, 1)?;
        let w = tape.reshape(w2, vec![1])?;
        let term = tape.scale_var(state, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.scale_var(acc.expect("at least one state"), mix_scale)
}

#[derive(Debug, Clone, Copy)]
pub struct TaggingOutcome {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

fn check_tagged(data: &[TaggedExample], n_tags: usize, max_len: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    for (i, te) in data.iter().enumerate() {
        if te.tags.len() + 2 != te.example.len() {
            return Err(Error::Data(format!(
                "{what} example {i}: {} tags for {} content tokens",
                te.tags.len(),
                te.example.len() - 2
            )));
        }
        if let Some(&bad) = te.tags.iter().find(|&&t| t as usize >= n_tags) {
            return Err(Error::Data(format!(
                "{what} example {i}: tag id {bad} out of range for {n_tags} tags"
            )));
        }
        if te.example.len() > max_len {
            return Err(Error::Data(format!(
                "{what} example {i}: {} tokens exceed max_len {max_len}",
                te.example.len()
            )));
        }
    }
    Ok(())
}

/// Flat [B*T] indices of the content positions (markers excluded).
fn content_positions(batch: &Batch) -> Vec<usize> {
    let mut pos = Vec::new();
    for r in 0..batch.rows {
        for i in 1..batch.lengths[r] - 1 {
            pos.push(r * batch.width + i);
        }
    }
    pos
}

/// Per-position features for a tagging batch: combination outputs at content
/// positions under the given masking mode, or the frozen layer mixture.
#[allow(clippy::too_many_arguments)]
fn tagging_features<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: CombineMode,
    mix: Option<(Var, Var)>,
    scale: f64,
    drop: &DropoutCtx,
) -> Result<Var> {
    let grid = match mix {
        Some((w, s)) => layer_mix_features(tape, bound, cfg, batch, w, s, mode, drop)?,
        None => combination_outputs(tape, bound, cfg, batch, mode, drop)?,
    };
    let flat = tape.reshape(grid, vec![batch.rows * batch.width, cfg.d_model])?;
    let sel = tape.index_select(flat, content_positions(batch))?;
    Ok(tape.scale(sel, scale))
}

fn chunk_tags(data: &[TaggedExample], chunk: &[usize]) -> Vec<usize> {
    chunk
        .iter()
        .flat_map(|&i| data[i].tags.iter().map(|&t| t as usize))
        .collect()
}

/// A trained tagging run: accuracies plus everything needed to re-evaluate.
#[derive(Debug, Clone)]
pub struct TaggedFinetuned<T> {
    pub model: Model<T>,
    pub head: ParamSet<T>,
    /// Present when the encoder stayed frozen and a layer mixture trained.
    pub mix: Option<ParamSet<T>>,
    pub outcome: TaggingOutcome,
}

pub fn run_tagging<T: Scalar>(
    pretrained: &Model<T>,
    n_tags: usize,
    train: &[TaggedExample],
    eval_set: &[TaggedExample],
    cfg: &FinetuneConfig,
    mode: CombineMode,
    frozen_mix: bool,
) -> Result<TaggedFinetuned<T>> {
    cfg.validate()?;
    if n_tags < 2 {
        return Err(Error::Config(format!("{n_tags} tags leave nothing to predict")));
    }
    check_tagged(train, n_tags, pretrained.config.max_len, "train")?;
    check_tagged(eval_set, n_tags, pretrained.config.max_len, "eval")?;

    let mut model = pretrained.clone();
    set_dropout(&mut model.config, cfg.model_dropout);
    let spec = TaskSpec { kind: TaskKind::TokenTagging, num_classes: n_tags, metric: Metric::Accuracy };
    let mut head = init_head::<T>(&spec, model.config.d_model);
    let mut mix = init_layer_mix::<T>(&model.config);
    let mut opt_model = AdamState::new(&model.params);
    let mut opt_mix = AdamState::new(&mix);
    let mut opt_head = AdamState::new(&head);

    let lr = cfg.lr_grid[0];
    let seed = cfg.seeds[0];
    let scale = cfg.effective_feature_scale();
    let encoder_lr_scale = cfg.model_lr_scale.unwrap_or(1.0);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = (total_steps as f64 * cfg.warmup_frac).ceil() as usize;
    let mut gstep = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(seed, "tagging-order", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i].example).collect();
            let batch = make_batches_by_count(&exs, exs.len())?.pop().expect("one chunk, one batch");
            let golds = chunk_tags(train, chunk);
            let lr_now = warmup_cosine(gstep, warmup, total_steps, cfg.lr_start, lr, cfg.lr_floor);

            let mut tape = Tape::<T>::new();
            let bound = if frozen_mix { model.bind_frozen(&mut tape) } else { model.bind(&mut tape) };
            let mix_vars = if frozen_mix {
                Some((tape.leaf(mix.get("mix.w")?.clone()), tape.leaf(mix.get("mix.scale")?.clone())))
            } else {
                None
            };
            let hw = tape.leaf(head.get("head.w")?.clone());
            let hb = tape.leaf(head.get("head.b")?.clone());
            let drop = DropoutCtx::new(seed, gstep as u64, true);
            let feats = tagging_features(&mut tape, &bound, &model.config, &batch, mode, mix_vars, scale, &drop)?;
            let logits = head_logits(&mut tape, hw, hb, feats, cfg.head_dropout, &drop)?;
            let loss = classification_loss(&mut tape, logits, &golds)?;
            if !tape.value(loss).data()[0].as_f64().is_finite() {
                return Err(Error::NonFinite(format!("tagging loss at step {gstep}")));
            }
            tape.backward(loss)?;
            let hgrads = grads_for(&tape, &head, &[hw, hb])?;
            adam_step(&mut head, &hgrads, &mut opt_head, lr_now)?;
            match mix_vars {
                Some((w, s)) => {
                    let mgrads = grads_for(&tape, &mix, &[w, s])?;
                    adam_step(&mut mix, &mgrads, &mut opt_mix, lr_now)?;
                }
                None => {
                    let mgrads = grads_for(&tape, &model.params, bound.vars())?;
                    adam_step(&mut model.params, &mgrads, &mut opt_model, lr_now * encoder_lr_scale)?;
                }
            }
            gstep += 1;
        }
    }

    let mix_ref = frozen_mix.then_some(&mix);
    let outcome = TaggingOutcome {
        train_accuracy: tagging_accuracy(&model, &head, mix_ref, train, cfg, mode, scale)?,
        eval_accuracy: tagging_accuracy(&model, &head, mix_ref, eval_set, cfg, mode, scale)?,
    };
    Ok(TaggedFinetuned {
        model,
        head,
        mix: frozen_mix.then_some(mix),
        outcome,
    })
}

/// Tag accuracy of a trained (model, head, optional mixture) triple; `scale`
/// must match the feature scale the head was trained under.
pub fn tagging_accuracy<T: Scalar>(
    model: &Model<T>,
    head: &ParamSet<T>,
    mix: Option<&ParamSet<T>>,
    data: &[TaggedExample],
    cfg: &FinetuneConfig,
    mode: CombineMode,
    scale: f64,
) -> Result<f64> {
    let drop = DropoutCtx::eval();
    let n_tags = head.get("head.b")?.shape()[0];
    let mut hits = 0usize;
    let mut total = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let exs: Vec<&Example> = chunk.iter().map(|&i| &data[i].example).collect();
        let batch = make_batches_by_count(&exs, exs.len())?.pop().expect("one chunk, one batch");
        let golds = chunk_tags(data, chunk);
        let mut tape = Tape::<T>::new();
        let bound = model.bind_frozen(&mut tape);
        let mix_vars = match mix {
            Some(m) => Some((
                tape.constant(m.get("mix.w")?.clone()),
                tape.constant(m.get("mix.scale")?.clone()),
            )),
            None => None,
        };
        let hw = tape.constant(head.get("head.w")?.clone());
        let hb = tape.constant(head.get("head.b")?.clone());
        let feats = tagging_features(&mut tape, &bound, &model.config, &batch, mode, mix_vars, scale, &drop)?;
        let logits = head_logits(&mut tape, hw, hb, feats, 0.0, &drop)?;
        let lv = tape.value(logits);
        for (p, &g) in golds.iter().enumerate() {
            let row = &lv.data()[p * n_tags..(p + 1) * n_tags];
            if argmax_first(row) == g {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Train a linear tag head over per-position combination features, fine-tuning
/// the whole model, under the given masking mode. Uses the first grid lr and
/// seed for the single run.
pub fn token_tagging<T: Scalar>(
    pretrained: &Model<T>,
    n_tags: usize,
    train: &[TaggedExample],
    eval_set: &[TaggedExample],
    cfg: &FinetuneConfig,
    mode: CombineMode,
) -> Result<TaggingOutcome> {
    Ok(run_tagging(pretrained, n_tags, train, eval_set, cfg, mode, false)?.outcome)
}

/// Same task, but the encoder stays frozen; only the layer mixture and the
/// head train.
pub fn layer_mix_tagging<T: Scalar>(
    pretrained: &Model<T>,
    n_tags: usize,
    train: &[TaggedExample],
    eval_set: &[TaggedExample],
    cfg: &FinetuneConfig,
    mode: CombineMode,
) -> Result<TaggingOutcome> {
    Ok(run_tagging(pretrained, n_tags, train, eval_set, cfg, mode, true)?.outcome)
}
