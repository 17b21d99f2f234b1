//! Pretraining loop: Nesterov momentum with global gradient renormalization,
//! linear warmup into a single cosine phase, a stateless batch schedule, and
//! checkpoints that resume bit-identically.

use crate::model::{Model, ParamSet};
use crate::objectives::{evaluate_perplexity, objective_loss, LossReport, Objective};
use crate::rng::{substream, DropoutCtx};
use crate::tensor::{read_tensor, write_tensor, Scalar, Tape, Tensor};
use crate::text::Example;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const LR_WARMUP_START: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub objective: Objective,
    pub max_updates: usize,
    pub warmup_steps: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub momentum: f64,
    pub grad_norm_threshold: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final state is always saved.
    pub checkpoint_every: usize,
    /// 0 disables periodic held-out evaluation.
    pub eval_every: usize,
    pub max_tokens_per_batch: usize,
    /// Micro-batches averaged per update, emulating large-batch training.
    pub accum_steps: usize,
}

impl PretrainConfig {
    pub fn desk(objective: Objective, seed: u64) -> Self {
        PretrainConfig {
            objective,
            max_updates: 2000,
            warmup_steps: 100,
            // full-scale training uses peak 1.0, which pairs with far wider
            // models and 16K warmup; desk width wants a smaller peak
            lr_peak: 0.1,
            lr_floor: 1e-4,
            momentum: 0.99,
            grad_norm_threshold: 0.1,
            seed,
            checkpoint_every: 500,
            eval_every: 200,
            max_tokens_per_batch: 512,
            accum_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.max_updates > 0, "max_updates must be positive".into())?;
        c(
            self.warmup_steps < self.max_updates,
            format!("warmup {} must sit below max_updates {}", self.warmup_steps, self.max_updates),
        )?;
        c(
            self.lr_floor < self.lr_peak,
            format!("lr_floor {} must sit below lr_peak {}", self.lr_floor, self.lr_peak),
        )?;
        c(self.lr_floor > 0.0 && self.lr_peak.is_finite(), "learning rates must be positive and finite".into())?;
        c(
            (0.0..1.0).contains(&self.momentum),
            format!("momentum {} must lie in [0, 1)", self.momentum),
        )?;
        c(self.grad_norm_threshold > 0.0, "grad_norm_threshold must be positive".into())?;
        c(self.accum_steps > 0, "accum_steps must be positive".into())?;
        c(self.max_tokens_per_batch > 0, "max_tokens_per_batch must be positive".into())?;
        Ok(())
    }
}

/// Warmup climbs linearly from `start` to `peak`; the remainder is one cosine
/// phase down to `floor`. Endpoints are returned exactly, not recomputed.
pub fn warmup_cosine(
    step: usize,
    warmup: usize,
    total: usize,
    start: f64,
    peak: f64,
    floor: f64,
) -> f64 {
    if step >= total {
        return floor;
    }
    if step == warmup {
        return peak;
    }
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return start + (peak - start) * frac;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn lr_schedule(step: usize, cfg: &PretrainConfig) -> f64 {
    warmup_cosine(
        step,
        cfg.warmup_steps,
        cfg.max_updates,
        LR_WARMUP_START,
        cfg.lr_peak,
        cfg.lr_floor,
    )
}

/// Global L2 renormalization. Returns (norm, scale applied).
pub fn renorm_grads<T: Scalar>(grads: &mut [Tensor<T>], threshold: f64) -> Result<(f64, f64)> {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.data() {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    if norm <= threshold {
        return Ok((norm, 1.0));
    }
    let scale = threshold / norm;
    let s = T::from_f64(scale);
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v = *v * s;
        }
    }
    Ok((norm, scale))
}

fn check_aligned<T: Scalar>(
    what: &str,
    params: &ParamSet<T>,
    grads: &[Tensor<T>],
    state: &ParamSet<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.len() != params.len() {
        return Err(Error::Invariant(format!(
            "{what}: {} parameters, {} gradients, {} state buffers",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (((name, p), g), (_, s)) in params.iter().zip(grads).zip(state.iter()) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::Invariant(format!(
                "{what} buffer {name}: parameter {:?}, gradient {:?}, state {:?}",
                p.shape(),
                g.shape(),
                s.shape()
            )));
        }
    }
    Ok(())
}

/// One Nesterov update: v <- mu v - lr g ; theta <- theta + mu v - lr g.
pub fn nag_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    velocity: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_aligned("nag", params, grads, velocity)?;
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    for ((p, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(velocity.tensors_mut().iter_mut())
    {
        let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
        for i in 0..pd.len() {
            vd[i] = mu * vd[i] - lr * gd[i];
            pd[i] = pd[i] + mu * vd[i] - lr * gd[i];
        }
    }
    Ok(())
}

/// Adam moments; the fine-tuning path optimizes with these.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState { m: zeros_like(params), v: zeros_like(params), step: 0 }
    }
}

pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    check_aligned("adam", params, grads, &state.m)?;
    check_aligned("adam", params, grads, &state.v)?;
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.tensors_mut().iter_mut())
        .zip(state.v.tensors_mut().iter_mut())
    {
        let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i].as_f64();
            let mi = BETA1 * md[i].as_f64() + (1.0 - BETA1) * gi;
            let vi = BETA2 * vd[i].as_f64() + (1.0 - BETA2) * gi * gi;
            md[i] = T::from_f64(mi);
            vd[i] = T::from_f64(vi);
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
            pd[i] = pd[i] - T::from_f64(update);
        }
    }
    Ok(())
}

fn zeros_like<T: Scalar>(params: &ParamSet<T>) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        out.insert(name, Tensor::zeros(t.shape())).expect("source names are unique");
    }
    out
}

/// NAG velocity plus the completed-update counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub velocity: ParamSet<T>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        OptimizerState { velocity: zeros_like(&model.params), step: 0 }
    }

    /// Velocity buffers ride along the model checkpoint as `optim.bin`
    /// (model param order) plus `trainstate.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("optim.bin"))?);
        for (_, t) in self.velocity.iter() {
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
        std::fs::write(dir.join("trainstate.txt"), format!("step={}\n", self.step))?;
        Ok(())
    }

    pub fn load(dir: &Path, model: &Model<T>) -> Result<Self> {
        let mut velocity = zeros_like(&model.params);
        let mut r = std::io::BufReader::new(std::fs::File::open(dir.join("optim.bin"))?);
        for (name, t) in velocity.iter_mut() {
            let loaded: Tensor<T> = read_tensor(&mut r)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Serde(format!(
                    "velocity {name:?} stored as {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        let mut probe = [0u8; 1];
        if std::io::Read::read(&mut r, &mut probe)? != 0 {
            return Err(Error::Serde("trailing bytes after last tensor in optim.bin".into()));
        }
        let state = std::fs::read_to_string(dir.join("trainstate.txt"))?;
        let step = state
            .lines()
            .find_map(|l| l.strip_prefix("step="))
            .ok_or_else(|| Error::Serde("trainstate.txt lacks step=".into()))?
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Serde("unparsable step in trainstate.txt".into()))?;
        Ok(OptimizerState { velocity, step })
    }
}

pub fn save_train_state<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    optim: &OptimizerState<T>,
) -> Result<()> {
    model.save(dir)?;
    optim.save(dir)
}

pub fn load_train_state<T: Scalar>(dir: &Path) -> Result<(Model<T>, OptimizerState<T>)> {
    let model = Model::<T>::load(dir)?;
    let optim = OptimizerState::load(dir, &model)?;
    Ok((model, optim))
}

/// Highest-numbered `checkpoint-*` directory under `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Option<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(out_dir).ok()?.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name.strip_prefix("checkpoint-").and_then(|s| s.parse().ok()) {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best
}

/// Batch index for a global micro-step. Pure in (seed, micro): each epoch's
/// visit order is a fresh shuffle keyed by the epoch number alone, so a
/// resumed run recomputes exactly the schedule it left.
pub fn scheduled_batch(seed: u64, micro: usize, n_batches: usize) -> usize {
    let epoch = micro / n_batches;
    let slot = micro % n_batches;
    let mut order: Vec<usize> = (0..n_batches).collect();
    order.shuffle(&mut substream(seed, "batch-order", epoch as u64));
    order[slot]
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub steps: usize,
    pub last_train: Option<LossReport>,
    pub last_eval: Option<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fresh optimizer, then the loop. Resume by loading state with
/// `load_train_state` and calling `run_pretrain` directly.
pub fn pretrain<T: Scalar>(
    cfg: &PretrainConfig,
    model: &mut Model<T>,
    train: &[Example],
    heldout: &[Example],
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    let mut optim = OptimizerState::new(model);
    run_pretrain(cfg, model, &mut optim, train, heldout, out_dir)
}

pub fn run_pretrain<T: Scalar>(
    cfg: &PretrainConfig,
    model: &mut Model<T>,
    optim: &mut OptimizerState<T>,
    train: &[Example],
    heldout: &[Example],
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?,
    );

    // canonical order decouples batching from corpus file order
    let mut canon = train.to_vec();
    canon.sort_by(|a, b| a.ids.len().cmp(&b.ids.len()).then_with(|| a.ids.cmp(&b.ids)));
    let batches = crate::text::make_batches(&canon, cfg.max_tokens_per_batch)?;
    let mut epoch_order: (usize, Vec<usize>) = (usize::MAX, Vec::new());

    let mut outcome = PretrainOutcome {
        steps: optim.step,
        last_train: None,
        last_eval: None,
        checkpoints: Vec::new(),
    };

    while optim.step < cfg.max_updates {
        let step = optim.step;
        let lr = lr_schedule(step, cfg);
        let t0 = Instant::now();

        let mut grads: Vec<Tensor<T>> =
            model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut report: Option<LossReport> = None;
        for j in 0..cfg.accum_steps {
            let micro = step * cfg.accum_steps + j;
            let epoch = micro / batches.len();
            if epoch_order.0 != epoch {
                let mut order: Vec<usize> = (0..batches.len()).collect();
                order.shuffle(&mut substream(cfg.seed, "batch-order", epoch as u64));
                epoch_order = (epoch, order);
            }
            let batch = &batches[epoch_order.1[micro % batches.len()]];

            let mut tape = Tape::<T>::new();
            let bound = model.bind(&mut tape);
            let drop = DropoutCtx::new(cfg.seed, micro as u64, true);
            let (loss, r) =
                objective_loss(&mut tape, &bound, &model.config, batch, cfg.objective, &drop)?;
            if !r.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became non-finite at step {step}; last good checkpoint retained"
                )));
            }
            tape.backward(loss)?;
            for (gi, &v) in grads.iter_mut().zip(bound.vars()) {
                let g = tape.grad_or_zeros(v);
                let gd = gi.data_mut();
                for (acc, add) in gd.iter_mut().zip(&g) {
                    *acc = *acc + *add;
                }
            }
            report = Some(match report {
                None => r,
                Some(prev) => {
                    let mut merged = prev;
                    merged.cloze.nll_sum += r.cloze.nll_sum;
                    merged.cloze.tokens += r.cloze.tokens;
                    merged.fwd.nll_sum += r.fwd.nll_sum;
                    merged.fwd.tokens += r.fwd.tokens;
                    merged.bwd.nll_sum += r.bwd.nll_sum;
                    merged.bwd.tokens += r.bwd.tokens;
                    merged.total += r.total;
                    merged
                }
            });
        }
        let mut report = report.expect("accum_steps is positive");
        if cfg.accum_steps > 1 {
            report.total /= cfg.accum_steps as f64;
            let inv = T::from_f64(1.0 / cfg.accum_steps as f64);
            for g in &mut grads {
                for v in g.data_mut() {
                    *v = *v * inv;
                }
            }
        }

        let (norm, scale) = renorm_grads(&mut grads, cfg.grad_norm_threshold)?;
        nag_step(&mut model.params, &grads, &mut optim.velocity, lr, cfg.momentum)?;
        optim.step += 1;
        outcome.steps = optim.step;

        let rec = serde_json::json!({
            "kind": "train",
            "step": optim.step,
            "lr": lr,
            "grad_norm": norm,
            "renorm_scale": scale,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
            "loss": report.to_value(),
        });
        writeln!(metrics, "{rec}")?;
        metrics.flush()?;
        outcome.last_train = Some(report);

        if cfg.eval_every > 0 && optim.step % cfg.eval_every == 0 && !heldout.is_empty() {
            let ev = evaluate_perplexity(model, heldout, cfg.objective, cfg.max_tokens_per_batch)?;
            let rec = serde_json::json!({
                "kind": "eval",
                "step": optim.step,
                "loss": ev.to_value(),
            });
            writeln!(metrics, "{rec}")?;
            metrics.flush()?;
            outcome.last_eval = Some(ev);
        }

        let due = cfg.checkpoint_every > 0 && optim.step % cfg.checkpoint_every == 0;
        if due || optim.step == cfg.max_updates {
            let dir = out_dir.join(format!("checkpoint-{:06}", optim.step));
            save_train_state(&dir, model, optim)?;
            outcome.checkpoints.push(dir);
        }
    }

    if !heldout.is_empty() && outcome.last_eval.is_none() {
        outcome.last_eval =
            Some(evaluate_perplexity(model, heldout, cfg.objective, cfg.max_tokens_per_batch)?);
    }
    Ok(outcome)
}
