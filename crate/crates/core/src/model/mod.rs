//! Two-tower bidirectional transformer.
//!
//! A forward tower reads left-to-right (state at i sees tokens 1..=i), a
//! backward tower reads right-to-left (state at i sees tokens i..=n); both
//! share input embeddings. A combination attention layer then predicts every
//! token i from the towers' states with token i itself masked out of both
//! query and memory, so each prediction is a true cloze: conditioned on the
//! entire sequence except the target.
//!
//! Every attention exposes one all-zero key/value sentinel so degenerate
//! queries (first/last position, empty context) always have something finite
//! to attend to.

mod attention;
mod charcnn;
mod classifier;
mod combine;

pub use attention::{sinusoidal_positions, tower_forward, Direction, TowerState};
pub use charcnn::char_cnn_encode;
pub use classifier::{classifier_nll, full_log_probs};
pub use combine::{combine_features, combine_features_with_mask, combine_mask, CombineMode};

use crate::rng::DropoutCtx;
use crate::tensor::{read_tensor, write_tensor, Scalar, Tape, Tensor, Var};
use crate::text::{encode_chars, Batch, CHAR_TABLE_SIZE};
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const NEG_MASK: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    /// Elementwise sum of the two boundary states.
    Sum,
    /// Concatenate, then learn a projection back to model dim.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Embedding,
    CharCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// Output logits against the (shared) input embedding table.
    FlatTied,
    /// Banded softmax: frequent types in a full-width head, rare types in
    /// low-rank tail bands reached through pointer slots in the head.
    Adaptive,
}

/// Band layout for the adaptive classifier: `(count, dim)` with the last
/// band's count resolved against the vocabulary at build time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BandSpec {
    Counted { count: usize, dim: usize },
    Rest { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub final_heads: usize,
    pub query_mode: QueryMode,
    pub encoder: EncoderKind,
    pub classifier: ClassifierKind,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub relu_dropout: f64,
    pub max_len: usize,
    pub char_dim: usize,
    pub char_filters: Vec<(usize, usize)>,
    pub max_word_len: usize,
    pub bands: Vec<BandSpec>,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a laptop core in
    /// minutes, structured identically to the full-size setting.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            ffn_dim: 256,
            final_heads: 4,
            query_mode: QueryMode::Sum,
            encoder: EncoderKind::Embedding,
            classifier: ClassifierKind::FlatTied,
            dropout: 0.1,
            attn_dropout: 0.1,
            relu_dropout: 0.05,
            max_len: 514,
            char_dim: 16,
            char_filters: vec![(1, 8), (2, 16), (3, 24), (4, 32), (5, 32), (6, 32)],
            max_word_len: 16,
            bands: vec![
                BandSpec::Counted { count: 50, dim: 32 },
                BandSpec::Counted { count: 150, dim: 16 },
                BandSpec::Rest { dim: 8 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        c(self.vocab_size > 4, format!("vocab_size {} leaves no content types", self.vocab_size))?;
        c(self.d_model % 2 == 0, format!("d_model {} must be even for sinusoids", self.d_model))?;
        c(
            self.d_model % self.n_heads == 0,
            format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
        )?;
        c(
            self.d_model % self.final_heads == 0,
            format!("d_model {} not divisible by final_heads {}", self.d_model, self.final_heads),
        )?;
        c(self.n_blocks > 0, "n_blocks must be positive".into())?;
        c(self.ffn_dim > 0, "ffn_dim must be positive".into())?;
        c(self.max_len >= 3, format!("max_len {} cannot hold a marked example", self.max_len))?;
        for (name, v) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("relu_dropout", self.relu_dropout),
        ] {
            c((0.0..1.0).contains(&v), format!("{name} {v} outside [0,1)"))?;
        }
        if self.encoder == EncoderKind::CharCnn {
            c(!self.char_filters.is_empty(), "char encoder needs at least one filter".into())?;
            c(self.char_dim > 0, "char_dim must be positive".into())?;
            c(self.max_word_len >= 3, "max_word_len must fit BOW+byte+EOW".into())?;
            for &(w, ch) in &self.char_filters {
                c(
                    w > 0 && w <= self.max_word_len && ch > 0,
                    format!("bad char filter {w}x{ch} for max_word_len {}", self.max_word_len),
                )?;
            }
        }
        if self.classifier == ClassifierKind::FlatTied {
            c(
                self.encoder == EncoderKind::Embedding,
                "flat_tied classifier requires the embedding encoder (it reuses the table)".into(),
            )?;
        }
        if self.classifier == ClassifierKind::Adaptive {
            self.resolve_bands()?;
        }
        Ok(())
    }

    /// Concrete (start, count, dim) triples partitioning the vocabulary.
    pub fn resolve_bands(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.bands.is_empty() {
            return Err(Error::Config("adaptive classifier needs at least one band".into()));
        }
        let mut out = Vec::new();
        let mut start = 0usize;
        for (i, b) in self.bands.iter().enumerate() {
            match *b {
                BandSpec::Counted { count, dim } => {
                    if count == 0 || dim == 0 {
                        return Err(Error::Config(format!("band {i} has zero count or dim")));
                    }
                    out.push((start, count, dim));
                    start += count;
                }
                BandSpec::Rest { dim } => {
                    if i + 1 != self.bands.len() {
                        return Err(Error::Config("`rest` band must be last".into()));
                    }
                    if dim == 0 {
                        return Err(Error::Config("rest band has zero dim".into()));
                    }
                    if start >= self.vocab_size {
                        return Err(Error::Config(format!(
                            "bands already cover {start} of {} types before `rest`",
                            self.vocab_size
                        )));
                    }
                    out.push((start, self.vocab_size - start, dim));
                    start = self.vocab_size;
                }
            }
        }
        if start != self.vocab_size {
            return Err(Error::Config(format!(
                "bands cover {start} types but the vocabulary has {}",
                self.vocab_size
            )));
        }
        Ok(out)
    }

    pub fn char_concat_dim(&self) -> usize {
        self.char_filters.iter().map(|&(_, ch)| ch).sum()
    }

    /// Query input width before the combination attention.
    pub fn query_in_dim(&self) -> usize {
        match self.query_mode {
            QueryMode::Sum => self.d_model,
            QueryMode::Concat => 2 * self.d_model,
        }
    }
}

/// Named parameter tensors in stable insertion order.
///
/// Iteration order is load-bearing: the optimizer walks parameters in this
/// order, so it must be identical across runs for bit-reproducibility.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Invariant(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Invariant(format!("unknown parameter {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn elements_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters bound onto a tape as leaves, addressable by name.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name:?} requested from bound set"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Some parameters exist only for certain configurations (band
    /// projections, the char path); callers branch on presence.
    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters from the given seed. The same (config, seed) pair
    /// always produces bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let d = config.d_model;
        let std = 0.02;
        let mut mk = |name: &str, shape: &[usize], kind: InitKind| -> Result<()> {
            let mut r = crate::rng::stream(seed, &format!("init.{name}"));
            let t = match kind {
                InitKind::Normal => Tensor::randn(shape, std, &mut r),
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::Ones => Tensor::full(shape, T::one()),
            };
            p.insert(name, t)
        };

        match config.encoder {
            EncoderKind::Embedding => {
                mk("embed.table", &[config.vocab_size, d], InitKind::Normal)?;
            }
            EncoderKind::CharCnn => {
                mk("char.table", &[CHAR_TABLE_SIZE, config.char_dim], InitKind::Normal)?;
                for &(w, ch) in &config.char_filters {
                    mk(&format!("char.conv{w}.w"), &[w * config.char_dim, ch], InitKind::Normal)?;
                    mk(&format!("char.conv{w}.b"), &[ch], InitKind::Zeros)?;
                }
                let cc = config.char_concat_dim();
                mk("char.highway.wh", &[cc, cc], InitKind::Normal)?;
                mk("char.highway.bh", &[cc], InitKind::Zeros)?;
                mk("char.highway.wg", &[cc, cc], InitKind::Normal)?;
                mk("char.highway.bg", &[cc], InitKind::Zeros)?;
                mk("char.proj.w", &[cc, d], InitKind::Normal)?;
                mk("char.proj.b", &[d], InitKind::Zeros)?;
            }
        }

        for dir in ["fwd", "bwd"] {
            for l in 0..config.n_blocks {
                let b = format!("{dir}.b{l}");
                for wn in ["wq", "wk", "wv", "wo"] {
                    mk(&format!("{b}.attn.{wn}"), &[d, d], InitKind::Normal)?;
                }
                for bn in ["bq", "bk", "bv", "bo"] {
                    mk(&format!("{b}.attn.{bn}"), &[d], InitKind::Zeros)?;
                }
                mk(&format!("{b}.ln1.g"), &[d], InitKind::Ones)?;
                mk(&format!("{b}.ln1.b"), &[d], InitKind::Zeros)?;
                mk(&format!("{b}.ln2.g"), &[d], InitKind::Ones)?;
                mk(&format!("{b}.ln2.b"), &[d], InitKind::Zeros)?;
                mk(&format!("{b}.ffn.w1"), &[d, config.ffn_dim], InitKind::Normal)?;
                mk(&format!("{b}.ffn.b1"), &[config.ffn_dim], InitKind::Zeros)?;
                mk(&format!("{b}.ffn.w2"), &[config.ffn_dim, d], InitKind::Normal)?;
                mk(&format!("{b}.ffn.b2"), &[d], InitKind::Zeros)?;
            }
            mk(&format!("{dir}.final_ln.g"), &[d], InitKind::Ones)?;
            mk(&format!("{dir}.final_ln.b"), &[d], InitKind::Zeros)?;
        }

        if config.query_mode == QueryMode::Concat {
            mk("comb.qproj.w", &[2 * d, d], InitKind::Normal)?;
            mk("comb.qproj.b", &[d], InitKind::Zeros)?;
        }
        mk("comb.ln_q.g", &[d], InitKind::Ones)?;
        mk("comb.ln_q.b", &[d], InitKind::Zeros)?;
        mk("comb.ln_m.g", &[d], InitKind::Ones)?;
        mk("comb.ln_m.b", &[d], InitKind::Zeros)?;
        for wn in ["wq", "wk", "wv", "wo"] {
            mk(&format!("comb.attn.{wn}"), &[d, d], InitKind::Normal)?;
        }
        for bn in ["bq", "bk", "bv", "bo"] {
            mk(&format!("comb.attn.{bn}"), &[d], InitKind::Zeros)?;
        }
        mk("comb.ln2.g", &[d], InitKind::Ones)?;
        mk("comb.ln2.b", &[d], InitKind::Zeros)?;
        mk("comb.ffn.w1", &[d, config.ffn_dim], InitKind::Normal)?;
        mk("comb.ffn.b1", &[config.ffn_dim], InitKind::Zeros)?;
        mk("comb.ffn.w2", &[config.ffn_dim, d], InitKind::Normal)?;
        mk("comb.ffn.b2", &[d], InitKind::Zeros)?;

        match config.classifier {
            ClassifierKind::FlatTied => {
                mk("cls.bias", &[config.vocab_size], InitKind::Zeros)?;
            }
            ClassifierKind::Adaptive => {
                // A band at full model width needs no down-projection; this
                // keeps the one-band case on the same arithmetic path as the
                // flat classifier.
                let bands = config.resolve_bands()?;
                let n_tail = bands.len() - 1;
                let (_, head_count, head_dim) = bands[0];
                if head_dim != d {
                    mk("cls.head.proj", &[d, head_dim], InitKind::Normal)?;
                }
                mk("cls.head.emb", &[head_count + n_tail, head_dim], InitKind::Normal)?;
                mk("cls.head.bias", &[head_count + n_tail], InitKind::Zeros)?;
                for (k, &(_, count, dim)) in bands.iter().enumerate().skip(1) {
                    if dim != d {
                        mk(&format!("cls.band{k}.proj"), &[d, dim], InitKind::Normal)?;
                    }
                    mk(&format!("cls.band{k}.emb"), &[count, dim], InitKind::Normal)?;
                    mk(&format!("cls.band{k}.bias"), &[count], InitKind::Zeros)?;
                }
            }
        }

        Ok(Model { config, params: p })
    }

    /// Leaf every parameter onto the tape, preserving order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut index = HashMap::new();
        for (name, t) in self.params.iter() {
            index.insert(name.to_string(), vars.len());
            vars.push(tape.leaf(t.clone()));
        }
        Bound { vars, index }
    }

    /// Like `bind`, but nothing receives gradients. Backward passes through a
    /// frozen bind reach only leaves created elsewhere on the tape.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut index = HashMap::new();
        for (name, t) in self.params.iter() {
            index.insert(name.to_string(), vars.len());
            vars.push(tape.constant(t.clone()));
        }
        Bound { vars, index }
    }

    /// Named parameter snapshot in bind order; feeds the gradient checker.
    pub fn param_list(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Rebuild a Bound from externally created leaves (same order as bind).
    pub fn rebind(&self, vars: Vec<Var>) -> Bound {
        assert_eq!(vars.len(), self.params.len(), "leaf count must match parameter count");
        let index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.to_string(), i))
            .collect();
        Bound { vars, index }
    }

    /// Trainable elements outside the classifier, by direct count.
    pub fn backbone_elements(&self) -> usize {
        self.params.elements_matching(|n| !n.starts_with("cls."))
    }

    /// The same count from the configuration alone.
    pub fn backbone_elements_analytic(&self) -> usize {
        let c = &self.config;
        let d = c.d_model;
        let f = c.ffn_dim;
        let encoder = match c.encoder {
            EncoderKind::Embedding => c.vocab_size * d,
            EncoderKind::CharCnn => {
                let cc = c.char_concat_dim();
                CHAR_TABLE_SIZE * c.char_dim
                    + c.char_filters
                        .iter()
                        .map(|&(w, ch)| w * c.char_dim * ch + ch)
                        .sum::<usize>()
                    + 2 * (cc * cc + cc)
                    + cc * d
                    + d
            }
        };
        let block = 4 * (d * d + d) + 4 * d + (d * f + f) + (f * d + d);
        let towers = 2 * (c.n_blocks * block + 2 * d);
        let qproj = match c.query_mode {
            QueryMode::Sum => 0,
            QueryMode::Concat => 2 * d * d + d,
        };
        let comb = qproj + 4 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        encoder + towers + comb
    }

    // ---- checkpoints ----

    /// Write `config.txt`, `params.manifest`, `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let cfg = config_to_pairs(&self.config);
        let mut w = BufWriter::new(std::fs::File::create(dir.join("config.txt"))?);
        for (k, v) in cfg {
            writeln!(w, "{k}={v}")?;
        }
        w.flush()?;
        let mut mw = BufWriter::new(std::fs::File::create(dir.join("params.manifest"))?);
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
            writeln!(mw, "{name}\t{}", dims.join("x"))?;
        }
        mw.flush()?;
        let mut bw = BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
        for (_, t) in self.params.iter() {
            write_tensor(&mut bw, t)?;
        }
        bw.flush()?;
        Ok(())
    }

    /// Load a checkpoint, failing loudly on any config, name, or shape drift.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_text = std::fs::read_to_string(dir.join("config.txt"))?;
        let pairs = parse_pairs(&cfg_text)?;
        let config = config_from_pairs(&pairs)?;
        let mut model = Model::<T>::init(config, 0)?;

        let manifest = std::fs::read_to_string(dir.join("params.manifest"))?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        let mut listed = Vec::new();
        for line in manifest.lines().filter(|l| !l.is_empty()) {
            let (name, dims) = line.split_once('\t').ok_or_else(|| {
                Error::Serde(format!("manifest line lacks a tab: {line:?}"))
            })?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::Serde(format!("bad extent in {line:?}"))))
                .collect::<Result<_>>()?;
            listed.push((name.to_string(), shape));
        }
        if listed != expected {
            let diff = expected
                .iter()
                .zip(listed.iter())
                .find(|(e, l)| e != l)
                .map(|(e, l)| format!("first mismatch: expected {e:?}, found {l:?}"))
                .unwrap_or_else(|| {
                    format!("expected {} tensors, found {}", expected.len(), listed.len())
                });
            return Err(Error::Serde(format!(
                "checkpoint manifest does not match the configured model; {diff}"
            )));
        }

        let mut br = std::io::BufReader::new(std::fs::File::open(dir.join("params.bin"))?);
        for (name, t) in model.params.iter_mut() {
            let loaded: Tensor<T> = read_tensor(&mut br)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Serde(format!(
                    "tensor {name:?} stored as {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        let mut probe = [0u8; 1];
        if std::io::Read::read(&mut br, &mut probe)? != 0 {
            return Err(Error::Serde("trailing bytes after last tensor in params.bin".into()));
        }
        Ok(model)
    }
}

enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Embed a batch (token or char path), add sinusoidal positions, apply
/// model dropout. Returns [B, T, d].
pub fn encode_inputs<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    drop: &DropoutCtx,
) -> Result<Var> {
    if batch.width > cfg.max_len {
        return Err(Error::Config(format!(
            "batch width {} exceeds max_len {}",
            batch.width, cfg.max_len
        )));
    }
    let (b, t, d) = (batch.rows, batch.width, cfg.d_model);
    let embedded = match cfg.encoder {
        EncoderKind::Embedding => {
            let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(Error::Invariant(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            let rows = tape.index_select(bound.var("embed.table"), ids)?;
            tape.reshape(rows, vec![b, t, d])?
        }
        EncoderKind::CharCnn => {
            let mut char_ids: Vec<usize> = Vec::with_capacity(b * t * cfg.max_word_len);
            for r in 0..b {
                for c in 0..t {
                    let token = batch
                        .tokens
                        .get(r)
                        .and_then(|row| row.get(c))
                        .map(String::as_str)
                        .unwrap_or("<pad>");
                    for id in encode_chars(token, cfg.max_word_len) {
                        char_ids.push(id as usize);
                    }
                }
            }
            let flat = char_cnn_encode(tape, bound, cfg, &char_ids, b * t)?;
            tape.reshape(flat, vec![b, t, d])?
        }
    };
    // transformer-standard input scaling before adding unit-scale sinusoids
    let scaled = tape.scale(embedded, (d as f64).sqrt());
    let pos = sinusoidal_positions::<T>(t, d)?;
    let mut tiled = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        tiled.extend_from_slice(pos.data());
    }
    let posv = tape.constant(Tensor::new(vec![b, t, d], tiled)?);
    let x = tape.add(scaled, posv)?;
    apply_dropout(tape, x, cfg.dropout, drop)
}

/// Inverted dropout driven by the deterministic per-op RNG.
pub fn apply_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    drop: &DropoutCtx,
) -> Result<Var> {
    if !drop.train || rate == 0.0 {
        return Ok(x);
    }
    let mut r = drop.next_rng();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..tape.value(x).numel())
        .map(|_| {
            if rand::Rng::gen_range(&mut r, 0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.dropout_masked(x, mask)
}

// ---- config (de)serialization as ordered key=value pairs ----

pub fn config_to_pairs(c: &ModelConfig) -> Vec<(String, String)> {
    let filters: Vec<String> = c
        .char_filters
        .iter()
        .map(|&(w, ch)| format!("{w}x{ch}"))
        .collect();
    let bands: Vec<String> = c
        .bands
        .iter()
        .map(|b| match b {
            BandSpec::Counted { count, dim } => format!("{count}@{dim}"),
            BandSpec::Rest { dim } => format!("rest@{dim}"),
        })
        .collect();
    vec![
        ("vocab_size".into(), c.vocab_size.to_string()),
        ("d_model".into(), c.d_model.to_string()),
        ("n_blocks".into(), c.n_blocks.to_string()),
        ("n_heads".into(), c.n_heads.to_string()),
        ("ffn_dim".into(), c.ffn_dim.to_string()),
        ("final_heads".into(), c.final_heads.to_string()),
        (
            "query_mode".into(),
            match c.query_mode {
                QueryMode::Sum => "sum".into(),
                QueryMode::Concat => "concat".into(),
            },
        ),
        (
            "encoder".into(),
            match c.encoder {
                EncoderKind::Embedding => "embedding".into(),
                EncoderKind::CharCnn => "char_cnn".into(),
            },
        ),
        (
            "classifier".into(),
            match c.classifier {
                ClassifierKind::FlatTied => "flat_tied".into(),
                ClassifierKind::Adaptive => "adaptive".into(),
            },
        ),
        ("dropout".into(), c.dropout.to_string()),
        ("attn_dropout".into(), c.attn_dropout.to_string()),
        ("relu_dropout".into(), c.relu_dropout.to_string()),
        ("max_len".into(), c.max_len.to_string()),
        ("char_dim".into(), c.char_dim.to_string()),
        ("char_filters".into(), filters.join(",")),
        ("max_word_len".into(), c.max_word_len.to_string()),
        ("bands".into(), bands.join(",")),
    ]
}

pub fn parse_pairs(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {} is not key=value: {line:?}", lineno + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn config_from_pairs(p: &HashMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<&String> {
        p.get(k)
            .ok_or_else(|| Error::Config(format!("missing config key {k:?}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("config key {k:?} is not an integer: {:?}", p[k])))
    };
    let fnum = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("config key {k:?} is not a number: {:?}", p[k])))
    };
    let query_mode = match get("query_mode")?.as_str() {
        "sum" => QueryMode::Sum,
        "concat" => QueryMode::Concat,
        other => return Err(Error::Config(format!("unknown query_mode {other:?}"))),
    };
    let encoder = match get("encoder")?.as_str() {
        "embedding" => EncoderKind::Embedding,
        "char_cnn" => EncoderKind::CharCnn,
        other => return Err(Error::Config(format!("unknown encoder {other:?}"))),
    };
    let classifier = match get("classifier")?.as_str() {
        "flat_tied" => ClassifierKind::FlatTied,
        "adaptive" => ClassifierKind::Adaptive,
        other => return Err(Error::Config(format!("unknown classifier {other:?}"))),
    };
    let char_filters = get("char_filters")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (w, ch) = s
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("bad char filter {s:?}")))?;
            Ok((
                w.parse().map_err(|_| Error::Config(format!("bad filter width {w:?}")))?,
                ch.parse().map_err(|_| Error::Config(format!("bad filter channels {ch:?}")))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let bands = parse_bands(get("bands")?)?;
    let cfg = ModelConfig {
        vocab_size: num("vocab_size")?,
        d_model: num("d_model")?,
        n_blocks: num("n_blocks")?,
        n_heads: num("n_heads")?,
        ffn_dim: num("ffn_dim")?,
        final_heads: num("final_heads")?,
        query_mode,
        encoder,
        classifier,
        dropout: fnum("dropout")?,
        attn_dropout: fnum("attn_dropout")?,
        relu_dropout: fnum("relu_dropout")?,
        max_len: num("max_len")?,
        char_dim: num("char_dim")?,
        char_filters,
        max_word_len: num("max_word_len")?,
        bands,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parse `"50@32,150@16,rest@8"`.
pub fn parse_bands(s: &str) -> Result<Vec<BandSpec>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|part| {
            let (count, dim) = part
                .split_once('@')
                .ok_or_else(|| Error::Config(format!("band {part:?} is not count@dim")))?;
            let dim: usize = dim
                .parse()
                .map_err(|_| Error::Config(format!("bad band dim {dim:?}")))?;
            if count == "rest" {
                Ok(BandSpec::Rest { dim })
            } else {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::Config(format!("bad band count {count:?}")))?;
                Ok(BandSpec::Counted { count, dim })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_validates() {
        ModelConfig::desk(200).validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_head_split() {
        let mut c = ModelConfig::desk(100);
        c.n_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_roundtrips_through_pairs() {
        let mut c = ModelConfig::desk(321);
        c.query_mode = QueryMode::Concat;
        c.encoder = EncoderKind::CharCnn;
        c.classifier = ClassifierKind::Adaptive;
        let text: String = config_to_pairs(&c)
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let back = config_from_pairs(&parse_pairs(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bands_partition_vocab() {
        let mut c = ModelConfig::desk(500);
        c.classifier = ClassifierKind::Adaptive;
        let bands = c.resolve_bands().unwrap();
        assert_eq!(bands, vec![(0, 50, 32), (50, 150, 16), (200, 300, 8)]);
        // counted bands overshooting the vocab fail
        c.vocab_size = 120;
        assert!(c.resolve_bands().is_err());
    }

    #[test]
    fn init_is_deterministic_and_param_count_matches_formula() {
        let c = ModelConfig::desk(150);
        let a = Model::<f32>::init(c.clone(), 42).unwrap();
        let b = Model::<f32>::init(c, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {na} differs across inits");
        }
        assert_eq!(a.backbone_elements(), a.backbone_elements_analytic());
    }

    #[test]
    fn param_count_formula_covers_all_variants() {
        for (qm, enc, cls) in [
            (QueryMode::Sum, EncoderKind::Embedding, ClassifierKind::FlatTied),
            (QueryMode::Concat, EncoderKind::Embedding, ClassifierKind::Adaptive),
            (QueryMode::Sum, EncoderKind::CharCnn, ClassifierKind::Adaptive),
        ] {
            let mut c = ModelConfig::desk(260);
            c.query_mode = qm;
            c.encoder = enc;
            c.classifier = cls;
            let m = Model::<f32>::init(c, 7).unwrap();
            assert_eq!(
                m.backbone_elements(),
                m.backbone_elements_analytic(),
                "mismatch for {qm:?}/{enc:?}/{cls:?}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::init(ModelConfig::desk(80), 3).unwrap();
        m.save(dir.path()).unwrap();
        let back = Model::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, ta), (_, tb)) in back.params.iter().zip(m.params.iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        // corrupt the manifest: loader must refuse
        let manifest = dir.path().join("params.manifest");
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("64x64", "64x63")).unwrap();
        assert!(Model::<f32>::load(dir.path()).is_err());
    }
}
