//! Corpus ingestion, vocabularies, example construction, and batching.
//!
//! Ingest format: UTF-8 text, one example per line, blank line = document
//! break, tokens separated by whitespace. Vocabularies reserve the first four
//! ids for `<s>`, `<sep>`, `<pad>`, `<unk>` so boundary/padding ids stay
//! stable between pretraining and fine-tuning regardless of corpus.

mod bpe;
mod chars;
mod synth;

pub use bpe::{build_bpe, BpeCode};
pub use chars::{encode_chars, CHAR_BOW, CHAR_EOW, CHAR_PAD, CHAR_TABLE_SIZE};
pub use synth::{neighbor_table, split_corpus, synth_corpus, SynthKind};

use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write};

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<s>", "<sep>", "<pad>", "<unk>"];

/// Token-type inventory with dense ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    types: Vec<String>,
    counts: Vec<u64>,
    by_string: HashMap<String, u32>,
}

impl Vocab {
    /// Build from observed type counts. Non-reserved types are ordered by
    /// descending count, ties by string, so the id assignment is a pure
    /// function of the counts.
    pub fn from_counts(counts: &HashMap<String, u64>) -> Result<Self> {
        let mut entries: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(s, _)| !RESERVED.contains(&s.as_str()))
            .map(|(s, &c)| (s, c))
            .collect();
        if entries.is_empty() {
            return Err(Error::Data("vocabulary build saw an empty corpus".into()));
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut types: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut cts = vec![0u64; RESERVED.len()];
        for (s, c) in entries {
            types.push(s.clone());
            cts.push(c);
        }
        let by_string = types
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(Vocab {
            types,
            counts: cts,
            by_string,
        })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    pub fn id(&self, s: &str) -> Option<u32> {
        self.by_string.get(s).copied()
    }

    pub fn id_or_unk(&self, s: &str) -> u32 {
        self.id(s).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.types[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn contains(&self, s: &str) -> bool {
        self.by_string.contains_key(s)
    }

    /// One `type<TAB>count` line per id, reserved rows first.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        for (t, c) in self.types.iter().zip(&self.counts) {
            writeln!(w, "{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut types = Vec::new();
        let mut counts = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (t, c) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("vocab line {} lacks a tab: {line:?}", lineno + 1))
            })?;
            let c: u64 = c
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {}: bad count {c:?}", lineno + 1)))?;
            types.push(t.to_string());
            counts.push(c);
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if types.get(i).map(String::as_str) != Some(*want) {
                return Err(Error::Data(format!(
                    "vocab file must start with reserved types {RESERVED:?}, found {:?}",
                    types.get(i)
                )));
            }
        }
        let by_string = types
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Ok(Vocab {
            types,
            counts,
            by_string,
        })
    }
}

/// Token-to-id codec: plain word lookup or BPE segmentation.
#[derive(Debug, Clone)]
pub enum Codec {
    Word(Vocab),
    Bpe { code: BpeCode, vocab: Vocab },
}

impl Codec {
    pub fn vocab(&self) -> &Vocab {
        match self {
            Codec::Word(v) => v,
            Codec::Bpe { vocab, .. } => vocab,
        }
    }

    /// Whitespace-tokenized line to surface tokens + ids (no markers).
    pub fn encode_line(&self, line: &str) -> (Vec<String>, Vec<u32>) {
        match self {
            Codec::Word(v) => {
                let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
                let ids = tokens.iter().map(|t| v.id_or_unk(t)).collect();
                (tokens, ids)
            }
            Codec::Bpe { code, vocab } => {
                let mut tokens = Vec::new();
                let mut ids = Vec::new();
                for word in line.split_whitespace() {
                    for piece in code.segment(word, vocab) {
                        ids.push(vocab.id_or_unk(&piece));
                        tokens.push(piece);
                    }
                }
                (tokens, ids)
            }
        }
    }

    /// Inverse of `encode_line` on in-vocabulary text.
    pub fn decode_tokens(&self, tokens: &[String]) -> String {
        match self {
            Codec::Word(_) => tokens.join(" "),
            Codec::Bpe { .. } => bpe::join_pieces(tokens),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Sentence,
    Paragraph,
    Block,
}

/// How raw documents become examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleMode {
    /// One example per input line.
    Sentence,
    /// One example per blank-line-delimited document.
    Paragraph,
    /// Concatenate everything, crop consecutive spans of `len` tokens; the
    /// final short remainder is kept.
    Block { len: usize },
}

/// One training example: `<s> tokens… <s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    pub origin: Origin,
}

impl Example {
    fn wrap(mut tokens: Vec<String>, mut ids: Vec<u32>, origin: Origin) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("example with no content tokens".into()));
        }
        tokens.insert(0, RESERVED[BOS as usize].to_string());
        tokens.push(RESERVED[BOS as usize].to_string());
        ids.insert(0, BOS);
        ids.push(BOS);
        Ok(Example { tokens, ids, origin })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always has two markers and content
    }
}

/// Split reader content into documents of lines.
pub fn load_docs<R: BufRead>(r: &mut R) -> Result<Vec<Vec<String>>> {
    let mut docs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

/// Encode documents into boundary-marked examples.
///
/// Documents that tokenize to nothing are skipped with a warning on stderr.
pub fn make_examples(docs: &[Vec<String>], mode: ExampleMode, codec: &Codec) -> Result<Vec<Example>> {
    if let ExampleMode::Block { len } = mode {
        if len < 2 {
            return Err(Error::Config(format!("block length must be ≥ 2, got {len}")));
        }
    }
    let mut out = Vec::new();
    let mut block_tokens: Vec<String> = Vec::new();
    let mut block_ids: Vec<u32> = Vec::new();
    for (di, doc) in docs.iter().enumerate() {
        let mut doc_tokens: Vec<String> = Vec::new();
        let mut doc_ids: Vec<u32> = Vec::new();
        for line in doc {
            let (tokens, ids) = codec.encode_line(line);
            if ids.is_empty() {
                continue;
            }
            match mode {
                ExampleMode::Sentence => out.push(Example::wrap(tokens, ids, Origin::Sentence)?),
                ExampleMode::Paragraph => {
                    doc_tokens.extend(tokens);
                    doc_ids.extend(ids);
                }
                ExampleMode::Block { .. } => {
                    block_tokens.extend(tokens);
                    block_ids.extend(ids);
                }
            }
        }
        match mode {
            ExampleMode::Paragraph => {
                if doc_ids.is_empty() {
                    eprintln!("warning: document {} tokenizes to nothing, skipped", di + 1);
                } else {
                    out.push(Example::wrap(doc_tokens, doc_ids, Origin::Paragraph)?);
                }
            }
            ExampleMode::Sentence if doc.iter().all(|l| l.split_whitespace().next().is_none()) => {
                eprintln!("warning: document {} tokenizes to nothing, skipped", di + 1);
            }
            _ => {}
        }
    }
    if let ExampleMode::Block { len } = mode {
        let mut start = 0usize;
        while start < block_ids.len() {
            let end = (start + len).min(block_ids.len());
            out.push(Example::wrap(
                block_tokens[start..end].to_vec(),
                block_ids[start..end].to_vec(),
                Origin::Block,
            )?);
            start = end;
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no examples produced from input".into()));
    }
    Ok(out)
}

/// Padded id matrix plus per-row truth.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row-major B×T ids, `<pad>` beyond each row's length.
    pub ids: Vec<u32>,
    /// Surface tokens per row (true length, no padding).
    pub tokens: Vec<Vec<String>>,
    pub rows: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
    /// Row-major B×T; true at real positions, false at padding.
    pub mask: Vec<bool>,
}

impl Batch {
    fn from_examples(examples: &[&Example]) -> Batch {
        let rows = examples.len();
        let width = examples.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows * width];
        let mut mask = vec![false; rows * width];
        let mut lengths = Vec::with_capacity(rows);
        let mut tokens = Vec::with_capacity(rows);
        for (r, ex) in examples.iter().enumerate() {
            lengths.push(ex.len());
            tokens.push(ex.tokens.clone());
            for (c, &id) in ex.ids.iter().enumerate() {
                ids[r * width + c] = id;
                mask[r * width + c] = true;
            }
        }
        Batch {
            ids,
            tokens,
            rows,
            width,
            lengths,
            mask,
        }
    }

    pub fn id_at(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width + col]
    }
}

/// Fixed-count batches in the caller's order. No sorting: the caller's
/// permutation decides which examples share a pad width.
pub fn make_batches_by_count(examples: &[&Example], batch_size: usize) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Data("cannot batch zero examples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(examples.chunks(batch_size).map(Batch::from_examples).collect())
}

/// Length-bucketed greedy packing under a padded-token budget.
///
/// Examples are sorted by (length, arrival index) and appended while
/// `max_len_in_bucket × (count + 1) ≤ max_tokens_per_batch`.
pub fn make_batches(examples: &[Example], max_tokens_per_batch: usize) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Data("cannot batch zero examples".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].len(), i));
    if let Some(&big) = order.iter().find(|&&i| examples[i].len() > max_tokens_per_batch) {
        return Err(Error::Config(format!(
            "example {big} has {} tokens, over the batch budget of {max_tokens_per_batch}",
            examples[big].len()
        )));
    }
    let mut batches = Vec::new();
    let mut bucket: Vec<&Example> = Vec::new();
    let mut bucket_max = 0usize;
    for &i in &order {
        let l = examples[i].len();
        let new_max = bucket_max.max(l);
        if !bucket.is_empty() && new_max * (bucket.len() + 1) > max_tokens_per_batch {
            batches.push(Batch::from_examples(&bucket));
            bucket.clear();
            bucket_max = 0;
        }
        bucket_max = bucket_max.max(l);
        bucket.push(&examples[i]);
    }
    if !bucket.is_empty() {
        batches.push(Batch::from_examples(&bucket));
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word_codec(corpus: &str) -> Codec {
        let mut counts = HashMap::new();
        for w in corpus.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
        Codec::Word(Vocab::from_counts(&counts).unwrap())
    }

    #[test]
    fn vocab_orders_by_count_then_string() {
        let mut counts = HashMap::new();
        counts.insert("bb".to_string(), 5);
        counts.insert("aa".to_string(), 5);
        counts.insert("cc".to_string(), 9);
        let v = Vocab::from_counts(&counts).unwrap();
        assert_eq!(v.token(4), "cc");
        assert_eq!(v.token(5), "aa");
        assert_eq!(v.token(6), "bb");
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id_or_unk("zz"), UNK);
    }

    #[test]
    fn vocab_save_load_identity() {
        let mut counts = HashMap::new();
        counts.insert("alpha".to_string(), 3);
        counts.insert("beta".to_string(), 7);
        let v = Vocab::from_counts(&counts).unwrap();
        let mut buf = Vec::new();
        v.save(&mut buf).unwrap();
        let back = Vocab::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), v.len());
        for i in 0..v.len() as u32 {
            assert_eq!(back.token(i), v.token(i));
            assert_eq!(back.count(i), v.count(i));
        }
    }

    #[test]
    fn sentence_mode_wraps_each_line() {
        let docs = vec![vec!["a b c d e".to_string(), "a b c d e f g".to_string()]];
        let codec = word_codec("a b c d e f g");
        let ex = make_examples(&docs, ExampleMode::Sentence, &codec).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].len(), 7);
        assert_eq!(ex[1].len(), 9);
        for e in &ex {
            assert_eq!(e.ids[0], BOS);
            assert_eq!(*e.ids.last().unwrap(), BOS);
        }
    }

    #[test]
    fn block_mode_keeps_remainder() {
        // 1200 tokens over several lines, block len 512 -> 512, 512, 176
        let line: String = (0..100).map(|i| format!("w{} ", i % 7)).collect();
        let docs = vec![vec![line.trim().to_string(); 12]];
        let codec = word_codec(&docs[0][0]);
        let ex = make_examples(&docs, ExampleMode::Block { len: 512 }, &codec).unwrap();
        let lens: Vec<usize> = ex.iter().map(|e| e.len() - 2).collect();
        assert_eq!(lens, vec![512, 512, 176]);
    }

    #[test]
    fn paragraph_and_sentence_conserve_tokens() {
        let docs = vec![
            vec!["a b".to_string(), "c d e".to_string()],
            vec!["f".to_string()],
        ];
        let codec = word_codec("a b c d e f");
        let s = make_examples(&docs, ExampleMode::Sentence, &codec).unwrap();
        let p = make_examples(&docs, ExampleMode::Paragraph, &codec).unwrap();
        let content = |ex: &[Example]| ex.iter().map(|e| e.len() - 2).sum::<usize>();
        assert_eq!(content(&s), content(&p));
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn greedy_packing_matches_trace() {
        let codec = word_codec("x");
        let mk = |n: usize| {
            Example::wrap(
                vec!["x".to_string(); n - 2],
                vec![codec.vocab().id("x").unwrap(); n - 2],
                Origin::Sentence,
            )
            .unwrap()
        };
        let examples = vec![mk(4), mk(4), mk(9)];
        let batches = make_batches(&examples, 18).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].lengths, vec![4, 4]);
        assert_eq!(batches[1].lengths, vec![9]);
        // single example, no padding
        assert_eq!(batches[1].width, 9);
        assert!(batches[1].mask.iter().all(|&m| m));
    }

    #[test]
    fn pad_positions_carry_pad_id_and_false_mask() {
        let codec = word_codec("x y");
        let e1 = Example::wrap(
            vec!["x".to_string()],
            vec![codec.vocab().id("x").unwrap()],
            Origin::Sentence,
        )
        .unwrap();
        let e2 = Example::wrap(
            vec!["x".to_string(), "y".to_string(), "x".to_string()],
            vec![
                codec.vocab().id("x").unwrap(),
                codec.vocab().id("y").unwrap(),
                codec.vocab().id("x").unwrap(),
            ],
            Origin::Sentence,
        )
        .unwrap();
        let batches = make_batches(&[e1, e2], 100).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.width, 5);
        for c in 3..5 {
            assert_eq!(b.id_at(0, c), PAD);
            assert!(!b.mask[c]);
        }
    }

    #[test]
    fn oversized_example_is_an_error() {
        let codec = word_codec("x");
        let e = Example::wrap(
            vec!["x".to_string(); 50],
            vec![codec.vocab().id("x").unwrap(); 50],
            Origin::Sentence,
        )
        .unwrap();
        let err = make_batches(&[e], 10).unwrap_err();
        assert!(err.to_string().contains("52 tokens"));
    }

    #[test]
    fn count_batches_keep_caller_order() {
        let codec = word_codec("x y");
        let x = codec.vocab().id("x").unwrap();
        let y = codec.vocab().id("y").unwrap();
        let mk = |first: u32, n: usize| {
            Example::wrap(vec!["t".to_string(); n], vec![first; n], Origin::Sentence).unwrap()
        };
        // Deliberately unsorted lengths; chunking must not reorder them.
        let examples = [mk(x, 3), mk(y, 1), mk(x, 2), mk(y, 4), mk(x, 1)];
        let refs: Vec<&Example> = examples.iter().collect();
        let batches = make_batches_by_count(&refs, 2).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[0].lengths, vec![5, 3]);
        assert_eq!(batches[0].id_at(0, 1), x);
        assert_eq!(batches[0].id_at(1, 1), y);
        assert_eq!(batches[1].lengths, vec![4, 6]);
        assert_eq!(batches[2].rows, 1);
        assert!(make_batches_by_count(&[], 2).is_err());
        assert!(make_batches_by_count(&refs, 0).is_err());
    }
}
