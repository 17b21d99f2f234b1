//! Deterministic synthetic corpora for controlled experiments.
//!
//! The `NeighborDetermined` language is the interesting one: even (0-based)
//! positions carry i.i.d. uniform context tokens, and every odd position t
//! satisfies t = table[left][right] for a fixed random table built from two
//! permutations, table[a][b] = (π(a) + σ(b)) mod V. The table is a Latin
//! square, so the center token is exactly determined by both neighbors
//! together while each side alone leaves it uniform over all V values. A
//! cloze model can reach perplexity 1 on odd positions; any one-directional
//! model is stuck at V on every position.

use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Odd positions are a bijective function of both neighbors.
    NeighborDetermined { vocab: usize },
    /// Trigram language with a fixed random conditional table.
    Ngram { vocab: usize },
    /// Each line is a short random span repeated twice.
    Copy { vocab: usize },
}

const LINES_PER_DOC: usize = 8;

/// Lookup table for the neighbor-determined rule, flattened V×V.
pub fn neighbor_table(seed: u64, vocab: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "synth-nd-perm");
    let mut pi: Vec<usize> = (0..vocab).collect();
    let mut sigma: Vec<usize> = (0..vocab).collect();
    pi.shuffle(&mut r);
    sigma.shuffle(&mut r);
    let mut table = vec![0usize; vocab * vocab];
    for a in 0..vocab {
        for b in 0..vocab {
            table[a * vocab + b] = (pi[a] + sigma[b]) % vocab;
        }
    }
    table
}

/// Trigram conditional probabilities, flattened [a][b][t], rows sum to one.
pub fn ngram_probs(seed: u64, vocab: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "synth-ngram-probs");
    let mut probs = vec![0.0; vocab * vocab * vocab];
    for ab in 0..vocab * vocab {
        let row = &mut probs[ab * vocab..(ab + 1) * vocab];
        let mut sum = 0.0;
        for p in row.iter_mut() {
            *p = r.gen_range(0.05..1.0);
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    probs
}

/// One draw split from the tail: held-out lines are fresh draws that share
/// the language, since the generator's tables are a function of the seed.
pub fn split_corpus(
    kind: SynthKind,
    seed: u64,
    train_lines: usize,
    heldout_lines: usize,
) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let all: Vec<String> =
        synth_corpus(kind, seed, train_lines + heldout_lines).into_iter().flatten().collect();
    let chunk = |lines: &[String]| lines.chunks(LINES_PER_DOC).map(|c| c.to_vec()).collect();
    (chunk(&all[..train_lines]), chunk(&all[train_lines..]))
}

/// Generate `size` lines grouped into documents.
pub fn synth_corpus(kind: SynthKind, seed: u64, size: usize) -> Vec<Vec<String>> {
    assert!(size > 0, "synthetic corpus size must be positive");
    let mut lines = Vec::with_capacity(size);
    match kind {
        SynthKind::NeighborDetermined { vocab } => {
            let table = neighbor_table(seed, vocab);
            let mut r = rng::stream(seed, "synth-nd-draw");
            for _ in 0..size {
                // odd total length so the line starts and ends with context;
                // short lines keep the (left, right) cells densely revisited,
                // which is what makes the rule learnable at desk scale
                let pairs = r.gen_range(1..=4usize);
                let len = 2 * pairs + 1;
                let mut toks = vec![0usize; len];
                for t in toks.iter_mut().step_by(2) {
                    *t = r.gen_range(0..vocab);
                }
                for i in (1..len).step_by(2) {
                    toks[i] = table[toks[i - 1] * vocab + toks[i + 1]];
                }
                lines.push(render(&toks));
            }
        }
        SynthKind::Ngram { vocab } => {
            let probs = ngram_probs(seed, vocab);
            let mut r = rng::stream(seed, "synth-ngram-draw");
            for _ in 0..size {
                let len = 12usize;
                let mut toks = Vec::with_capacity(len);
                toks.push(r.gen_range(0..vocab));
                toks.push(r.gen_range(0..vocab));
                while toks.len() < len {
                    let (a, b) = (toks[toks.len() - 2], toks[toks.len() - 1]);
                    let row = &probs[(a * vocab + b) * vocab..(a * vocab + b + 1) * vocab];
                    let u: f64 = r.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut pick = vocab - 1;
                    for (t, &p) in row.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = t;
                            break;
                        }
                    }
                    toks.push(pick);
                }
                lines.push(render(&toks));
            }
        }
        SynthKind::Copy { vocab } => {
            let mut r = rng::stream(seed, "synth-copy-draw");
            for _ in 0..size {
                let half = r.gen_range(3..=6usize);
                let span: Vec<usize> = (0..half).map(|_| r.gen_range(0..vocab)).collect();
                let mut toks = span.clone();
                toks.extend(span);
                lines.push(render(&toks));
            }
        }
    }
    lines
        .chunks(LINES_PER_DOC)
        .map(|c| c.to_vec())
        .collect()
}

fn render(toks: &[usize]) -> String {
    let mut s = String::new();
    for (i, t) in toks.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("w{t}"));
    }
    s
}
