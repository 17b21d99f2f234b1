//! Shared helpers for unit tests.

use crate::model::ModelConfig;
use crate::text::{make_batches, Batch, Example, Origin, Vocab, BOS};
use std::collections::HashMap;

/// Vocabulary of `w0..w{n-1}` with strictly descending counts.
pub fn toy_vocab(n_words: usize) -> Vocab {
    let mut counts = HashMap::new();
    for i in 0..n_words {
        counts.insert(format!("w{i}"), (n_words - i) as u64 * 10);
    }
    Vocab::from_counts(&counts).unwrap()
}

/// Marker-wrapped example straight from content ids.
pub fn example_of(ids: &[u32], vocab: &Vocab) -> Example {
    let mut tokens: Vec<String> = ids.iter().map(|&i| vocab.token(i).to_string()).collect();
    let mut ids = ids.to_vec();
    tokens.insert(0, "<s>".to_string());
    tokens.push("<s>".to_string());
    ids.insert(0, BOS);
    ids.push(BOS);
    Example {
        tokens,
        ids,
        origin: Origin::Sentence,
    }
}

/// Single batch out of the given id rows (budget large enough to hold all).
pub fn batch_of(ids_rows: &[&[u32]], vocab: &Vocab) -> Batch {
    let examples: Vec<Example> = ids_rows.iter().map(|r| example_of(r, vocab)).collect();
    let mut batches = make_batches(&examples, 1_000_000).unwrap();
    assert_eq!(batches.len(), 1, "test helper expects one batch");
    batches.remove(0)
}

/// Gradcheck-sized model configuration.
pub fn tiny_config(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(vocab);
    c.d_model = 16;
    c.n_heads = 2;
    c.final_heads = 2;
    c.ffn_dim = 32;
    c.char_dim = 4;
    c.char_filters = vec![(1, 4), (2, 8), (3, 12)];
    c.max_word_len = 8;
    c
}
