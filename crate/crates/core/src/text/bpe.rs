//! Byte-pair encoding over whitespace-pretokenized text.
//!
//! Merges are learned on word-internal character sequences with no
//! end-of-word sentinel; word boundaries survive instead through a `@@`
//! continuation suffix on every non-final piece of a word, so decoding is
//! `join(" ")` + `"@@ " -> ""`. Types rarer than `min_frequency` are dropped
//! from the vocabulary and re-split at encode time by undoing merges until
//! every emitted piece is either in-vocabulary or a single character.

use super::Vocab;
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write};

pub const CONTINUATION: &str = "@@";

/// Ordered merge table.
#[derive(Debug, Clone)]
pub struct BpeCode {
    merges: Vec<(String, String)>,
    min_frequency: u64,
    rank: HashMap<(String, String), usize>,
    /// merged string -> originating pair; first merge wins on collisions.
    reverse: HashMap<String, (String, String)>,
}

impl BpeCode {
    fn from_merges(merges: Vec<(String, String)>, min_frequency: u64) -> Self {
        let mut rank = HashMap::new();
        let mut reverse = HashMap::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            rank.entry((l.clone(), r.clone())).or_insert(i);
            reverse.entry(format!("{l}{r}")).or_insert((l.clone(), r.clone()));
        }
        BpeCode {
            merges,
            min_frequency,
            rank,
            reverse,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn min_frequency(&self) -> u64 {
        self.min_frequency
    }

    /// One `left<SPACE>right` line per merge, in order.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: &mut R, min_frequency: u64) -> Result<Self> {
        let mut merges = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (l, rr) = line.split_once(' ').ok_or_else(|| {
                Error::Data(format!("merge line {} lacks a space: {line:?}", lineno + 1))
            })?;
            merges.push((l.to_string(), rr.to_string()));
        }
        Ok(Self::from_merges(merges, min_frequency))
    }

    /// Split a word into unmarked pieces by applying merges in rank order.
    pub fn segment_raw(&self, word: &str) -> Vec<String> {
        let mut pieces: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        if pieces.len() <= 1 {
            return pieces;
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..pieces.len() - 1 {
                if let Some(&r) = self
                    .rank
                    .get(&(pieces[i].clone(), pieces[i + 1].clone()))
                {
                    if best.map_or(true, |(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && pieces[i] == *l && pieces[i + 1] == *r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(pieces[i].clone());
                    i += 1;
                }
            }
            pieces = merged;
            if pieces.len() == 1 {
                break;
            }
        }
        pieces
    }

    /// Split a word into vocabulary-marked pieces, re-splitting any piece the
    /// vocabulary dropped.
    pub fn segment(&self, word: &str, vocab: &Vocab) -> Vec<String> {
        let raw = self.segment_raw(word);
        let mut out = Vec::with_capacity(raw.len());
        let last = raw.len() - 1;
        for (i, piece) in raw.iter().enumerate() {
            self.split_to_vocab(piece, i == last, vocab, &mut out);
        }
        out
    }

    fn split_to_vocab(&self, seg: &str, is_final: bool, vocab: &Vocab, out: &mut Vec<String>) {
        let marked = mark(seg, is_final);
        if vocab.contains(&marked) {
            out.push(marked);
            return;
        }
        if let Some((l, r)) = self.reverse.get(seg) {
            let (l, r) = (l.clone(), r.clone());
            self.split_to_vocab(&l, false, vocab, out);
            self.split_to_vocab(&r, is_final, vocab, out);
        } else {
            // single character unseen at build time; id mapping yields <unk>
            out.push(marked);
        }
    }
}

fn mark(piece: &str, is_final: bool) -> String {
    if is_final {
        piece.to_string()
    } else {
        format!("{piece}{CONTINUATION}")
    }
}

/// Undo piece marking: `["ab@@", "ab@@", "ab"] -> "ababab"`, spaces between words.
pub fn join_pieces(tokens: &[String]) -> String {
    let joined = tokens.join(" ");
    joined.replace(&format!("{CONTINUATION} "), "")
}

/// Learn merges on a corpus of documents-of-lines.
///
/// Each round merges the most frequent adjacent pair, ties broken by the
/// lexicographically smallest pair; learning stops early once the best pair
/// occurs fewer than twice. The returned vocabulary keeps marked piece types
/// occurring at least `min_freq` times.
pub fn build_bpe(
    docs: &[Vec<String>],
    num_merges: usize,
    min_freq: u64,
) -> Result<(BpeCode, Vocab)> {
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for doc in docs {
        for line in doc {
            for w in line.split_whitespace() {
                *word_counts.entry(w.to_string()).or_insert(0) += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Data("BPE build saw an empty corpus".into()));
    }
    // deterministic iteration order for all counting below
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut v: Vec<(&String, &u64)> = word_counts.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v.into_iter()
            .map(|(w, &c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
            .collect()
    };

    let mut merges: Vec<(String, String)> = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, count) in &words {
            for win in symbols.windows(2) {
                *pair_counts
                    .entry((win[0].clone(), win[1].clone()))
                    .or_insert(0) += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == l && symbols[i + 1] == r {
                    symbols[i] = format!("{l}{r}");
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        merges.push((l, r));
    }
    let code = BpeCode::from_merges(merges, min_freq);

    let mut type_counts: HashMap<String, u64> = HashMap::new();
    for (symbols, count) in &words {
        let last = symbols.len() - 1;
        for (i, s) in symbols.iter().enumerate() {
            *type_counts.entry(mark(s, i == last)).or_insert(0) += count;
        }
    }
    type_counts.retain(|_, &mut c| c >= min_freq);
    if type_counts.is_empty() {
        return Err(Error::Data(format!(
            "no BPE type reaches the frequency threshold {min_freq}"
        )));
    }
    let vocab = Vocab::from_counts(&type_counts)?;
    Ok((code, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Codec, UNK};

    fn doc(lines: &[&str]) -> Vec<Vec<String>> {
        vec![lines.iter().map(|s| s.to_string()).collect()]
    }

    #[test]
    fn single_merge_on_ababab() {
        let (code, _vocab) = build_bpe(&doc(&["ababab"]), 1, 1).unwrap();
        assert_eq!(code.merges(), &[("a".to_string(), "b".to_string())]);
        assert_eq!(code.segment_raw("ababab"), vec!["ab", "ab", "ab"]);
    }

    #[test]
    fn zero_merges_gives_character_vocabulary() {
        let (code, vocab) = build_bpe(&doc(&["abc abc"]), 0, 1).unwrap();
        assert!(code.merges().is_empty());
        // every non-reserved type is one character plus optional marker
        for id in 4..vocab.len() as u32 {
            let t = vocab.token(id);
            let bare = t.strip_suffix(CONTINUATION).unwrap_or(t);
            assert_eq!(bare.chars().count(), 1, "type {t:?} is not a character");
        }
        assert_eq!(code.segment_raw("abc"), vec!["a", "b", "c"]);
    }

    #[test]
    fn rare_type_dropped_and_decomposed() {
        // "ab" appears twice, below threshold 3, so the type "ab" is dropped
        // even though the merge (a,b) exists; encoding re-splits it into the
        // retained pieces a@@ and b.
        let lines = ["ab ab", "abc abc abc abc", "ac ac ac", "b b b c c c"];
        let (code, vocab) = build_bpe(&doc(&lines), 2, 3).unwrap();
        assert!(vocab.contains("abc"));
        assert!(!vocab.contains("ab"));
        let pieces = code.segment("ab", &vocab);
        assert_eq!(pieces, vec!["a@@", "b"]);
        for p in &pieces {
            assert!(vocab.contains(p), "piece {p:?} missing from vocab");
        }
        assert_eq!(join_pieces(&pieces), "ab");
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ba" and "ab" pairs tie at 2 occurrences; ("a","b") sorts first
        let (code, _) = build_bpe(&doc(&["bab bab"]), 1, 1).unwrap();
        assert_eq!(code.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn build_is_deterministic() {
        let lines = ["the cat sat on the mat", "the bat and the rat", "cat mat bat"];
        let (c1, v1) = build_bpe(&doc(&lines), 20, 2).unwrap();
        let (c2, v2) = build_bpe(&doc(&lines), 20, 2).unwrap();
        assert_eq!(c1.merges(), c2.merges());
        assert_eq!(v1.len(), v2.len());
        for i in 0..v1.len() as u32 {
            assert_eq!(v1.token(i), v2.token(i));
        }
    }

    #[test]
    fn roundtrip_through_codec() {
        let lines = [
            "she sells sea shells by the sea shore",
            "the shells she sells are sea shells",
        ];
        let (code, vocab) = build_bpe(&doc(&lines), 15, 1).unwrap();
        let codec = Codec::Bpe { code, vocab };
        for line in &lines {
            let (tokens, ids) = codec.encode_line(line);
            assert!(!ids.contains(&UNK), "unexpected <unk> in {tokens:?}");
            assert_eq!(codec.decode_tokens(&tokens), *line);
        }
    }

    #[test]
    fn unseen_character_maps_to_unk() {
        let (code, vocab) = build_bpe(&doc(&["aa bb aa bb"]), 5, 1).unwrap();
        let codec = Codec::Bpe { code, vocab };
        let (_, ids) = codec.encode_line("aq");
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn save_load_identity() {
        let (code, _) = build_bpe(&doc(&["banana bandana banana"]), 12, 1).unwrap();
        let mut buf = Vec::new();
        code.save(&mut buf).unwrap();
        let back = BpeCode::load(&mut buf.as_slice(), code.min_frequency()).unwrap();
        assert_eq!(back.merges(), code.merges());
        assert_eq!(back.segment_raw("bandana"), code.segment_raw("bandana"));
    }
}
