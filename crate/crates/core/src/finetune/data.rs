//! Task data: tab-separated labeled records and token-per-line tag files.
//!
//! Classification and regression records are `label<TAB>text` or
//! `label<TAB>text_a<TAB>text_b`. Tagging files hold `token<TAB>tag` lines
//! with blank lines separating sentences.

use super::{TaskKind, TaskSpec};
use crate::text::{Codec, Example, Origin, BOS, RESERVED, SEP};
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::BufRead;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub example: Example,
    /// Index of `<sep>` inside `example.ids`; None for single-input tasks.
    pub sep: Option<usize>,
    pub label: Label,
}

/// `<s> text <s>`, matching pretraining layout.
pub fn single_example(codec: &Codec, text: &str) -> Result<Example> {
    let (mut tokens, mut ids) = codec.encode_line(text);
    if ids.is_empty() {
        return Err(Error::Data(format!("text {text:?} tokenizes to nothing")));
    }
    let bos = RESERVED[BOS as usize];
    tokens.insert(0, bos.to_string());
    tokens.push(bos.to_string());
    ids.insert(0, BOS);
    ids.push(BOS);
    Ok(Example { tokens, ids, origin: Origin::Sentence })
}

/// `<s> a <sep> b <s>`; returns the example and the `<sep>` position.
pub fn pair_example(codec: &Codec, a: &str, b: &str) -> Result<(Example, usize)> {
    let (ta, ia) = codec.encode_line(a);
    let (tb, ib) = codec.encode_line(b);
    if ia.is_empty() {
        return Err(Error::Data(format!("first sentence {a:?} tokenizes to nothing")));
    }
    if ib.is_empty() {
        return Err(Error::Data(format!("second sentence {b:?} tokenizes to nothing")));
    }
    let bos = RESERVED[BOS as usize];
    let sep = RESERVED[SEP as usize];
    let sep_pos = 1 + ia.len();
    let mut tokens = Vec::with_capacity(ia.len() + ib.len() + 3);
    let mut ids = Vec::with_capacity(tokens.capacity());
    tokens.push(bos.to_string());
    ids.push(BOS);
    tokens.extend(ta);
    ids.extend(ia);
    tokens.push(sep.to_string());
    ids.push(SEP);
    tokens.extend(tb);
    ids.extend(ib);
    tokens.push(bos.to_string());
    ids.push(BOS);
    Ok((Example { tokens, ids, origin: Origin::Sentence }, sep_pos))
}

fn parse_label(spec: &TaskSpec, raw: &str, line_no: usize) -> Result<Label> {
    match spec.kind {
        TaskKind::Regression => {
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Data(format!("line {line_no}: bad target {raw:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line_no}: non-finite target {raw:?}")));
            }
            Ok(Label::Value(v))
        }
        _ => {
            let c: usize = raw
                .parse()
                .map_err(|_| Error::Data(format!("line {line_no}: bad label {raw:?}")))?;
            if c >= spec.num_classes {
                return Err(Error::Data(format!(
                    "line {line_no}: label {c} outside 0..{}",
                    spec.num_classes
                )));
            }
            Ok(Label::Class(c))
        }
    }
}

/// Parse labeled records for a single/pair/regression task. Blank lines are
/// skipped; anything else with the wrong field count is an error.
pub fn parse_labeled<R: BufRead>(
    r: &mut R,
    spec: &TaskSpec,
    codec: &Codec,
) -> Result<Vec<LabeledExample>> {
    let pair = spec.kind == TaskKind::PairClassification;
    let want_fields = if pair { 3 } else { 2 };
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != want_fields {
            return Err(Error::Data(format!(
                "line {line_no}: {} tab-separated fields, expected {want_fields}",
                fields.len()
            )));
        }
        let label = parse_label(spec, fields[0], line_no)?;
        let (example, sep) = if pair {
            let (e, s) = pair_example(codec, fields[1], fields[2])
                .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
            (e, Some(s))
        } else {
            let e = single_example(codec, fields[1])
                .map_err(|e| Error::Data(format!("line {line_no}: {e}")))?;
            (e, None)
        };
        out.push(LabeledExample { example, sep, label });
    }
    if out.is_empty() {
        return Err(Error::Data("no labeled examples in input".into()));
    }
    Ok(out)
}

/// Tag inventory with dense ids in sorted-name order, so the mapping is a
/// function of the tag set alone, not of file order.
#[derive(Debug, Clone)]
pub struct TagSet {
    names: Vec<String>,
    by_name: HashMap<String, u32>,
}

impl TagSet {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Result<TagSet> {
        let mut names: Vec<String> = names.into_iter().collect();
        names.sort();
        names.dedup();
        if names.is_empty() {
            return Err(Error::Data("empty tag inventory".into()));
        }
        let by_name = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Ok(TagSet { names, by_name })
    }

    pub fn from_data(sentences: &[(Vec<String>, Vec<String>)]) -> Result<TagSet> {
        TagSet::from_names(sentences.iter().flat_map(|(_, tags)| tags.iter().cloned()))
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TaggedExample {
    pub example: Example,
    /// One tag per content token; the boundary markers carry none.
    pub tags: Vec<u32>,
}

/// Token/tag rows per sentence, before any id mapping.
pub fn parse_tagged_raw<R: BufRead>(r: &mut R) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                out.push((std::mem::take(&mut tokens), std::mem::take(&mut tags)));
            }
            continue;
        }
        match line.split_once('\t') {
            Some((tok, tag)) if !tok.is_empty() && !tag.is_empty() => {
                tokens.push(tok.to_string());
                tags.push(tag.to_string());
            }
            _ => {
                return Err(Error::Data(format!(
                    "line {}: expected token<TAB>tag, got {line:?}",
                    i + 1
                )))
            }
        }
    }
    if !tokens.is_empty() {
        out.push((tokens, tags));
    }
    if out.is_empty() {
        return Err(Error::Data("no tagged sentences in input".into()));
    }
    Ok(out)
}

/// Encode raw tagged sentences against a codec and tag inventory.
///
/// Tagging needs positions to stay aligned with tokens, so every token must
/// map to exactly one id under the codec; a codec that splits tokens apart is
/// rejected rather than silently shifting tags.
pub fn encode_tagged(
    sentences: &[(Vec<String>, Vec<String>)],
    codec: &Codec,
    tags: &TagSet,
) -> Result<Vec<TaggedExample>> {
    let bos = RESERVED[BOS as usize];
    let mut out = Vec::with_capacity(sentences.len());
    for (tokens, tag_names) in sentences {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        let mut surface = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        surface.push(bos.to_string());
        for t in tokens {
            let (_, piece_ids) = codec.encode_line(t);
            if piece_ids.len() != 1 {
                return Err(Error::Data(format!(
                    "token {t:?} encodes to {} ids; tagging needs one id per token",
                    piece_ids.len()
                )));
            }
            ids.push(piece_ids[0]);
            surface.push(t.clone());
        }
        ids.push(BOS);
        surface.push(bos.to_string());
        let tag_ids = tag_names
            .iter()
            .map(|n| {
                tags.id(n)
                    .ok_or_else(|| Error::Data(format!("unknown tag {n:?}")))
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push(TaggedExample {
            example: Example { tokens: surface, ids, origin: Origin::Sentence },
            tags: tag_ids,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::Metric;
    use crate::testutil::toy_vocab;

    fn codec() -> Codec {
        Codec::Word(toy_vocab(8))
    }

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            num_classes: if kind == TaskKind::Regression { 1 } else { 2 },
            metric: if kind == TaskKind::Regression { Metric::Spearman } else { Metric::Accuracy },
        }
    }

    #[test]
    fn labeled_lines_round_trip() {
        let mut input = "1\tw0 w1\n0\tw2\n".as_bytes();
        let got = parse_labeled(&mut input, &spec(TaskKind::SingleClassification), &codec()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].label, Label::Class(1));
        assert_eq!(got[0].sep, None);
        // <s> w0 w1 <s>
        assert_eq!(got[0].example.ids.len(), 4);
        assert_eq!(got[0].example.ids[0], BOS);
        assert_eq!(got[0].example.ids[3], BOS);
    }

    #[test]
    fn field_count_errors_name_the_line() {
        let mut input = "1\tw0\n0\n".as_bytes();
        let err = parse_labeled(&mut input, &spec(TaskKind::SingleClassification), &codec())
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn labels_outside_the_class_range_are_rejected() {
        let mut input = "2\tw0\n".as_bytes();
        assert!(parse_labeled(&mut input, &spec(TaskKind::SingleClassification), &codec()).is_err());
    }

    #[test]
    fn regression_targets_parse_as_floats() {
        let mut input = "2.5\tw0 w3\n-0.5\tw1\n".as_bytes();
        let got = parse_labeled(&mut input, &spec(TaskKind::Regression), &codec()).unwrap();
        assert_eq!(got[0].label, Label::Value(2.5));
        let mut bad = "nan\tw0\n".as_bytes();
        assert!(parse_labeled(&mut bad, &spec(TaskKind::Regression), &codec()).is_err());
    }

    #[test]
    fn pair_layout_places_one_separator() {
        let mut input = "1\tw0 w1\tw2\n".as_bytes();
        let got = parse_labeled(&mut input, &spec(TaskKind::PairClassification), &codec()).unwrap();
        let ex = &got[0].example;
        // <s> w0 w1 <sep> w2 <s>
        assert_eq!(ex.ids.len(), 6);
        assert_eq!(got[0].sep, Some(3));
        assert_eq!(ex.ids[3], SEP);
        assert_eq!(ex.ids[0], BOS);
        assert_eq!(ex.ids[5], BOS);
        assert_eq!(ex.ids.iter().filter(|&&i| i == SEP).count(), 1);
    }

    #[test]
    fn empty_pair_sides_are_rejected() {
        let mut input = "1\tw0\t\n".as_bytes();
        assert!(parse_labeled(&mut input, &spec(TaskKind::PairClassification), &codec()).is_err());
        assert!(pair_example(&codec(), "", "w1").is_err());
        assert!(pair_example(&codec(), "w1", "").is_err());
    }

    #[test]
    fn tagged_sentences_split_on_blank_lines() {
        let mut input = "w0\tB-A\nw1\tO\n\nw2\tB-B\n".as_bytes();
        let raw = parse_tagged_raw(&mut input).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[0].0, vec!["w0", "w1"]);
        assert_eq!(raw[1].1, vec!["B-B"]);

        let tags = TagSet::from_data(&raw).unwrap();
        assert_eq!(tags.len(), 3); // B-A, B-B, O sorted
        assert_eq!(tags.name(tags.id("O").unwrap()), "O");

        let encoded = encode_tagged(&raw, &codec(), &tags).unwrap();
        assert_eq!(encoded[0].example.ids.len(), 4); // markers + 2 tokens
        assert_eq!(encoded[0].tags.len(), 2);
    }

    #[test]
    fn unknown_tags_and_bad_rows_are_rejected() {
        let mut bad_row = "w0 B-A\n".as_bytes();
        assert!(parse_tagged_raw(&mut bad_row).is_err());

        let raw = vec![(vec!["w0".to_string()], vec!["B-A".to_string()])];
        let tags = TagSet::from_names(["O".to_string()]).unwrap();
        assert!(encode_tagged(&raw, &codec(), &tags).is_err());
    }
}
