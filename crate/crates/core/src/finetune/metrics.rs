//! Task evaluation metrics.
//!
//! Every score is higher-is-better so grid selection can maximize uniformly.
//! Degenerate denominators (one-class Matthews, a constant ranking, no spans
//! on either side) yield 0.0 with a stderr warning rather than NaN, keeping
//! selection total.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    F1,
    Mcc,
    Spearman,
}

impl Metric {
    pub fn parse(name: &str) -> Result<Metric> {
        match name {
            "accuracy" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            "mcc" => Ok(Metric::Mcc),
            "spearman" => Ok(Metric::Spearman),
            other => Err(Error::Config(format!(
                "unknown metric {other:?} (expected accuracy, f1, mcc, or spearman)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Mcc => "mcc",
            Metric::Spearman => "spearman",
        }
    }
}

fn check_pair(n_preds: usize, n_golds: usize) -> Result<()> {
    if n_preds != n_golds {
        return Err(Error::Data(format!(
            "{n_preds} predictions against {n_golds} golds"
        )));
    }
    if n_preds < 2 {
        return Err(Error::Data(format!(
            "need at least 2 scored items, got {n_preds}"
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_pair(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// (tp, fp, fn, tn) with class 1 positive. Inputs must be 0/1.
fn confusion(preds: &[usize], golds: &[usize]) -> Result<(f64, f64, f64, f64)> {
    check_pair(preds.len(), golds.len())?;
    if let Some(&bad) = preds.iter().chain(golds).find(|&&v| v > 1) {
        return Err(Error::Data(format!("binary metric got label {bad}")));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => tn += 1.0,
        }
    }
    Ok((tp, fp, fn_, tn))
}

pub fn f1_binary(preds: &[usize], golds: &[usize]) -> Result<f64> {
    let (tp, fp, fn_, _) = confusion(preds, golds)?;
    if tp == 0.0 {
        if fp == 0.0 && fn_ == 0.0 {
            eprintln!("warning: f1 undefined with no positive labels anywhere, scoring 0");
        }
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn matthews(preds: &[usize], golds: &[usize]) -> Result<f64> {
    let (tp, fp, fn_, tn) = confusion(preds, golds)?;
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        eprintln!("warning: matthews undefined on a one-class margin, scoring 0");
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

/// 1-based ranks; equal values share the mean of the positions they occupy.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// None when either side has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

pub fn spearman(preds: &[f64], golds: &[f64]) -> Result<f64> {
    check_pair(preds.len(), golds.len())?;
    if let Some(bad) = preds.iter().chain(golds).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("spearman input {bad}")));
    }
    match pearson(&average_ranks(preds), &average_ranks(golds)) {
        Some(r) => Ok(r),
        None => {
            eprintln!("warning: spearman undefined on a constant ranking, scoring 0");
            Ok(0.0)
        }
    }
}

/// (start, end inclusive, type) spans under BIO tags. An `I-x` that does not
/// continue an open span of type x opens a new one, as if it were `B-x`.
fn bio_spans(tags: &[String]) -> Result<Vec<(usize, usize, String)>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (action, ty) = match tag.split_once('-') {
            None if tag == "O" => ("O", ""),
            Some((a @ ("B" | "I"), ty)) if !ty.is_empty() => (a, ty),
            _ => {
                return Err(Error::Data(format!(
                    "tag {tag:?} is not O, B-<type>, or I-<type>"
                )))
            }
        };
        let continues = action == "I" && open.as_ref().is_some_and(|(_, t)| t == ty);
        if !continues {
            if let Some((start, t)) = open.take() {
                spans.push((start, i - 1, t));
            }
            if action != "O" {
                open = Some((i, ty.to_string()));
            }
        }
    }
    if let Some((start, t)) = open {
        spans.push((start, tags.len() - 1, t));
    }
    Ok(spans)
}

/// Exact-match span F1 over per-sentence BIO tag rows.
pub fn span_f1(preds: &[Vec<String>], golds: &[Vec<String>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "{} predicted sentences against {} gold",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no sentences to score".into()));
    }
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut n_hit = 0usize;
    for (s, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Data(format!(
                "sentence {s}: {} predicted tags against {} gold",
                p.len(),
                g.len()
            )));
        }
        let ps = bio_spans(p)?;
        let gs = bio_spans(g)?;
        n_pred += ps.len();
        n_gold += gs.len();
        n_hit += ps.iter().filter(|sp| gs.contains(sp)).count();
    }
    if n_pred == 0 && n_gold == 0 {
        eprintln!("warning: span f1 undefined with no spans on either side, scoring 0");
        return Ok(0.0);
    }
    if n_hit == 0 {
        return Ok(0.0);
    }
    let precision = n_hit as f64 / n_pred as f64;
    let recall = n_hit as f64 / n_gold as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let golds = [1usize, 0, 1, 1, 0];
        assert_eq!(accuracy(&golds, &golds).unwrap(), 1.0);
        assert_eq!(f1_binary(&golds, &golds).unwrap(), 1.0);
        assert_eq!(matthews(&golds, &golds).unwrap(), 1.0);
    }

    #[test]
    fn balanced_disagreement_has_zero_matthews() {
        // tp=1 fp=1 fn=1 tn=1: numerator 1*1 - 1*1 = 0
        assert_eq!(matthews(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn reversed_ranking_is_perfectly_anticorrelated() {
        let s = spearman(&[4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s + 1.0).abs() < 1e-12, "got {s}");
    }

    // Independent arithmetic for the exhaustive check: f1 in its pooled form,
    // Matthews as the Pearson correlation of the 0/1 vectors (the phi
    // coefficient), rather than the precision/recall and confusion-product
    // forms the implementations use.
    fn f1_oracle(tp: f64, fp: f64, fn_: f64) -> f64 {
        if 2.0 * tp + fp + fn_ == 0.0 {
            0.0
        } else if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    }

    #[test]
    fn exhaustive_binary_inputs_match_direct_formulas() {
        for n in 2..=6usize {
            for pb in 0..(1u32 << n) {
                for gb in 0..(1u32 << n) {
                    let preds: Vec<usize> = (0..n).map(|i| ((pb >> i) & 1) as usize).collect();
                    let golds: Vec<usize> = (0..n).map(|i| ((gb >> i) & 1) as usize).collect();
                    let hits = preds.iter().zip(&golds).filter(|(p, g)| p == g).count();
                    assert_eq!(
                        accuracy(&preds, &golds).unwrap(),
                        hits as f64 / n as f64,
                        "accuracy {preds:?} {golds:?}"
                    );

                    let tp = preds.iter().zip(&golds).filter(|x| x == &(&1, &1)).count() as f64;
                    let fp = preds.iter().zip(&golds).filter(|x| x == &(&1, &0)).count() as f64;
                    let fn_ = preds.iter().zip(&golds).filter(|x| x == &(&0, &1)).count() as f64;
                    let f1 = f1_binary(&preds, &golds).unwrap();
                    assert!(
                        (f1 - f1_oracle(tp, fp, fn_)).abs() < 1e-12,
                        "f1 {preds:?} {golds:?}: {f1}"
                    );

                    let pf: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
                    let gf: Vec<f64> = golds.iter().map(|&v| v as f64).collect();
                    let phi = pearson(&pf, &gf).unwrap_or(0.0);
                    let mcc = matthews(&preds, &golds).unwrap();
                    assert!(
                        (mcc - phi).abs() < 1e-10,
                        "mcc {preds:?} {golds:?}: {mcc} vs phi {phi}"
                    );
                }
            }
        }
    }

    fn permutations(n: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut items: Vec<f64> = (1..=n).map(|v| v as f64).collect();
        fn heap(k: usize, items: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
            if k <= 1 {
                out.push(items.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, items, out);
                if k % 2 == 0 {
                    items.swap(i, k - 1);
                } else {
                    items.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut items, &mut out);
        out
    }

    #[test]
    fn spearman_matches_rank_difference_formula_on_all_tie_free_orders() {
        // Without ties, spearman reduces to 1 - 6 sum(d^2) / (n(n^2-1)).
        let n = 5usize;
        let golds: Vec<f64> = (1..=n).map(|v| v as f64).collect();
        for perm in permutations(n) {
            let d2: f64 = perm.iter().zip(&golds).map(|(a, b)| (a - b) * (a - b)).sum();
            let closed = 1.0 - 6.0 * d2 / (n as f64 * ((n * n - 1) as f64));
            let got = spearman(&perm, &golds).unwrap();
            assert!((got - closed).abs() < 1e-12, "{perm:?}: {got} vs {closed}");
        }
    }

    #[test]
    fn tied_ranks_share_their_average_position() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[3.0, 3.0, 3.0]), vec![2.0, 2.0, 2.0]);
        let got = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let want = pearson(&[1.0, 2.5, 2.5, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_score_zero() {
        assert_eq!(matthews(&[1, 1, 1], &[1, 1, 1]).unwrap(), 0.0);
        assert_eq!(matthews(&[0, 1, 0], &[1, 1, 1]).unwrap(), 0.0);
        assert_eq!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_or_short_inputs_are_rejected() {
        assert!(accuracy(&[1, 0], &[1]).is_err());
        assert!(accuracy(&[1], &[1]).is_err());
        assert!(f1_binary(&[2, 0], &[1, 0]).is_err());
        assert!(spearman(&[f64::NAN, 0.0], &[1.0, 2.0]).is_err());
    }

    fn tags(row: &[&str]) -> Vec<String> {
        row.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn span_f1_counts_exact_matches() {
        let gold = vec![tags(&["B-A", "I-A", "O", "B-B"])];
        assert_eq!(span_f1(&gold, &gold).unwrap(), 1.0);

        // One of two gold spans found, nothing spurious: P=1, R=1/2.
        let pred = vec![tags(&["B-A", "I-A", "O", "O"])];
        let got = span_f1(&pred, &gold).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "got {got}");

        // Right boundaries, wrong type: no credit.
        let pred = vec![tags(&["B-B", "I-B", "O", "B-B"])];
        let got = span_f1(&pred, &gold).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn illegal_transitions_open_spans() {
        // I- out of nowhere acts as B-; an I- type switch starts a new span.
        let pred = vec![tags(&["I-A", "I-A", "O", "I-B"])];
        let gold = vec![tags(&["B-A", "I-A", "O", "B-B"])];
        assert_eq!(span_f1(&pred, &gold).unwrap(), 1.0);
        let pred = vec![tags(&["B-A", "I-B"])];
        let gold = vec![tags(&["B-A", "B-B"])];
        assert_eq!(span_f1(&pred, &gold).unwrap(), 1.0);
    }

    #[test]
    fn span_f1_rejects_malformed_tags() {
        let gold = vec![tags(&["O", "O"])];
        assert!(span_f1(&[tags(&["X-A", "O"])], &gold).is_err());
        assert!(span_f1(&[tags(&["I-", "O"])], &gold).is_err());
        assert!(span_f1(&[tags(&["O"])], &gold).is_err());
    }
}
