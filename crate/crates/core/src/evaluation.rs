//! Corpus BLEU-4, ROUGE-N/L and the language-membership diagnostic.
//!
//! All metrics work on token ids. BLEU uses add-one smoothing on the 2- to
//! 4-gram precisions.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty reference at example {0}")]
    EmptyReference(usize),
}

/// Identifies the BLEU smoothing in reports.
pub const BLEU_SMOOTHING: &str = "add-one on 2- to 4-gram precisions";

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matches clipped by reference counts, and the hypothesis n-gram total.
fn clipped_overlap(hyp: &[TokenId], reference: &[TokenId], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn check_lengths<A, B>(hyps: &[A], refs: &[B]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    Ok(())
}

/// Corpus-level BLEU-4 with one reference per hypothesis.
pub fn bleu4(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<f64, MetricError> {
    check_lengths(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t) = clipped_overlap(h, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let log_p1 = (matched[0] as f64 / total[0] as f64).ln();
    let log_rest: f64 = (1..4)
        .map(|i| ((matched[i] + 1) as f64 / (total[i] + 1) as f64).ln())
        .sum();
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok((bp + (log_p1 + log_rest) / 4.0).exp())
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// N-gram overlap F1 for one pair.
pub fn rouge_n(hyp: &[TokenId], reference: &[TokenId], n: usize) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference(0));
    }
    let (overlap, hyp_total) = clipped_overlap(hyp, reference, n);
    Ok(f1(overlap, hyp_total, reference.len().saturating_sub(n - 1)))
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1 for one pair.
pub fn rouge_l(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference(0));
    }
    Ok(f1(lcs_len(hyp, reference), hyp.len(), reference.len()))
}

fn mean_over<F>(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>], f: F) -> Result<f64, MetricError>
where
    F: Fn(&[TokenId], &[TokenId]) -> Result<f64, MetricError>,
{
    check_lengths(hyps, refs)?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        sum += f(h, r).map_err(|e| match e {
            MetricError::EmptyReference(_) => MetricError::EmptyReference(i),
            other => other,
        })?;
    }
    Ok(sum / hyps.len() as f64)
}

/// Fraction of emitted tokens from `lexicon`, pooled over all outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub fraction: f64,
    /// Set when there were no tokens at all; `fraction` is then 0.
    pub empty: bool,
}

pub fn lang_membership(outputs: &[Vec<TokenId>], lexicon: &BTreeSet<TokenId>) -> Membership {
    let total: usize = outputs.iter().map(Vec::len).sum();
    if total == 0 {
        return Membership {
            fraction: 0.0,
            empty: true,
        };
    }
    let inside = outputs.iter().flatten().filter(|t| lexicon.contains(t)).count();
    Membership {
        fraction: inside as f64 / total as f64,
        empty: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub lang_membership: f64,
    pub empty_output: bool,
    pub n_examples: usize,
}

/// All metrics for one system output against single references.
pub fn evaluate(
    hyps: &[Vec<TokenId>],
    refs: &[Vec<TokenId>],
    lexicon: &BTreeSet<TokenId>,
) -> Result<MetricReport, MetricError> {
    let membership = lang_membership(hyps, lexicon);
    Ok(MetricReport {
        bleu4: bleu4(hyps, refs)?,
        rouge1: mean_over(hyps, refs, |h, r| rouge_n(h, r, 1))?,
        rouge2: mean_over(hyps, refs, |h, r| rouge_n(h, r, 2))?,
        rouge_l: mean_over(hyps, refs, rouge_l)?,
        lang_membership: membership.fraction,
        empty_output: membership.empty,
        n_examples: hyps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = 10;
    const B: TokenId = 11;
    const C: TokenId = 12;
    const D: TokenId = 13;
    const E: TokenId = 14;

    #[test]
    fn perfect_match_scores_one() {
        let x = vec![vec![A, B, C], vec![D, E, A, B, C, D]];
        assert!((bleu4(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        for s in &x {
            assert_eq!(rouge_n(s, s, 1).unwrap(), 1.0);
            assert_eq!(rouge_n(s, s, 2).unwrap(), 1.0);
            assert_eq!(rouge_l(s, s).unwrap(), 1.0);
        }
    }

    #[test]
    fn brevity_penalty_example() {
        let score = bleu4(&[vec![A, B, C, D]], &[vec![A, B, C, D, E]]).unwrap();
        assert!((score - (-0.25f64).exp()).abs() < 1e-12);
        assert!((score - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn disjoint_output_scores_zero() {
        assert_eq!(bleu4(&[vec![A, B]], &[vec![C, D]]).unwrap(), 0.0);
        assert_eq!(bleu4(&[vec![]], &[vec![C, D]]).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_counts() {
        assert!((rouge_n(&[A, B], &[A, C], 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(rouge_n(&[], &[A, C], 1).unwrap(), 0.0);
        assert_eq!(rouge_l(&[], &[A, C]).unwrap(), 0.0);
        // LCS of (a b c d) and (a c e d) is (a c d).
        let l = rouge_l(&[A, B, C, D], &[A, C, E, D]).unwrap();
        assert!((l - 0.75).abs() < 1e-12);
        assert_eq!(rouge_n(&[A], &[], 1), Err(MetricError::EmptyReference(0)));
    }

    #[test]
    fn mismatched_corpora_fail() {
        assert_eq!(
            bleu4(&[vec![A]], &[]),
            Err(MetricError::LengthMismatch { hyps: 1, refs: 0 })
        );
    }

    #[test]
    fn membership_conventions() {
        let lex: BTreeSet<TokenId> = [A, B].into();
        assert_eq!(lang_membership(&[vec![A, B, A]], &lex).fraction, 1.0);
        assert_eq!(lang_membership(&[vec![A, C], vec![B, D]], &lex).fraction, 0.5);
        let empty = lang_membership(&[vec![], vec![]], &lex);
        assert_eq!((empty.fraction, empty.empty), (0.0, true));
    }

    #[test]
    fn report_serializes_field_names() {
        let lex: BTreeSet<TokenId> = [A].into();
        let r = evaluate(&[vec![A, B]], &[vec![A, B]], &lex).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for key in ["bleu4", "rouge1", "rouge2", "rougeL", "lang_membership", "n_examples"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<TokenId>, Vec<TokenId>)>> {
        proptest::collection::vec(
            (
                proptest::collection::vec(10u32..16, 0..8),
                proptest::collection::vec(10u32..16, 1..8),
            ),
            1..10,
        )
    }

    proptest! {
        #[test]
        fn metrics_are_order_invariant_and_bounded(pairs in corpus(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let lex: BTreeSet<TokenId> = [10, 11, 12].into();
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let base = evaluate(&h, &r, &lex).unwrap();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut crate::rng::stream(seed, "p"));
            let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let other = evaluate(&h2, &r2, &lex).unwrap();
            for (a, b) in [
                (base.bleu4, other.bleu4),
                (base.rouge1, other.rouge1),
                (base.rouge2, other.rouge2),
                (base.rouge_l, other.rouge_l),
                (base.lang_membership, other.lang_membership),
            ] {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
            }
            let self_bleu = bleu4(&r, &r).unwrap();
            prop_assert!((self_bleu - 1.0).abs() < 1e-12);
        }
    }
}
