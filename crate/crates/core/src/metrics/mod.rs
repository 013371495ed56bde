//! BLEU for generated utterances and the wait/answer classification report.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Action;
use crate::{Error, Result};

const MAX_N: usize = 4;

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals for n = 1..=4.
fn clipped_stats<T: Ord>(cand: &[T], reference: &[T]) -> [(usize, usize); MAX_N] {
    let mut out = [(0, 0); MAX_N];
    for (k, slot) in out.iter_mut().enumerate() {
        let n = k + 1;
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        let matched = c.iter().map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, cand.len().saturating_sub(n - 1));
    }
    out
}

/// Clipped `n`-gram matches of `cand` against `reference`, and the number
/// of candidate `n`-grams.
pub fn modified_precision<T: Ord>(cand: &[T], reference: &[T], n: usize) -> Result<(usize, usize)> {
    if !(1..=MAX_N).contains(&n) {
        return Err(Error::InvalidArgument(alloc::format!("n-gram order {n} outside 1..={MAX_N}")));
    }
    Ok(clipped_stats(cand, reference)[n - 1])
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        libm::exp(1.0 - r as f64 / c as f64)
    }
}

fn check_lengths<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    Ok(())
}

/// Corpus BLEU-4 with uniform weights, no smoothing, scaled to [0, 100].
pub fn bleu_cumulative<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_lengths(candidates, references)?;
    let mut totals = [(0usize, 0usize); MAX_N];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        for (t, s) in totals.iter_mut().zip(clipped_stats(cand, reference)) {
            t.0 += s.0;
            t.1 += s.1;
        }
        c += cand.len();
        r += reference.len();
    }
    if c == 0 || totals.iter().any(|&(m, _)| m == 0) {
        return Ok(0.0);
    }
    let log_mean = totals
        .iter()
        .map(|&(m, n)| libm::log(m as f64 / n as f64))
        .sum::<f64>()
        / MAX_N as f64;
    Ok(100.0 * brevity_penalty(c, r) * libm::exp(log_mean))
}

/// Mean sentence BLEU-4 with add-one smoothing on the 2..4-gram precisions.
pub fn bleu_sentence_smoothed<T: Ord>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_lengths(candidates, references)?;
    let mut sum = 0.0;
    for (cand, reference) in candidates.iter().zip(references) {
        let stats = clipped_stats(cand, reference);
        if cand.is_empty() || stats[0].0 == 0 {
            continue;
        }
        let log_mean = stats
            .iter()
            .enumerate()
            .map(|(k, &(m, n))| {
                let (m, n) = if k == 0 { (m as f64, n as f64) } else { (m as f64 + 1.0, n as f64 + 1.0) };
                libm::log(m / n)
            })
            .sum::<f64>()
            / MAX_N as f64;
        sum += brevity_penalty(cand.len(), reference.len()) * libm::exp(log_mean);
    }
    Ok(100.0 * sum / candidates.len() as f64)
}

/// Binary report with the answer action as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Set when a precision, recall or F1 denominator was zero.
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report(preds: &[Action], golds: &[Action]) -> Result<ClassificationReport> {
    check_lengths(preds, golds)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (Action::Answer, Action::Answer) => tp += 1,
            (Action::Answer, Action::Wait) => fp += 1,
            (Action::Wait, Action::Answer) => fn_ += 1,
            (Action::Wait, Action::Wait) => tn += 1,
        }
    }
    let mut zero_division = false;
    let precision = ratio(tp, tp + fp, &mut zero_division);
    let recall = ratio(tp, tp + fn_, &mut zero_division);
    let f1 = if precision + recall == 0.0 {
        zero_division = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationReport {
        accuracy: (tp + tn) as f64 / preds.len() as f64,
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        zero_division,
    })
}

/// Converts raw 0/1 labels, rejecting anything else.
pub fn actions(labels: &[u8]) -> Result<Vec<Action>> {
    labels.iter().map(|&l| Action::try_from(l)).collect()
}
