//! Token-level evaluation metrics.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with the balanced F-measure.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeL> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("ROUGE-L against an empty reference"));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let recall = lcs / reference.len() as f64;
    let precision = if candidate.is_empty() {
        0.0
    } else {
        lcs / candidate.len() as f64
    };
    let f = if lcs == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeL { precision, recall, f })
}

/// Fraction of reference positions whose token the candidate reproduces at
/// the same index. A missing candidate position counts as wrong.
pub fn token_accuracy<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("token accuracy without reference tokens"));
    }
    let hits: usize = pairs
        .iter()
        .map(|(c, r)| r.iter().zip(c.iter()).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

pub fn exact_match<T: PartialEq>(pairs: &[(&[T], &[T])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("exact match over no pairs"));
    }
    Ok(pairs.iter().filter(|(c, r)| c == r).count() as f64 / pairs.len() as f64)
}
