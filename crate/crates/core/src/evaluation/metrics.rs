//! Accuracy and retention metrics over item lists.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

fn ngram_counts(items: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped n-gram matches between `pred` and `truth`.
fn clipped_matches(pred: &[usize], truth: &[usize], n: usize) -> usize {
    let truth_counts = ngram_counts(truth, n);
    ngram_counts(pred, n)
        .into_iter()
        .map(|(g, c)| c.min(truth_counts.get(g).copied().unwrap_or(0)))
        .sum()
}

fn check_truth(truth: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Domain("ground-truth list is empty".into()));
    }
    Ok(())
}

/// Modified n-gram precision.
pub fn bleu_n(pred: &[usize], truth: &[usize], n: usize) -> Result<f64> {
    check_truth(truth)?;
    if n == 0 {
        return Err(Error::Config("n-gram order must be positive".into()));
    }
    if pred.len() < n {
        return Ok(0.0);
    }
    Ok(clipped_matches(pred, truth, n) as f64 / (pred.len() - n + 1) as f64)
}

/// n-gram recall with clipping.
pub fn rouge_n(pred: &[usize], truth: &[usize], n: usize) -> Result<f64> {
    check_truth(truth)?;
    if n == 0 {
        return Err(Error::Config("n-gram order must be positive".into()));
    }
    if truth.len() < n {
        return Ok(0.0);
    }
    Ok(clipped_matches(pred, truth, n) as f64 / (truth.len() - n + 1) as f64)
}

pub fn bleu1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    bleu_n(pred, truth, 1)
}

pub fn rouge1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    rouge_n(pred, truth, 1)
}

fn check_cutoff(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("cutoff K must be at least 1".into()));
    }
    Ok(())
}

/// Share of distinct truth items found in the first `k` predictions.
pub fn hr_at_k(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    check_cutoff(k)?;
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    if truth.is_empty() {
        return Ok(0.0);
    }
    let top: BTreeSet<usize> = pred.iter().take(k).copied().collect();
    Ok(truth.intersection(&top).count() as f64 / truth.len() as f64)
}

/// Binary-gain NDCG over the first `k` predictions. A repeated prediction
/// earns gain only at its first position.
pub fn ndcg_at_k(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    check_cutoff(k)?;
    let truth: BTreeSet<usize> = truth.iter().copied().collect();
    if truth.is_empty() {
        return Ok(0.0);
    }
    let mut seen = BTreeSet::new();
    let mut dcg = 0.0;
    for (i, item) in pred.iter().take(k).enumerate() {
        if truth.contains(item) && seen.insert(*item) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..truth.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Ok(dcg / ideal)
}

/// Per-class similarity sums and counts for classes `0..=k`.
fn class_totals(samples: &[(f64, u32)], k: u32) -> Result<Vec<(f64, usize)>> {
    let mut totals = vec![(0.0, 0usize); k as usize + 1];
    for &(sim, class) in samples {
        if class > k {
            return Err(Error::Domain(format!("reward class {class} outside [0, {k}]")));
        }
        if !sim.is_finite() {
            return Err(Error::Numeric(format!("similarity {sim} is not finite")));
        }
        let t = &mut totals[class as usize];
        t.0 += sim;
        t.1 += 1;
    }
    Ok(totals)
}

/// Similarity-weighted retention score from `(similarity, reward class)`
/// pairs: the sum over classes of mean similarity times `(class - k/2)`
/// times class size.
pub fn sb_urs_from_similarities(samples: &[(f64, u32)], k: u32) -> Result<f64> {
    let half = k as f64 / 2.0;
    Ok(class_totals(samples, k)?
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(c, (sum, n))| (sum / n as f64) * (c as f64 - half) * n as f64)
        .sum())
}

/// As [`sb_urs_from_similarities`] without the class sizes.
pub fn asb_urs_from_similarities(samples: &[(f64, u32)], k: u32) -> Result<f64> {
    if samples.is_empty() {
        log::warn!("no samples for the similarity score; returning 0");
        return Ok(0.0);
    }
    let half = k as f64 / 2.0;
    Ok(class_totals(samples, k)?
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(c, (sum, n))| (sum / n as f64) * (c as f64 - half))
        .sum())
}

/// A generated list, the logged list and the logged reward class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassSample<'a> {
    pub pred: &'a [usize],
    pub truth: &'a [usize],
    pub class: u32,
}

fn similarities(samples: &[ClassSample]) -> Result<Vec<(f64, u32)>> {
    samples
        .iter()
        .map(|s| Ok((bleu1(s.pred, s.truth)?, s.class)))
        .collect()
}

pub fn sb_urs(samples: &[ClassSample], k: u32) -> Result<f64> {
    sb_urs_from_similarities(&similarities(samples)?, k)
}

pub fn asb_urs(samples: &[ClassSample], k: u32) -> Result<f64> {
    asb_urs_from_similarities(&similarities(samples)?, k)
}

/// Percentage improvement of predicted over logged mean retention.
pub fn iur(predicted: f64, logged: f64) -> Result<f64> {
    if logged == 0.0 || !logged.is_finite() {
        return Err(Error::Domain(format!("logged mean retention {logged} cannot be a baseline")));
    }
    Ok(100.0 * (predicted - logged) / logged)
}

/// Percentage of users whose predicted retention falls below `threshold`.
pub fn nrc(per_user: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold >= 0.0) {
        return Err(Error::Domain(format!("threshold {threshold} must be non-negative")));
    }
    if per_user.is_empty() {
        return Ok(0.0);
    }
    let gone = per_user.iter().filter(|&&v| v < threshold).count();
    Ok(100.0 * gone as f64 / per_user.len() as f64)
}

pub const NRC_THRESHOLD: f64 = 0.5;

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn population_variance(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    Some(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64)
}
