//! Offline metrics: accuracy against logged actions, similarity- and
//! model-based retention scores, and split-variance analysis.

mod metrics;
mod report;
mod reward_model;
mod variance;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use metrics::{
    asb_urs, asb_urs_from_similarities, bleu1, bleu_n, hr_at_k, iur, mean, ndcg_at_k, nrc, population_variance,
    rouge1, rouge_n, sb_urs, sb_urs_from_similarities, ClassSample, NRC_THRESHOLD,
};
pub use report::{MetricReport, METRIC_NAMES, REPORT_VERSION};
pub use reward_model::{
    check_disjoint, mb_urs, train_reward_model, RetentionScores, RewardTrainConfig, TrainedRewardModel,
};
pub use variance::{partition_users, variance_analysis, VarianceResult};

use crate::error::{Error, Result};
use crate::inference::RolloutRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Cutoff for HR and NDCG.
    pub cutoff: usize,
    /// n-gram order of BLEU and ROUGE.
    pub ngram_order: usize,
    pub nrc_threshold: f64,
    /// Highest reward class.
    pub k: u32,
    /// Number of user partitions for the variance analysis.
    pub variance_splits: Option<usize>,
    pub variance_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            cutoff: 10,
            ngram_order: 1,
            nrc_threshold: NRC_THRESHOLD,
            k: 7,
            variance_splits: None,
            variance_seed: 0,
        }
    }
}

/// All metrics over the records of `users` (all records when `None`).
/// `predicted` holds the reward model's per-step output aligned with
/// `records`.
pub fn metrics_for(
    records: &[RolloutRecord],
    predicted: &[f64],
    users: Option<&BTreeSet<String>>,
    settings: &EvalSettings,
) -> Result<BTreeMap<String, f64>> {
    if records.len() != predicted.len() {
        return Err(Error::Shape(format!("{} records, {} predictions", records.len(), predicted.len())));
    }
    let chosen: Vec<(&RolloutRecord, f64)> = records
        .iter()
        .zip(predicted.iter().copied())
        .filter(|(r, _)| users.is_none_or(|u| u.contains(&r.user_id)))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Degenerate("no rollout records to evaluate".into()));
    }
    let n = chosen.len() as f64;
    let avg = |f: &dyn Fn(&RolloutRecord) -> Result<f64>| -> Result<f64> {
        Ok(chosen.iter().map(|(r, _)| f(r)).sum::<Result<f64>>()? / n)
    };
    let o = settings.ngram_order;
    let c = settings.cutoff;
    let mut m = BTreeMap::new();
    m.insert("bleu".to_string(), avg(&|r| bleu_n(&r.generated, &r.logged, o))?);
    m.insert("rouge".to_string(), avg(&|r| rouge_n(&r.generated, &r.logged, o))?);
    m.insert("ndcg".to_string(), avg(&|r| ndcg_at_k(&r.generated, &r.logged, c))?);
    m.insert("hr".to_string(), avg(&|r| hr_at_k(&r.generated, &r.logged, c))?);

    let predicted_mean = chosen.iter().map(|(_, p)| p).sum::<f64>() / n;
    let logged_mean = chosen.iter().map(|(r, _)| r.logged_reward as f64).sum::<f64>() / n;
    m.insert("mb_urs".to_string(), predicted_mean);
    let samples: Vec<ClassSample> = chosen
        .iter()
        .map(|(r, _)| ClassSample {
            pred: &r.generated,
            truth: &r.logged,
            class: r.logged_reward,
        })
        .collect();
    m.insert("sb_urs".to_string(), sb_urs(&samples, settings.k)?);
    m.insert("asb_urs".to_string(), asb_urs(&samples, settings.k)?);
    m.insert("iur".to_string(), iur(predicted_mean, logged_mean)?);

    let mut per_user: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (r, p) in &chosen {
        let e = per_user.entry(r.user_id.as_str()).or_default();
        e.0 += p;
        e.1 += 1;
    }
    let user_means: Vec<f64> = per_user.values().map(|(s, k)| s / *k as f64).collect();
    m.insert("nrc".to_string(), nrc(&user_means, settings.nrc_threshold)?);
    m.insert("logged_retention".to_string(), logged_mean);
    m.insert("users".to_string(), per_user.len() as f64);
    Ok(m)
}

/// Score rollouts with the reward model and build the full report,
/// including per-split values when requested.
pub fn evaluate_rollouts(
    records: &[RolloutRecord],
    reward_model: &TrainedRewardModel,
    vocab_hash: &str,
    settings: &EvalSettings,
    config: serde_json::Value,
) -> Result<MetricReport> {
    let scores = reward_model.score(records, vocab_hash)?;
    let metrics = metrics_for(records, &scores.per_step, None, settings)?;
    let mut report = MetricReport::new(metrics, config);
    if let Some(n) = settings.variance_splits {
        let users: Vec<String> = scores.per_user.keys().cloned().collect();
        let partitions = partition_users(&users, n, settings.variance_seed)?;
        let splits = partitions
            .iter()
            .map(|p| {
                let set: BTreeSet<String> = p.iter().cloned().collect();
                metrics_for(records, &scores.per_step, Some(&set), settings)
            })
            .collect::<Result<Vec<_>>>()?;
        let variance = splits[0]
            .keys()
            .map(|k| {
                let vals: Vec<f64> = splits.iter().map(|s| s[k]).collect();
                (k.clone(), population_variance(&vals).expect("non-empty"))
            })
            .collect();
        report.splits = Some(splits);
        report.variance = Some(variance);
    }
    report.validate()?;
    Ok(report)
}
