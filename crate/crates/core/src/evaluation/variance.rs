//! Metric stability across user-level partitions of a test set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::metrics::population_variance;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    pub partitions: Vec<Vec<String>>,
    pub values: Vec<f64>,
    pub variance: f64,
}

/// Shuffle the sorted user ids by `seed` and deal them round-robin into
/// `n_splits` parts, each returned sorted.
pub fn partition_users(users: &[String], n_splits: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if n_splits == 0 {
        return Err(Error::Config("need at least one split".into()));
    }
    let mut ids = users.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < n_splits {
        return Err(Error::Config(format!("{} users cannot fill {n_splits} splits", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = vec![Vec::new(); n_splits];
    for (i, id) in ids.into_iter().enumerate() {
        parts[i % n_splits].push(id);
    }
    for p in &mut parts {
        p.sort();
    }
    Ok(parts)
}

/// Evaluate `metric` on each part and report the population variance.
pub fn variance_analysis<F>(users: &[String], n_splits: usize, seed: u64, mut metric: F) -> Result<VarianceResult>
where
    F: FnMut(&[String]) -> Result<f64>,
{
    let partitions = partition_users(users, n_splits, seed)?;
    let values = partitions.iter().map(|p| metric(p)).collect::<Result<Vec<f64>>>()?;
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("split metric {v} is not finite")));
    }
    let variance = population_variance(&values).expect("at least one split");
    Ok(VarianceResult {
        partitions,
        values,
        variance,
    })
}
