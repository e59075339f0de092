//! User-level train/validation/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub split_seed: u64,
}

/// Shares of users in the train, validation and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    /// Hold out `test`, then give validation 30% of the rest.
    pub fn with_test(test: f64) -> Self {
        let rest = 1.0 - test;
        Self {
            train: 0.7 * rest,
            validation: 0.3 * rest,
            test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions {parts:?} must lie in [0, 1]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Floor each share, then hand the leftover users to the largest
    /// remainders (earlier parts win ties).
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let exact = [self.train, self.validation, self.test].map(|f| f * n as f64);
        let mut counts = exact.map(|x| (x + 1e-9).floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = n.saturating_sub(counts.iter().sum());
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        Ok(counts)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::with_test(0.2)
    }
}

/// Shuffle users by `seed` and cut. Each part is returned in user id order.
pub fn split_dataset(trajectories: &[Trajectory], fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    let counts = fractions.counts(trajectories.len())?;
    let mut users: Vec<&Trajectory> = trajectories.iter().collect();
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    if let Some(w) = users.windows(2).find(|w| w[0].user_id == w[1].user_id) {
        return Err(Error::Shape(format!("user {} appears twice", w[0].user_id)));
    }
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = users.as_slice();
    let mut take = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        let mut part: Vec<Trajectory> = head.iter().map(|&t| t.clone()).collect();
        part.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        part
    };
    Ok(DatasetSplit {
        train: take(counts[0]),
        validation: take(counts[1]),
        test: take(counts[2]),
        split_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn users(n: usize) -> Vec<Trajectory> {
        (0..n)
            .map(|i| Trajectory::from_parts(format!("u{i:03}"), vec![(vec![], vec![3], 1)]).unwrap())
            .collect()
    }

    fn frac(a: f64, b: f64, c: f64) -> SplitFractions {
        SplitFractions {
            train: a,
            validation: b,
            test: c,
        }
    }

    #[test]
    fn ten_users() {
        let s = split_dataset(&users(10), frac(0.5, 0.3, 0.2), 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (5, 3, 2));
        assert_eq!(s, split_dataset(&users(10), frac(0.5, 0.3, 0.2), 7).unwrap());
        let ids: BTreeSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).map(|t| &t.user_id).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn bad_fractions() {
        assert!(matches!(
            split_dataset(&users(3), frac(0.5, 0.5, 0.5), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn leftovers_go_to_largest_remainder() {
        assert_eq!(frac(0.5, 0.3, 0.2).counts(7).unwrap(), [4, 2, 1]);
        assert_eq!(frac(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).counts(5).unwrap(), [2, 2, 1]);
        assert_eq!(SplitFractions::default().counts(100).unwrap(), [56, 24, 20]);
    }

    #[test]
    fn seed_changes_membership() {
        let a = split_dataset(&users(50), SplitFractions::default(), 1).unwrap();
        let b = split_dataset(&users(50), SplitFractions::default(), 2).unwrap();
        assert_ne!(a.train, b.train);
    }
}
