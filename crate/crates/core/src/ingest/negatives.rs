//! Contrastive negatives: the positive trajectory with its rewards replaced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{compute_return_to_go, Trajectory};
use crate::error::{Error, Result};
use crate::training::kappa;

/// Which replacement rewards a negative may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRule {
    /// Uniform over `0..e_t`; zero rewards stay zero.
    #[default]
    Lower,
    /// Uniform over `0..=r_max` except `e_t`.
    AnyOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub base_user: String,
    pub rewards: Vec<u32>,
    pub returns_to_go: Vec<u32>,
    pub kappa: f64,
}

impl NegativeSample {
    /// The negative as a full trajectory sharing the base's states and actions.
    pub fn to_trajectory(&self, base: &Trajectory) -> Result<Trajectory> {
        if base.user_id != self.base_user || base.len() != self.rewards.len() {
            return Err(Error::Shape(format!(
                "negative for {} does not match trajectory {}",
                self.base_user, base.user_id
            )));
        }
        Trajectory::from_parts(
            base.user_id.clone(),
            base.steps
                .iter()
                .zip(&self.rewards)
                .map(|(s, &r)| (s.state.clone(), s.action.clone(), r))
                .collect(),
        )
    }
}

/// `n_neg` negatives for `positive` drawn from `seed`.
pub fn make_negatives(positive: &Trajectory, n_neg: usize, r_max: u32, seed: u64) -> Result<Vec<NegativeSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_negatives_with(positive, n_neg, r_max, NegativeRule::Lower, &mut rng)
}

pub fn make_negatives_with<R: Rng + ?Sized>(
    positive: &Trajectory,
    n_neg: usize,
    r_max: u32,
    rule: NegativeRule,
    rng: &mut R,
) -> Result<Vec<NegativeSample>> {
    if n_neg < 1 {
        return Err(Error::Config("n_neg must be at least 1".into()));
    }
    if positive.is_empty() {
        return Err(Error::Shape(format!("trajectory {} is empty", positive.user_id)));
    }
    (0..n_neg)
        .map(|_| {
            let rewards: Vec<u32> = positive
                .steps
                .iter()
                .map(|s| match rule {
                    NegativeRule::Lower if s.reward == 0 => 0,
                    NegativeRule::Lower => rng.random_range(0..s.reward),
                    NegativeRule::AnyOther if r_max == 0 => 0,
                    NegativeRule::AnyOther => {
                        let draw = rng.random_range(0..r_max);
                        if draw >= s.reward {
                            draw + 1
                        } else {
                            draw
                        }
                    }
                })
                .collect();
            let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / rewards.len() as f64;
            Ok(NegativeSample {
                base_user: positive.user_id.clone(),
                returns_to_go: compute_return_to_go(&rewards)?,
                kappa: kappa(mean, r_max as f64)?,
                rewards,
            })
        })
        .collect()
}
