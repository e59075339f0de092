//! The supervised reward predictor and the model-based retention score.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Var};
use crate::datamodel::{ItemVocabulary, Trajectory};
use crate::error::{Error, Result};
use crate::inference::RolloutRecord;
use crate::model::{ModelConfig, PromptKind, RewardModel, StepInputs};
use crate::training::{truncate, windows, Checkpoint, EpochRecord, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub max_trajectory_len: usize,
    /// Fit on every window of `max_trajectory_len` rounds rather than only
    /// the first.
    pub windows: bool,
    pub k: u32,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            max_trajectory_len: 10,
            windows: true,
            k: 7,
            seed: 0,
        }
    }
}

/// A fitted reward model with its per-epoch training error.
#[derive(Debug, Clone)]
pub struct TrainedRewardModel {
    pub model: RewardModel,
    pub store: ParamStore,
    pub vocab_hash: String,
    /// Mean squared error per epoch, averaged over batches.
    pub mse_history: Vec<f64>,
    /// Error on the fitting set after training, without dropout.
    pub validation_mse: f64,
    pub checkpoint: Checkpoint,
}

/// Per-step and per-user predicted retention for a set of rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionScores {
    pub per_step: Vec<f64>,
    pub per_user: BTreeMap<String, f64>,
}

impl RetentionScores {
    pub fn mean(&self) -> f64 {
        self.per_step.iter().sum::<f64>() / self.per_step.len() as f64
    }
}

/// Fail when a user appears in both sets.
pub fn check_disjoint(fit: &[Trajectory], train: &[Trajectory]) -> Result<()> {
    let train_users: BTreeSet<&str> = train.iter().map(|t| t.user_id.as_str()).collect();
    let shared: Vec<&str> = fit
        .iter()
        .map(|t| t.user_id.as_str())
        .filter(|u| train_users.contains(u))
        .collect();
    if !shared.is_empty() {
        return Err(Error::Config(format!(
            "reward model data shares {} users with the training split (first: {})",
            shared.len(),
            shared[0]
        )));
    }
    Ok(())
}

fn inputs<'a>(rewards: &'a [f64], states: &'a [&'a [usize]], actions: &'a [&'a [usize]]) -> StepInputs<'a> {
    StepInputs {
        rewards,
        states,
        actions,
    }
}

struct Columns<'a> {
    rewards: Vec<Vec<f64>>,
    states: Vec<Vec<&'a [usize]>>,
    actions: Vec<Vec<&'a [usize]>>,
}

impl<'a> Columns<'a> {
    fn of(batch: &[&'a Trajectory]) -> Self {
        Self {
            rewards: batch.iter().map(|t| t.steps.iter().map(|s| s.reward as f64).collect()).collect(),
            states: batch.iter().map(|t| t.steps.iter().map(|s| s.state.as_slice()).collect()).collect(),
            actions: batch.iter().map(|t| t.steps.iter().map(|s| s.action.as_slice()).collect()).collect(),
        }
    }

    fn inputs(&self) -> Vec<StepInputs<'_>> {
        (0..self.rewards.len())
            .map(|i| inputs(&self.rewards[i], &self.states[i], &self.actions[i]))
            .collect()
    }

    fn targets(&self) -> Array2<f64> {
        let flat: Vec<f64> = self.rewards.iter().flatten().copied().collect();
        Array2::from_shape_vec((flat.len(), 1), flat).expect("column")
    }
}

fn mse_var(g: &mut Graph, model: &RewardModel, cols: &Columns, rng: Option<&mut dyn rand::RngCore>) -> Result<Var> {
    let pred = model.predict_var(g, &cols.inputs(), rng)?;
    let target = g.input(cols.targets());
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    Ok(g.mean(sq))
}

/// Fit a reward predictor by mean squared error. Deterministic given
/// `config.seed`.
pub fn train_reward_model(
    data: &[Trajectory],
    vocab: &ItemVocabulary,
    model_config: &ModelConfig,
    config: &RewardTrainConfig,
) -> Result<TrainedRewardModel> {
    if data.is_empty() {
        return Err(Error::Config("reward model needs a non-empty validation split".into()));
    }
    if config.batch_size == 0 || config.max_trajectory_len == 0 {
        return Err(Error::Config("reward model batch size and length must be positive".into()));
    }
    let data: Vec<Trajectory> = if config.windows {
        data.iter()
            .map(|t| windows(t, config.max_trajectory_len))
            .collect::<Result<Vec<_>>>()?
            .concat()
    } else {
        data.iter()
            .map(|t| truncate(t, config.max_trajectory_len))
            .collect::<Result<_>>()?
    };
    for t in &data {
        t.validate(config.k)?;
    }
    let mut mc = model_config.clone();
    mc.vocab_size = vocab.size();
    mc.prompt = PromptKind::AutoDiscretized;
    mc.max_trajectory_len = mc.max_trajectory_len.max(config.max_trajectory_len);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(10);
    let mut store = ParamStore::new();
    let model = RewardModel::new(mc.clone(), &mut store, &mut init_rng)?;
    let settings = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut checkpoint = Checkpoint::capture(ModelKind::Reward, mc, settings, vocab.hash(), &store);
    let mut opt = AdamW::new(config.optimizer, &store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(11);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(13);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &data[i]).collect();
            let cols = Columns::of(&refs);
            let (loss, grads) = {
                let mut g = Graph::new(&store);
                let l = mse_var(&mut g, &model, &cols, Some(&mut dropout_rng))?;
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("reward model loss {v} at epoch {epoch}")));
                }
                (v, g.backward(l).dense(&store))
            };
            norm_sum += opt.step(&mut store, grads);
            loss_sum += loss;
            batches += 1.0;
        }
        let mse = loss_sum / batches;
        log::debug!("reward model epoch {epoch}: mse {mse:.5}");
        history.push(mse);
        checkpoint.loss_history.push(EpochRecord {
            epoch,
            loss: mse,
            ce: 0.0,
            contrastive: 0.0,
            grad_norm: norm_sum / batches,
        });
        checkpoint.epoch = epoch;
    }
    let refs: Vec<&Trajectory> = data.iter().collect();
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in refs.chunks(config.batch_size) {
        let cols = Columns::of(chunk);
        let pred = model.predict(&store, &cols.inputs())?;
        for (p, t) in pred.iter().zip(cols.targets().iter()) {
            sq += (p - t) * (p - t);
            n += 1;
        }
    }
    checkpoint.tensors = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect();
    Ok(TrainedRewardModel {
        model,
        store,
        vocab_hash: vocab.hash(),
        mse_history: history,
        validation_mse: sq / n as f64,
        checkpoint,
    })
}

impl TrainedRewardModel {
    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let (model, store) = checkpoint.reward_model()?;
        Ok(Self {
            model,
            store,
            vocab_hash: checkpoint.vocab_hash.clone(),
            mse_history: checkpoint.loss_history.iter().map(|r| r.loss).collect(),
            validation_mse: f64::NAN,
            checkpoint: checkpoint.clone(),
        })
    }

    /// Predicted reward for every step of `trajectories`.
    pub fn predict(&self, trajectories: &[Trajectory]) -> Result<Vec<f64>> {
        let refs: Vec<&Trajectory> = trajectories.iter().collect();
        let mut out = Vec::new();
        for chunk in refs.chunks(32) {
            out.extend(self.model.predict(&self.store, &Columns::of(chunk).inputs())?);
        }
        Ok(out)
    }

    /// Score rollouts: logged states and rewards with the generated actions.
    pub fn score(&self, rollouts: &[RolloutRecord], vocab_hash: &str) -> Result<RetentionScores> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::Vocabulary(format!(
                "reward model vocabulary {} does not match rollout vocabulary {vocab_hash}",
                self.vocab_hash
            )));
        }
        if rollouts.is_empty() {
            return Err(Error::Degenerate("no rollouts to score".into()));
        }
        let mut users: Vec<Trajectory> = Vec::new();
        for r in rollouts {
            let new_user = users.last().is_none_or(|u| u.user_id != r.user_id);
            if new_user {
                if r.round != 0 {
                    return Err(Error::Ordering(format!("rollout for {} starts at round {}", r.user_id, r.round)));
                }
                users.push(Trajectory {
                    user_id: r.user_id.clone(),
                    steps: Vec::new(),
                });
            }
            let u = users.last_mut().expect("pushed above");
            if r.round != u.steps.len() {
                return Err(Error::Ordering(format!("rollout for {} skips to round {}", r.user_id, r.round)));
            }
            u.steps.push(crate::datamodel::Step {
                return_to_go: 0,
                state: r.state.clone(),
                action: r.generated.clone(),
                reward: r.logged_reward,
            });
        }
        let positions = self.model.config.max_trajectory_len;
        if let Some(u) = users.iter().find(|u| u.steps.len() > positions) {
            return Err(Error::Shape(format!(
                "rollout for {} has {} rounds, reward model holds {positions}",
                u.user_id,
                u.steps.len()
            )));
        }
        let per_step = self.predict(&users)?;
        let mut per_user = BTreeMap::new();
        let mut offset = 0;
        for u in &users {
            let n = u.steps.len();
            let m = per_step[offset..offset + n].iter().sum::<f64>() / n as f64;
            if per_user.insert(u.user_id.clone(), m).is_some() {
                return Err(Error::Ordering(format!("rollouts for {} are not contiguous", u.user_id)));
            }
            offset += n;
        }
        Ok(RetentionScores { per_step, per_user })
    }
}

/// Mean predicted per-step reward over the rollouts.
pub fn mb_urs(rollouts: &[RolloutRecord], reward_model: &TrainedRewardModel, vocab_hash: &str) -> Result<f64> {
    Ok(reward_model.score(rollouts, vocab_hash)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderLengths;
    use rand::Rng;

    fn model_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            buckets: 4,
            lengths: EncoderLengths::new(6, 4).unwrap(),
            max_trajectory_len: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn vocab() -> ItemVocabulary {
        ItemVocabulary::from_ids((0..6).map(|i| format!("i{i}")))
    }

    fn data(n: usize, reward: impl Fn(usize) -> u32, seed: u64) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|u| {
                let parts = (0..3)
                    .map(|t| {
                        let s: Vec<usize> = (0..2).map(|_| rng.random_range(3..9)).collect();
                        let a: Vec<usize> = (0..2).map(|_| rng.random_range(3..9)).collect();
                        (s, a, reward(u + t))
                    })
                    .collect();
                Trajectory::from_parts(format!("u{u:02}"), parts).unwrap()
            })
            .collect()
    }

    fn rollouts_of(trajs: &[Trajectory]) -> Vec<RolloutRecord> {
        trajs
            .iter()
            .flat_map(|t| {
                t.steps.iter().enumerate().map(|(round, s)| RolloutRecord {
                    user_id: t.user_id.clone(),
                    round,
                    prompt: 0.0,
                    state: s.state.clone(),
                    generated: s.action.clone(),
                    logged: s.action.clone(),
                    logged_reward: s.reward,
                })
            })
            .collect()
    }

    #[test]
    fn constant_reward_is_learned() {
        let d = data(12, |_| 4, 1);
        let cfg = RewardTrainConfig {
            epochs: 20,
            batch_size: 4,
            ..RewardTrainConfig::default()
        };
        let rm = train_reward_model(&d, &vocab(), &model_config(), &cfg).unwrap();
        assert!(rm.validation_mse < 0.1, "mse {}", rm.validation_mse);
        for p in rm.predict(&d).unwrap() {
            assert!((p - 4.0).abs() < 0.5);
        }
        let again = train_reward_model(&d, &vocab(), &model_config(), &cfg).unwrap();
        assert_eq!(rm.mse_history, again.mse_history);
    }

    #[test]
    fn zero_learning_rate_keeps_the_initial_head() {
        let d = data(4, |i| (i % 8) as u32, 2);
        let mut cfg = RewardTrainConfig {
            epochs: 2,
            batch_size: 2,
            ..RewardTrainConfig::default()
        };
        cfg.optimizer.learning_rate = 0.0;
        let rm = train_reward_model(&d, &vocab(), &model_config(), &cfg).unwrap();
        let mut mc = model_config();
        mc.vocab_size = vocab().size();
        let mut init_rng = ChaCha8Rng::seed_from_u64(0);
        init_rng.set_stream(10);
        let mut store = ParamStore::new();
        let fresh = RewardModel::new(mc, &mut store, &mut init_rng).unwrap();
        let refs: Vec<&Trajectory> = d.iter().collect();
        let cols = Columns::of(&refs);
        assert_eq!(rm.predict(&d).unwrap(), fresh.predict(&store, &cols.inputs()).unwrap());
    }

    #[test]
    fn rigged_constant_output() {
        let d = data(5, |i| (i % 8) as u32, 3);
        let cfg = RewardTrainConfig {
            epochs: 0,
            ..RewardTrainConfig::default()
        };
        let mut rm = train_reward_model(&d, &vocab(), &model_config(), &cfg).unwrap();
        rm.store.set(rm.model.head_weight, Array2::zeros((8, 1)));
        rm.store.set(rm.model.head_bias, Array2::from_elem((1, 1), 5.0));
        let rolls = rollouts_of(&d);
        assert_eq!(mb_urs(&rolls, &rm, &vocab().hash()).unwrap(), 5.0);
        let scores = rm.score(&rolls, &vocab().hash()).unwrap();
        assert_eq!(scores.per_user.len(), 5);
        assert!(scores.per_user.values().all(|&v| v == 5.0));
        assert!(matches!(mb_urs(&[], &rm, &vocab().hash()), Err(Error::Degenerate(_))));
        assert!(matches!(mb_urs(&rolls, &rm, "other"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn empty_generated_lists_are_scored() {
        let d = data(2, |_| 1, 4);
        let rm = train_reward_model(&d, &vocab(), &model_config(), &RewardTrainConfig { epochs: 0, ..RewardTrainConfig::default() }).unwrap();
        let mut rolls = rollouts_of(&d);
        rolls[1].generated.clear();
        assert!(mb_urs(&rolls, &rm, &vocab().hash()).unwrap().is_finite());
    }

    #[test]
    fn empty_split_and_overlap() {
        assert!(matches!(
            train_reward_model(&[], &vocab(), &model_config(), &RewardTrainConfig::default()),
            Err(Error::Config(_))
        ));
        let d = data(4, |_| 1, 5);
        assert!(check_disjoint(&d[..2], &d[2..]).is_ok());
        assert!(matches!(check_disjoint(&d[..3], &d[2..]), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = data(4, |i| (i % 3) as u32, 6);
        let cfg = RewardTrainConfig {
            epochs: 1,
            batch_size: 2,
            ..RewardTrainConfig::default()
        };
        let rm = train_reward_model(&d, &vocab(), &model_config(), &cfg).unwrap();
        let back = TrainedRewardModel::from_checkpoint(&rm.checkpoint).unwrap();
        assert_eq!(back.predict(&d).unwrap(), rm.predict(&d).unwrap());
    }
}
