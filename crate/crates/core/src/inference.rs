//! Recommendation by prompting with a target return, and offline rollouts.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::action_decoder::DecodeOptions;
use crate::autodiff::ParamStore;
use crate::datamodel::Trajectory;
use crate::error::{Error, Result};
use crate::model::{SequenceModel, StepInputs};
use crate::training::Checkpoint;

/// How the reward token of the step being predicted is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// `K` times the number of rounds left, re-issued every round.
    #[default]
    MaxConstant,
    /// Start at `K * T` and subtract every observed reward.
    DecrementingReturnToGo,
    /// The same value every round.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub target: TargetRule,
    pub decode: DecodeOptions,
    /// Retention window `K`.
    pub k: usize,
    /// Rounds per episode `T`; rollouts cover at most this many rounds.
    pub horizon: usize,
    /// Feed generated actions back as history instead of the logged ones.
    pub feedback: bool,
    /// Users per forward pass.
    pub batch_size: usize,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            target: TargetRule::MaxConstant,
            decode: DecodeOptions::default(),
            k: 7,
            horizon: 10,
            feedback: false,
            batch_size: 32,
        }
    }
}

impl PolicySettings {
    /// Reward token for round `t` (0-based) after observing `past_rewards`.
    pub fn prompt(&self, t: usize, past_rewards: &[u32]) -> f64 {
        let k = self.k as f64;
        match self.target {
            TargetRule::MaxConstant => k * self.horizon.saturating_sub(t) as f64,
            TargetRule::DecrementingReturnToGo => {
                let seen: u32 = past_rewards.iter().sum();
                (k * self.horizon as f64 - seen as f64).max(0.0)
            }
            TargetRule::Fixed(v) => v,
        }
    }
}

/// One step of prior context: the reward token that was issued and the
/// state and action that followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub prompt: f64,
    pub state: Vec<usize>,
    pub action: Vec<usize>,
    pub reward: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationPolicy {
    pub model: SequenceModel,
    pub store: ParamStore,
    pub vocab_hash: String,
    pub settings: PolicySettings,
}

/// One generated recommendation next to what was logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub user_id: String,
    /// 0-based round within the trajectory.
    pub round: usize,
    pub prompt: f64,
    pub state: Vec<usize>,
    pub generated: Vec<usize>,
    pub logged: Vec<usize>,
    pub logged_reward: u32,
}

impl RecommendationPolicy {
    /// Load the policy, refusing a checkpoint built on another vocabulary.
    pub fn from_checkpoint(checkpoint: &Checkpoint, vocab_hash: &str, settings: PolicySettings) -> Result<Self> {
        checkpoint.check_vocabulary(vocab_hash)?;
        let (model, store) = checkpoint.sequence_model()?;
        Self::new(model, store, vocab_hash.to_string(), settings)
    }

    pub fn new(model: SequenceModel, store: ParamStore, vocab_hash: String, settings: PolicySettings) -> Result<Self> {
        if settings.k == 0 || settings.horizon == 0 || settings.batch_size == 0 {
            return Err(Error::Config("policy needs positive K, horizon and batch size".into()));
        }
        if settings.horizon > model.config.max_trajectory_len {
            return Err(Error::Config(format!(
                "horizon {} exceeds the model's {} positions",
                settings.horizon, model.config.max_trajectory_len
            )));
        }
        Ok(Self {
            model,
            store,
            vocab_hash,
            settings,
        })
    }

    pub fn check_vocabulary(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::Vocabulary(format!(
                "policy vocabulary {} does not match dataset vocabulary {vocab_hash}",
                self.vocab_hash
            )));
        }
        Ok(())
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        let n = self.model.config.vocab_size;
        match items.iter().find(|&&i| i < crate::datamodel::NUM_SPECIAL || i >= n) {
            Some(bad) => Err(Error::Vocabulary(format!("item index {bad} is not a vocabulary item"))),
            None => Ok(()),
        }
    }

    fn decode(&self, a_tilde: &Array2<f64>) -> Vec<Vec<usize>> {
        self.model
            .decoder
            .decode_greedy(&self.store, &self.model.backbone.embedding, a_tilde, &self.settings.decode)
    }

    /// Recommend for the round following `history`.
    pub fn recommend(&self, history: &[HistoryStep], current_state: &[usize]) -> Result<Vec<usize>> {
        if history.len() >= self.model.config.max_trajectory_len {
            return Err(Error::Shape(format!(
                "history of {} steps leaves no room in {} positions",
                history.len(),
                self.model.config.max_trajectory_len
            )));
        }
        for h in history {
            self.check_items(&h.state)?;
            self.check_items(&h.action)?;
        }
        self.check_items(current_state)?;
        let past: Vec<u32> = history.iter().map(|h| h.reward).collect();
        let mut rewards: Vec<f64> = history.iter().map(|h| h.prompt).collect();
        rewards.push(self.settings.prompt(history.len(), &past));
        let mut states: Vec<&[usize]> = history.iter().map(|h| h.state.as_slice()).collect();
        states.push(current_state);
        let actions: Vec<&[usize]> = history.iter().map(|h| h.action.as_slice()).collect();
        let input = StepInputs {
            rewards: &rewards,
            states: &states,
            actions: &actions,
        };
        let a = self.model.predict_embeddings(&self.store, &[input])?;
        let last = a.nrows() - 1;
        let row = a.slice(ndarray::s![last..last + 1, ..]).to_owned();
        Ok(self.decode(&row).pop().expect("one row"))
    }

    /// Generate a recommendation for every round of every trajectory, up to
    /// the horizon. Output is ordered by trajectory, then round.
    pub fn rollout(&self, trajectories: &[Trajectory]) -> Result<Vec<RolloutRecord>> {
        for t in trajectories {
            if t.is_empty() {
                return Err(Error::Shape(format!("trajectory {} is empty", t.user_id)));
            }
            for s in &t.steps {
                self.check_items(&s.state)?;
                self.check_items(&s.action)?;
            }
        }
        let mut out = Vec::new();
        for chunk in trajectories.chunks(self.settings.batch_size) {
            let generated = if self.settings.feedback {
                self.rollout_feedback(chunk)?
            } else {
                self.rollout_logged(chunk)?
            };
            for (t, gens) in chunk.iter().zip(generated) {
                let past = t.rewards();
                for (round, (step, g)) in t.steps.iter().zip(gens).enumerate() {
                    out.push(RolloutRecord {
                        user_id: t.user_id.clone(),
                        round,
                        prompt: self.settings.prompt(round, &past[..round]),
                        state: step.state.clone(),
                        generated: g,
                        logged: step.action.clone(),
                        logged_reward: step.reward,
                    });
                }
            }
        }
        Ok(out)
    }

    fn rounds(&self, t: &Trajectory) -> usize {
        t.len().min(self.settings.horizon)
    }

    fn prompts(&self, t: &Trajectory) -> Vec<f64> {
        let past = t.rewards();
        (0..self.rounds(t)).map(|r| self.settings.prompt(r, &past[..r])).collect()
    }

    // With logged history the whole trajectory goes through one causal pass:
    // the readout at each state only sees earlier steps.
    fn rollout_logged(&self, chunk: &[Trajectory]) -> Result<Vec<Vec<Vec<usize>>>> {
        let prompts: Vec<Vec<f64>> = chunk.iter().map(|t| self.prompts(t)).collect();
        let states: Vec<Vec<&[usize]>> = chunk
            .iter()
            .map(|t| t.steps[..self.rounds(t)].iter().map(|s| s.state.as_slice()).collect())
            .collect();
        let actions: Vec<Vec<&[usize]>> = chunk
            .iter()
            .map(|t| t.steps[..self.rounds(t)].iter().map(|s| s.action.as_slice()).collect())
            .collect();
        let batch: Vec<StepInputs> = (0..chunk.len())
            .map(|i| StepInputs {
                rewards: &prompts[i],
                states: &states[i],
                actions: &actions[i],
            })
            .collect();
        let a = self.model.predict_embeddings(&self.store, &batch)?;
        let mut flat = self.decode(&a).into_iter();
        Ok(chunk
            .iter()
            .map(|t| (0..self.rounds(t)).map(|_| flat.next().expect("one list per step")).collect())
            .collect())
    }

    // Generated actions become history, so rounds run one at a time.
    fn rollout_feedback(&self, chunk: &[Trajectory]) -> Result<Vec<Vec<Vec<usize>>>> {
        let prompts: Vec<Vec<f64>> = chunk.iter().map(|t| self.prompts(t)).collect();
        let mut generated: Vec<Vec<Vec<usize>>> = vec![Vec::new(); chunk.len()];
        let longest = chunk.iter().map(|t| self.rounds(t)).max().unwrap_or(0);
        for r in 0..longest {
            let live: Vec<usize> = (0..chunk.len()).filter(|&i| self.rounds(&chunk[i]) > r).collect();
            let states: Vec<Vec<&[usize]>> = live
                .iter()
                .map(|&i| chunk[i].steps[..=r].iter().map(|s| s.state.as_slice()).collect())
                .collect();
            let actions: Vec<Vec<&[usize]>> = live
                .iter()
                .map(|&i| generated[i].iter().map(Vec::as_slice).collect())
                .collect();
            let batch: Vec<StepInputs> = live
                .iter()
                .enumerate()
                .map(|(j, &i)| StepInputs {
                    rewards: &prompts[i][..=r],
                    states: &states[j],
                    actions: &actions[j],
                })
                .collect();
            let a = self.model.predict_embeddings(&self.store, &batch)?;
            let mut rows = Vec::with_capacity(live.len());
            let mut offset = 0;
            for &i in &live {
                let n = r + 1;
                rows.push(a.row(offset + n - 1).to_owned());
                offset += n;
                debug_assert!(self.rounds(&chunk[i]) > r);
            }
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            let last = ndarray::stack(ndarray::Axis(0), &views).expect("equal widths");
            for (&i, g) in live.iter().zip(self.decode(&last)) {
                generated[i].push(g);
            }
        }
        Ok(generated)
    }
}

/// Write rollout records, one JSON object per line.
pub fn write_rollout(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_rollout(path: &Path) -> Result<Vec<RolloutRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::NUM_SPECIAL;
    use crate::encoders::EncoderLengths;
    use crate::model::ModelConfig;
    use crate::training::ModelKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(vocab: usize) -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 16,
            buckets: 4,
            lengths: EncoderLengths::new(6, 5).unwrap(),
            max_trajectory_len: 6,
            dropout: 0.0,
            vocab_size: vocab,
            ..ModelConfig::default()
        }
    }

    fn policy(seed: u64, settings: PolicySettings) -> RecommendationPolicy {
        let mut store = ParamStore::new();
        let model = SequenceModel::new(config(12), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        RecommendationPolicy::new(model, store, "v".into(), settings).unwrap()
    }

    fn settings() -> PolicySettings {
        PolicySettings {
            horizon: 5,
            decode: DecodeOptions {
                max_len: 5,
                ..DecodeOptions::default()
            },
            ..PolicySettings::default()
        }
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, user: usize, len: usize) -> Trajectory {
        let mut item = || rng.random_range(NUM_SPECIAL..12);
        let parts = (0..len)
            .map(|_| {
                let s: Vec<usize> = (0..3).map(|_| item()).collect();
                let a: Vec<usize> = (0..2).map(|_| item()).collect();
                (s, a, 0)
            })
            .collect::<Vec<_>>();
        let mut t = Trajectory::from_parts(format!("u{user}"), parts).unwrap();
        for (i, s) in t.steps.iter_mut().enumerate() {
            s.reward = (user + i) as u32 % 8;
        }
        let rewards = t.rewards();
        Trajectory::from_parts(t.user_id, t.steps.into_iter().zip(rewards).map(|(s, r)| (s.state, s.action, r)).collect())
            .unwrap()
    }

    #[test]
    fn prompt_rules() {
        let s = PolicySettings {
            k: 7,
            horizon: 10,
            ..PolicySettings::default()
        };
        assert_eq!(s.prompt(0, &[]), 70.0);
        assert_eq!(s.prompt(3, &[1, 1, 1]), 49.0);
        let d = PolicySettings {
            target: TargetRule::DecrementingReturnToGo,
            ..s
        };
        assert_eq!(d.prompt(0, &[]), 70.0);
        assert_eq!(d.prompt(1, &[5]), 65.0);
        let f = PolicySettings {
            target: TargetRule::Fixed(0.0),
            ..s
        };
        assert_eq!(f.prompt(4, &[7, 7]), 0.0);
    }

    #[test]
    fn rollout_matches_step_by_step_recommend() {
        let p = policy(3, settings());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trajs: Vec<_> = (0..4).map(|u| random_trajectory(&mut rng, u, 2 + u)).collect();
        let records = p.rollout(&trajs).unwrap();
        assert_eq!(records.len(), 2 + 3 + 4 + 5);
        for rec in &records {
            let t = trajs.iter().find(|t| t.user_id == rec.user_id).unwrap();
            let history: Vec<HistoryStep> = t.steps[..rec.round]
                .iter()
                .enumerate()
                .map(|(i, s)| HistoryStep {
                    prompt: p.settings.prompt(i, &t.rewards()[..i]),
                    state: s.state.clone(),
                    action: s.action.clone(),
                    reward: s.reward,
                })
                .collect();
            let single = p.recommend(&history, &t.steps[rec.round].state).unwrap();
            assert_eq!(single, rec.generated);
            assert_eq!(rec.logged, t.steps[rec.round].action);
        }
    }

    #[test]
    fn feedback_rollout_matches_manual_loop() {
        let p = policy(
            4,
            PolicySettings {
                feedback: true,
                ..settings()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trajs: Vec<_> = (0..3).map(|u| random_trajectory(&mut rng, u, 3 + u)).collect();
        let records = p.rollout(&trajs).unwrap();
        for t in &trajs {
            let mut history = Vec::new();
            for (i, s) in t.steps.iter().take(5).enumerate() {
                let g = p.recommend(&history, &s.state).unwrap();
                let rec = records.iter().find(|r| r.user_id == t.user_id && r.round == i).unwrap();
                assert_eq!(rec.generated, g);
                history.push(HistoryStep {
                    prompt: p.settings.prompt(i, &t.rewards()[..i]),
                    state: s.state.clone(),
                    action: g,
                    reward: s.reward,
                });
            }
        }
    }

    #[test]
    fn single_round_and_determinism() {
        let p = policy(5, settings());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trajs: Vec<_> = (0..6).map(|u| random_trajectory(&mut rng, u, 1)).collect();
        let a = p.rollout(&trajs).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, policy(5, settings()).rollout(&trajs).unwrap());
    }

    #[test]
    fn outputs_are_items_within_length() {
        for seed in 0..100 {
            let p = policy(seed, settings());
            let g = p.recommend(&[], &[3, 4, 5]).unwrap();
            assert!(g.len() <= 5);
            assert!(g.iter().all(|&i| i >= NUM_SPECIAL && i < 12));
        }
    }

    #[test]
    fn vocabulary_mismatch_is_refused() {
        let p = policy(1, settings());
        let ckpt = Checkpoint::capture(ModelKind::Sequence, config(12), serde_json::Value::Null, "v".into(), &p.store);
        assert!(RecommendationPolicy::from_checkpoint(&ckpt, "v", settings()).is_ok());
        let err = RecommendationPolicy::from_checkpoint(&ckpt, "w", settings()).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Compatibility);
        assert!(matches!(p.recommend(&[], &[40]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn rollout_file_round_trip() {
        let p = policy(2, settings());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trajs: Vec<_> = (0..2).map(|u| random_trajectory(&mut rng, u, 3)).collect();
        let recs = p.rollout(&trajs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollout.jsonl");
        write_rollout(&path, &recs).unwrap();
        assert_eq!(read_rollout(&path).unwrap(), recs);
    }
}
