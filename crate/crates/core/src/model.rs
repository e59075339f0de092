//! Model assembly: a shared backbone (embeddings, encoders, reward prompt,
//! decision block) plus the two heads that sit on top of it.

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::action_decoder::{ActionDecoder, DecodedBatch};
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::decision_block::{DecisionBlock, DecisionBlockConfig, StepEmbeddings, TokenLayout};
use crate::encoders::{EncoderLengths, ItemEmbeddingTable, Readout, SequenceRole, StateActionEncoder};
use crate::error::{Error, Result};
use crate::reward_prompt::{
    NaivePromptParams, PromptNetworkParams, RewardEncoder, DEFAULT_ALPHA, DEFAULT_BUCKETS,
};

/// How reward tokens are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    #[default]
    AutoDiscretized,
    Naive,
    /// Every reward token is the same learned vector.
    NoReward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub buckets: usize,
    pub alpha: f64,
    /// Divide rewards by this before the prompt; 1 leaves them raw.
    pub reward_scale: f64,
    pub prompt: PromptKind,
    pub lengths: EncoderLengths,
    pub max_trajectory_len: usize,
    pub dropout: f64,
    pub readout: Readout,
    pub share_encoders: bool,
    /// Including the special tokens; set from the data vocabulary.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 8,
            layers: 2,
            ffn_dim: 512,
            buckets: DEFAULT_BUCKETS,
            alpha: DEFAULT_ALPHA,
            reward_scale: 1.0,
            prompt: PromptKind::AutoDiscretized,
            lengths: EncoderLengths::default(),
            max_trajectory_len: 50,
            dropout: 0.1,
            readout: Readout::Final,
            share_encoders: false,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        EncoderLengths::new(self.lengths.state_max, self.lengths.action_max)?;
        self.block_config().validate()?;
        if self.vocab_size <= crate::datamodel::NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocabulary of size {} has no real items",
                self.vocab_size
            )));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::Config(format!("reward_scale must be positive, got {}", self.reward_scale)));
        }
        if self.lengths.action_max < 2 {
            return Err(Error::Config("action_max must leave room for an item and eos".into()));
        }
        Ok(())
    }

    fn block_config(&self) -> DecisionBlockConfig {
        DecisionBlockConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_dim,
            max_timesteps: self.max_trajectory_len,
            dropout: self.dropout,
        }
    }
}

/// Model inputs for one trajectory (or prefix).
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    /// One value per step; the return-to-go for the policy, the per-step
    /// reward for the reward model.
    pub rewards: &'a [f64],
    pub states: &'a [&'a [usize]],
    /// As many as `states`, or one fewer for a prediction prefix.
    pub actions: &'a [&'a [usize]],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub embedding: ItemEmbeddingTable,
    pub encoder: StateActionEncoder,
    pub prompt: RewardEncoder,
    pub block: DecisionBlock,
    pub layout: TokenLayout,
}

impl Backbone {
    fn register<R: Rng>(
        store: &mut ParamStore,
        config: &ModelConfig,
        layout: TokenLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = ItemEmbeddingTable::register(store, "item_embedding", config.vocab_size, config.dim, rng);
        let encoder = StateActionEncoder::register(
            store,
            "encoder",
            config.dim,
            config.lengths,
            config.readout,
            config.share_encoders,
            rng,
        );
        let prompt = match config.prompt {
            PromptKind::AutoDiscretized => {
                let mut p = PromptNetworkParams::register(store, "prompt", config.buckets, config.dim, config.alpha, rng)?;
                p.reward_scale = config.reward_scale;
                RewardEncoder::AutoDiscretized(p)
            }
            PromptKind::Naive => {
                let mut p = NaivePromptParams::register(store, "naive_prompt", config.dim, rng);
                p.reward_scale = config.reward_scale;
                RewardEncoder::Naive(p)
            }
            PromptKind::NoReward => {
                RewardEncoder::Constant(store.init("reward_token", 1, config.dim, Init::Embedding(config.dim), rng))
            }
        };
        let block = DecisionBlock::register(store, "block", config.block_config(), rng)?;
        Ok(Self {
            embedding,
            encoder,
            prompt,
            block,
            layout,
        })
    }

    /// Embed and run a batch of trajectories; returns one readout row per
    /// step, trajectory-major.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &[StepInputs],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let lengths = self.encoder.lengths;
        let mut all_rewards = Vec::new();
        let mut all_states: Vec<&[usize]> = Vec::new();
        let mut all_actions: Vec<&[usize]> = Vec::new();
        for t in batch {
            if t.rewards.len() != t.states.len() {
                return Err(Error::Shape(format!(
                    "{} reward values for {} states",
                    t.rewards.len(),
                    t.states.len()
                )));
            }
            if let Some(bad) = t.rewards.iter().find(|r| !r.is_finite()) {
                return Err(Error::Numeric(format!("reward value {bad} is not finite")));
            }
            all_rewards.extend_from_slice(t.rewards);
            for s in t.states {
                // keep the most recent items when the window is narrower
                all_states.push(&s[s.len().saturating_sub(lengths.state_max)..]);
            }
            all_actions.extend_from_slice(t.actions);
        }
        let rewards = self.prompt.embed(g, &all_rewards);
        let states = self
            .encoder
            .encode_batch(g, &self.embedding, &all_states, SequenceRole::State, lengths.state_max)?;
        let actions = if all_actions.is_empty() {
            None
        } else {
            Some(self.encoder.encode_batch(
                g,
                &self.embedding,
                &all_actions,
                SequenceRole::Action,
                lengths.action_max,
            )?)
        };
        let mut steps = Vec::with_capacity(batch.len());
        let (mut so, mut ao) = (0, 0);
        for t in batch {
            let n = t.states.len();
            let na = t.actions.len();
            let rows: Vec<usize> = (so..so + n).collect();
            let a_rows: Vec<usize> = (ao..ao + na).collect();
            let actions = match actions {
                Some(a) => g.select_rows(a, &a_rows),
                None => g.input(Array2::zeros((0, self.block.config.dim))),
            };
            steps.push(StepEmbeddings {
                rewards: g.select_rows(rewards, &rows),
                states: g.select_rows(states, &rows),
                actions,
            });
            so += n;
            ao += na;
        }
        let tok = self.block.interleave(g, &steps, self.layout)?;
        self.block.forward(g, &tok, rng)
    }
}

/// The recommendation policy: backbone plus action decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub decoder: ActionDecoder,
}

impl SequenceModel {
    pub fn new<R: Rng>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::register(store, &config, TokenLayout::RewardStateAction, rng)?;
        let decoder = ActionDecoder::register(
            store,
            "decoder",
            config.dim,
            config.vocab_size,
            config.lengths.action_max,
            rng,
        )?;
        Ok(Self {
            config,
            backbone,
            decoder,
        })
    }

    /// Predicted action embeddings, one row per step.
    pub fn action_embeddings(
        &self,
        g: &mut Graph,
        batch: &[StepInputs],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.backbone.forward(g, batch, rng)
    }

    /// Teacher-forced decode of every step's logged action.
    pub fn decode(&self, g: &mut Graph, a_tilde: Var, truths: &[&[usize]]) -> Result<DecodedBatch> {
        let longest = truths.iter().map(|t| t.len()).max().unwrap_or(0);
        self.decoder
            .teacher_forced(g, &self.backbone.embedding, a_tilde, truths, Some(longest + 1))
    }

    /// Plain-matrix action embeddings for prefixes (no dropout, no tape kept).
    pub fn predict_embeddings(&self, store: &ParamStore, batch: &[StepInputs]) -> Result<Array2<f64>> {
        let mut g = Graph::new(store);
        let out = self.backbone.forward(&mut g, batch, None)?;
        Ok(g.value(out).clone())
    }
}

/// Scalar reward predictor sharing the backbone architecture; tokens are
/// ordered state, action, reward and read out at the action.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl RewardModel {
    pub fn new<R: Rng>(config: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::register(store, &config, TokenLayout::StateActionReward, rng)?;
        let head_weight = store.init("reward_head.weight", config.dim, 1, Init::FanIn(config.dim), rng);
        let head_bias = store.init("reward_head.bias", 1, 1, Init::Zeros, rng);
        store.no_decay(head_bias);
        Ok(Self {
            config,
            backbone,
            head_weight,
            head_bias,
        })
    }

    /// Predicted per-step rewards as an `n x 1` column.
    pub fn predict_var(
        &self,
        g: &mut Graph,
        batch: &[StepInputs],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.backbone.forward(g, batch, rng)?;
        let w = g.param(self.head_weight);
        let b = g.param(self.head_bias);
        let z = g.matmul(h, w);
        Ok(g.add_row(z, b))
    }

    pub fn predict(&self, store: &ParamStore, batch: &[StepInputs]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let out = self.predict_var(&mut g, batch, None)?;
        Ok(g.value(out).iter().copied().collect())
    }
}
