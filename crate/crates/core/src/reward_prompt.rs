//! Reward prompt: maps a scalar return-to-go onto a dense embedding.
//!
//! The auto-discretised prompt scores `B` learnable meta-embeddings with
//!
//! ```text
//! s = LeakyReLU(w * r)            (1 x B)
//! z = softmax(W s + alpha * s)    (B)
//! e = sum_b z_b M_b               (d)
//! ```
//!
//! so nearby rewards receive nearby weightings and hence nearby embeddings.
//! The naive prompt is a single affine map `r -> r * u + c`, used by the
//! ablation that removes auto-discretisation.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const DEFAULT_BUCKETS: usize = 10;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

fn check_finite(r_hat: f64) -> Result<()> {
    if r_hat.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("reward value {r_hat} is not finite")))
    }
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// Parameters of the auto-discretised prompt. The matrices live in a
/// [`ParamStore`]; this struct holds their handles.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptNetworkParams {
    /// `1 x B` reward projection.
    pub w: ParamId,
    /// `B x B` bucket mixing matrix.
    pub mix: ParamId,
    /// `B x d`, one meta-embedding per row.
    pub meta: ParamId,
    pub alpha: f64,
    pub buckets: usize,
    pub dim: usize,
    pub slope: f64,
    /// Rewards are divided by this before entering the network.
    pub reward_scale: f64,
}

impl PromptNetworkParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        buckets: usize,
        dim: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::Config("prompt needs B >= 1 and d >= 1".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        let w = store.init(format!("{prefix}.w"), 1, buckets, Init::FanIn(1), rng);
        let mix = store.init(format!("{prefix}.mix"), buckets, buckets, Init::FanIn(buckets), rng);
        let meta = store.init(format!("{prefix}.meta"), buckets, dim, Init::Embedding(dim), rng);
        Ok(Self {
            w,
            mix,
            meta,
            alpha,
            buckets,
            dim,
            slope: LEAKY_SLOPE,
            reward_scale: 1.0,
        })
    }

    /// Bucket weights for a column of rewards (`n x 1` -> `n x B`).
    pub fn weights_var(&self, g: &mut Graph, rewards: Var) -> Var {
        let rewards = if self.reward_scale != 1.0 {
            g.scale(rewards, 1.0 / self.reward_scale)
        } else {
            rewards
        };
        let w = g.param(self.w);
        let pre = g.matmul(rewards, w);
        let s = g.leaky_relu(pre, self.slope);
        let mix = g.param(self.mix);
        let mixed = g.matmul_t(s, mix);
        let skip = g.scale(s, self.alpha);
        let logits = g.add(mixed, skip);
        g.softmax_rows(logits)
    }

    /// Reward embeddings for a column of rewards (`n x 1` -> `n x d`).
    pub fn embed_var(&self, g: &mut Graph, rewards: Var) -> Var {
        let z = self.weights_var(g, rewards);
        let meta = g.param(self.meta);
        g.matmul(z, meta)
    }

    /// Probability vector `z` over the `B` meta-embeddings.
    pub fn reward_weights(&self, store: &ParamStore, r_hat: f64) -> Result<Vec<f64>> {
        check_finite(r_hat)?;
        let mut g = Graph::new(store);
        let r = g.input(column(&[r_hat]));
        let z = self.weights_var(&mut g, r);
        Ok(g.value(z).iter().copied().collect())
    }

    /// `sum_b z_b M_b`.
    pub fn embed_reward(&self, store: &ParamStore, r_hat: f64) -> Result<Vec<f64>> {
        check_finite(r_hat)?;
        let mut g = Graph::new(store);
        let r = g.input(column(&[r_hat]));
        let e = self.embed_var(&mut g, r);
        Ok(g.value(e).iter().copied().collect())
    }
}

/// Single affine map from reward to embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct NaivePromptParams {
    /// `1 x d`.
    pub weight: ParamId,
    /// `1 x d`.
    pub bias: ParamId,
    pub reward_scale: f64,
}

impl NaivePromptParams {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let weight = store.init(format!("{prefix}.weight"), 1, dim, Init::FanIn(1), rng);
        let bias = store.init(format!("{prefix}.bias"), 1, dim, Init::Zeros, rng);
        store.no_decay(bias);
        Self {
            weight,
            bias,
            reward_scale: 1.0,
        }
    }

    pub fn embed_var(&self, g: &mut Graph, rewards: Var) -> Var {
        let rewards = if self.reward_scale != 1.0 {
            g.scale(rewards, 1.0 / self.reward_scale)
        } else {
            rewards
        };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let lin = g.matmul(rewards, w);
        g.add_row(lin, b)
    }

    pub fn naive_prompt(&self, store: &ParamStore, r_hat: f64) -> Result<Vec<f64>> {
        check_finite(r_hat)?;
        let mut g = Graph::new(store);
        let r = g.input(column(&[r_hat]));
        let e = self.embed_var(&mut g, r);
        Ok(g.value(e).iter().copied().collect())
    }
}

/// How reward tokens are embedded.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardEncoder {
    AutoDiscretized(PromptNetworkParams),
    Naive(NaivePromptParams),
    /// Reward ignored; every reward token is one learned vector.
    Constant(ParamId),
}

impl RewardEncoder {
    /// Embed a slice of reward values, one row each.
    pub fn embed(&self, g: &mut Graph, values: &[f64]) -> Var {
        match self {
            RewardEncoder::AutoDiscretized(p) => {
                let r = g.input(column(values));
                p.embed_var(g, r)
            }
            RewardEncoder::Naive(p) => {
                let r = g.input(column(values));
                p.embed_var(g, r)
            }
            RewardEncoder::Constant(id) => {
                let row = g.param(*id);
                g.broadcast_rows(row, values.len())
            }
        }
    }
}
