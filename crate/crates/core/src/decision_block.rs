//! Causal self-attention stack over interleaved trajectory tokens.

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Segment, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Reward,
    State,
    Action,
}

impl TokenKind {
    fn index(self) -> usize {
        match self {
            TokenKind::Reward => 0,
            TokenKind::State => 1,
            TokenKind::Action => 2,
        }
    }
}

/// Order of the three tokens inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLayout {
    /// `[r, s, a]`, read out at the state token.
    #[default]
    RewardStateAction,
    /// `[s, a, r]`, read out at the action token.
    StateActionReward,
}

impl TokenLayout {
    pub fn kinds(self) -> [TokenKind; 3] {
        match self {
            TokenLayout::RewardStateAction => [TokenKind::Reward, TokenKind::State, TokenKind::Action],
            TokenLayout::StateActionReward => [TokenKind::State, TokenKind::Action, TokenKind::Reward],
        }
    }

    /// Offset of the readout token within a step: the state token for
    /// `[r, s, a]`, the action token for `[s, a, r]`.
    pub fn readout_offset(self) -> usize {
        1
    }
}

/// A batch of trajectories packed row-wise; each trajectory is one
/// attention segment.
#[derive(Debug, Clone)]
pub struct TokenizedTrajectory {
    /// `tokens x d`, including position and kind embeddings.
    pub tokens: Var,
    pub timesteps: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    pub segments: Vec<Segment>,
    /// Token row of every step's readout position, trajectory-major.
    pub readout_rows: Vec<usize>,
}

impl TokenizedTrajectory {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// `mask[i][j]` is true when token `i` may attend to token `j`.
    pub fn attention_mask(&self) -> Array2<bool> {
        let n = self.len();
        let mut mask = Array2::from_elem((n, n), false);
        for seg in &self.segments {
            for i in 0..seg.len {
                for j in 0..=i {
                    mask[[seg.start + i, seg.start + j]] = true;
                }
            }
        }
        mask
    }
}

/// Hyper-parameters of the attention stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_timesteps: usize,
    pub dropout: f64,
}

impl DecisionBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide the width ({})",
                self.heads, self.dim
            )));
        }
        if self.max_timesteps == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("max_timesteps and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionBlock {
    pub config: DecisionBlockConfig,
    /// `max_timesteps x d`.
    pub position: ParamId,
    /// `3 x d`, one row per token kind.
    pub kind: ParamId,
    pub layers: Vec<LayerParams>,
}

/// Per-step embeddings for one trajectory, all `T x d` except actions,
/// which may have `T - 1` rows for an inference prefix.
#[derive(Debug, Clone, Copy)]
pub struct StepEmbeddings {
    pub rewards: Var,
    pub states: Var,
    pub actions: Var,
}

impl DecisionBlock {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: DecisionBlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let position = store.init(
            format!("{prefix}.position"),
            config.max_timesteps,
            d,
            Init::Uniform(0.02),
            rng,
        );
        let kind = store.init(format!("{prefix}.kind"), 3, d, Init::Uniform(0.02), rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let mut bias = |store: &mut ParamStore, name: &str, cols: usize, init: Init| {
                    let id = store.init(format!("{p}.{name}"), 1, cols, init, &mut *rng);
                    store.no_decay(id);
                    id
                };
                let ln1_gamma = bias(store, "ln1_gamma", d, Init::Ones);
                let ln1_beta = bias(store, "ln1_beta", d, Init::Zeros);
                let bo = bias(store, "bo", d, Init::Zeros);
                let ln2_gamma = bias(store, "ln2_gamma", d, Init::Ones);
                let ln2_beta = bias(store, "ln2_beta", d, Init::Zeros);
                let b1 = bias(store, "b1", config.ffn_dim, Init::Zeros);
                let b2 = bias(store, "b2", d, Init::Zeros);
                let fan = Init::FanIn(d);
                LayerParams {
                    ln1_gamma,
                    ln1_beta,
                    wq: store.init(format!("{p}.wq"), d, d, fan, rng),
                    wk: store.init(format!("{p}.wk"), d, d, fan, rng),
                    wv: store.init(format!("{p}.wv"), d, d, fan, rng),
                    wo: store.init(format!("{p}.wo"), d, d, fan, rng),
                    bo,
                    ln2_gamma,
                    ln2_beta,
                    w1: store.init(format!("{p}.w1"), d, config.ffn_dim, fan, rng),
                    b1,
                    w2: store.init(
                        format!("{p}.w2"),
                        config.ffn_dim,
                        d,
                        Init::FanIn(config.ffn_dim),
                        rng,
                    ),
                    b2,
                }
            })
            .collect();
        Ok(Self {
            config,
            position,
            kind,
            layers,
        })
    }

    /// Interleave per-step embeddings into one packed token matrix and add
    /// position and kind embeddings.
    pub fn interleave(
        &self,
        g: &mut Graph,
        trajectories: &[StepEmbeddings],
        layout: TokenLayout,
    ) -> Result<TokenizedTrajectory> {
        let kinds3 = layout.kinds();
        let mut parts = Vec::new();
        let mut base = 0;
        let mut order = Vec::new();
        let mut timesteps = Vec::new();
        let mut kinds = Vec::new();
        let mut segments = Vec::new();
        let mut readout_rows = Vec::new();
        for traj in trajectories {
            let t = g.shape(traj.rewards).0;
            let ts = g.shape(traj.states).0;
            let ta = g.shape(traj.actions).0;
            if t == 0 || ts != t || !(ta == t || ta + 1 == t) {
                return Err(Error::Shape(format!(
                    "step embeddings disagree: {t} rewards, {ts} states, {ta} actions"
                )));
            }
            if ta < t && kinds3[2] != TokenKind::Action {
                return Err(Error::Shape("a prefix must end with the action slot".into()));
            }
            if t > self.config.max_timesteps {
                return Err(Error::Shape(format!(
                    "trajectory of {t} steps exceeds the {} position embeddings",
                    self.config.max_timesteps
                )));
            }
            let width = g.shape(traj.rewards).1;
            if width != self.config.dim || g.shape(traj.states).1 != width || g.shape(traj.actions).1 != width {
                return Err(Error::Shape(format!("token width must be {}", self.config.dim)));
            }
            let block_of = |k: TokenKind| match k {
                TokenKind::Reward => (traj.rewards, 0),
                TokenKind::State => (traj.states, 1),
                TokenKind::Action => (traj.actions, 2),
            };
            // Row offset of each of the three source blocks in the stacked input.
            let mut start = [0usize; 3];
            for k in [TokenKind::Reward, TokenKind::State, TokenKind::Action] {
                let (var, slot) = block_of(k);
                start[slot] = base;
                base += g.shape(var).0;
                parts.push(var);
            }
            let seg_start = order.len();
            for step in 0..t {
                for (pos, &k) in kinds3.iter().enumerate() {
                    if k == TokenKind::Action && step >= ta {
                        continue;
                    }
                    if pos == layout.readout_offset() {
                        readout_rows.push(order.len());
                    }
                    order.push(start[k.index()] + step);
                    timesteps.push(step);
                    kinds.push(k);
                }
            }
            segments.push(Segment {
                start: seg_start,
                len: order.len() - seg_start,
            });
        }
        if order.is_empty() {
            return Err(Error::Shape("no trajectories to interleave".into()));
        }
        let stacked = g.concat_rows(&parts);
        let raw = g.select_rows(stacked, &order);
        let pos_table = g.param(self.position);
        let pos = g.gather(pos_table, &timesteps, None);
        let kind_table = g.param(self.kind);
        let kind_idx: Vec<usize> = kinds.iter().map(|k| k.index()).collect();
        let kind = g.gather(kind_table, &kind_idx, None);
        let with_pos = g.add(raw, pos);
        let tokens = g.add(with_pos, kind);
        Ok(TokenizedTrajectory {
            tokens,
            timesteps,
            kinds,
            segments,
            readout_rows,
        })
    }

    fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Var {
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = g.shape(x);
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_simple_fn(shape, || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Run the stack over all tokens; dropout is active only when an RNG is
    /// supplied.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        tok: &TokenizedTrajectory,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.forward_with_attention(g, tok, rng).map(|(x, _)| x)
    }

    /// Like [`Self::forward_tokens`], also returning each layer's attention
    /// node so its probabilities can be inspected.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        tok: &TokenizedTrajectory,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut attention = Vec::with_capacity(self.layers.len());
        let p = self.config.dropout;
        let mut x = tok.tokens;
        if !g.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite input tokens".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (g1, b1) = (g.param(layer.ln1_gamma), g.param(layer.ln1_beta));
            let h = g.layer_norm(x, g1, b1, LN_EPS);
            let (wq, wk, wv) = (g.param(layer.wq), g.param(layer.wk), g.param(layer.wv));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let att = g.causal_attention(q, k, v, &tok.segments, self.config.heads);
            attention.push(att);
            let wo = g.param(layer.wo);
            let bo = g.param(layer.bo);
            let proj = g.matmul(att, wo);
            let proj = g.add_row(proj, bo);
            let proj = Self::dropout(g, proj, p, &mut rng);
            x = g.add(x, proj);

            let (g2, b2n) = (g.param(layer.ln2_gamma), g.param(layer.ln2_beta));
            let h = g.layer_norm(x, g2, b2n, LN_EPS);
            let (w1, b1) = (g.param(layer.w1), g.param(layer.b1));
            let inner = g.matmul(h, w1);
            let inner = g.add_row(inner, b1);
            let inner = g.gelu(inner);
            let (w2, b2) = (g.param(layer.w2), g.param(layer.b2));
            let out = g.matmul(inner, w2);
            let out = g.add_row(out, b2);
            let out = Self::dropout(g, out, p, &mut rng);
            x = g.add(x, out);
            if !g.value(x).iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activations in layer {l}")));
            }
        }
        Ok((x, attention))
    }

    /// Predicted action embeddings, one row per step, trajectory-major.
    pub fn forward(
        &self,
        g: &mut Graph,
        tok: &TokenizedTrajectory,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let out = self.forward_tokens(g, tok, rng)?;
        Ok(g.select_rows(out, &tok.readout_rows))
    }
}
