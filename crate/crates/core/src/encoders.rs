//! Item embedding table and the GRU encoders that turn variable-length item
//! sequences into fixed-size vectors.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Var};
use crate::datamodel::{PAD, STATE_WINDOW};
use crate::error::{Error, Result};

/// Default maximum action length.
pub const ACTION_MAX_LEN: usize = 20;

/// Maximum sequence lengths for the two encoder roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLengths {
    pub state_max: usize,
    pub action_max: usize,
}

impl Default for EncoderLengths {
    fn default() -> Self {
        default_lengths()
    }
}

impl EncoderLengths {
    pub fn new(state_max: usize, action_max: usize) -> Result<Self> {
        if state_max == 0 || action_max == 0 {
            return Err(Error::Config(format!(
                "sequence lengths must be positive, got ({state_max}, {action_max})"
            )));
        }
        Ok(Self {
            state_max,
            action_max,
        })
    }

    pub fn for_role(&self, role: SequenceRole) -> usize {
        match role {
            SequenceRole::State => self.state_max,
            SequenceRole::Action => self.action_max,
        }
    }
}

/// `(state_max = 30, action_max = 20)`.
pub fn default_lengths() -> EncoderLengths {
    EncoderLengths {
        state_max: STATE_WINDOW,
        action_max: ACTION_MAX_LEN,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceRole {
    State,
    Action,
}

/// Which hidden state represents the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Hidden state after all `N` (zero-padded) steps.
    #[default]
    Final,
    /// Hidden state after the last real item.
    LastValid,
}

/// Embedding table with the padding row pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl ItemEmbeddingTable {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.init(
            format!("{prefix}.table"),
            vocab_size,
            dim,
            Init::Embedding(dim),
            rng,
        );
        store.pin_zero_row(table, PAD);
        Self {
            table,
            vocab_size,
            dim,
        }
    }

    /// Embeddings for `indices`; the padding row gets no gradient.
    pub fn lookup(&self, g: &mut Graph, indices: &[usize]) -> Var {
        let table = g.param(self.table);
        g.gather(table, indices, Some(PAD))
    }

    pub fn check(&self, items: &[usize]) -> Result<()> {
        match items.iter().find(|&&i| i >= self.vocab_size) {
            Some(bad) => Err(Error::Vocabulary(format!(
                "item index {bad} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }
}

/// One GRU layer; gate blocks ordered reset, update, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::FanIn(hidden);
        let wx = store.init(format!("{prefix}.wx"), input_dim, 3 * hidden, init, rng);
        let wh = store.init(format!("{prefix}.wh"), hidden, 3 * hidden, init, rng);
        let bx = store.init(format!("{prefix}.bx"), 1, 3 * hidden, init, rng);
        let bh = store.init(format!("{prefix}.bh"), 1, 3 * hidden, init, rng);
        store.no_decay(bx);
        store.no_decay(bh);
        Self {
            wx,
            wh,
            bx,
            bh,
            input_dim,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let (wx, wh, bx, bh) = (
            g.param(self.wx),
            g.param(self.wh),
            g.param(self.bx),
            g.param(self.bh),
        );
        g.gru_cell(x, h, wx, wh, bx, bh)
    }
}

/// State and action GRU encoders over a shared item embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionEncoder {
    pub state_gru: GruParams,
    /// `None` when the action role reuses the state GRU.
    pub action_gru: Option<GruParams>,
    pub lengths: EncoderLengths,
    pub readout: Readout,
}

impl StateActionEncoder {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        lengths: EncoderLengths,
        readout: Readout,
        share: bool,
        rng: &mut R,
    ) -> Self {
        let state_gru = GruParams::register(store, &format!("{prefix}.state_gru"), dim, dim, rng);
        let action_gru = (!share)
            .then(|| GruParams::register(store, &format!("{prefix}.action_gru"), dim, dim, rng));
        Self {
            state_gru,
            action_gru,
            lengths,
            readout,
        }
    }

    fn gru(&self, role: SequenceRole) -> &GruParams {
        match role {
            SequenceRole::State => &self.state_gru,
            SequenceRole::Action => self.action_gru.as_ref().unwrap_or(&self.state_gru),
        }
    }

    /// Encode a batch of sequences into an `n x d` matrix. Every sequence is
    /// right-padded with zero vectors to `max_len` and run from a zero state.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        embedding: &ItemEmbeddingTable,
        seqs: &[&[usize]],
        role: SequenceRole,
        max_len: usize,
    ) -> Result<Var> {
        for s in seqs {
            if s.len() > max_len {
                return Err(Error::Shape(format!(
                    "{role:?} sequence of length {} exceeds maximum {max_len}",
                    s.len()
                )));
            }
            embedding.check(s)?;
        }
        let gru = self.gru(role);
        let n = seqs.len();
        let mut h = g.input(Array2::zeros((n, gru.hidden)));
        let mut history = vec![h];
        for pos in 0..max_len {
            let column: Vec<usize> = seqs.iter().map(|s| s.get(pos).copied().unwrap_or(PAD)).collect();
            let x = embedding.lookup(g, &column);
            h = gru.step(g, x, h);
            if self.readout == Readout::LastValid {
                history.push(h);
            }
        }
        match self.readout {
            Readout::Final => Ok(h),
            Readout::LastValid => {
                let stacked = g.concat_rows(&history);
                let rows: Vec<usize> = seqs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.len() * n + i)
                    .collect();
                Ok(g.select_rows(stacked, &rows))
            }
        }
    }

    /// Encode one sequence and return `H_N` as a plain vector.
    pub fn encode_sequence(
        &self,
        store: &ParamStore,
        embedding: &ItemEmbeddingTable,
        items: &[usize],
        role: SequenceRole,
        max_len: usize,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let out = self.encode_batch(&mut g, embedding, &[items], role, max_len)?;
        Ok(g.value(out).iter().copied().collect())
    }
}
