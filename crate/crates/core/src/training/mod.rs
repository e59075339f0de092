//! Loss construction and the optimisation loop.

mod checkpoint;
mod losses;

use std::io::Write;
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, EpochRecord, ModelKind, FORMAT_VERSION, MAGIC};
pub use losses::{ce_loss, contrastive_loss, kappa, similarity, total_loss};

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Var};
use crate::datamodel::{ItemVocabulary, Trajectory};
use crate::error::{Error, Result};
use crate::ingest::{make_negatives_with, NegativeRule, NegativeSample};
use crate::model::{ModelConfig, PromptKind, SequenceModel, StepInputs};

const COSINE_EPS: f64 = 1e-8;

/// Trajectory lengths the training setup is tuned for.
pub const STANDARD_LENGTHS: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Replace every reward token with one learned vector.
    pub no_reward: bool,
    pub no_contrastive: bool,
    /// Weight every negative equally.
    pub no_weight: bool,
    pub naive_prompt: bool,
}

impl Ablations {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Self::default();
        a.set(name)?;
        Ok(a)
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no_reward" => self.no_reward = true,
            "no_contrastive" => self.no_contrastive = true,
            "no_weight" => self.no_weight = true,
            "naive_prompt" => self.naive_prompt = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(())
    }

    /// Short label, e.g. `full` or `no_reward+no_weight`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.no_reward, "no_reward"),
            (self.no_contrastive, "no_contrastive"),
            (self.no_weight, "no_weight"),
            (self.naive_prompt, "naive_prompt"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }
}

/// Direction of the contrastive term during optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Minimise `+sum(kappa * similarity)`: push decodings of the logged
    /// action under lower rewards away from the positive.
    #[default]
    Repel,
    /// Minimise `-sum(kappa * similarity)` as written.
    Attract,
}

/// How decoder rows are compared in the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSimilarity {
    /// Raw dot product. Unbounded, so a repelling term can outgrow the
    /// cross-entropy.
    Dot,
    /// Dot product of unit-length rows, in `[-1, 1]`.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_trajectory_len: usize,
    /// Accept a trajectory length outside [`STANDARD_LENGTHS`].
    pub custom_length: bool,
    pub seed: u64,
    pub ablations: Ablations,
    pub n_neg: usize,
    pub contrastive: ContrastiveMode,
    pub similarity: RowSimilarity,
    pub negative_rule: NegativeRule,
    /// Upper bound of a per-step reward.
    pub k: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            optimizer: AdamWConfig::default(),
            epochs: 30,
            batch_size: 16,
            max_trajectory_len: 10,
            custom_length: false,
            seed: 0,
            ablations: Ablations::default(),
            n_neg: 2,
            contrastive: ContrastiveMode::Repel,
            similarity: RowSimilarity::Cosine,
            negative_rule: NegativeRule::Lower,
            k: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.optimizer.learning_rate >= 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.optimizer.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_trajectory_len == 0
            || (!self.custom_length && !STANDARD_LENGTHS.contains(&self.max_trajectory_len))
        {
            return Err(Error::Config(format!(
                "max_trajectory_len {} not in {STANDARD_LENGTHS:?}; set custom_length to override",
                self.max_trajectory_len
            )));
        }
        if self.n_neg == 0 {
            return Err(Error::Config("n_neg must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.ablations.no_reward && self.ablations.naive_prompt {
            return Err(Error::Config("no_reward and naive_prompt are exclusive".into()));
        }
        Ok(())
    }

    /// Whether negatives take part in the loss.
    pub fn uses_contrastive(&self) -> bool {
        self.beta > 0.0 && !self.ablations.no_contrastive && !self.ablations.no_reward
    }

    /// The model configuration after applying prompt ablations.
    pub fn apply_to(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if self.ablations.no_reward {
            m.prompt = PromptKind::NoReward;
        } else if self.ablations.naive_prompt {
            m.prompt = PromptKind::Naive;
        }
        m.max_trajectory_len = m.max_trajectory_len.max(self.max_trajectory_len);
        m
    }
}

/// Loss values of one evaluation, contrastive in the `-sum(kappa * sim)`
/// convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub contrastive: f64,
}

/// Tape nodes of a batch loss.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub ce: Var,
    /// `sum(kappa * similarity)`, averaged over steps.
    pub weighted_similarity: Option<Var>,
}

/// First `t` steps of a trajectory with return-to-go recomputed.
pub fn truncate(traj: &Trajectory, t: usize) -> Result<Trajectory> {
    if traj.len() <= t {
        return Ok(traj.clone());
    }
    Trajectory::from_parts(
        traj.user_id.clone(),
        traj.steps[..t]
            .iter()
            .map(|s| (s.state.clone(), s.action.clone(), s.reward))
            .collect(),
    )
}

/// Consecutive windows of at most `t` steps, each with its own
/// return-to-go. The last window may be shorter.
pub fn windows(traj: &Trajectory, t: usize) -> Result<Vec<Trajectory>> {
    if t == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    traj.steps
        .chunks(t)
        .map(|c| {
            Trajectory::from_parts(
                traj.user_id.clone(),
                c.iter().map(|s| (s.state.clone(), s.action.clone(), s.reward)).collect(),
            )
        })
        .collect()
}

struct Owned {
    rewards: Vec<f64>,
    states: Vec<Vec<usize>>,
    actions: Vec<Vec<usize>>,
}

/// Build the loss for a batch. `negatives[b]` lists the negatives of
/// `batch[b]`; pass empty lists when the contrastive term is off.
pub fn batch_loss(
    g: &mut Graph,
    model: &SequenceModel,
    batch: &[&Trajectory],
    negatives: &[Vec<NegativeSample>],
    config: &TrainConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<BatchLoss> {
    let use_cl = config.uses_contrastive() && negatives.iter().any(|n| !n.is_empty());
    let mut owned = Vec::new();
    for t in batch {
        owned.push(Owned {
            rewards: t.steps.iter().map(|s| s.return_to_go as f64).collect(),
            states: t.steps.iter().map(|s| s.state.clone()).collect(),
            actions: t.steps.iter().map(|s| s.action.clone()).collect(),
        });
    }
    // (positive trajectory index, negative) in input order after the positives
    let mut neg_refs = Vec::new();
    if use_cl {
        if negatives.len() != batch.len() {
            return Err(Error::Shape("one negative list per trajectory expected".into()));
        }
        for (b, (t, negs)) in batch.iter().zip(negatives).enumerate() {
            for n in negs {
                if n.returns_to_go.len() != t.len() {
                    return Err(Error::Shape(format!("negative length mismatch for {}", t.user_id)));
                }
                neg_refs.push((b, n));
                owned.push(Owned {
                    rewards: n.returns_to_go.iter().map(|&r| r as f64).collect(),
                    states: owned[b].states.clone(),
                    actions: owned[b].actions.clone(),
                });
            }
        }
    }
    let state_refs: Vec<Vec<&[usize]>> = owned
        .iter()
        .map(|o| o.states.iter().map(|s| s.as_slice()).collect())
        .collect();
    let action_refs: Vec<Vec<&[usize]>> = owned
        .iter()
        .map(|o| o.actions.iter().map(|s| s.as_slice()).collect())
        .collect();
    let inputs: Vec<StepInputs> = owned
        .iter()
        .zip(state_refs.iter().zip(&action_refs))
        .map(|(o, (s, a))| StepInputs {
            rewards: &o.rewards,
            states: s,
            actions: a,
        })
        .collect();
    let a_tilde = model.action_embeddings(g, &inputs, rng)?;
    let truths: Vec<&[usize]> = action_refs.iter().flatten().copied().collect();
    let decoded = model.decode(g, a_tilde, &truths)?;

    let mut offsets = Vec::with_capacity(owned.len());
    let mut acc = 0;
    for o in &owned {
        offsets.push(acc);
        acc += o.rewards.len();
    }
    let positive_steps: usize = batch.iter().map(|t| t.len()).sum();

    let mut ce_rows = Vec::new();
    let mut ce_targets = Vec::new();
    for p in 0..decoded.positions {
        for i in 0..positive_steps {
            let r = p * decoded.batch + i;
            ce_rows.push(r);
            ce_targets.push(decoded.targets[r]);
        }
    }
    let pos_hidden = g.select_rows(decoded.hidden, &ce_rows);
    let logits = model.decoder.logits(g, pos_hidden);
    let ce = g.cross_entropy(logits, &ce_targets);

    let weighted_similarity = if use_cl {
        let mut rows_pos = Vec::new();
        let mut rows_neg = Vec::new();
        let mut weights = Vec::new();
        for (j, (b, neg)) in neg_refs.iter().enumerate() {
            let w = if config.ablations.no_weight { 1.0 } else { neg.kappa };
            let neg_offset = offsets[batch.len() + j];
            for t in 0..batch[*b].len() {
                let ip = offsets[*b] + t;
                let valid = decoded.valid_rows(ip);
                let scale = w / (valid.len() as f64 * positive_steps as f64);
                for r in valid {
                    let p = r / decoded.batch;
                    rows_pos.push(r);
                    rows_neg.push(p * decoded.batch + neg_offset + t);
                    weights.push(scale);
                }
            }
        }
        let mut vp = g.select_rows(decoded.hidden, &rows_pos);
        let mut vn = g.select_rows(decoded.hidden, &rows_neg);
        if config.similarity == RowSimilarity::Cosine {
            vp = g.normalize_rows(vp, COSINE_EPS);
            vn = g.normalize_rows(vn, COSINE_EPS);
        }
        let dots = g.row_dot(vp, vn);
        let n = weights.len();
        let weighted = g.mul_const(dots, Array2::from_shape_vec((n, 1), weights).expect("column"));
        Some(g.sum(weighted))
    } else {
        None
    };

    let total = match weighted_similarity {
        Some(ws) => {
            let sign = match config.contrastive {
                ContrastiveMode::Repel => 1.0,
                ContrastiveMode::Attract => -1.0,
            };
            let term = g.scale(ws, sign * config.beta);
            g.add(ce, term)
        }
        None => ce,
    };
    Ok(BatchLoss {
        total,
        ce,
        weighted_similarity,
    })
}

/// Observers for a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one JSON line per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Write a checkpoint here every `checkpoint_every` epochs.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

/// A trained policy and its parameters.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: SequenceModel,
    pub store: ParamStore,
    pub checkpoint: Checkpoint,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initialise a model for `vocab` with the seed of `config`.
pub fn init_model(
    model_config: &ModelConfig,
    vocab: &ItemVocabulary,
    config: &TrainConfig,
) -> Result<(SequenceModel, ParamStore)> {
    config.validate()?;
    let mut mc = config.apply_to(model_config);
    mc.vocab_size = vocab.size();
    let mut store = ParamStore::new();
    let model = SequenceModel::new(mc, &mut store, &mut rng_stream(config.seed, 0))?;
    Ok((model, store))
}

/// Loss over a whole set without dropout, negatives drawn from `seed`.
pub fn dataset_loss(
    model: &SequenceModel,
    store: &ParamStore,
    data: &[Trajectory],
    config: &TrainConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    let data: Vec<Trajectory> = data
        .iter()
        .map(|t| truncate(t, config.max_trajectory_len))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = (0.0, 0.0, 0.0);
    let mut weight = 0.0;
    for chunk in data.chunks(config.batch_size) {
        let refs: Vec<&Trajectory> = chunk.iter().collect();
        let negs = draw_negatives(&refs, config, &mut rng)?;
        let mut g = Graph::new(store);
        let loss = batch_loss(&mut g, model, &refs, &negs, config, None)?;
        let w = chunk.len() as f64;
        sums.0 += g.scalar(loss.total) * w;
        sums.1 += g.scalar(loss.ce) * w;
        sums.2 -= loss.weighted_similarity.map_or(0.0, |v| g.scalar(v)) * w;
        weight += w;
    }
    if weight == 0.0 {
        return Err(Error::Degenerate("no trajectories to evaluate".into()));
    }
    Ok(LossBreakdown {
        total: sums.0 / weight,
        ce: sums.1 / weight,
        contrastive: sums.2 / weight,
    })
}

fn draw_negatives(
    batch: &[&Trajectory],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<NegativeSample>>> {
    if !config.uses_contrastive() {
        return Ok(vec![Vec::new(); batch.len()]);
    }
    batch
        .iter()
        .map(|t| make_negatives_with(t, config.n_neg, config.k, config.negative_rule, rng))
        .collect()
}

/// Fit a policy on `data`. Deterministic given `config.seed`.
pub fn train(
    data: &[Trajectory],
    vocab: &ItemVocabulary,
    model_config: &ModelConfig,
    config: &TrainConfig,
    hooks: TrainHooks,
) -> Result<Trained> {
    let (model, store) = init_model(model_config, vocab, config)?;
    train_from(model, store, data, vocab, config, hooks)
}

/// Continue training an initialised model.
pub fn train_from(
    model: SequenceModel,
    mut store: ParamStore,
    data: &[Trajectory],
    vocab: &ItemVocabulary,
    config: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<Trained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let data: Vec<Trajectory> = data
        .iter()
        .map(|t| truncate(t, config.max_trajectory_len))
        .collect::<Result<_>>()?;
    for t in &data {
        t.validate(config.k)?;
    }
    let settings = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut checkpoint = Checkpoint::capture(ModelKind::Sequence, model.config.clone(), settings, vocab.hash(), &store);
    checkpoint.tags.insert("variant".into(), config.ablations.label());
    let mut opt = AdamW::new(config.optimizer, &store);
    let mut order_rng = rng_stream(config.seed, 1);
    let mut neg_rng = rng_stream(config.seed, 2);
    let mut dropout_rng = rng_stream(config.seed, 3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 4];
        let mut batches = 0.0;
        for (batch_id, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Trajectory> = chunk.iter().map(|&i| &data[i]).collect();
            let negs = draw_negatives(&refs, config, &mut neg_rng)?;
            let (values, grads) = {
                let mut g = Graph::new(&store);
                let loss = batch_loss(&mut g, &model, &refs, &negs, config, Some(&mut dropout_rng))?;
                let total = g.scalar(loss.total);
                if !total.is_finite() {
                    let mut norms = store.norms();
                    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
                    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.4e}")).collect();
                    return Err(Error::Numeric(format!(
                        "non-finite loss {total} at epoch {epoch}, batch {batch_id}; largest parameter norms: {}",
                        top.join(", ")
                    )));
                }
                let values = (
                    total,
                    g.scalar(loss.ce),
                    -loss.weighted_similarity.map_or(0.0, |v| g.scalar(v)),
                );
                (values, g.backward(loss.total).dense(&store))
            };
            let norm = opt.step(&mut store, grads);
            sums[0] += values.0;
            sums[1] += values.1;
            sums[2] += values.2;
            sums[3] += norm;
            batches += 1.0;
        }
        let record = EpochRecord {
            epoch,
            loss: sums[0] / batches,
            ce: sums[1] / batches,
            contrastive: sums[2] / batches,
            grad_norm: sums[3] / batches,
        };
        log::debug!("epoch {epoch}: loss {:.5} ce {:.5}", record.loss, record.ce);
        if let Some(w) = hooks.log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Numeric(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        checkpoint.loss_history.push(record);
        checkpoint.epoch = epoch;
        if let Some(dir) = &hooks.checkpoint_dir {
            if hooks.checkpoint_every > 0 && epoch % hooks.checkpoint_every == 0 {
                let mut snap = checkpoint.clone();
                snap.tensors = Checkpoint::capture(ModelKind::Sequence, model.config.clone(), serde_json::Value::Null, String::new(), &store).tensors;
                snap.save(&dir.join(format!("epoch-{epoch:04}.ckpt")))?;
            }
        }
    }
    checkpoint.tensors = store
        .ids()
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect();
    Ok(Trained {
        model,
        store,
        checkpoint,
    })
}
