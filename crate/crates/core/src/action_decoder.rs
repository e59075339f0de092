//! GRU decoder that expands a predicted action embedding into items.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Init, ParamId, ParamStore, Var};
use crate::datamodel::{BOS, EOS, PAD};
use crate::encoders::{GruParams, ItemEmbeddingTable, ACTION_MAX_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDecoder {
    /// Input `[prev item ⊕ action embedding]` of width `2d`, hidden `d`.
    pub gru: GruParams,
    /// `1 x d` learned initial hidden state.
    pub initial: ParamId,
    /// `d x |vocab|`.
    pub head_weight: ParamId,
    /// `1 x |vocab|`.
    pub head_bias: ParamId,
    pub max_len: usize,
    pub vocab_size: usize,
}

/// Teacher-forced decoder output for a batch, position-major: row
/// `p * batch + i` is position `p` of sample `i`.
#[derive(Debug, Clone)]
pub struct DecodedBatch {
    pub hidden: Var,
    pub targets: Vec<Option<usize>>,
    pub positions: usize,
    pub batch: usize,
}

impl DecodedBatch {
    /// Rows of sample `i` that carry a target, in position order.
    pub fn valid_rows(&self, i: usize) -> Vec<usize> {
        (0..self.positions)
            .map(|p| p * self.batch + i)
            .filter(|&r| self.targets[r].is_some())
            .collect()
    }
}

/// Decoder targets: the items, then eos, then padding up to `n`.
pub fn decoder_targets(truth: &[usize], n: usize) -> Result<Vec<Option<usize>>> {
    if truth.len() + 1 > n {
        return Err(Error::Shape(format!(
            "action of {} items leaves no room for eos within {n} positions",
            truth.len()
        )));
    }
    let mut out: Vec<Option<usize>> = truth.iter().map(|&i| Some(i)).collect();
    out.push(Some(EOS));
    out.resize(n, None);
    Ok(out)
}

/// Input token fed at each position: bos, then the items, then eos and pad.
fn decoder_inputs(truth: &[usize], n: usize) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(truth.iter().copied())
        .chain(std::iter::once(EOS))
        .chain(std::iter::repeat(PAD))
        .take(n)
        .collect()
}

impl ActionDecoder {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        vocab_size: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config(format!(
                "decoder length must allow an item and eos, got {max_len}"
            )));
        }
        let gru = GruParams::register(store, &format!("{prefix}.gru"), 2 * dim, dim, rng);
        let initial = store.init(format!("{prefix}.initial"), 1, dim, Init::Uniform(0.1), rng);
        let head_weight = store.init(format!("{prefix}.head_weight"), dim, vocab_size, Init::FanIn(dim), rng);
        let head_bias = store.init(format!("{prefix}.head_bias"), 1, vocab_size, Init::Zeros, rng);
        store.no_decay(initial);
        store.no_decay(head_bias);
        Ok(Self {
            gru,
            initial,
            head_weight,
            head_bias,
            max_len,
            vocab_size,
        })
    }

    /// Teacher-forced decode of a batch. `a_tilde` is `batch x d`. Only
    /// `positions` steps are unrolled; pass `None` to unroll the full
    /// length, or the longest target plus one to skip all-pad tails.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        embedding: &ItemEmbeddingTable,
        a_tilde: Var,
        truths: &[&[usize]],
        positions: Option<usize>,
    ) -> Result<DecodedBatch> {
        let n = self.max_len;
        let batch = truths.len();
        if g.shape(a_tilde).0 != batch {
            return Err(Error::Shape(format!(
                "{} action embeddings for {batch} targets",
                g.shape(a_tilde).0
            )));
        }
        let mut targets_by_sample = Vec::with_capacity(batch);
        let mut inputs_by_sample = Vec::with_capacity(batch);
        for t in truths {
            embedding.check(t)?;
            targets_by_sample.push(decoder_targets(t, n)?);
            inputs_by_sample.push(decoder_inputs(t, n));
        }
        let positions = positions.unwrap_or(n).min(n);
        let init = g.param(self.initial);
        let mut h = g.broadcast_rows(init, batch);
        let mut hidden = Vec::with_capacity(positions);
        let mut targets = Vec::with_capacity(positions * batch);
        for p in 0..positions {
            let column: Vec<usize> = inputs_by_sample.iter().map(|s| s[p]).collect();
            let prev = embedding.lookup(g, &column);
            let x = g.concat_cols(&[prev, a_tilde]);
            h = self.gru.step(g, x, h);
            hidden.push(h);
            targets.extend(targets_by_sample.iter().map(|t| t[p]));
        }
        let hidden = g.concat_rows(&hidden);
        Ok(DecodedBatch {
            hidden,
            targets,
            positions,
            batch,
        })
    }

    /// `N x d` predicted item embeddings for one action.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        embedding: &ItemEmbeddingTable,
        a_tilde: Var,
        truth: &[usize],
    ) -> Result<Var> {
        if !g.value(a_tilde).iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite action embedding".into()));
        }
        Ok(self.teacher_forced(g, embedding, a_tilde, &[truth], None)?.hidden)
    }

    /// Unnormalised vocabulary scores.
    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Var {
        let w = g.param(self.head_weight);
        let b = g.param(self.head_bias);
        let z = g.matmul(hidden, w);
        g.add_row(z, b)
    }

    /// Row-wise softmax over the vocabulary.
    pub fn project_vocab(&self, g: &mut Graph, hidden: Var) -> Var {
        let z = self.logits(g, hidden);
        g.softmax_rows(z)
    }

    /// Greedy decode for a batch of action embeddings (`batch x d`). Pad
    /// and bos are never emitted; with `allow_eos` false every sequence
    /// runs the full length.
    pub fn decode_autoregressive(
        &self,
        store: &ParamStore,
        embedding: &ItemEmbeddingTable,
        a_tilde: &Array2<f64>,
        allow_eos: bool,
    ) -> Vec<Vec<usize>> {
        let options = DecodeOptions {
            max_len: self.max_len,
            allow_eos,
            distinct: false,
        };
        self.decode_greedy(store, embedding, a_tilde, &options)
    }

    pub fn decode_greedy(
        &self,
        store: &ParamStore,
        embedding: &ItemEmbeddingTable,
        a_tilde: &Array2<f64>,
        options: &DecodeOptions,
    ) -> Vec<Vec<usize>> {
        let batch = a_tilde.nrows();
        let mut out = vec![Vec::new(); batch];
        let mut live = vec![true; batch];
        let mut prev = vec![BOS; batch];
        let mut g = Graph::new(store);
        let a = g.input(a_tilde.clone());
        let init = g.param(self.initial);
        let mut h = g.broadcast_rows(init, batch);
        for _ in 0..options.max_len.min(self.max_len) {
            if !live.iter().any(|&l| l) {
                break;
            }
            let e = embedding.lookup(&mut g, &prev);
            let x = g.concat_cols(&[e, a]);
            h = self.gru.step(&mut g, x, h);
            let z = self.logits(&mut g, h);
            let scores = g.value(z);
            for i in 0..batch {
                if !live[i] {
                    continue;
                }
                let mut row = scores.row(i).to_vec();
                if options.distinct {
                    for &item in &out[i] {
                        row[item] = f64::NEG_INFINITY;
                    }
                }
                let pick = greedy_pick(row.into_iter(), options.allow_eos);
                if pick == EOS || (options.distinct && out[i].contains(&pick)) {
                    live[i] = false;
                } else {
                    out[i].push(pick);
                    prev[i] = pick;
                }
            }
        }
        out
    }

    /// Probability rows over the vocabulary for plain matrices.
    pub fn probabilities(&self, store: &ParamStore, hidden: &Array2<f64>) -> Array2<f64> {
        let z = hidden.dot(store.get(self.head_weight)) + store.get(self.head_bias);
        softmax_rows(z.view())
    }

    /// Vocabulary scores at the first decoding position, one row per
    /// action; used for ranking metrics.
    pub fn first_step_scores(
        &self,
        store: &ParamStore,
        embedding: &ItemEmbeddingTable,
        a_tilde: &Array2<f64>,
    ) -> Array2<f64> {
        let batch = a_tilde.nrows();
        let mut g = Graph::new(store);
        let a = g.input(a_tilde.clone());
        let init = g.param(self.initial);
        let h0 = g.broadcast_rows(init, batch);
        let e = embedding.lookup(&mut g, &vec![BOS; batch]);
        let x = g.concat_cols(&[e, a]);
        let h = self.gru.step(&mut g, x, h0);
        let z = self.logits(&mut g, h);
        let mut scores = g.value(z).clone();
        for mut row in scores.axis_iter_mut(Axis(0)) {
            row[PAD] = f64::NEG_INFINITY;
            row[BOS] = f64::NEG_INFINITY;
            row[EOS] = f64::NEG_INFINITY;
        }
        scores
    }
}

/// Greedy decoding settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    /// Longest list emitted; capped by the decoder's own length.
    pub max_len: usize,
    pub allow_eos: bool,
    /// Never emit an item twice in one list.
    pub distinct: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: ACTION_MAX_LEN,
            allow_eos: true,
            distinct: true,
        }
    }
}

/// Argmax with lowest-index tie-break, skipping special tokens.
fn greedy_pick(scores: impl Iterator<Item = f64>, allow_eos: bool) -> usize {
    let mut best = (EOS, f64::NEG_INFINITY);
    let mut found = false;
    for (i, s) in scores.enumerate() {
        if i == PAD || i == BOS || (i == EOS && !allow_eos) {
            continue;
        }
        let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
        if !found || s > best.1 {
            best = (i, s);
            found = true;
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_relative_error;
    use crate::datamodel::NUM_SPECIAL;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        emb: ItemEmbeddingTable,
        dec: ActionDecoder,
    }

    fn fixture(dim: usize, vocab: usize, n: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = ItemEmbeddingTable::register(&mut store, "emb", vocab, dim, &mut rng);
        let dec = ActionDecoder::register(&mut store, "dec", dim, vocab, n, &mut rng).unwrap();
        Fixture { store, emb, dec }
    }

    fn decode(f: &Fixture, a: &[f64], truth: &[usize]) -> Array2<f64> {
        let mut g = Graph::new(&f.store);
        let av = g.input(Array2::from_shape_vec((1, a.len()), a.to_vec()).unwrap());
        let v = f.dec.decode_teacher_forced(&mut g, &f.emb, av, truth).unwrap();
        g.value(v).clone()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Hand-stepped recurrence with explicit loops.
    fn reference(f: &Fixture, a: &[f64], truth: &[usize]) -> Vec<Vec<f64>> {
        let st = &f.store;
        let d = a.len();
        let (wx, wh, bx, bh) = (
            st.get(f.dec.gru.wx),
            st.get(f.dec.gru.wh),
            st.get(f.dec.gru.bx),
            st.get(f.dec.gru.bh),
        );
        let table = st.get(f.emb.table);
        let mut h = st.get(f.dec.initial).row(0).to_vec();
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(truth);
        inputs.push(EOS);
        let mut out = Vec::new();
        for p in 0..f.dec.max_len {
            let tok = inputs.get(p).copied().unwrap_or(PAD);
            let mut x: Vec<f64> = table.row(tok).to_vec();
            if tok == PAD {
                x = vec![0.0; d];
            }
            x.extend_from_slice(a);
            let gate = |w: &Array2<f64>, b: &Array2<f64>, v: &[f64], c: usize| {
                b[[0, c]] + (0..v.len()).map(|i| v[i] * w[[i, c]]).sum::<f64>()
            };
            let next: Vec<f64> = (0..d)
                .map(|j| {
                    let r = sigmoid(gate(wx, bx, &x, j) + gate(wh, bh, &h, j));
                    let z = sigmoid(gate(wx, bx, &x, d + j) + gate(wh, bh, &h, d + j));
                    let n = (gate(wx, bx, &x, 2 * d + j) + r * gate(wh, bh, &h, 2 * d + j)).tanh();
                    (1.0 - z) * n + z * h[j]
                })
                .collect();
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn targets_are_eos_terminated_and_padded() {
        assert_eq!(decoder_targets(&[5, 6], 4).unwrap(), vec![Some(5), Some(6), Some(EOS), None]);
        assert_eq!(decoder_targets(&[], 2).unwrap(), vec![Some(EOS), None]);
        assert!(matches!(decoder_targets(&[5, 6], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_hand_stepped_recurrence() {
        let f = fixture(4, 8, 3, 1);
        let a = [0.3, -0.2, 0.5, 0.1];
        let v = decode(&f, &a, &[4]);
        let expected = reference(&f, &a, &[4]);
        assert_eq!(v.dim(), (3, 4));
        for (p, row) in expected.iter().enumerate() {
            for j in 0..4 {
                assert!((v[[p, j]] - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_prediction_needs_no_history() {
        let f = fixture(4, 8, 3, 2);
        let a = [0.1, 0.2, 0.3, 0.4];
        let v1 = decode(&f, &a, &[]);
        let v2 = decode(&f, &a, &[6, 7]);
        assert_eq!(v1.row(0), v2.row(0));
    }

    #[test]
    fn later_truth_does_not_affect_earlier_positions() {
        let f = fixture(4, 10, 5, 3);
        let a = [0.1, -0.2, 0.3, 0.0];
        let base = decode(&f, &a, &[4, 5, 6]);
        let edited = decode(&f, &a, &[4, 5, 9]);
        // truth index 2 is fed at position 3
        for p in 0..3 {
            assert_eq!(base.row(p), edited.row(p));
        }
        assert_ne!(base.row(3), edited.row(3));
        let mut g = Graph::new(&f.store);
        let av = g.input(Array2::zeros((1, 4)));
        assert!(matches!(
            f.dec.teacher_forced(&mut g, &f.emb, av, &[&[4, 5, 6, 7, 8]], None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn projection_rows_are_distributions() {
        let mut f = fixture(4, 7, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0));
        let p = f.dec.probabilities(&f.store, &h);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let shifted_bias = f.store.get(f.dec.head_bias) + 3.5;
        let before = p.clone();
        f.store.set(f.dec.head_bias, shifted_bias);
        let after = f.dec.probabilities(&f.store, &h);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        f.store.set(f.dec.head_weight, Array2::zeros((4, 7)));
        f.store.set(f.dec.head_bias, Array2::zeros((1, 7)));
        let uniform = f.dec.probabilities(&f.store, &h);
        assert!(uniform.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn rigged_heads() {
        let mut f = fixture(4, 8, 4, 5);
        let mut bias = Array2::zeros((1, 8));
        bias[[0, EOS]] = 100.0;
        f.store.set(f.dec.head_weight, Array2::zeros((4, 8)));
        f.store.set(f.dec.head_bias, bias);
        let a = Array2::from_elem((1, 4), 0.2);
        assert_eq!(f.dec.decode_autoregressive(&f.store, &f.emb, &a, true), vec![Vec::<usize>::new()]);

        // Emit item 5 first, then eos: the embedding of 5 flips the head.
        let mut table = f.store.get(f.emb.table).clone();
        table.fill(0.0);
        table[[BOS, 0]] = 1.0;
        table[[5, 1]] = 1.0;
        f.store.set(f.emb.table, table);
        let gru_dim = 3 * 4;
        f.store.set(f.dec.gru.wh, Array2::zeros((4, gru_dim)));
        f.store.set(f.dec.gru.bh, Array2::zeros((1, gru_dim)));
        f.store.set(f.dec.initial, Array2::zeros((1, 4)));
        let mut wx = Array2::zeros((8, gru_dim));
        let mut bx = Array2::zeros((1, gru_dim));
        // update gate shut (z ~ 0), candidate copies the previous item's embedding
        for j in 0..4 {
            bx[[0, 4 + j]] = -50.0;
            wx[[j, 8 + j]] = 10.0;
        }
        f.store.set(f.dec.gru.wx, wx);
        f.store.set(f.dec.gru.bx, bx);
        let mut head = Array2::zeros((4, 8));
        head[[0, 5]] = 10.0;
        head[[1, EOS]] = 10.0;
        f.store.set(f.dec.head_weight, head);
        f.store.set(f.dec.head_bias, Array2::zeros((1, 8)));
        let a = Array2::zeros((1, 4));
        assert_eq!(f.dec.decode_autoregressive(&f.store, &f.emb, &a, true), vec![vec![5]]);
        // with eos masked the decoder runs the full length
        let full = f.dec.decode_autoregressive(&f.store, &f.emb, &a, false);
        assert_eq!(full[0].len(), 4);
        // distinct decoding cannot repeat 5, and the length cap binds
        let distinct = DecodeOptions {
            max_len: 3,
            allow_eos: false,
            distinct: true,
        };
        let seq = &f.dec.decode_greedy(&f.store, &f.emb, &a, &distinct)[0];
        assert!(seq.len() <= 3 && seq[0] == 5);
        let mut sorted = seq.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), seq.len());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(greedy_pick([9.0, 9.0, 1.0, 2.0, 2.0].into_iter(), true), 3);
        assert_eq!(greedy_pick([0.0, 0.0, 5.0, 1.0].into_iter(), true), EOS);
        assert_eq!(greedy_pick([0.0, 0.0, 5.0, 1.0].into_iter(), false), 3);
    }

    #[test]
    fn never_emits_special_tokens_and_halts() {
        for seed in 0..100 {
            let f = fixture(4, 9, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let a = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-3.0..3.0));
            for allow_eos in [true, false] {
                for seq in f.dec.decode_autoregressive(&f.store, &f.emb, &a, allow_eos) {
                    assert!(seq.len() <= 5);
                    assert!(seq.iter().all(|&i| i >= NUM_SPECIAL && i < 9));
                }
            }
        }
    }

    #[test]
    fn batched_decode_matches_single() {
        let f = fixture(4, 9, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_simple_fn((4, 4), || rng.random_range(-3.0..3.0));
        let batch = f.dec.decode_autoregressive(&f.store, &f.emb, &a, true);
        for i in 0..4 {
            let single = f.dec.decode_autoregressive(&f.store, &f.emb, &a.row(i).to_owned().insert_axis(Axis(0)), true);
            assert_eq!(single[0], batch[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut f = fixture(4, 6, 3, 7);
        let a = f.store.init("a", 1, 4, Init::Uniform(1.0), &mut ChaCha8Rng::seed_from_u64(1));
        let (emb, dec) = (f.emb.clone(), f.dec.clone());
        let (name, err) = max_relative_error(&mut f.store, |g| {
            let av = g.param(a);
            let out = dec.teacher_forced(g, &emb, av, &[&[4]], None).unwrap();
            let logits = dec.logits(g, out.hidden);
            g.cross_entropy(logits, &out.targets)
        });
        assert!(err < 1e-4, "{name}: {err}");
    }
}
