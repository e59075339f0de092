//! Domain types and the deterministic transforms from interaction rounds to
//! reward-ordered trajectories with return-to-go.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of most recent interacted items kept as the state.
pub const STATE_WINDOW: usize = 30;

/// A single logged interaction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: String,
    /// Seconds since the epoch.
    pub timestamp: i64,
}

/// The items a user newly interacted with during one interval, plus whether
/// they logged in during each of the following `K` intervals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationRound {
    pub round_index: u64,
    pub new_items: Vec<usize>,
    pub login_flags: Vec<bool>,
}

/// Retention reward: number of the next `K` intervals with a log-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RetentionReward(u32);

impl RetentionReward {
    pub fn new(value: u32, k: u32) -> Result<Self> {
        if value > k {
            return Err(Error::Domain(format!("reward {value} exceeds K = {k}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

/// One `(return-to-go, state, action)` triple with the reward it earned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub return_to_go: u32,
    pub state: Vec<usize>,
    pub action: Vec<usize>,
    pub reward: u32,
}

/// A user's reward-ordered trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn returns_to_go(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.return_to_go).collect()
    }

    /// Rebuild from explicit `(state, action, reward)` steps, recomputing the
    /// return-to-go from the rewards.
    pub fn from_parts(
        user_id: impl Into<String>,
        parts: Vec<(Vec<usize>, Vec<usize>, u32)>,
    ) -> Result<Self> {
        let rewards: Vec<u32> = parts.iter().map(|p| p.2).collect();
        let rtg = compute_return_to_go(&rewards)?;
        let steps = parts
            .into_iter()
            .zip(rtg)
            .map(|((state, action, reward), return_to_go)| Step {
                return_to_go,
                state,
                action,
                reward,
            })
            .collect();
        Ok(Self {
            user_id: user_id.into(),
            steps,
        })
    }

    /// Check the return-to-go recurrence and the reward range.
    pub fn validate(&self, k: u32) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Shape(format!("trajectory {} is empty", self.user_id)));
        }
        let mut expected = 0u32;
        for step in self.steps.iter().rev() {
            if step.reward > k {
                return Err(Error::Domain(format!(
                    "trajectory {}: reward {} exceeds K = {k}",
                    self.user_id, step.reward
                )));
            }
            expected += step.reward;
            if step.return_to_go != expected {
                return Err(Error::Domain(format!(
                    "trajectory {}: return-to-go {} != suffix sum {expected}",
                    self.user_id, step.return_to_go
                )));
            }
        }
        Ok(())
    }
}

/// Reserved vocabulary slots.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const NUM_SPECIAL: usize = 3;

/// Bijection between opaque item ids and contiguous indices. Indices below
/// [`NUM_SPECIAL`] are reserved for padding, begin and end markers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemVocabulary {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ItemVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from ids in first-seen order; duplicates are ignored.
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for id in ids {
            vocab.insert(id);
        }
        vocab
    }

    pub fn insert(&mut self, id: impl Into<String>) -> usize {
        let id = id.into();
        if let Some(&idx) = self.index.get(&id) {
            return idx;
        }
        let idx = NUM_SPECIAL + self.ids.len();
        self.index.insert(id.clone(), idx);
        self.ids.push(id);
        idx
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(NUM_SPECIAL)
            .and_then(|i| self.ids.get(i))
            .map(String::as_str)
    }

    /// Number of real items.
    pub fn num_items(&self) -> usize {
        self.ids.len()
    }

    /// Number of rows in an embedding table covering items and special tokens.
    pub fn size(&self) -> usize {
        NUM_SPECIAL + self.ids.len()
    }

    pub fn is_item(&self, index: usize) -> bool {
        index >= NUM_SPECIAL && index < self.size()
    }

    /// Item ids in index order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Content hash used to check checkpoint/dataset compatibility.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (i, id) in self.ids.iter().enumerate() {
            hasher.update(format!("{}\t{}\n", i + NUM_SPECIAL, id).as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Count of log-ins over the `k` intervals following a round.
pub fn compute_retention(login_flags: &[bool], k: usize) -> Result<RetentionReward> {
    if k == 0 || login_flags.len() != k {
        return Err(Error::Shape(format!(
            "expected {k} login flags, got {}",
            login_flags.len()
        )));
    }
    let count = login_flags.iter().filter(|&&f| f).count() as u32;
    RetentionReward::new(count, k as u32)
}

/// Suffix sums of the per-step rewards.
pub fn compute_return_to_go(rewards: &[u32]) -> Result<Vec<u32>> {
    if rewards.is_empty() {
        return Err(Error::Shape("return-to-go of an empty reward list".into()));
    }
    let mut out = vec![0; rewards.len()];
    let mut acc = 0u32;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

/// Append `new_items` to `prev_state`, keeping only the most recent `window`.
pub fn update_state_window(prev_state: &[usize], new_items: &[usize], window: usize) -> Vec<usize> {
    let total = prev_state.len() + new_items.len();
    let skip = total.saturating_sub(window);
    prev_state
        .iter()
        .chain(new_items)
        .skip(skip)
        .copied()
        .collect()
}

pub fn update_state(prev_state: &[usize], new_items: &[usize]) -> Vec<usize> {
    update_state_window(prev_state, new_items, STATE_WINDOW)
}

/// Options for turning rounds into a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryOptions {
    pub k: usize,
    pub state_window: usize,
    /// Keep only the first `max_len` rounds.
    pub max_len: Option<usize>,
}

impl TrajectoryOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            state_window: STATE_WINDOW,
            max_len: None,
        }
    }
}

/// Build a trajectory from rounds sorted by strictly increasing index.
pub fn build_trajectory(
    user_id: impl Into<String>,
    rounds: &[RecommendationRound],
    options: &TrajectoryOptions,
) -> Result<Trajectory> {
    let user_id = user_id.into();
    if rounds.is_empty() {
        return Err(Error::Shape(format!("user {user_id} has no rounds")));
    }
    if let Some(pair) = rounds
        .windows(2)
        .find(|w| w[0].round_index >= w[1].round_index)
    {
        return Err(Error::Ordering(format!(
            "user {user_id}: round {} precedes round {}",
            pair[0].round_index, pair[1].round_index
        )));
    }
    let take = options.max_len.unwrap_or(rounds.len()).min(rounds.len());
    let mut state = Vec::new();
    let mut parts = Vec::with_capacity(take);
    for round in &rounds[..take] {
        let reward = compute_retention(&round.login_flags, options.k)?.value();
        parts.push((state.clone(), round.new_items.clone(), reward));
        state = update_state_window(&state, &round.new_items, options.state_window);
    }
    Trajectory::from_parts(user_id, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round(i: u64, items: Vec<usize>, flags: Vec<bool>) -> RecommendationRound {
        RecommendationRound {
            round_index: i,
            new_items: items,
            login_flags: flags,
        }
    }

    #[test]
    fn retention_counts_logins() {
        assert_eq!(compute_retention(&[true; 7], 7).unwrap().value(), 7);
        assert_eq!(compute_retention(&[false; 7], 7).unwrap().value(), 0);
        let f = [true, false, true, false, true, false, true];
        assert_eq!(compute_retention(&f, 7).unwrap().value(), 4);
        assert!(matches!(
            compute_retention(&[true; 3], 7),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn return_to_go_is_suffix_sum() {
        assert_eq!(compute_return_to_go(&[2, 3, 1]).unwrap(), vec![6, 4, 1]);
        assert_eq!(compute_return_to_go(&[0, 0, 0]).unwrap(), vec![0, 0, 0]);
        assert_eq!(compute_return_to_go(&[5]).unwrap(), vec![5]);
        assert!(compute_return_to_go(&[]).is_err());
    }

    #[test]
    fn state_window_truncates_oldest() {
        let prev: Vec<usize> = (1..=28).collect();
        let out = update_state(&prev, &[101, 102]);
        assert_eq!(out.len(), 30);
        assert_eq!(&out[28..], &[101, 102]);
        let prev: Vec<usize> = (1..=30).collect();
        let out = update_state(&prev, &[101]);
        let expected: Vec<usize> = (2..=30).chain([101]).collect();
        assert_eq!(out, expected);
        assert!(update_state(&[], &[]).is_empty());
    }

    #[test]
    fn trajectory_examples() {
        let opts = TrajectoryOptions::new(7);
        let flags = |n: usize| (0..7).map(|i| i < n).collect::<Vec<_>>();
        let t = build_trajectory(
            "u",
            &[round(1, vec![3], flags(3)), round(2, vec![4], flags(2))],
            &opts,
        )
        .unwrap();
        assert_eq!(t.returns_to_go(), vec![5, 2]);

        let t = build_trajectory("u", &[round(1, vec![3], flags(4))], &opts).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.returns_to_go(), vec![4]);

        let (a, b, c) = (10, 11, 12);
        let t = build_trajectory(
            "u",
            &[
                round(1, vec![a], flags(1)),
                round(2, vec![b], flags(1)),
                round(3, vec![c], flags(1)),
            ],
            &opts,
        )
        .unwrap();
        assert_eq!(t.steps[2].state, vec![a, b]);
        assert!(t.steps[0].state.is_empty());
    }

    #[test]
    fn unsorted_rounds_rejected() {
        let opts = TrajectoryOptions::new(1);
        let err = build_trajectory(
            "u",
            &[round(2, vec![], vec![true]), round(1, vec![], vec![true])],
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Ordering(_)));
    }

    #[test]
    fn vocabulary_reserves_special_tokens() {
        let v = ItemVocabulary::from_ids(["a", "b", "a"]);
        assert_eq!(v.num_items(), 2);
        assert_eq!(v.index_of("a"), Some(NUM_SPECIAL));
        assert_eq!(v.id_of(NUM_SPECIAL + 1), Some("b"));
        assert_eq!(v.id_of(PAD), None);
        assert!(!v.is_item(EOS));
        assert_ne!(v.hash(), ItemVocabulary::from_ids(["b", "a"]).hash());
    }

    proptest! {
        #[test]
        fn retention_of_complement_sums_to_k(flags in prop::collection::vec(any::<bool>(), 1..12)) {
            let k = flags.len();
            let neg: Vec<bool> = flags.iter().map(|f| !f).collect();
            let a = compute_retention(&flags, k).unwrap().value();
            let b = compute_retention(&neg, k).unwrap().value();
            prop_assert_eq!((a + b) as usize, k);
        }

        #[test]
        fn state_window_bounded(
            prev in prop::collection::vec(0usize..50, 0..40),
            new in prop::collection::vec(0usize..50, 0..40),
        ) {
            let prev = update_state(&[], &prev);
            let out = update_state(&prev, &new);
            prop_assert!(out.len() <= STATE_WINDOW);
            if let Some(last) = new.last() {
                prop_assert_eq!(out.last(), Some(last));
            }
        }

        #[test]
        fn return_to_go_non_increasing(rewards in prop::collection::vec(0u32..8, 1..30)) {
            let rtg = compute_return_to_go(&rewards).unwrap();
            prop_assert!(rtg.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(*rtg.last().unwrap(), *rewards.last().unwrap());
        }
    }
}
