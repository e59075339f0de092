//! Group a sorted event log into per-interval rounds with retention flags.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    build_trajectory, InteractionEvent, ItemVocabulary, RecommendationRound, Trajectory,
    TrajectoryOptions,
};
use crate::encoders::ACTION_MAX_LEN;
use crate::error::{Error, Result};

pub const DAY_SECS: u64 = 86_400;
/// Months are fixed 30-day blocks.
pub const MONTH_SECS: u64 = 30 * DAY_SECS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    Day,
    Month,
    Seconds(u64),
}

impl Interval {
    pub fn seconds(self) -> u64 {
        match self {
            Interval::Day => DAY_SECS,
            Interval::Month => MONTH_SECS,
            Interval::Seconds(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionizeOptions {
    pub interval: Interval,
    pub k: usize,
    /// Timestamp of the end of observation. Defaults to the latest event.
    pub horizon: Option<i64>,
    /// Timestamps are bucketed relative to this origin.
    pub origin: i64,
    /// Longest action kept per round; later items of the interval are dropped.
    pub max_action_items: Option<usize>,
}

impl Default for SessionizeOptions {
    fn default() -> Self {
        Self {
            interval: Interval::Day,
            k: 7,
            horizon: None,
            origin: 0,
            max_action_items: Some(ACTION_MAX_LEN - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRounds {
    pub user_id: String,
    pub rounds: Vec<RecommendationRound>,
}

/// Vocabulary over every item in the log, in sorted id order.
pub fn vocabulary_from_events(events: &[InteractionEvent]) -> ItemVocabulary {
    let ids: BTreeSet<&str> = events.iter().map(|e| e.item_id.as_str()).collect();
    ItemVocabulary::from_ids(ids)
}

/// Drop users with fewer than `min_interactions` events.
pub fn filter_min_interactions(events: Vec<InteractionEvent>, min_interactions: usize) -> Vec<InteractionEvent> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &events {
        *counts.entry(e.user_id.as_str()).or_default() += 1;
    }
    let keep: BTreeSet<String> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_interactions)
        .map(|(u, _)| u.to_string())
        .collect();
    events.into_iter().filter(|e| keep.contains(&e.user_id)).collect()
}

/// One round per interval with activity, except the last `k` intervals
/// before the horizon, which only serve as labels. Users without any round
/// are omitted. Output is ordered by user id.
pub fn sessionize(
    events: &[InteractionEvent],
    vocab: &ItemVocabulary,
    options: &SessionizeOptions,
) -> Result<Vec<UserRounds>> {
    let secs = options.interval.seconds();
    if secs == 0 {
        return Err(Error::Config("interval must be at least one second".into()));
    }
    if options.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if let Some(w) = events
        .windows(2)
        .find(|w| (&w[0].user_id, w[0].timestamp) > (&w[1].user_id, w[1].timestamp))
    {
        return Err(Error::Ordering(format!(
            "event for {} at {} precedes {} at {}",
            w[0].user_id, w[0].timestamp, w[1].user_id, w[1].timestamp
        )));
    }
    let Some(horizon) = options
        .horizon
        .or_else(|| events.iter().map(|e| e.timestamp).max())
    else {
        return Ok(Vec::new());
    };
    let bucket = |ts: i64| -> Result<u64> {
        let rel = ts - options.origin;
        if rel < 0 {
            return Err(Error::Ordering(format!("timestamp {ts} precedes origin {}", options.origin)));
        }
        Ok(rel as u64 / secs)
    };
    let last_bucket = bucket(horizon)?;
    let k = options.k as u64;

    let mut out = Vec::new();
    let mut start = 0;
    while start < events.len() {
        let user = &events[start].user_id;
        let end = start + events[start..].iter().take_while(|e| &e.user_id == user).count();
        let mut days: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for e in &events[start..end] {
            let idx = vocab
                .index_of(&e.item_id)
                .ok_or_else(|| Error::Vocabulary(format!("item {} is not in the vocabulary", e.item_id)))?;
            let items = days.entry(bucket(e.timestamp)?).or_default();
            if !items.contains(&idx) {
                items.push(idx);
            }
        }
        let rounds: Vec<RecommendationRound> = days
            .iter()
            .filter(|&(&b, _)| b + k <= last_bucket)
            .map(|(&b, items)| {
                let mut new_items = items.clone();
                if let Some(m) = options.max_action_items {
                    new_items.truncate(m);
                }
                RecommendationRound {
                    round_index: b + 1,
                    new_items,
                    login_flags: (1..=k).map(|j| days.contains_key(&(b + j))).collect(),
                }
            })
            .collect();
        if !rounds.is_empty() {
            out.push(UserRounds {
                user_id: user.clone(),
                rounds,
            });
        }
        start = end;
    }
    Ok(out)
}

/// Trajectories for every sessionized user, in user order.
pub fn build_trajectories(users: &[UserRounds], options: &TrajectoryOptions) -> Result<Vec<Trajectory>> {
    users
        .iter()
        .map(|u| build_trajectory(u.user_id.clone(), &u.rounds, options))
        .collect()
}
