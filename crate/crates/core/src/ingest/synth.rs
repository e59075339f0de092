//! A small synthetic retention world with known ground truth.
//!
//! Item `i` belongs to genre `i % n_genres`. Each user has a preference
//! distribution over genres, `softmax(sharpness * affinity)`, where affinity
//! mixes a world-level genre draw (weight `shared_taste`) with a personal
//! one. Each user also has a focus level: the chance that a consumed item is
//! drawn by preference rather than uniformly. A day's match rate is the share of its items from the user's
//! favourite genre. Day 0 is active; each later day is active with
//! probability `p_min + (p_max - p_min) * m`, where `m` is the mean match rate
//! of the active days among the previous `memory_days` (or the last known
//! match rate when there are none).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{InteractionEvent, ItemVocabulary};
use crate::error::{Error, Result};
use crate::ingest::sessionize::{Interval, SessionizeOptions, DAY_SECS};

/// Linear map from match rate to daily log-in probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionLink {
    pub p_min: f64,
    pub p_max: f64,
}

impl RetentionLink {
    pub fn probability(&self, match_rate: f64) -> f64 {
        self.p_min + (self.p_max - self.p_min) * match_rate.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub preference_sharpness: f64,
    /// Weight in [0, 1] of a genre affinity shared by all users; 0 makes
    /// tastes fully individual.
    pub shared_taste: f64,
    pub retention_link: RetentionLink,
    /// Range of per-user focus levels.
    pub focus_min: f64,
    pub focus_max: f64,
    /// Chance that a day ignores the user's focus and draws a fresh one
    /// from the same range.
    pub focus_redraw: f64,
    pub n_days: usize,
    /// Days of match history behind each log-in probability.
    pub memory_days: usize,
    pub k: usize,
    pub items_per_day_min: usize,
    pub items_per_day_max: usize,
    /// Timestamp of the start of day 0.
    pub start_timestamp: i64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            n_genres: 4,
            preference_sharpness: 8.0,
            shared_taste: 0.7,
            retention_link: RetentionLink {
                p_min: 0.05,
                p_max: 0.95,
            },
            focus_min: 0.0,
            focus_max: 1.0,
            focus_redraw: 0.0,
            n_days: 80,
            memory_days: 7,
            k: 7,
            items_per_day_min: 3,
            items_per_day_max: 8,
            start_timestamp: 1_577_836_800,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_genres == 0 {
            return fail(format!(
                "n_users, n_items and n_genres must be positive (got {}, {}, {})",
                self.n_users, self.n_items, self.n_genres
            ));
        }
        if !(self.preference_sharpness > 0.0) {
            return fail(format!("preference_sharpness must be positive, got {}", self.preference_sharpness));
        }
        let RetentionLink { p_min, p_max } = self.retention_link;
        if !(0.0 <= p_min && p_min <= p_max && p_max <= 1.0) {
            return fail(format!("retention link needs 0 <= p_min <= p_max <= 1, got {p_min}, {p_max}"));
        }
        if !(0.0 <= self.focus_min && self.focus_min <= self.focus_max && self.focus_max <= 1.0) {
            return fail(format!("focus range [{}, {}] is not inside [0, 1]", self.focus_min, self.focus_max));
        }
        if !(0.0..=1.0).contains(&self.shared_taste) {
            return fail(format!("shared_taste must lie in [0, 1], got {}", self.shared_taste));
        }
        if !(0.0..=1.0).contains(&self.focus_redraw) {
            return fail(format!("focus_redraw must lie in [0, 1], got {}", self.focus_redraw));
        }
        if self.memory_days == 0 {
            return fail("memory_days must be at least 1".into());
        }
        if self.k == 0 || self.n_days <= self.k {
            return fail(format!("need 1 <= K < n_days, got K = {} and {} days", self.k, self.n_days));
        }
        if self.items_per_day_min == 0 || self.items_per_day_min > self.items_per_day_max {
            return fail(format!(
                "items per day range [{}, {}] is empty or starts at 0",
                self.items_per_day_min, self.items_per_day_max
            ));
        }
        if self.start_timestamp < 0 {
            return fail("start_timestamp must be non-negative".into());
        }
        Ok(())
    }

    pub fn item_id(&self, i: usize) -> String {
        format!("item{i:05}")
    }

    pub fn user_id(&self, u: usize) -> String {
        format!("user{u:05}")
    }

    pub fn genre(&self, item: usize) -> usize {
        item % self.n_genres
    }

    /// Sessionization settings that line up with the generator's days and
    /// labelled horizon.
    pub fn session_options(&self) -> SessionizeOptions {
        SessionizeOptions {
            interval: Interval::Day,
            k: self.k,
            horizon: Some(self.start_timestamp + ((self.n_days - 1) as u64 * DAY_SECS) as i64),
            origin: self.start_timestamp,
            max_action_items: SessionizeOptions::default().max_action_items,
        }
    }

    /// Vocabulary in item order, so item `i` has index `NUM_SPECIAL + i`.
    pub fn vocabulary(&self) -> ItemVocabulary {
        ItemVocabulary::from_ids((0..self.n_items).map(|i| self.item_id(i)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentUser {
    pub user_id: String,
    pub preference: Vec<f64>,
    pub favourite_genre: usize,
    pub focus: f64,
}

/// Ground truth for one labelled active day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldRecord {
    pub user_id: String,
    pub day: usize,
    pub items: Vec<String>,
    pub match_rate: f64,
    /// Active days among the next `K`.
    pub logins: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: SyntheticWorldConfig,
    pub users: Vec<LatentUser>,
    pub records: Vec<WorldRecord>,
    pub events: Vec<InteractionEvent>,
}

impl SyntheticWorld {
    /// Expected share of favourite-genre items for a user, which is the
    /// match rate in expectation.
    pub fn expected_match(&self, user: &LatentUser) -> f64 {
        let c = &self.config;
        let fav_items = (0..c.n_items).filter(|&i| c.genre(i) == user.favourite_genre).count() as f64;
        let total: f64 = (0..c.n_items).map(|i| user.preference[c.genre(i)]).sum();
        let by_pref = fav_items * user.preference[user.favourite_genre] / total;
        let focus = (1.0 - c.focus_redraw) * user.focus + c.focus_redraw * (c.focus_min + c.focus_max) / 2.0;
        focus * by_pref + (1.0 - focus) * fav_items / c.n_items as f64
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn synth_generate(config: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    // genres that own at least one item
    let live_genres = c.n_genres.min(c.n_items);
    let mut users = Vec::with_capacity(c.n_users);
    let mut records = Vec::new();
    let mut events = Vec::new();
    let shared: Vec<f64> = (0..c.n_genres).map(|_| rng.random::<f64>()).collect();

    for u in 0..c.n_users {
        let user_id = c.user_id(u);
        let affinity: Vec<f64> = shared
            .iter()
            .map(|s| c.shared_taste * s + (1.0 - c.shared_taste) * rng.random::<f64>())
            .collect();
        let scaled: Vec<f64> = affinity.iter().map(|a| a * c.preference_sharpness).collect();
        let preference = softmax(&scaled);
        let favourite_genre = (0..live_genres)
            .max_by(|&a, &b| preference[a].total_cmp(&preference[b]).then(b.cmp(&a)))
            .expect("at least one genre");
        let focus = c.focus_min + (c.focus_max - c.focus_min) * rng.random::<f64>();
        let weights: Vec<f64> = (0..c.n_items).map(|i| preference[c.genre(i)]).collect();
        let by_preference = WeightedIndex::new(&weights)
            .or_else(|_| WeightedIndex::new(vec![1.0; c.n_items]))
            .expect("uniform weights are valid");

        let mut active = vec![false; c.n_days];
        let mut day_items: Vec<Vec<usize>> = vec![Vec::new(); c.n_days];
        let mut day_match = vec![0.0; c.n_days];
        let mut last_match = 0.0;
        for d in 0..c.n_days {
            if d > 0 {
                let from = d.saturating_sub(c.memory_days);
                let recent: Vec<f64> = (from..d).filter(|&j| active[j]).map(|j| day_match[j]).collect();
                let m = if recent.is_empty() {
                    last_match
                } else {
                    recent.iter().sum::<f64>() / recent.len() as f64
                };
                if rng.random::<f64>() >= c.retention_link.probability(m) {
                    continue;
                }
            }
            active[d] = true;
            let day_focus = if rng.random::<f64>() < c.focus_redraw {
                c.focus_min + (c.focus_max - c.focus_min) * rng.random::<f64>()
            } else {
                focus
            };
            let n = rng.random_range(c.items_per_day_min..=c.items_per_day_max);
            let items: Vec<usize> = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < day_focus {
                        by_preference.sample(&mut rng)
                    } else {
                        rng.random_range(0..c.n_items)
                    }
                })
                .collect();
            let hits = items.iter().filter(|&&i| c.genre(i) == favourite_genre).count();
            day_match[d] = hits as f64 / n as f64;
            last_match = day_match[d];
            let mut offsets: Vec<i64> = (0..n).map(|_| rng.random_range(0..DAY_SECS as i64)).collect();
            offsets.sort_unstable();
            let day_start = c.start_timestamp + d as i64 * DAY_SECS as i64;
            // same order as the sorted log, where equal timestamps fall back to item id
            let mut timed: Vec<(i64, String, usize)> = items.iter().zip(offsets).map(|(&i, off)| (off, c.item_id(i), i)).collect();
            timed.sort();
            for (off, item_id, _) in &timed {
                events.push(InteractionEvent {
                    user_id: user_id.clone(),
                    item_id: item_id.clone(),
                    timestamp: day_start + off,
                });
            }
            day_items[d] = timed.into_iter().map(|(_, _, i)| i).collect();
        }
        for d in (0..c.n_days).filter(|&d| active[d] && d + c.k < c.n_days) {
            let mut items: Vec<String> = Vec::new();
            for &i in &day_items[d] {
                let id = c.item_id(i);
                if !items.contains(&id) {
                    items.push(id);
                }
            }
            records.push(WorldRecord {
                user_id: user_id.clone(),
                day: d,
                items,
                match_rate: day_match[d],
                logins: active[d + 1..=d + c.k].iter().filter(|&&a| a).count() as u32,
            });
        }
        users.push(LatentUser {
            user_id,
            preference,
            favourite_genre,
            focus,
        });
    }
    events.sort_by(|a, b| (&a.user_id, a.timestamp, &a.item_id).cmp(&(&b.user_id, b.timestamp, &b.item_id)));
    Ok(SyntheticWorld {
        config: config.clone(),
        users,
        records,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::TrajectoryOptions;
    use crate::ingest::sessionize::{build_trajectories, sessionize};

    fn small() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            n_users: 30,
            n_items: 20,
            n_days: 25,
            seed: 5,
            ..SyntheticWorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_log() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let other = synth_generate(&SyntheticWorldConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.events, other.events);
    }

    #[test]
    fn sessionized_rewards_match_generator() {
        let cfg = small();
        let world = synth_generate(&cfg).unwrap();
        let vocab = cfg.vocabulary();
        let users = sessionize(&world.events, &vocab, &cfg.session_options()).unwrap();
        let trajs = build_trajectories(&users, &TrajectoryOptions::new(cfg.k)).unwrap();
        let from_data: Vec<(String, u64, u32, Vec<usize>)> = users
            .iter()
            .zip(&trajs)
            .flat_map(|(u, t)| {
                u.rounds
                    .iter()
                    .zip(&t.steps)
                    .map(|(r, s)| (u.user_id.clone(), r.round_index - 1, s.reward, s.action.clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let from_world: Vec<(String, u64, u32, Vec<usize>)> = world
            .records
            .iter()
            .map(|r| {
                let items = r.items.iter().map(|i| vocab.index_of(i).unwrap()).collect();
                (r.user_id.clone(), r.day as u64, r.logins, items)
            })
            .collect();
        assert!(!from_world.is_empty());
        assert_eq!(from_data, from_world);
    }

    #[test]
    fn tied_timestamps_keep_log_order() {
        // long days make same-second interactions likely
        let cfg = SyntheticWorldConfig {
            n_users: 150,
            items_per_day_min: 15,
            items_per_day_max: 19,
            seed: 8,
            ..SyntheticWorldConfig::default()
        };
        let world = synth_generate(&cfg).unwrap();
        let ties = world
            .events
            .windows(2)
            .filter(|w| w[0].user_id == w[1].user_id && w[0].timestamp == w[1].timestamp)
            .count();
        assert!(ties > 0);
        let vocab = cfg.vocabulary();
        let users = sessionize(&world.events, &vocab, &cfg.session_options()).unwrap();
        let trajs = build_trajectories(&users, &TrajectoryOptions::new(cfg.k)).unwrap();
        let actions: Vec<Vec<usize>> = trajs.iter().flat_map(|t| t.steps.iter().map(|s| s.action.clone())).collect();
        let recorded: Vec<Vec<usize>> = world
            .records
            .iter()
            .map(|r| r.items.iter().map(|i| vocab.index_of(i).unwrap()).collect())
            .collect();
        assert_eq!(actions, recorded);
    }

    #[test]
    fn fully_focused_users_retain_at_p_max() {
        let cfg = SyntheticWorldConfig {
            n_users: 300,
            preference_sharpness: 1e6,
            focus_min: 1.0,
            focus_max: 1.0,
            seed: 11,
            ..SyntheticWorldConfig::default()
        };
        let world = synth_generate(&cfg).unwrap();
        assert!(world.records.iter().all(|r| r.match_rate == 1.0));
        let mean = world.records.iter().map(|r| r.logins as f64).sum::<f64>() / world.records.len() as f64;
        let expected = cfg.k as f64 * cfg.retention_link.p_max;
        assert!((mean - expected).abs() < 0.05, "mean {mean} vs {expected}");
        for u in &world.users {
            assert!((world.expected_match(u) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_item_world() {
        let cfg = SyntheticWorldConfig {
            n_items: 1,
            ..small()
        };
        let world = synth_generate(&cfg).unwrap();
        assert!(world.events.iter().all(|e| e.item_id == "item00000"));
        assert!(world.records.iter().all(|r| r.match_rate == 1.0));
        let logins: Vec<u32> = world.records.iter().map(|r| r.logins).collect();
        assert!(logins.iter().min() != logins.iter().max());
    }

    #[test]
    fn match_rate_drives_retention() {
        let world = synth_generate(&SyntheticWorldConfig { seed: 3, ..SyntheticWorldConfig::default() }).unwrap();
        let mean = |lo: f64, hi: f64| {
            let sel: Vec<f64> = world
                .records
                .iter()
                .filter(|r| r.match_rate >= lo && r.match_rate < hi)
                .map(|r| r.logins as f64)
                .collect();
            sel.iter().sum::<f64>() / sel.len() as f64
        };
        assert!(mean(0.75, 1.01) > mean(0.0, 0.25) + 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SyntheticWorldConfig { n_users: 0, ..small() },
            SyntheticWorldConfig { preference_sharpness: 0.0, ..small() },
            SyntheticWorldConfig {
                retention_link: RetentionLink { p_min: 0.8, p_max: 0.2 },
                ..small()
            },
            SyntheticWorldConfig { n_days: 7, ..small() },
            SyntheticWorldConfig { focus_redraw: 1.5, ..small() },
            SyntheticWorldConfig { shared_taste: -0.1, ..small() },
            SyntheticWorldConfig { memory_days: 0, ..small() },
        ] {
            assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        }
    }
}
