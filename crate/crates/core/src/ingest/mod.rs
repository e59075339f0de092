//! Log parsing, sessionisation, dataset splits, contrastive negatives and the
//! synthetic retention world.

mod bundle;
mod negatives;
mod parse;
mod sessionize;
mod split;
mod synth;

pub use bundle::{read_json, split_stats, write_json, Bundle, BundleStats, Manifest, SplitStats, BUNDLE_FORMAT, BUNDLE_VERSION, SPLIT_NAMES};
pub use negatives::{make_negatives, make_negatives_with, NegativeRule, NegativeSample};
pub use parse::{parse_log, parse_log_bytes, LogFormat, ParsedLog};
pub use sessionize::{
    build_trajectories, filter_min_interactions, sessionize, vocabulary_from_events, Interval, SessionizeOptions,
    UserRounds, DAY_SECS, MONTH_SECS,
};
pub use split::{split_dataset, DatasetSplit, SplitFractions};
pub use synth::{synth_generate, LatentUser, RetentionLink, SyntheticWorld, SyntheticWorldConfig, WorldRecord};

/// Default minimum number of interactions for a user to be kept.
pub const MIN_INTERACTIONS: usize = 20;
