//! On-disk dataset bundle.
//!
//! A bundle directory holds:
//! - `manifest.json`: format name and version, `K`, state window, split seed,
//!   vocabulary hash, per-split user counts and a free-form `source` record;
//! - `vocab.tsv`: one `index<TAB>item_id` line per item, indices from 3;
//! - `train.jsonl`, `validation.jsonl`, `test.jsonl`: one trajectory per line;
//! - `stats.json`: users, items and mean retention per split.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ItemVocabulary, Trajectory, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::ingest::split::DatasetSplit;

pub const BUNDLE_FORMAT: &str = "dt4rec-bundle";
pub const BUNDLE_VERSION: u32 = 1;
pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub k: usize,
    pub state_window: usize,
    pub split_seed: u64,
    pub vocab_hash: String,
    pub num_items: usize,
    pub users: [usize; 3],
    pub source: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub users: usize,
    pub steps: usize,
    pub distinct_items: usize,
    pub mean_retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleStats {
    pub items: usize,
    pub train: SplitStats,
    pub validation: SplitStats,
    pub test: SplitStats,
    pub all: SplitStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub vocab: ItemVocabulary,
    pub split: DatasetSplit,
}

pub fn split_stats<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> SplitStats {
    let mut users = 0;
    let mut steps = 0;
    let mut reward_sum = 0u64;
    let mut items = std::collections::BTreeSet::new();
    for t in trajs {
        users += 1;
        for s in &t.steps {
            steps += 1;
            reward_sum += s.reward as u64;
            items.extend(s.action.iter().copied());
        }
    }
    SplitStats {
        users,
        steps,
        distinct_items: items.len(),
        mean_retention: if steps == 0 { 0.0 } else { reward_sum as f64 / steps as f64 },
    }
}

impl Bundle {
    pub fn new(vocab: ItemVocabulary, split: DatasetSplit, k: usize, state_window: usize, source: serde_json::Value) -> Self {
        let manifest = Manifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            k,
            state_window,
            split_seed: split.split_seed,
            vocab_hash: vocab.hash(),
            num_items: vocab.num_items(),
            users: [split.train.len(), split.validation.len(), split.test.len()],
            source,
        };
        Self { manifest, vocab, split }
    }

    pub fn stats(&self) -> BundleStats {
        let s = &self.split;
        BundleStats {
            items: self.vocab.num_items(),
            train: split_stats(&s.train),
            validation: split_stats(&s.validation),
            test: split_stats(&s.test),
            all: split_stats(s.train.iter().chain(&s.validation).chain(&s.test)),
        }
    }

    fn parts(&self) -> [&Vec<Trajectory>; 3] {
        [&self.split.train, &self.split.validation, &self.split.test]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        let mut vocab = String::new();
        for (i, id) in self.vocab.ids().iter().enumerate() {
            vocab.push_str(&format!("{}\t{}\n", i + NUM_SPECIAL, id));
        }
        write_file(&dir.join("vocab.tsv"), vocab.as_bytes())?;
        for (name, part) in SPLIT_NAMES.iter().zip(self.parts()) {
            let mut buf = Vec::new();
            for t in part {
                serde_json::to_writer(&mut buf, t).expect("trajectories serialize");
                buf.push(b'\n');
            }
            write_file(&dir.join(format!("{name}.jsonl")), &buf)?;
        }
        write_json(&dir.join("stats.json"), &self.stats())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: Manifest = read_json(&path)?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: bundle format {} v{}, expected {BUNDLE_FORMAT} v{BUNDLE_VERSION}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let path = dir.join("vocab.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut vocab = ItemVocabulary::new();
        for (n, line) in text.lines().enumerate() {
            let (idx, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&path, format!("line {}: expected index and id", n + 1)))?;
            let got = vocab.insert(id);
            if idx.parse::<usize>().ok() != Some(got) {
                return Err(Error::format(&path, format!("line {}: index {idx} out of sequence", n + 1)));
            }
        }
        if vocab.hash() != manifest.vocab_hash {
            return Err(Error::Vocabulary(format!(
                "{}: vocabulary hash does not match the manifest",
                dir.display()
            )));
        }
        let mut parts = Vec::new();
        for name in SPLIT_NAMES {
            let path = dir.join(format!("{name}.jsonl"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut part = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let t: Trajectory = serde_json::from_str(line)
                    .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
                t.validate(manifest.k as u32)?;
                if let Some(bad) = t
                    .steps
                    .iter()
                    .flat_map(|s| s.state.iter().chain(&s.action))
                    .find(|&&i| !vocab.is_item(i))
                {
                    return Err(Error::Vocabulary(format!("user {}: item index {bad} not in vocabulary", t.user_id)));
                }
                part.push(t);
            }
            parts.push(part);
        }
        let test = parts.pop().expect("three parts");
        let validation = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(Self {
            split: DatasetSplit {
                train,
                validation,
                test,
                split_seed: manifest.split_seed,
            },
            manifest,
            vocab,
        })
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
