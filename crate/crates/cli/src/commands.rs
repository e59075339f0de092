//! The subcommands. Each one resolves its inputs from the run config,
//! writes its outputs (plus the echoed config) into one directory, and
//! returns what it wrote so callers can inspect it without reparsing.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dt4rec::datamodel::{ItemVocabulary, Trajectory, TrajectoryOptions, STATE_WINDOW};
use dt4rec::evaluation::{
    check_disjoint, evaluate_rollouts, train_reward_model, MetricReport, TrainedRewardModel,
    METRIC_NAMES,
};
use dt4rec::inference::{write_rollout, RecommendationPolicy};
use dt4rec::ingest::{
    build_trajectories, filter_min_interactions, parse_log, read_json, sessionize, split_dataset,
    synth_generate, vocabulary_from_events, write_json, Bundle, BundleStats,
};
use dt4rec::training::{train, Checkpoint, TrainHooks};
use dt4rec::{Error, Result};

use crate::config::RunConfig;
use crate::filters::{drop_low_reward, step_count, subsample_high_reward};

pub const OUTPUT_VERSION: u32 = 1;
pub const POLICY_CHECKPOINT: &str = "model.ckpt";
pub const REWARD_CHECKPOINT: &str = "reward_model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const ROLLOUTS: &str = "rollouts.jsonl";
pub const METRICS_STEM: &str = "metrics";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sessionize-free part shared by `synth` and `ingest`: split, bundle, write.
fn write_bundle(
    cfg: &RunConfig,
    vocab: ItemVocabulary,
    trajs: &[Trajectory],
    k: usize,
    out: &Path,
    source: serde_json::Value,
) -> Result<BundleStats> {
    let split = split_dataset(trajs, cfg.split, cfg.seed)?;
    let bundle = Bundle::new(vocab, split, k, STATE_WINDOW, source);
    bundle.write(out)?;
    cfg.echo(out)?;
    Ok(bundle.stats())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<BundleStats> {
    let world = synth_generate(&cfg.synth)?;
    let vocab = cfg.synth.vocabulary();
    let users = sessionize(&world.events, &vocab, &cfg.synth.session_options())?;
    let trajs = build_trajectories(&users, &TrajectoryOptions::new(cfg.synth.k))?;
    create_dir(out)?;
    let mut log = String::new();
    for e in &world.events {
        log.push_str(&format!("{}\t{}\t{}\n", e.user_id, e.item_id, e.timestamp));
    }
    write_text(&out.join("events.tsv"), &log)?;
    write_json(&out.join("world.json"), &world_summary(&world))?;
    let source = serde_json::json!({ "kind": "synthetic", "config": cfg.synth });
    write_bundle(cfg, vocab, &trajs, cfg.synth.k, out, source)
}

#[derive(Serialize)]
struct WorldSummary<'a> {
    version: u32,
    users: &'a [dt4rec::ingest::LatentUser],
    records: &'a [dt4rec::ingest::WorldRecord],
}

fn world_summary(world: &dt4rec::ingest::SyntheticWorld) -> WorldSummary<'_> {
    WorldSummary {
        version: OUTPUT_VERSION,
        users: &world.users,
        records: &world.records,
    }
}

pub fn cmd_ingest(cfg: &RunConfig, out: &Path) -> Result<BundleStats> {
    let path = cfg
        .data
        .log
        .as_deref()
        .ok_or_else(|| Error::Config("no interaction log given (data.log or --log)".into()))?;
    let parsed = parse_log(path, &cfg.ingest.format)?;
    if parsed.malformed > 0 {
        log::warn!(
            "{} of {} rows in {} were malformed and skipped",
            parsed.malformed,
            parsed.rows,
            path.display()
        );
    }
    let events = filter_min_interactions(parsed.events, cfg.ingest.min_interactions);
    let vocab = vocabulary_from_events(&events);
    let users = sessionize(&events, &vocab, &cfg.ingest.sessionize)?;
    let k = cfg.ingest.sessionize.k;
    let trajs = build_trajectories(&users, &TrajectoryOptions::new(k))?;
    let source = serde_json::json!({
        "kind": "log",
        "path": path,
        "rows": parsed.rows,
        "malformed": parsed.malformed,
        "min_interactions": cfg.ingest.min_interactions,
    });
    write_bundle(cfg, vocab, &trajs, k, out, source)
}

fn load_bundle(cfg: &RunConfig) -> Result<Bundle> {
    let b = Bundle::read(cfg.bundle_path()?)?;
    if b.manifest.k != cfg.train.k as usize {
        return Err(Error::Compatibility(format!(
            "bundle was built with K = {}, config uses K = {}",
            b.manifest.k, cfg.train.k
        )));
    }
    Ok(b)
}

/// Train a policy on `data` and write its checkpoint and epoch log to `out`.
fn fit_policy(
    cfg: &RunConfig,
    data: &[Trajectory],
    vocab: &ItemVocabulary,
    out: &Path,
) -> Result<Checkpoint> {
    create_dir(out)?;
    let log_path = out.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let trained = train(
        data,
        vocab,
        &cfg.model,
        &cfg.train,
        TrainHooks {
            log: Some(&mut writer),
            ..TrainHooks::default()
        },
    )?;
    drop(writer);
    trained.checkpoint.save(&out.join(POLICY_CHECKPOINT))?;
    Ok(trained.checkpoint)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let bundle = load_bundle(cfg)?;
    let ckpt = fit_policy(cfg, &bundle.split.train, &bundle.vocab, out)?;
    cfg.echo(out)?;
    Ok(ckpt)
}

/// The configured reward model, or one fitted on the validation split and
/// saved into `out`.
fn reward_model(cfg: &RunConfig, bundle: &Bundle, out: &Path) -> Result<TrainedRewardModel> {
    if let Some(path) = &cfg.data.reward_checkpoint {
        let rm = TrainedRewardModel::from_checkpoint(&Checkpoint::load(path)?)?;
        if rm.vocab_hash != bundle.vocab.hash() {
            return Err(Error::Compatibility(format!(
                "reward model {} was fitted on another vocabulary",
                path.display()
            )));
        }
        return Ok(rm);
    }
    check_disjoint(&bundle.split.validation, &bundle.split.train)?;
    let rm = train_reward_model(
        &bundle.split.validation,
        &bundle.vocab,
        &cfg.reward_model.model,
        &cfg.reward_model.train,
    )?;
    create_dir(out)?;
    rm.checkpoint.save(&out.join(REWARD_CHECKPOINT))?;
    Ok(rm)
}

/// Roll the policy out over the test split and score it.
fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    bundle: &Bundle,
    rm: &TrainedRewardModel,
    out: &Path,
) -> Result<MetricReport> {
    let hash = bundle.vocab.hash();
    let policy = RecommendationPolicy::from_checkpoint(ckpt, &hash, cfg.policy)?;
    let records = policy.rollout(&bundle.split.test)?;
    create_dir(out)?;
    write_rollout(&out.join(ROLLOUTS), &records)?;
    let config = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut report = evaluate_rollouts(&records, rm, &hash, &cfg.eval, config)?;
    if let Some(v) = ckpt.tags.get("variant") {
        report.config["variant"] = serde_json::Value::String(v.clone());
    }
    report.write(out, METRICS_STEM)?;
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<MetricReport> {
    let bundle = load_bundle(cfg)?;
    let path = cfg.data.checkpoint.as_deref().ok_or_else(|| {
        Error::Config("no policy checkpoint given (data.checkpoint or --checkpoint)".into())
    })?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_vocabulary(&bundle.vocab.hash())?;
    let rm = reward_model(cfg, &bundle, out)?;
    let report = evaluate_checkpoint(cfg, &ckpt, &bundle, &rm, out)?;
    cfg.echo(out)?;
    Ok(report)
}

/// One trained-and-evaluated variant of a paired experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub users: usize,
    pub steps: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn run_arms(
    cfg: &RunConfig,
    bundle: &Bundle,
    rm: &TrainedRewardModel,
    arms: Vec<(String, Vec<Trajectory>)>,
    out: &Path,
    jobs: usize,
) -> Result<Vec<ArmResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| {
        arms.par_iter()
            .map(|(label, data)| {
                if data.is_empty() {
                    return Err(Error::Degenerate(format!(
                        "{label}: no training steps left"
                    )));
                }
                let dir = out.join(label);
                let ckpt = fit_policy(cfg, data, &bundle.vocab, &dir)?;
                let report = evaluate_checkpoint(cfg, &ckpt, bundle, rm, &dir)?;
                Ok(ArmResult {
                    label: label.clone(),
                    users: data.len(),
                    steps: step_count(data),
                    metrics: report.metrics,
                })
            })
            .collect()
    })
}

fn arms_csv(first: &str, rows: &[(String, &ArmResult)]) -> String {
    let mut out = format!("{first},users,steps,{}\n", METRIC_NAMES.join(","));
    for (key, r) in rows {
        let vals: Vec<String> = METRIC_NAMES
            .iter()
            .map(|m| format!("{}", r.metrics[*m]))
            .collect();
        out.push_str(&format!(
            "{key},{},{},{}\n",
            r.users,
            r.steps,
            vals.join(",")
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub version: u32,
    pub threshold: u32,
    pub original: ArmResult,
    pub data_b: ArmResult,
}

pub fn cmd_ood(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<OodReport> {
    let bundle = load_bundle(cfg)?;
    let rm = reward_model(cfg, &bundle, out)?;
    let data_b = drop_low_reward(&bundle.split.train, cfg.ood.threshold)?;
    let arms = vec![
        ("original".to_string(), bundle.split.train.clone()),
        ("data_b".to_string(), data_b),
    ];
    let mut results = run_arms(cfg, &bundle, &rm, arms, out, jobs)?.into_iter();
    let report = OodReport {
        version: OUTPUT_VERSION,
        threshold: cfg.ood.threshold,
        original: results.next().expect("two arms"),
        data_b: results.next().expect("two arms"),
    };
    write_json(&out.join("ood.json"), &report)?;
    let rows = [
        ("original".to_string(), &report.original),
        ("data_b".to_string(), &report.data_b),
    ];
    write_text(&out.join("ood.csv"), &arms_csv("run", &rows))?;
    cfg.echo(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcRow {
    pub proportion: f64,
    #[serde(flatten)]
    pub result: ArmResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub version: u32,
    pub high_reward: u32,
    pub rows: Vec<BcRow>,
}

pub fn cmd_bc(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<BcReport> {
    let bundle = load_bundle(cfg)?;
    let high = cfg.bc.high_reward.unwrap_or(cfg.train.k.saturating_sub(1));
    let rm = reward_model(cfg, &bundle, out)?;
    let arms = cfg
        .bc
        .proportions
        .iter()
        .map(|&p| {
            Ok((
                format!("p{p}"),
                subsample_high_reward(&bundle.split.train, high, p, cfg.seed)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let results = run_arms(cfg, &bundle, &rm, arms, out, jobs)?;
    let report = BcReport {
        version: OUTPUT_VERSION,
        high_reward: high,
        rows: cfg
            .bc
            .proportions
            .iter()
            .zip(results)
            .map(|(&proportion, result)| BcRow { proportion, result })
            .collect(),
    };
    write_json(&out.join("bc.json"), &report)?;
    let rows: Vec<(String, &ArmResult)> = report
        .rows
        .iter()
        .map(|r| (format!("{}", r.proportion), &r.result))
        .collect();
    write_text(&out.join("bc.csv"), &arms_csv("proportion", &rows))?;
    cfg.echo(out)?;
    Ok(report)
}

/// Every `metrics.json` under `dir`, in path order.
fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            found.push(p);
        }
    }
    Ok(())
}

/// Gather metric reports from files or directories into one table.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            find_reports(input, &mut files)?;
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no metric reports found".into()));
    }
    let mut table = format!("run,{}\n", METRIC_NAMES.join(","));
    for f in &files {
        let r: MetricReport = read_json(f)?;
        r.validate()?;
        let run = f
            .parent()
            .map_or_else(|| f.display().to_string(), |p| p.display().to_string());
        let vals: Vec<String> = METRIC_NAMES
            .iter()
            .map(|m| r.metrics.get(*m).map_or(String::new(), |v| format!("{v}")))
            .collect();
        table.push_str(&format!("{run},{}\n", vals.join(",")));
    }
    create_dir(out)?;
    write_text(&out.join("report.csv"), &table)?;
    Ok(table)
}
