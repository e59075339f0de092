//! Step-level training-set filters for the OOD and behaviour-cloning runs.
//! Dropped steps are removed from their trajectory, the remaining steps keep
//! their order, and returns-to-go are recomputed. Users left with no steps
//! disappear.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dt4rec::datamodel::Trajectory;
use dt4rec::{Error, Result};

/// RNG stream of the behaviour-cloning subsample.
const BC_STREAM: u64 = 20;

fn keep_steps(
    trajs: &[Trajectory],
    mut keep: impl FnMut(usize, usize) -> bool,
) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (u, t) in trajs.iter().enumerate() {
        let parts: Vec<_> = t
            .steps
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(u, *i))
            .map(|(_, s)| (s.state.clone(), s.action.clone(), s.reward))
            .collect();
        if !parts.is_empty() {
            out.push(Trajectory::from_parts(t.user_id.clone(), parts)?);
        }
    }
    Ok(out)
}

pub fn step_count(trajs: &[Trajectory]) -> usize {
    trajs.iter().map(|t| t.len()).sum()
}

/// The training set without steps whose reward is below `threshold`.
pub fn drop_low_reward(trajs: &[Trajectory], threshold: u32) -> Result<Vec<Trajectory>> {
    keep_steps(trajs, |u, i| trajs[u].steps[i].reward >= threshold)
}

/// Keep `percent` of the steps with reward at least `high` (chosen by
/// `seed`) and every other step. 100 returns the input unchanged.
pub fn subsample_high_reward(
    trajs: &[Trajectory],
    high: u32,
    percent: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!(
            "proportion {percent} is outside (0, 100]"
        )));
    }
    let high_steps: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(u, t)| {
            t.steps
                .iter()
                .enumerate()
                .filter(|(_, s)| s.reward >= high)
                .map(move |(i, _)| (u, i))
        })
        .collect();
    let n_keep = ((high_steps.len() as f64) * percent / 100.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BC_STREAM);
    let mut kept = vec![false; high_steps.len()];
    for j in sample(&mut rng, high_steps.len(), n_keep.min(high_steps.len())) {
        kept[j] = true;
    }
    let kept: std::collections::BTreeSet<(usize, usize)> = high_steps
        .iter()
        .zip(&kept)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect();
    keep_steps(trajs, |u, i| {
        trajs[u].steps[i].reward < high || kept.contains(&(u, i))
    })
}
