use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<_> = store
            .ids()
            .map(|id| Array2::zeros(store.get(id).dim()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<Array2<f64>>) -> f64 {
        assert_eq!(grads.len(), store.len());
        let norm = global_norm(&grads);
        if let Some(clip) = self.config.clip_norm {
            if norm > clip && norm > 0.0 {
                let f = clip / norm;
                for g in &mut grads {
                    g.mapv_inplace(|v| v * f);
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { c.weight_decay } else { 0.0 };
            let zero_row = store.zero_row(id);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps) + decay * *p;
                    *p -= c.learning_rate * update;
                });
            if let Some(row) = zero_row {
                store.get_mut(id).row_mut(row).fill(0.0);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array2::from_elem((2, 2), 0.7));
        let before = store.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &store,
        );
        opt.step(&mut store, vec![Array2::from_elem((2, 2), 3.0)]);
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Array2::from_elem((1, 1), 5.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let g = store.get(id) * 2.0;
            opt.step(&mut store, vec![g]);
        }
        assert!(store.get(id)[[0, 0]].abs() < 0.05);
    }

    #[test]
    fn pinned_row_stays_zero() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Array2::from_elem((3, 2), 1.0));
        store.pin_zero_row(id, 0);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, vec![Array2::from_elem((3, 2), 1.0)]);
        assert!(store.get(id).row(0).iter().all(|&v| v == 0.0));
        assert!(store.get(id).row(1).iter().all(|&v| v != 1.0));
    }
}
