//! AdamW with per-prefix learning rates.

use indexmap::IndexMap;

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    /// `(name_prefix, lr)` pairs; the longest matching prefix wins.
    /// An empty prefix acts as the default rate.
    pub lr_groups: Vec<(String, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn uniform(lr: f64) -> Self {
        AdamWConfig {
            lr_groups: vec![(String::new(), lr)],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn with_group(mut self, prefix: &str, lr: f64) -> Self {
        self.lr_groups.push((prefix.to_string(), lr));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for (prefix, lr) in &self.lr_groups {
            if name.starts_with(prefix.as_str()) {
                let len = prefix.len();
                if best.map_or(true, |(blen, _)| len >= blen) {
                    best = Some((len, *lr));
                }
            }
        }
        best.map(|(_, lr)| lr)
            .unwrap_or_else(|| panic!("no learning-rate group matches parameter {name}"))
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, state: IndexMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Change (or add) the learning rate of one prefix group in place.
    /// Moment estimates are untouched, so this is how a phase transition
    /// re-rates an optimizer without resetting it.
    pub fn set_group_lr(&mut self, prefix: &str, lr: f64) {
        if let Some(entry) = self.cfg.lr_groups.iter_mut().find(|(p, _)| p == prefix) {
            entry.1 = lr;
        } else {
            self.cfg.lr_groups.push((prefix.to_string(), lr));
        }
    }

    /// Apply one update. Only parameters present in `grads` are touched;
    /// everything else keeps its value and optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) {
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert!(p.same_shape(g), "gradient shape mismatch for {name}");
            let lr = self.cfg.lr_for(name);
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.rows, g.cols),
                v: Tensor::zeros(g.rows, g.cols),
                step: 0,
            });
            entry.step += 1;
            let t = entry.step as f64;
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            for i in 0..g.len() {
                let gi = g.data[i];
                entry.m.data[i] = b1 * entry.m.data[i] + (1.0 - b1) * gi;
                entry.v.data[i] = b2 * entry.v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = entry.m.data[i] / bc1;
                let vhat = entry.v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[i]);
            }
        }
    }
}
