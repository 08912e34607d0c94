//! Named parameter storage and tape binding.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;

/// Ordered map of named parameters. Iteration order is insertion order,
/// which keeps optimizer traversal and snapshots deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn tensor_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    /// Merge another set under a name prefix (`prefix.name`).
    pub fn adopt(&mut self, prefix: &str, other: ParamSet) {
        for (name, value) in other.entries {
            self.insert(format!("{prefix}.{name}"), value);
        }
    }
}

/// Forward-pass view of a `ParamSet`: every tensor inserted into the tape
/// as a leaf, addressable by name.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut vars = IndexMap::new();
        for (name, value) in params.iter() {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }

    /// Collect per-parameter gradients after a backward pass. Parameters the
    /// loss never touched get zero tensors.
    pub fn gradients(&self, grads: &Grads, tape: &Tape) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get(v, tape)))
            .collect()
    }
}

/// Gaussian init, Box-Muller over the ChaCha stream.
pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor { rows, cols, data }
}

/// Kaiming-style uniform init scaled by fan-in, the default for linear maps.
pub fn init_linear(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let bound = (1.0 / in_dim as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor { rows: out_dim, cols: in_dim, data }
}
