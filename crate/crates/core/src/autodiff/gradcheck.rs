//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error among coordinates that failed the absolute gate.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Compare analytic gradients against central differences of `loss_fn`.
///
/// For each sampled coordinate the check passes outright when
/// `|fd - analytic| <= abs_tol` (covers near-zero gradients); otherwise the
/// relative error `|fd - analytic| / max(|fd|, |analytic|)` is recorded.
/// `samples_per_tensor` caps how many coordinates are probed per parameter
/// (0 means every coordinate).
pub fn finite_difference_check(
    params: &ParamSet,
    analytic: &IndexMap<String, Tensor>,
    mut loss_fn: impl FnMut(&ParamSet) -> f64,
    eps: f64,
    abs_tol: f64,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut scratch = params.clone();
    for (name, grad) in analytic {
        let n = grad.len();
        let indices: Vec<usize> = if samples_per_tensor == 0 || samples_per_tensor >= n {
            (0..n).collect()
        } else {
            // Sample without replacement to avoid double-probing.
            let mut picked = Vec::with_capacity(samples_per_tensor);
            let mut pool: Vec<usize> = (0..n).collect();
            for _ in 0..samples_per_tensor {
                let k = rng.gen_range(0..pool.len());
                picked.push(pool.swap_remove(k));
            }
            picked.sort_unstable();
            picked
        };
        for idx in indices {
            let orig = params.get(name).data[idx];
            scratch.get_mut(name).data[idx] = orig + eps;
            let up = loss_fn(&scratch);
            scratch.get_mut(name).data[idx] = orig - eps;
            let down = loss_fn(&scratch);
            scratch.get_mut(name).data[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grad.data[idx];
            report.coords_checked += 1;
            let diff = (fd - a).abs();
            if diff <= abs_tol {
                continue;
            }
            let rel = diff / fd.abs().max(a.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    report
}
