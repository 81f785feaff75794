//! Central finite-difference gradient verification.
//!
//! Used by unit tests and the acceptance suite: every differentiable block
//! must agree with the two-sided quotient at f64 to a relative tolerance.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckCfg {
    pub eps: f64,
    /// Max coordinates probed per leaf (sampled without replacement).
    pub max_coords_per_leaf: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            eps: 1e-5,
            max_coords_per_leaf: 24,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckOutcome {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares autodiff gradients of `build`'s scalar output against central
/// finite differences over every leaf, probing a random subset of
/// coordinates per leaf.
pub fn check_gradients<F>(
    leaves: &[ArrayD<f64>],
    cfg: GradCheckCfg,
    rng: &mut ChaCha8Rng,
    build: F,
) -> GradCheckOutcome
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let g = Graph::new();
        let ts: Vec<Tensor<f64>> = arrays.iter().map(|a| g.leaf(a.clone(), false)).collect();
        build(&g, &ts).item()
    };

    // Analytic pass.
    let g = Graph::new();
    let ts: Vec<Tensor<f64>> = leaves.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let loss = build(&g, &ts);
    let grads = loss.backward();
    let analytic: Vec<ArrayD<f64>> = ts
        .iter()
        .map(|t| {
            grads
                .get(t)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(t.value().raw_dim()))
        })
        .collect();

    let mut outcome = GradCheckOutcome::default();
    let mut work: Vec<ArrayD<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.len();
        let count = n.min(cfg.max_coords_per_leaf);
        let mut picked: Vec<usize> = (0..n).collect();
        // partial Fisher-Yates
        for i in 0..count {
            let j = rng.random_range(i..n);
            picked.swap(i, j);
        }
        for &ci in picked.iter().take(count) {
            let orig = leaf.as_slice().unwrap()[ci];
            work[li].as_slice_mut().unwrap()[ci] = orig + cfg.eps;
            let fp = eval(&work);
            work[li].as_slice_mut().unwrap()[ci] = orig - cfg.eps;
            let fm = eval(&work);
            work[li].as_slice_mut().unwrap()[ci] = orig;
            let fd = (fp - fm) / (2.0 * cfg.eps);
            let ad = analytic[li].as_slice().unwrap()[ci];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(cfg.floor);
            if rel > outcome.max_rel_err {
                outcome.max_rel_err = rel;
            }
            outcome.coords_checked += 1;
        }
    }
    outcome
}
