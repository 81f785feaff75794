//! Loss terms: adversarial, cycle-consistency, patch contrastive, and the
//! weighted total. The cyclic perceptual term lives in [`crate::perceptual`].

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{logsumexp, Tensor};

/// Weights of the four loss components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_cyc: f64,
    pub lambda_perceptual: f64,
    pub lambda_contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gan: 2.0,
            lambda_cyc: 10.0,
            lambda_perceptual: 0.1,
            lambda_contrastive: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_perceptual", self.lambda_perceptual),
            ("lambda_contrastive", self.lambda_contrastive),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid("loss weights", format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Adversarial objective form. The least-squares form is the default; the
/// log form is kept as a config alternative for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    #[default]
    LeastSquares,
    LogForm,
}

/// Loss over a discriminator's sigmoid score vector against a real/fake
/// target. Generators call this with `target_is_real = true` on fake
/// scores.
pub fn adversarial_loss<T: Scalar>(
    scores: &Tensor<T>,
    target_is_real: bool,
    form: AdversarialForm,
) -> Result<Tensor<T>> {
    if scores.value().is_empty() {
        return Err(Error::invalid("adversarial_loss", "empty score vector"));
    }
    let t = if target_is_real { T::one() } else { T::zero() };
    Ok(match form {
        AdversarialForm::LeastSquares => scores.add_scalar(-t).sqr().mean_all(),
        AdversarialForm::LogForm => {
            if target_is_real {
                scores.ln().mean_all().neg()
            } else {
                scores.neg().add_scalar(T::one()).ln().mean_all().neg()
            }
        }
    })
}

/// L1 reconstruction error summed over both cycle directions.
pub fn cycle_consistency_loss<T: Scalar>(
    a: &Tensor<T>,
    rec_a: &Tensor<T>,
    b: &Tensor<T>,
    rec_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    if a.shape() != rec_a.shape() {
        return Err(Error::shape("cycle loss (A)", &a.shape(), &rec_a.shape()));
    }
    if b.shape() != rec_b.shape() {
        return Err(Error::shape("cycle loss (B)", &b.shape(), &rec_b.shape()));
    }
    let la = rec_a.sub(a).abs().mean_all();
    let lb = rec_b.sub(b).abs().mean_all();
    Ok(la.add(&lb))
}

/// One contrastive comparison: `queries[i]` is pulled toward
/// `keys[positives[i]]` and pushed from every other key. Embeddings are
/// expected unit-norm so the dot product is the cosine similarity.
pub struct CclBatch<T: Scalar> {
    pub queries: Tensor<T>,
    pub keys: Tensor<T>,
    /// Key index of the positive for each query; identity for co-located
    /// patch batches.
    pub positives: Vec<usize>,
    pub tau: f64,
}

impl<T: Scalar> CclBatch<T> {
    /// Standard co-located batch: `positives[i] = i`.
    pub fn colocated(queries: Tensor<T>, keys: Tensor<T>, tau: f64) -> Self {
        let n = queries.shape()[0];
        CclBatch {
            queries,
            keys,
            positives: (0..n).collect(),
            tau,
        }
    }
}

/// InfoNCE over cosine similarities, averaged over queries.
pub fn ccl_loss<T: Scalar>(batch: &CclBatch<T>) -> Result<Tensor<T>> {
    if batch.tau <= 0.0 {
        return Err(Error::invalid(
            "ccl_loss",
            format!("temperature {} must be > 0", batch.tau),
        ));
    }
    let qs = batch.queries.shape();
    let ks = batch.keys.shape();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("ccl_loss", &qs, &ks));
    }
    let (m, n) = (qs[0], ks[0]);
    if batch.positives.len() != m || batch.positives.iter().any(|&p| p >= n) {
        return Err(Error::invalid(
            "ccl_loss",
            "positives must map each query to a valid key index",
        ));
    }
    // S[i, j] = q_i . k_j / tau
    let keys_t = batch.keys.reshape(&[n, ks[1]]);
    let sim = batch
        .queries
        .matmul(&keys_t.transpose2d())
        .scale(T::from_f64(1.0 / batch.tau));
    let mut mask = ArrayD::<T>::zeros(IxDyn(&[m, n]));
    for (i, &p) in batch.positives.iter().enumerate() {
        mask[[i, p]] = T::one();
    }
    let mask = sim.graph().constant(mask);
    let pos = sim.mul(&mask).sum_keep(&[1]);
    let lse = logsumexp(&sim, 1);
    Ok(lse.sub(&pos).mean_all())
}

/// Direct (non-tensor) evaluation of the one-query contrastive term; the
/// independent oracle tests compare against.
pub fn ccl_reference(sim_pos: f64, sims_neg: &[f64], tau: f64) -> f64 {
    let mut denom = (sim_pos / tau).exp();
    for s in sims_neg {
        denom += (s / tau).exp();
    }
    -((sim_pos / tau).exp() / denom).ln()
}

/// Raw loss components on one forward pass, pre-weighting.
pub struct LossParts<T: Scalar> {
    pub adversarial: Tensor<T>,
    pub cycle: Tensor<T>,
    pub perceptual: Tensor<T>,
    pub contrastive: Tensor<T>,
}

/// Raw and weighted values for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub adversarial: f64,
    pub cycle: f64,
    pub perceptual: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Weighted sum of the four parts. Rejects non-finite parts by name.
pub fn total_loss<T: Scalar>(
    parts: &LossParts<T>,
    weights: &LossWeights,
) -> Result<(Tensor<T>, LossBreakdown)> {
    weights.validate()?;
    let named: [(&str, &Tensor<T>, f64); 4] = [
        ("adversarial", &parts.adversarial, weights.lambda_gan),
        ("cycle", &parts.cycle, weights.lambda_cyc),
        ("perceptual", &parts.perceptual, weights.lambda_perceptual),
        ("contrastive", &parts.contrastive, weights.lambda_contrastive),
    ];
    let mut raw = [0.0f64; 4];
    for (i, (name, part, _)) in named.iter().enumerate() {
        let v = part.item().to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "total_loss".into(),
                detail: Some(format!("{name} term is {v}")),
            });
        }
        raw[i] = v;
    }
    let mut total = parts.adversarial.scale(T::from_f64(weights.lambda_gan));
    total = total.add(&parts.cycle.scale(T::from_f64(weights.lambda_cyc)));
    total = total.add(&parts.perceptual.scale(T::from_f64(weights.lambda_perceptual)));
    total = total.add(&parts.contrastive.scale(T::from_f64(weights.lambda_contrastive)));
    let breakdown = LossBreakdown {
        adversarial: raw[0],
        cycle: raw[1],
        perceptual: raw[2],
        contrastive: raw[3],
        total: total.item().to_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use crate::tensor::gradcheck::{check_gradients, GradCheckCfg};
    use crate::tensor::Graph;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_tensor(g: &Graph<f64>, vals: &[f64]) -> Tensor<f64> {
        g.constant(ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn adversarial_pins() {
        let g = Graph::new();
        let ones = vec_tensor(&g, &[1.0; 6]);
        let zeros = vec_tensor(&g, &[0.0; 6]);
        let half = vec_tensor(&g, &[0.5; 6]);
        let ls = AdversarialForm::LeastSquares;
        assert_abs_diff_eq!(adversarial_loss(&ones, true, ls).unwrap().item(), 0.0);
        assert_abs_diff_eq!(adversarial_loss(&zeros, true, ls).unwrap().item(), 1.0);
        assert_abs_diff_eq!(adversarial_loss(&half, true, ls).unwrap().item(), 0.25);
        assert_abs_diff_eq!(adversarial_loss(&half, false, ls).unwrap().item(), 0.25);

        let empty = g.constant(ArrayD::<f64>::zeros(IxDyn(&[0])));
        assert!(adversarial_loss(&empty, true, ls).is_err());
    }

    #[test]
    fn log_form_matches_direct_expression() {
        let g = Graph::new();
        let s = vec_tensor(&g, &[0.3, 0.9]);
        let real = adversarial_loss(&s, true, AdversarialForm::LogForm).unwrap();
        assert_abs_diff_eq!(
            real.item(),
            -(0.3f64.ln() + 0.9f64.ln()) / 2.0,
            epsilon = 1e-12
        );
        let fake = adversarial_loss(&s, false, AdversarialForm::LogForm).unwrap();
        assert_abs_diff_eq!(
            fake.item(),
            -(0.7f64.ln() + 0.1f64.ln()) / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cycle_loss_pins_and_symmetry() {
        let g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = g.constant(uniform::<f64>(&[3, 4, 4], 0.0, 1.0, &mut r));
        let b = g.constant(uniform::<f64>(&[3, 4, 4], 0.0, 1.0, &mut r));
        assert_abs_diff_eq!(
            cycle_consistency_loss(&a, &a, &b, &b).unwrap().item(),
            0.0
        );

        let rec_a = a.add_scalar(0.1);
        assert_abs_diff_eq!(
            cycle_consistency_loss(&a, &rec_a, &b, &b).unwrap().item(),
            0.1,
            epsilon = 1e-12
        );

        // symmetric under swapping the two direction pairs
        let rec_b = b.add_scalar(-0.05);
        let l1 = cycle_consistency_loss(&a, &rec_a, &b, &rec_b).unwrap().item();
        let l2 = cycle_consistency_loss(&b, &rec_b, &a, &rec_a).unwrap().item();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-15);

        let short = g.zeros(&[3, 4, 3]);
        assert!(cycle_consistency_loss(&a, &short, &b, &b).is_err());
    }

    #[test]
    fn ccl_equal_similarities_is_ln_of_key_count() {
        // 64 identical unit embeddings: every pairwise similarity equals 1,
        // so each query sees equal logits over 1 positive + 63 negatives.
        let g = Graph::new();
        let dim = 8;
        let mut e = ArrayD::<f64>::zeros(IxDyn(&[64, dim]));
        for i in 0..64 {
            e[[i, 0]] = 1.0;
        }
        let q = g.constant(e.clone());
        let k = g.constant(e);
        let loss = ccl_loss(&CclBatch::colocated(q, k, 0.07)).unwrap();
        assert_abs_diff_eq!(loss.item(), 64f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn ccl_scalar_probe_matches_reference() {
        // one query with sim+ = 0.9, negatives {0.1, -0.2}; embeddings are
        // constructed in 4-D so the cosine similarities are exact
        let g = Graph::new();
        let mut q = ArrayD::<f64>::zeros(IxDyn(&[1, 4]));
        q[[0, 0]] = 1.0;
        let sims = [0.9, 0.1, -0.2];
        let mut k = ArrayD::<f64>::zeros(IxDyn(&[3, 4]));
        for (j, s) in sims.iter().enumerate() {
            k[[j, 0]] = *s;
            k[[j, j + 1]] = (1.0 - s * s).sqrt();
        }
        let batch = CclBatch {
            queries: g.constant(q),
            keys: g.constant(k),
            positives: vec![0],
            tau: 0.07,
        };
        let loss = ccl_loss(&batch).unwrap().item();
        let expected = ccl_reference(0.9, &[0.1, -0.2], 0.07);
        assert!(expected > 1.0e-5 && expected < 1.2e-5, "oracle {expected}");
        assert!(
            (loss - expected).abs() / expected < 1e-6,
            "loss {loss} vs oracle {expected}"
        );
    }

    #[test]
    fn ccl_vanishes_when_positive_dominates_at_small_tau() {
        let g = Graph::new();
        let dim = 4;
        let n = 8;
        let mut q = ArrayD::<f64>::zeros(IxDyn(&[n, dim]));
        let mut k = ArrayD::<f64>::zeros(IxDyn(&[n, dim]));
        for i in 0..n {
            // q_i = k_i -> sim+ = 1; cross pairs orthogonal or negative
            let axis = i % dim;
            let sign = if i / dim == 0 { 1.0 } else { -1.0 };
            q[[i, axis]] = sign;
            k[[i, axis]] = sign;
        }
        let loss = ccl_loss(&CclBatch::colocated(
            g.constant(q),
            g.constant(k),
            1e-3,
        ))
        .unwrap();
        assert!(loss.item() < 1e-6, "loss {}", loss.item());
    }

    #[test]
    fn ccl_rejects_bad_temperature() {
        let g = Graph::<f64>::new();
        let e = g.constant(ArrayD::zeros(IxDyn(&[4, 4])));
        assert!(ccl_loss(&CclBatch::colocated(e.clone(), e, 0.0)).is_err());
    }

    #[test]
    fn ccl_gradcheck() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let q = uniform::<f64>(&[6, 5], -1.0, 1.0, &mut r);
        let k = uniform::<f64>(&[6, 5], -1.0, 1.0, &mut r);
        let out = check_gradients(&[q, k], GradCheckCfg::default(), &mut r, |_, leaves| {
            let batch = CclBatch::colocated(leaves[0].clone(), leaves[1].clone(), 0.07);
            ccl_loss(&batch).unwrap()
        });
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    #[test]
    fn total_loss_paper_weights_pin_and_linearity() {
        let g = Graph::new();
        let one = || g.scalar(1.0);
        let parts = LossParts {
            adversarial: one(),
            cycle: one(),
            perceptual: one(),
            contrastive: one(),
        };
        let w = LossWeights::default();
        let (total, breakdown) = total_loss(&parts, &w).unwrap();
        assert_abs_diff_eq!(total.item(), 12.4, epsilon = 1e-12);
        assert_abs_diff_eq!(breakdown.total, 12.4, epsilon = 1e-12);

        // zeros -> 0
        let zeros = LossParts {
            adversarial: g.scalar(0.0),
            cycle: g.scalar(0.0),
            perceptual: g.scalar(0.0),
            contrastive: g.scalar(0.0),
        };
        assert_abs_diff_eq!(total_loss(&zeros, &w).unwrap().0.item(), 0.0);

        // scaling one part by c moves the total by lambda * c exactly
        for c in [2.0, 5.0, -0.5] {
            let parts_c = LossParts {
                adversarial: one(),
                cycle: g.scalar(c),
                perceptual: one(),
                contrastive: one(),
            };
            let (t, _) = total_loss(&parts_c, &w).unwrap();
            assert_abs_diff_eq!(
                t.item() - total.item(),
                w.lambda_cyc * (c - 1.0),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn total_loss_rejects_non_finite_with_term_name() {
        let g = Graph::new();
        let parts = LossParts {
            adversarial: g.scalar(1.0),
            cycle: g.scalar(f64::NAN),
            perceptual: g.scalar(0.0),
            contrastive: g.scalar(0.0),
        };
        let msg = match total_loss(&parts, &LossWeights::default()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected rejection"),
        };
        assert!(msg.contains("cycle"), "{msg}");
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda_gan: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
