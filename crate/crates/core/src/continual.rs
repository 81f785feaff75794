//! Elastic weight consolidation and forgetting metrics.
//!
//! After each task, training snapshots the generator parameters and
//! estimates a diagonal empirical Fisher (mean squared per-sample gradient
//! of the full generator objective). Subsequent tasks add one quadratic
//! penalty per stored anchor; anchors accumulate rather than overwrite, so
//! task 3 trains against both the task-1 and task-2 anchors with their own
//! lambda values.

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamScope, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Deep copy of the scoped parameters at a task boundary.
#[derive(Debug, Clone)]
pub struct ParamSnapshot<T: Scalar> {
    pub task_id: String,
    pub values: IndexMap<String, ArrayD<T>>,
}

pub fn snapshot_params<T: Scalar>(
    store: &ParamStore<T>,
    scope: &ParamScope,
    task_id: &str,
) -> Result<ParamSnapshot<T>> {
    let names = scope.select_nonempty(store)?;
    let mut values = IndexMap::with_capacity(names.len());
    for name in names {
        values.insert(name.to_string(), (**store.get(name).unwrap()).clone());
    }
    Ok(ParamSnapshot {
        task_id: task_id.to_string(),
        values,
    })
}

/// Diagonal Fisher estimate; entries are nonnegative by construction.
#[derive(Debug, Clone)]
pub struct FisherDiagonal<T: Scalar> {
    pub task_id: String,
    pub importance: IndexMap<String, ArrayD<T>>,
    pub sample_count: usize,
}

/// Estimates the empirical diagonal Fisher over `n_samples` draws.
///
/// `sample_loss` builds the per-sample scalar objective inside a fresh
/// graph whose binding exposes the scoped parameters as trainable. The
/// accumulation order is fixed (sequential in sample index), so the result
/// is deterministic given the sampling seed inside `sample_loss`.
pub fn estimate_fisher<T: Scalar>(
    store: &ParamStore<T>,
    scope: &ParamScope,
    n_samples: usize,
    task_id: &str,
    mut sample_loss: impl FnMut(usize, &Graph<T>, &Binding<T>) -> Result<Tensor<T>>,
) -> Result<FisherDiagonal<T>> {
    if n_samples == 0 {
        return Err(Error::invalid("estimate_fisher", "n_samples must be > 0"));
    }
    let names: Vec<String> = scope
        .select_nonempty(store)?
        .into_iter()
        .map(String::from)
        .collect();
    let mut acc: IndexMap<String, ArrayD<T>> = names
        .iter()
        .map(|n| (n.clone(), ArrayD::zeros(store.get(n).unwrap().raw_dim())))
        .collect();

    for i in 0..n_samples {
        let graph = Graph::new();
        let binding = Binding::bind(&graph, store, scope);
        let loss = sample_loss(i, &graph, &binding)?;
        let value = loss.item().to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "estimate_fisher".into(),
                detail: Some(format!("loss at sample {i} is {value}")),
            });
        }
        let mut grads = loss.backward();
        let grad_map = binding.grads(&mut grads, scope);
        for (name, g) in grad_map {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "estimate_fisher".into(),
                    detail: Some(format!("gradient of {name} at sample {i}")),
                });
            }
            let slot = acc.get_mut(&name).expect("scoped name");
            slot.zip_mut_with(&g, |a, &b| *a = *a + b * b);
        }
    }
    let inv = T::from_f64(1.0 / n_samples as f64);
    for v in acc.values_mut() {
        v.mapv_inplace(|x| x * inv);
    }
    Ok(FisherDiagonal {
        task_id: task_id.to_string(),
        importance: acc,
        sample_count: n_samples,
    })
}

/// One stored task anchor: parameters, importances, and penalty strength.
#[derive(Debug, Clone)]
pub struct EwcAnchor<T: Scalar> {
    pub snapshot: ParamSnapshot<T>,
    pub fisher: FisherDiagonal<T>,
    pub lambda: f64,
}

impl<T: Scalar> EwcAnchor<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, theta) in &self.snapshot.values {
            match self.fisher.importance.get(name) {
                None => {
                    return Err(Error::invalid(
                        "ewc anchor",
                        format!("fisher missing entry for {name}"),
                    ))
                }
                Some(f) if f.shape() != theta.shape() => {
                    return Err(Error::shape(
                        format!("ewc anchor {name}"),
                        theta.shape(),
                        f.shape(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// `sum_anchors lambda/2 * sum_i F_i (theta_i - theta*_i)^2` over the live
/// bound parameters; differentiable through the binding.
pub fn ewc_penalty<T: Scalar>(
    graph: &Graph<T>,
    binding: &Binding<T>,
    anchors: &[EwcAnchor<T>],
) -> Result<Tensor<T>> {
    let mut total = graph.scalar(T::zero());
    for anchor in anchors {
        anchor.validate()?;
        let mut anchor_term = graph.scalar(T::zero());
        for (name, theta_star) in &anchor.snapshot.values {
            let live = binding.get(name);
            if live.shape() != theta_star.shape() {
                return Err(Error::shape(
                    format!("ewc penalty {name}"),
                    theta_star.shape(),
                    &live.shape(),
                ));
            }
            let anchor_t = graph.constant(theta_star.clone());
            let fisher_t = graph.constant(anchor.fisher.importance[name.as_str()].clone());
            let term = live.sub(&anchor_t).sqr().mul(&fisher_t).sum_all();
            anchor_term = anchor_term.add(&term);
        }
        total = total.add(&anchor_term.scale(T::from_f64(anchor.lambda / 2.0)));
    }
    Ok(total)
}

/// Convenience: penalty value without an existing graph.
pub fn ewc_penalty_value<T: Scalar>(
    store: &ParamStore<T>,
    scope: &ParamScope,
    anchors: &[EwcAnchor<T>],
) -> Result<f64> {
    let graph = Graph::new();
    let binding = Binding::bind(&graph, store, scope);
    Ok(ewc_penalty(&graph, &binding, anchors)?.item().to_f64())
}

// ---------------------------------------------------------------------------
// forgetting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Psnr,
    Ssim,
}

impl MetricKind {
    pub fn label(&self) -> &'static str {
        match self {
            MetricKind::Psnr => "PSNR",
            MetricKind::Ssim => "SSIM",
        }
    }
}

/// A performance measurement tagged with its task and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
}

/// `P_end - P_post`; the labels of both measurements must match.
pub fn forgetting(p_end: &Measured, p_post: &Measured) -> Result<f64> {
    if p_end.task != p_post.task || p_end.metric != p_post.metric {
        return Err(Error::invalid(
            "forgetting",
            format!(
                "label mismatch: ({}, {:?}) vs ({}, {:?})",
                p_end.task, p_end.metric, p_post.task, p_post.metric
            ),
        ));
    }
    Ok(p_end.value - p_post.value)
}

/// One forgetting entry: task `task_index` re-evaluated after task
/// `after_index` finished training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingCell {
    pub task: String,
    pub task_index: usize,
    pub after_index: usize,
    pub metric: MetricKind,
    pub p_end: f64,
    pub p_post: f64,
    pub forgetting: f64,
}

/// Forgetting table for one continual configuration, mirroring the
/// F-PSNR/F-SSIM (T1->2), (T2->3), (T1->3) column structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub config_label: String,
    /// Anchor strengths in task order (lambda_1 after task 1, ...).
    pub lambdas: Vec<f64>,
    pub task_names: Vec<String>,
    pub cells: Vec<ForgettingCell>,
    /// Final per-task evaluations at the end of the whole sequence.
    pub final_eval: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ForgettingReport {
    pub fn cell(&self, task_index: usize, after_index: usize, metric: MetricKind) -> Option<&ForgettingCell> {
        self.cells.iter().find(|c| {
            c.task_index == task_index && c.after_index == after_index && c.metric == metric
        })
    }

    /// Verifies `forgetting == p_end - p_post` for every cell.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        for c in &self.cells {
            let expect = c.p_end - c.p_post;
            if (c.forgetting - expect).abs() > tol {
                return Err(Error::invalid(
                    "forgetting report",
                    format!(
                        "cell T{}->{} {} stores {} but P_end - P_post = {}",
                        c.task_index + 1,
                        c.after_index + 1,
                        c.metric.label(),
                        c.forgetting,
                        expect
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Column header used in both the rendered table and the JSON schema,
    /// e.g. `F-PSNR (haze T1->2)`.
    pub fn column_name(&self, cell: &ForgettingCell) -> String {
        format!(
            "F-{} ({} T{}->{})",
            cell.metric.label(),
            cell.task,
            cell.task_index + 1,
            cell.after_index + 1
        )
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28}", "Configuration"));
        for c in &self.cells {
            out.push_str(&format!(" {:>24}", self.column_name(c)));
        }
        out.push('\n');
        out.push_str(&format!("{:<28}", self.config_label));
        for c in &self.cells {
            out.push_str(&format!(" {:>24.4}", c.forgetting));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;

    fn scalar_store(entries: &[(&str, f64)]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, v) in entries {
            store.insert(*name, ArrayD::from_elem(IxDyn(&[1]), *v));
        }
        store
    }

    #[test]
    fn snapshot_is_isolated_and_name_complete() {
        let mut store = scalar_store(&[("gA.w", 1.5), ("gB.w", -0.5), ("dA.w", 3.0)]);
        let scope = ParamScope::generators();
        let snap = snapshot_params(&store, &scope, "t1").unwrap();
        assert_eq!(
            snap.values.keys().collect::<Vec<_>>(),
            vec!["gA.w", "gB.w"]
        );

        let snap2 = snapshot_params(&store, &scope, "t1").unwrap();
        assert_eq!(snap.values, snap2.values);

        store.update("gA.w", |a| a.fill(0.0));
        assert_eq!(snap.values["gA.w"][[0]], 1.5);
    }

    #[test]
    fn snapshot_rejects_empty_scope() {
        let store = scalar_store(&[("dA.w", 1.0)]);
        assert!(snapshot_params(&store, &ParamScope::generators(), "t1").is_err());
    }

    #[test]
    fn fisher_toy_case_is_exact() {
        // loss(theta) = theta * x for x in {1, 2}: grad = x, F = (1+4)/2
        let store = scalar_store(&[("gA.theta", 0.7)]);
        let scope = ParamScope::generators();
        let xs = [1.0, 2.0];
        let fisher = estimate_fisher(&store, &scope, 2, "t1", |i, g, bind| {
            let x = g.scalar(xs[i]);
            Ok(bind.get("gA.theta").mul(&x).sum_all())
        })
        .unwrap();
        assert_abs_diff_eq!(fisher.importance["gA.theta"][[0]], 2.5);
        assert_eq!(fisher.sample_count, 2);
    }

    #[test]
    fn fisher_of_unused_parameter_is_zero_and_duplication_invariant() {
        let store = scalar_store(&[("gA.used", 0.3), ("gA.unused", 0.9)]);
        let scope = ParamScope::generators();
        let make = |xs: Vec<f64>| {
            estimate_fisher(&store, &scope, xs.len(), "t1", |i, g, bind| {
                let x = g.scalar(xs[i]);
                Ok(bind.get("gA.used").mul(&x).sum_all())
            })
            .unwrap()
        };
        let f1 = make(vec![1.0, 2.0]);
        assert_eq!(f1.importance["gA.unused"][[0]], 0.0);

        let f2 = make(vec![1.0, 2.0, 1.0, 2.0]);
        assert_abs_diff_eq!(
            f1.importance["gA.used"][[0]],
            f2.importance["gA.used"][[0]],
            epsilon = 1e-12
        );
    }

    #[test]
    fn fisher_rejects_zero_samples() {
        let store = scalar_store(&[("gA.w", 0.0)]);
        assert!(
            estimate_fisher(&store, &ParamScope::generators(), 0, "t", |_, g, _| Ok(g
                .scalar(0.0)))
            .is_err()
        );
    }

    fn unit_anchor(value: f64, fisher: f64, lambda: f64) -> EwcAnchor<f64> {
        let mut values = IndexMap::new();
        values.insert("gA.w".to_string(), ArrayD::from_elem(IxDyn(&[1]), value));
        let mut importance = IndexMap::new();
        importance.insert("gA.w".to_string(), ArrayD::from_elem(IxDyn(&[1]), fisher));
        EwcAnchor {
            snapshot: ParamSnapshot {
                task_id: "t1".into(),
                values,
            },
            fisher: FisherDiagonal {
                task_id: "t1".into(),
                importance,
                sample_count: 1,
            },
            lambda,
        }
    }

    #[test]
    fn penalty_zero_at_anchor_and_single_param_arithmetic() {
        let store = scalar_store(&[("gA.w", 0.5)]);
        let scope = ParamScope::generators();
        let at_anchor = unit_anchor(0.5, 2.0, 750.0);
        assert_abs_diff_eq!(
            ewc_penalty_value(&store, &scope, &[at_anchor]).unwrap(),
            0.0
        );

        // lambda = 750, F = 2, delta = 0.1 -> 750/2 * 2 * 0.01 = 7.5
        let off = unit_anchor(0.4, 2.0, 750.0);
        assert_abs_diff_eq!(
            ewc_penalty_value(&store, &scope, &[off]).unwrap(),
            7.5,
            epsilon = 1e-10
        );
    }

    #[test]
    fn penalty_gradient_is_lambda_fisher_delta() {
        let store = scalar_store(&[("gA.w", 0.5)]);
        let scope = ParamScope::generators();
        let anchor = unit_anchor(0.4, 2.0, 750.0);
        let graph = Graph::new();
        let binding = Binding::bind(&graph, &store, &scope);
        let penalty = ewc_penalty(&graph, &binding, &[anchor]).unwrap();
        let mut grads = penalty.backward();
        let g = binding.grads(&mut grads, &scope);
        // d/d theta [lambda/2 F (theta-theta*)^2] = lambda F delta
        assert_abs_diff_eq!(g["gA.w"][[0]], 750.0 * 2.0 * 0.1, epsilon = 1e-9);
    }

    #[test]
    fn penalty_accumulates_anchors_and_monotone_on_rays() {
        let store = scalar_store(&[("gA.w", 0.5)]);
        let scope = ParamScope::generators();
        let anchors = vec![unit_anchor(0.4, 2.0, 700.0), unit_anchor(0.3, 1.0, 800.0)];
        let both = ewc_penalty_value(&store, &scope, &anchors).unwrap();
        let first = ewc_penalty_value(&store, &scope, &anchors[..1]).unwrap();
        let second = ewc_penalty_value(&store, &scope, &anchors[1..]).unwrap();
        assert_abs_diff_eq!(both, first + second, epsilon = 1e-10);

        // quadratic form with PSD diagonal: nondecreasing along rays from
        // the anchor
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dir: f64 = rng.random_range(-1.0..1.0);
            let anchor = unit_anchor(0.4, rng.random_range(0.0..3.0), 750.0);
            let mut last = -1.0;
            for t in [0.0, 0.25, 0.5, 1.0, 2.0] {
                let mut s = scalar_store(&[("gA.w", 0.4 + t * dir)]);
                s.update("gA.w", |_| {});
                let p = ewc_penalty_value(&s, &scope, &[anchor.clone()]).unwrap();
                assert!(p >= last - 1e-12, "t={t}: {p} < {last}");
                last = p;
            }
        }
    }

    #[test]
    fn penalty_rejects_shape_mismatch() {
        let mut store = ParamStore::<f64>::new();
        store.insert("gA.w", ArrayD::zeros(IxDyn(&[2])));
        let anchor = unit_anchor(0.0, 1.0, 1.0); // shape [1]
        assert!(ewc_penalty_value(&store, &ParamScope::generators(), &[anchor]).is_err());
    }

    #[test]
    fn forgetting_arithmetic_and_label_checks() {
        let end = Measured {
            task: "haze".into(),
            metric: MetricKind::Psnr,
            value: 10.0,
        };
        let post8 = Measured {
            value: 8.0,
            ..end.clone()
        };
        assert_abs_diff_eq!(forgetting(&end, &post8).unwrap(), 2.0);
        let same = Measured {
            value: 10.0,
            ..end.clone()
        };
        assert_abs_diff_eq!(forgetting(&end, &same).unwrap(), 0.0);

        let wrong_metric = Measured {
            metric: MetricKind::Ssim,
            ..post8.clone()
        };
        assert!(forgetting(&end, &wrong_metric).is_err());
        let wrong_task = Measured {
            task: "rain".into(),
            ..post8
        };
        assert!(forgetting(&end, &wrong_task).is_err());
    }

    #[test]
    fn report_carries_table_v_fields() {
        // Schema pin: the report must carry exactly the six forgetting
        // columns with the published reference values representable.
        let tasks = ["ITS", "SRRS", "Rain100H"];
        let mk = |task: usize, after: usize, metric, p_end: f64, f: f64| ForgettingCell {
            task: tasks[task].into(),
            task_index: task,
            after_index: after,
            metric,
            p_end,
            p_post: p_end - f,
            forgetting: f,
        };
        let report = ForgettingReport {
            config_label: "lambda1=700, lambda2=800".into(),
            lambdas: vec![700.0, 800.0],
            task_names: tasks.iter().map(|s| s.to_string()).collect(),
            cells: vec![
                mk(0, 1, MetricKind::Psnr, 32.31, 3.39),
                mk(0, 1, MetricKind::Ssim, 0.9697, 0.0131),
                mk(1, 2, MetricKind::Psnr, 35.53, 1.49),
                mk(1, 2, MetricKind::Ssim, 0.9432, 0.0133),
                mk(0, 2, MetricKind::Psnr, 32.31, 4.96),
                mk(0, 2, MetricKind::Ssim, 0.9697, 0.0404),
            ],
            final_eval: BTreeMap::new(),
        };
        report.check_consistency(1e-9).unwrap();
        assert_abs_diff_eq!(
            report.cell(0, 2, MetricKind::Psnr).unwrap().forgetting,
            4.96
        );
        assert_abs_diff_eq!(
            report.cell(0, 2, MetricKind::Ssim).unwrap().forgetting,
            0.0404
        );
        let table = report.render_table();
        assert!(table.contains("F-PSNR (ITS T1->2)"), "{table}");
        assert!(table.contains("F-SSIM (SRRS T2->3)"), "{table}");
        assert!(table.contains("F-PSNR (ITS T1->3)"), "{table}");
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"p_end\"") && json.contains("\"forgetting\""));
    }
}
