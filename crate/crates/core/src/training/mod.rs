//! Optimization loop: Adam with cosine learning-rate decay, CycleGAN-style
//! alternation with a generated-image history pool, EWC-aware generator
//! updates, and bitwise-reproducible checkpoints.

mod continual_run;
mod task;

pub use continual_run::{run_continual, ContinualRunCfg, TaskRunSummary};
pub use task::{evaluate_on_task, SynthTask, TaskData, TaskSpec};

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::archive::Archive;
use crate::continual::{EwcAnchor, FisherDiagonal, ParamSnapshot};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, Networks, TAP_POINTS};
use crate::objectives::{
    adversarial_loss, ccl_loss, cycle_consistency_loss, total_loss, AdversarialForm, CclBatch,
    LossParts, LossWeights,
};
use crate::params::{Binding, ParamScope, ParamStore};
use crate::perceptual::{perceptual_loss, PerceptualExtractor};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Training hyperparameters; field names mirror the config file keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub crop: usize,
    pub weights: LossWeights,
    pub adversarial_form: AdversarialForm,
    pub pool_size: usize,
    pub ccl_tau: f64,
    pub ccl_patches: usize,
    /// Contrast both cycle halves (input->translated and
    /// translated->reconstructed) rather than only the first.
    pub ccl_both_halves: bool,
    pub seed: u64,
    /// 0 = checkpoint only at the end of a run.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr_start: 1e-4,
            lr_end: 5e-5,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch: 1,
            crop: 256,
            weights: LossWeights::default(),
            adversarial_form: AdversarialForm::default(),
            pool_size: 50,
            ccl_tau: 0.07,
            ccl_patches: 64,
            ccl_both_halves: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be > 0".into()));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::Config(format!(
                "train.lr_end {} must be <= train.lr_start {}",
                self.lr_end, self.lr_start
            )));
        }
        if self.batch != 1 {
            return Err(Error::Config("train.batch must be 1".into()));
        }
        if self.crop % 4 != 0 {
            return Err(Error::Config("train.crop must be divisible by 4".into()));
        }
        self.weights.validate()
    }
}

/// Cosine decay from `lr_start` to `lr_end` over `total` iterations;
/// clamped to `lr_end` past the end.
pub fn lr_at(iteration: u64, total: usize, lr_start: f64, lr_end: f64) -> f64 {
    if iteration >= total as u64 {
        return lr_end;
    }
    let progress = iteration as f64 / total as f64;
    lr_end + (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Adam optimizer state for one parameter group.
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, ArrayD<T>>,
    v: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Moments are allocated eagerly for every name so checkpoints always
    /// carry the complete optimizer state.
    pub fn new(cfg: &TrainConfig, store: &ParamStore<T>, scope: &ParamScope) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, value) in store.iter() {
            if scope.matches(name) {
                m.insert(name.to_string(), ArrayD::zeros(value.raw_dim()));
                v.insert(name.to_string(), ArrayD::zeros(value.raw_dim()));
            }
        }
        Adam {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, ArrayD<T>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (name, g) in grads {
            let m = self.m.get_mut(name).unwrap_or_else(|| panic!("no moment for {name}"));
            let v = self.v.get_mut(name).unwrap_or_else(|| panic!("no moment for {name}"));
            m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + one_m_b1 * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + one_m_b2 * gi * gi);
            store.update(name, |theta| {
                ndarray::Zip::from(theta)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|t_i, &m_i, &v_i| {
                        let m_hat = m_i / bc1;
                        let v_hat = v_i / bc2;
                        *t_i = *t_i - lr_t * m_hat / (v_hat.sqrt() + eps);
                    });
            });
        }
    }

    fn export(&self, archive: &mut Archive<T>, tag: &str) {
        archive.set_meta(format!("opt.{tag}.t"), self.t);
        for (name, m) in &self.m {
            archive.insert(format!("opt.{tag}.m.{name}"), m.clone());
        }
        for (name, v) in &self.v {
            archive.insert(format!("opt.{tag}.v.{name}"), v.clone());
        }
    }

    fn import(&mut self, archive: &Archive<T>, tag: &str, path: &str) -> Result<()> {
        let t_key = format!("opt.{tag}.t");
        self.t = archive
            .meta(&t_key)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Archive {
                path: path.into(),
                message: format!("missing {t_key}"),
            })?;
        for (name, m) in self.m.iter_mut() {
            let key = format!("opt.{tag}.m.{name}");
            let stored = archive.tensors.get(key.as_str()).ok_or_else(|| Error::Archive {
                path: path.into(),
                message: format!("missing {key}"),
            })?;
            *m = stored.clone();
        }
        for (name, v) in self.v.iter_mut() {
            let key = format!("opt.{tag}.v.{name}");
            let stored = archive.tensors.get(key.as_str()).ok_or_else(|| Error::Archive {
                path: path.into(),
                message: format!("missing {key}"),
            })?;
            *v = stored.clone();
        }
        Ok(())
    }
}

/// CycleGAN history pool: discriminators see a mix of fresh and stored
/// generated images.
pub struct ImagePool<T: Scalar> {
    capacity: usize,
    images: Vec<ArrayD<T>>,
}

impl<T: Scalar> ImagePool<T> {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn query(&mut self, img: ArrayD<T>, rng: &mut rand_chacha::ChaCha8Rng) -> ArrayD<T> {
        use rand::Rng;
        if self.capacity == 0 {
            return img;
        }
        if self.images.len() < self.capacity {
            self.images.push(img.clone());
            return img;
        }
        if rng.random_bool(0.5) {
            let idx = rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[idx], img)
        } else {
            img
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generator objective plus the detached translations for the pools.
pub struct ObjectiveOutcome<T: Scalar> {
    pub total: Tensor<T>,
    pub breakdown: crate::objectives::LossBreakdown,
    pub ewc: f64,
    pub fake_a: ArrayD<T>,
    pub fake_b: ArrayD<T>,
}

/// One line of the training log (serialized as JSONL).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub task: String,
    pub lr: f64,
    pub adversarial: f64,
    pub cycle: f64,
    pub perceptual: f64,
    pub contrastive: f64,
    pub ewc: f64,
    pub total: f64,
    pub loss_d_a: f64,
    pub loss_d_b: f64,
}

/// Live training state: networks, parameters, optimizers, pools, anchors.
pub struct Trainer<T: Scalar> {
    pub nets: Networks,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub extractor: PerceptualExtractor<T>,
    pub opt_g: Adam<T>,
    pub opt_da: Adam<T>,
    pub opt_db: Adam<T>,
    /// Iteration within the current task (drives the schedule and all
    /// derived RNG streams).
    pub iteration: u64,
    pub task_id: String,
    pub anchors: Vec<EwcAnchor<T>>,
    pool_a: ImagePool<T>,
    pool_b: ImagePool<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        extractor: PerceptualExtractor<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::new(&model_cfg)?;
        let store = nets.init_params::<T>(cfg.seed);
        let opt_g = Adam::new(&cfg, &store, &ParamScope::generator_update());
        let opt_da = Adam::new(&cfg, &store, &ParamScope::discriminator("dA"));
        let opt_db = Adam::new(&cfg, &store, &ParamScope::discriminator("dB"));
        let pool = cfg.pool_size;
        Ok(Trainer {
            nets,
            model_cfg,
            cfg,
            store,
            extractor,
            opt_g,
            opt_da,
            opt_db,
            iteration: 0,
            task_id: "task".into(),
            anchors: Vec::new(),
            pool_a: ImagePool::new(pool),
            pool_b: ImagePool::new(pool),
        })
    }

    fn rng(&self, stream: &str, step: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.cfg.seed, stream, step)
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(
            self.iteration,
            self.cfg.iterations,
            self.cfg.lr_start,
            self.cfg.lr_end,
        )
    }

    /// Contrastive term between two tap sets at co-located positions.
    fn ccl_term(
        &self,
        bind: &Binding<T>,
        queries: &crate::networks::GeneratorTaps<T>,
        keys: &crate::networks::GeneratorTaps<T>,
        term: &str,
        step: u64,
    ) -> Result<Tensor<T>> {
        let graph = queries.t1.graph().clone();
        let mut acc = graph.scalar(T::zero());
        for (tap_idx, (q_tap, k_tap)) in queries.all().iter().zip(keys.all().iter()).enumerate() {
            let shape = q_tap.shape();
            let mut rng = self.rng(&format!("ccl.{term}.t{tap_idx}"), step);
            let locations = crate::networks::sample_locations(
                shape[1],
                shape[2],
                self.cfg.ccl_patches,
                &mut rng,
            )?;
            let head = &self.nets.proj[tap_idx];
            let q = head.forward(bind, q_tap, &locations)?;
            let k = head.forward(bind, k_tap, &locations)?;
            let loss = ccl_loss(&CclBatch::colocated(q, k, self.cfg.ccl_tau))?;
            acc = acc.add(&loss);
        }
        Ok(acc.scale(T::from_f64(1.0 / TAP_POINTS as f64)))
    }

    /// Builds the full generator objective (weighted total + EWC penalty)
    /// on one unpaired image pair. Shared by the training step and Fisher
    /// estimation; discriminators are consumed frozen.
    pub fn generator_objective(
        &self,
        graph: &Graph<T>,
        bind: &Binding<T>,
        a_img: &Tensor<T>,
        b_img: &Tensor<T>,
        step: u64,
        stream_prefix: &str,
    ) -> Result<ObjectiveOutcome<T>> {
        let key = |s: &str| format!("{stream_prefix}.{s}");

        let (fake_b, taps_a) = self.nets.g_a.forward(bind, a_img, true)?;
        let (rec_a, taps_fb) = self.nets.g_b.forward(bind, &fake_b, true)?;
        let (fake_a, taps_b) = self.nets.g_b.forward(bind, b_img, true)?;
        let (rec_b, taps_fa) = self.nets.g_a.forward(bind, &fake_a, true)?;
        let (taps_a, taps_fb) = (taps_a.unwrap(), taps_fb.unwrap());
        let (taps_b, taps_fa) = (taps_b.unwrap(), taps_fa.unwrap());

        let d_b_fake =
            self.nets
                .d_b
                .forward(bind, &fake_b, &mut self.rng(&key("patch.dB"), step))?;
        let d_a_fake =
            self.nets
                .d_a
                .forward(bind, &fake_a, &mut self.rng(&key("patch.dA"), step))?;
        let adv = adversarial_loss(&d_b_fake.scores, true, self.cfg.adversarial_form)?.add(
            &adversarial_loss(&d_a_fake.scores, true, self.cfg.adversarial_form)?,
        );

        let cycle = cycle_consistency_loss(a_img, &rec_a, b_img, &rec_b)?;
        let perceptual = perceptual_loss(&self.extractor, a_img, &rec_a, b_img, &rec_b)?;

        // Contrastive terms. First halves: translated image encoded by the
        // opposite generator vs the input encoded by its own generator.
        // Second halves: the cycle reconstruction re-encoded vs the
        // intermediate translation.
        let mut ccl = self
            .ccl_term(bind, &taps_fb, &taps_a, "h1a", step)?
            .add(&self.ccl_term(bind, &taps_fa, &taps_b, "h1b", step)?);
        let mut n_terms = 2.0;
        if self.cfg.ccl_both_halves {
            let (taps_ra, _) = self.nets.g_a.encode_taps(bind, &rec_a)?;
            let (taps_rb, _) = self.nets.g_b.encode_taps(bind, &rec_b)?;
            ccl = ccl
                .add(&self.ccl_term(bind, &taps_ra, &taps_fb, "h2a", step)?)
                .add(&self.ccl_term(bind, &taps_rb, &taps_fa, "h2b", step)?);
            n_terms = 4.0;
        }
        let ccl = ccl.scale(T::from_f64(1.0 / n_terms));

        let parts = LossParts {
            adversarial: adv,
            cycle,
            perceptual,
            contrastive: ccl,
        };
        let (mut total, breakdown) = total_loss(&parts, &self.cfg.weights)?;
        let mut ewc_value = 0.0;
        if !self.anchors.is_empty() {
            let penalty = crate::continual::ewc_penalty(graph, bind, &self.anchors)?;
            ewc_value = penalty.item().to_f64();
            if !ewc_value.is_finite() {
                return Err(Error::non_finite("ewc penalty"));
            }
            total = total.add(&penalty);
        }
        Ok(ObjectiveOutcome {
            total,
            breakdown,
            ewc: ewc_value,
            fake_a: (*fake_a.value()).clone(),
            fake_b: (*fake_b.value()).clone(),
        })
    }

    fn discriminator_step(
        &mut self,
        tag: &str,
        real: &ArrayD<T>,
        fake: &ArrayD<T>,
        lr: f64,
        step: u64,
    ) -> Result<f64> {
        let graph = Graph::new();
        let scope = ParamScope::discriminator(tag);
        let bind = Binding::bind(&graph, &self.store, &scope);
        let disc = if tag == "dA" {
            &self.nets.d_a
        } else {
            &self.nets.d_b
        };
        let real_t = graph.constant(real.clone());
        let fake_t = graph.constant(fake.clone());
        let real_out = disc.forward(&bind, &real_t, &mut self.rng(&format!("patch.{tag}.real"), step))?;
        let fake_out = disc.forward(&bind, &fake_t, &mut self.rng(&format!("patch.{tag}.fake"), step))?;
        let form = self.cfg.adversarial_form;
        let loss = adversarial_loss(&real_out.scores, true, form)?
            .add(&adversarial_loss(&fake_out.scores, false, form)?)
            .scale(T::from_f64(0.5 * self.cfg.weights.lambda_gan));
        let value = loss.item().to_f64();
        if !value.is_finite() {
            return Err(Error::non_finite(format!("{tag} loss")));
        }
        let mut grads = loss.backward();
        let grad_map = bind.grads(&mut grads, &scope);
        let opt = if tag == "dA" {
            &mut self.opt_da
        } else {
            &mut self.opt_db
        };
        opt.step(&mut self.store, &grad_map, lr);
        Ok(value)
    }

    /// One full alternation: generator update (total loss + EWC), then one
    /// update per discriminator with history-pool fakes.
    pub fn train_step(&mut self, degraded: &Image, clean: &Image) -> Result<StepRecord> {
        let step = self.iteration;
        let lr = self.current_lr();

        let a_arr = degraded.to_network::<T>();
        let b_arr = clean.to_network::<T>();

        // generator update
        let graph = Graph::new();
        let g_scope = ParamScope::generator_update();
        let bind = Binding::bind(&graph, &self.store, &g_scope);
        let a_t = graph.constant(a_arr.clone());
        let b_t = graph.constant(b_arr.clone());
        let outcome = self.generator_objective(&graph, &bind, &a_t, &b_t, step, "train")?;
        let ObjectiveOutcome {
            total,
            breakdown,
            ewc: ewc_value,
            fake_a: fake_a_arr,
            fake_b: fake_b_arr,
        } = outcome;

        let mut grads = total.backward();
        let grad_map = bind.grads(&mut grads, &g_scope);
        drop(grads);
        drop(bind);
        drop(graph);
        self.opt_g.step(&mut self.store, &grad_map, lr);
        drop(grad_map);

        // discriminator updates on pooled fakes
        let pooled_a = self
            .pool_a
            .query(fake_a_arr, &mut self.rng("pool.a", step));
        let pooled_b = self
            .pool_b
            .query(fake_b_arr, &mut self.rng("pool.b", step));
        let loss_d_a = self.discriminator_step("dA", &a_arr, &pooled_a, lr, step)?;
        let loss_d_b = self.discriminator_step("dB", &b_arr, &pooled_b, lr, step)?;

        self.iteration += 1;
        Ok(StepRecord {
            iteration: step,
            task: self.task_id.clone(),
            lr,
            adversarial: breakdown.adversarial,
            cycle: breakdown.cycle,
            perceptual: breakdown.perceptual,
            contrastive: breakdown.contrastive,
            ewc: ewc_value,
            total: breakdown.total + ewc_value,
            loss_d_a,
            loss_d_b,
        })
    }

    /// Inference: restore one image with G_A (degraded -> clean).
    pub fn restore(&self, degraded: &Image) -> Result<Image> {
        let graph = Graph::new();
        let bind = Binding::bind_frozen(&graph, &self.store);
        let input = graph.constant(degraded.to_network::<T>());
        let (out, _) = self.nets.g_a.forward(&bind, &input, false)?;
        Image::from_network(&*out.value())
    }

    // ---- checkpointing -------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::<T>::new();
        archive.set_meta("format", "clearsky-checkpoint-v1");
        archive.set_meta("iteration", self.iteration);
        archive.set_meta("task_id", &self.task_id);
        archive.set_meta("seed", self.cfg.seed);
        archive.set_meta(
            "model_cfg",
            serde_json::to_string(&self.model_cfg).expect("serializes"),
        );
        archive.set_meta(
            "train_cfg",
            serde_json::to_string(&self.cfg).expect("serializes"),
        );
        for (name, value) in self.store.iter() {
            archive.insert(name, (**value).clone());
        }
        self.opt_g.export(&mut archive, "g");
        self.opt_da.export(&mut archive, "dA");
        self.opt_db.export(&mut archive, "dB");

        for (i, img) in self.pool_a.images.iter().enumerate() {
            archive.insert(format!("pool.a.{i}"), img.clone());
        }
        for (i, img) in self.pool_b.images.iter().enumerate() {
            archive.insert(format!("pool.b.{i}"), img.clone());
        }
        archive.set_meta("pool.a.len", self.pool_a.images.len());
        archive.set_meta("pool.b.len", self.pool_b.images.len());

        let anchor_meta: Vec<(String, f64, usize)> = self
            .anchors
            .iter()
            .map(|a| (a.snapshot.task_id.clone(), a.lambda, a.fisher.sample_count))
            .collect();
        archive.set_meta(
            "anchors",
            serde_json::to_string(&anchor_meta).expect("serializes"),
        );
        for anchor in &self.anchors {
            let tid = &anchor.snapshot.task_id;
            for (name, theta) in &anchor.snapshot.values {
                archive.insert(format!("ewc.{tid}.theta.{name}"), theta.clone());
            }
            for (name, f) in &anchor.fisher.importance {
                archive.insert(format!("ewc.{tid}.fisher.{name}"), f.clone());
            }
        }
        archive.save(path)
    }

    /// Restores a trainer from a checkpoint; the next training step is
    /// bitwise identical to an uninterrupted run on the same platform.
    pub fn load_checkpoint(path: &Path, extractor: PerceptualExtractor<T>) -> Result<Self> {
        let hint = path.display().to_string();
        let archive = Archive::<T>::load(path)?;
        let meta_err = |key: &str| Error::Archive {
            path: hint.clone(),
            message: format!("missing or invalid metadata {key}"),
        };
        let model_cfg: ModelConfig = serde_json::from_str(
            archive.meta("model_cfg").ok_or_else(|| meta_err("model_cfg"))?,
        )
        .map_err(|_| meta_err("model_cfg"))?;
        let cfg: TrainConfig = serde_json::from_str(
            archive.meta("train_cfg").ok_or_else(|| meta_err("train_cfg"))?,
        )
        .map_err(|_| meta_err("train_cfg"))?;
        let mut trainer = Trainer::new(model_cfg, cfg, extractor)?;
        trainer.iteration = archive
            .meta("iteration")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| meta_err("iteration"))?;
        trainer.task_id = archive
            .meta("task_id")
            .ok_or_else(|| meta_err("task_id"))?
            .to_string();

        // model weights, with exact name/shape validation
        let expected = trainer.nets.param_shapes();
        for (name, shape) in &expected {
            let tensor = archive.tensors.get(name.as_str()).ok_or_else(|| Error::Archive {
                path: hint.clone(),
                message: format!("checkpoint missing tensor {name}"),
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Archive {
                    path: hint.clone(),
                    message: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        shape
                    ),
                });
            }
            trainer.store.set(name, tensor.clone());
        }

        trainer.opt_g.import(&archive, "g", &hint)?;
        trainer.opt_da.import(&archive, "dA", &hint)?;
        trainer.opt_db.import(&archive, "dB", &hint)?;

        let pool_len = |key: &str| -> usize {
            archive.meta(key).and_then(|s| s.parse().ok()).unwrap_or(0)
        };
        for i in 0..pool_len("pool.a.len") {
            trainer
                .pool_a
                .images
                .push(archive.tensors[format!("pool.a.{i}").as_str()].clone());
        }
        for i in 0..pool_len("pool.b.len") {
            trainer
                .pool_b
                .images
                .push(archive.tensors[format!("pool.b.{i}").as_str()].clone());
        }

        let anchor_meta: Vec<(String, f64, usize)> =
            serde_json::from_str(archive.meta("anchors").unwrap_or("[]"))
                .map_err(|_| meta_err("anchors"))?;
        for (tid, lambda, sample_count) in anchor_meta {
            let mut values = IndexMap::new();
            let mut importance = IndexMap::new();
            let theta_prefix = format!("ewc.{tid}.theta.");
            let fisher_prefix = format!("ewc.{tid}.fisher.");
            for (name, tensor) in &archive.tensors {
                if let Some(stripped) = name.strip_prefix(&theta_prefix) {
                    values.insert(stripped.to_string(), tensor.clone());
                } else if let Some(stripped) = name.strip_prefix(&fisher_prefix) {
                    importance.insert(stripped.to_string(), tensor.clone());
                }
            }
            trainer.anchors.push(EwcAnchor {
                snapshot: ParamSnapshot {
                    task_id: tid.clone(),
                    values,
                },
                fisher: FisherDiagonal {
                    task_id: tid,
                    importance,
                    sample_count,
                },
                lambda,
            });
        }
        Ok(trainer)
    }
}
