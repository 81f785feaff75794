//! Task sources: folder corpora or fully synthetic degradation tasks.
//!
//! Synthetic tasks derive every image deterministically from
//! `(task seed, role, index)`, giving a virtual unpaired corpus for
//! training plus a held-out paired split for evaluation without touching
//! disk.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{
    augment, load_corpus, synth_clean_scene, synth_degrade, AugmentCfg, DegradationSpec, Image,
    SynthManifest, UnpairedCorpus,
};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SsimCfg};
use crate::rng::{fnv1a, stream_rng};
use crate::scalar::Scalar;
use crate::training::Trainer;

/// Fully synthetic restoration task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    /// Degradation template; haze depth seeds are re-derived per image.
    pub degradation: DegradationSpec,
    /// Virtual unpaired corpus size per domain.
    pub train_images: usize,
    /// Held-out paired evaluation set size.
    pub eval_images: usize,
    pub seed: u64,
}

/// One restoration task of a continual sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    /// Training iteration budget (one cosine schedule per task).
    pub iterations: usize,
    pub source: TaskSource,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Folders {
        degraded: PathBuf,
        clean: PathBuf,
        /// Paired manifest used for evaluation between tasks.
        eval_manifest: Option<PathBuf>,
        #[serde(default)]
        augment: AugmentCfg,
    },
    Synthetic(SynthTask),
}

/// Loaded task data ready to produce training pairs and eval splits.
pub enum TaskData {
    Corpus {
        name: String,
        corpus: UnpairedCorpus,
        augment_cfg: AugmentCfg,
        eval_manifest: Option<PathBuf>,
    },
    Synth { name: String, task: SynthTask },
}

impl TaskData {
    pub fn load(spec: &TaskSpec) -> Result<Self> {
        match &spec.source {
            TaskSource::Folders {
                degraded,
                clean,
                eval_manifest,
                augment,
            } => Ok(TaskData::Corpus {
                name: spec.name.clone(),
                corpus: load_corpus(degraded, clean)?,
                augment_cfg: *augment,
                eval_manifest: eval_manifest.clone(),
            }),
            TaskSource::Synthetic(task) => {
                task.degradation.validate()?;
                if task.train_images == 0 || task.eval_images == 0 {
                    return Err(Error::invalid(
                        "synthetic task",
                        "train_images and eval_images must be > 0",
                    ));
                }
                Ok(TaskData::Synth {
                    name: spec.name.clone(),
                    task: task.clone(),
                })
            }
        }
    }

    pub fn name(&self) -> &str {
        match self {
            TaskData::Corpus { name, .. } => name,
            TaskData::Synth { name, .. } => name,
        }
    }

    /// Unpaired training pair `(degraded, clean)` for one iteration.
    pub fn training_pair(&self, master_seed: u64, iteration: u64, crop: usize) -> Result<(Image, Image)> {
        match self {
            TaskData::Corpus {
                name,
                corpus,
                augment_cfg,
                ..
            } => {
                let mut cfg = *augment_cfg;
                cfg.out_size = crop;
                let mut rng = stream_rng(master_seed, &format!("data.{name}"), iteration);
                let (a, b) = crate::data::sample_training_pair(corpus, &cfg, &mut rng)?;
                Ok((a, b))
            }
            TaskData::Synth { name, task } => {
                let mut rng = stream_rng(master_seed, &format!("data.{name}"), iteration);
                use rand::Rng;
                let ia = rng.random_range(0..task.train_images) as u64;
                let ib = rng.random_range(0..task.train_images) as u64;
                // scenes are generated slightly above crop size so the
                // random crop/scale augmentation has room to move
                let scene = crop + crop / 4;
                let degraded = synth_pair(task, "train-a", ia, scene)?.1;
                let clean = synth_scene(task, "train-b", ib, scene);
                let cfg = AugmentCfg {
                    out_size: crop,
                    ..AugmentCfg::default()
                };
                Ok((augment(&degraded, &cfg, &mut rng), augment(&clean, &cfg, &mut rng)))
            }
        }
    }

    /// Paired `(clean, degraded)` evaluation split.
    pub fn eval_pairs(&self, crop: usize) -> Result<Vec<(Image, Image)>> {
        match self {
            TaskData::Corpus {
                name,
                eval_manifest,
                ..
            } => {
                let manifest_path = eval_manifest.as_ref().ok_or_else(|| {
                    Error::invalid(
                        "task eval",
                        format!("folder task {name} needs an eval_manifest for paired evaluation"),
                    )
                })?;
                let manifest = SynthManifest::load(manifest_path)?;
                let base = manifest_path.parent().unwrap_or(std::path::Path::new("."));
                let mut out = Vec::with_capacity(manifest.entries.len());
                for entry in &manifest.entries {
                    out.push((
                        Image::load(&base.join(&entry.clean))?,
                        Image::load(&base.join(&entry.degraded))?,
                    ));
                }
                Ok(out)
            }
            TaskData::Synth { task, .. } => (0..task.eval_images as u64)
                .map(|i| synth_pair(task, "eval", i, crop))
                .collect(),
        }
    }
}

fn per_image_spec(task: &SynthTask, role: &str, index: u64) -> DegradationSpec {
    let mut spec = task.degradation;
    if let DegradationSpec::Haze(ref mut h) = spec {
        // fresh depth field per image
        let key = format!("{}.depth.{role}.{index}", task.seed);
        h.depth_seed = fnv1a(key.as_bytes());
    }
    spec
}

fn synth_scene(task: &SynthTask, role: &str, index: u64, size: usize) -> Image {
    let mut rng = stream_rng(task.seed, &format!("scene.{role}"), index);
    synth_clean_scene(size, size, &mut rng)
}

/// Deterministic `(clean, degraded)` pair for `role`/`index`.
pub fn synth_pair(task: &SynthTask, role: &str, index: u64, size: usize) -> Result<(Image, Image)> {
    let clean = synth_scene(task, role, index, size);
    let spec = per_image_spec(task, role, index);
    let mut rng = stream_rng(task.seed, &format!("degrade.{role}"), index);
    let degraded = synth_degrade(&clean, &spec, &mut rng)?;
    Ok((clean, degraded))
}

/// Mean PSNR/SSIM of the trainer's restorations over the task's eval split,
/// plus the same metrics for the unrestored degraded inputs (the baseline).
pub struct TaskEval {
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub images: usize,
}

pub fn evaluate_on_task<T: Scalar>(
    trainer: &Trainer<T>,
    data: &TaskData,
    crop: usize,
) -> Result<TaskEval> {
    let pairs = data.eval_pairs(crop)?;
    if pairs.is_empty() {
        return Err(Error::invalid("task eval", "empty evaluation split"));
    }
    let ssim_cfg = SsimCfg::default();
    let (mut p_sum, mut s_sum, mut bp_sum, mut bs_sum) = (0.0, 0.0, 0.0, 0.0);
    for (clean, degraded) in &pairs {
        let restored = trainer.restore(degraded)?;
        p_sum += psnr(clean, &restored, 1.0)?.db;
        s_sum += ssim(clean, &restored, &ssim_cfg)?;
        bp_sum += psnr(clean, degraded, 1.0)?.db;
        bs_sum += ssim(clean, degraded, &ssim_cfg)?;
    }
    let n = pairs.len() as f64;
    Ok(TaskEval {
        psnr: p_sum / n,
        ssim: s_sum / n,
        baseline_psnr: bp_sum / n,
        baseline_ssim: bs_sum / n,
        images: pairs.len(),
    })
}
