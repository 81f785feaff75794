//! Cyclic perceptual consistency loss on frozen extractor features.
//!
//! The extractor is a VGG16-layout CNN (five conv stages with 2/2/3/3/3
//! conv-relu layers and 2x2 max pooling) tapped after the 2nd and 5th
//! pooling stages. Weights always come from a named-tensor archive and are
//! never updated; a missing file is a hard error, never a silent random
//! init. The channel plan is configurable so desk-scale runs can use a
//! narrow stand-in, created explicitly via [`PerceptualExtractor::seeded`].

use std::path::Path;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor};

/// Per-stage output widths and conv counts of the extractor.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorCfg {
    pub stage_widths: [usize; 5],
}

impl Default for ExtractorCfg {
    fn default() -> Self {
        // VGG16 channel plan
        ExtractorCfg {
            stage_widths: [64, 128, 256, 512, 512],
        }
    }
}

impl ExtractorCfg {
    /// Narrow plan for CPU-scale runs.
    pub fn tiny() -> Self {
        ExtractorCfg {
            stage_widths: [8, 16, 24, 32, 32],
        }
    }

    const CONVS_PER_STAGE: [usize; 5] = [2, 2, 3, 3, 3];

    fn layer_dims(&self) -> Vec<(String, usize, usize)> {
        let mut dims = Vec::new();
        let mut c_in = 3;
        for (s, (&width, &convs)) in self
            .stage_widths
            .iter()
            .zip(Self::CONVS_PER_STAGE.iter())
            .enumerate()
        {
            for c in 0..convs {
                dims.push((format!("ext.s{}.c{}", s + 1, c + 1), c_in, width));
                c_in = width;
            }
        }
        dims
    }
}

/// Frozen feature extractor with its input-standardization statistics.
pub struct PerceptualExtractor<T: Scalar> {
    pub cfg: ExtractorCfg,
    params: ParamStore<T>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl<T: Scalar> PerceptualExtractor<T> {
    /// Loads extractor weights, validating names, shapes, and the presence
    /// of standardization statistics in the archive metadata.
    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::<T>::load(path)?;
        let cfg: ExtractorCfg = match archive.meta("extractor_cfg") {
            Some(json) => serde_json::from_str(json).map_err(|e| Error::Archive {
                path: path.display().to_string(),
                message: format!("bad extractor_cfg metadata: {e}"),
            })?,
            None => {
                return Err(Error::Archive {
                    path: path.display().to_string(),
                    message: "missing extractor_cfg metadata".into(),
                })
            }
        };
        let parse3 = |key: &str| -> Result<[f64; 3]> {
            let raw = archive.meta(key).ok_or_else(|| Error::Archive {
                path: path.display().to_string(),
                message: format!("missing {key} metadata"),
            })?;
            serde_json::from_str(raw).map_err(|e| Error::Archive {
                path: path.display().to_string(),
                message: format!("bad {key} metadata: {e}"),
            })
        };
        let mean = parse3("input_mean")?;
        let std = parse3("input_std")?;

        let expected: Vec<(String, Vec<usize>)> = cfg
            .layer_dims()
            .into_iter()
            .flat_map(|(name, c_in, c_out)| {
                vec![
                    (format!("{name}.w"), vec![c_out, c_in, 3, 3]),
                    (format!("{name}.b"), vec![c_out]),
                ]
            })
            .collect();
        archive.validate_exact(&expected, &path.display().to_string())?;
        let mut params = ParamStore::new();
        for (name, _) in &expected {
            params.insert(name.clone(), archive.tensors[name.as_str()].clone());
        }
        Ok(PerceptualExtractor {
            cfg,
            params,
            mean,
            std,
        })
    }

    /// Deterministic stand-in weights (He-scaled normals) for dataset-free
    /// runs; written to disk with [`Self::save`] and loaded like any other
    /// extractor archive.
    pub fn seeded(cfg: ExtractorCfg, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = stream_rng(seed, "extractor", 0);
        for (name, c_in, c_out) in cfg.layer_dims() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            params.insert(
                format!("{name}.w"),
                crate::params::normal_init(&[c_out, c_in, 3, 3], std, &mut rng),
            );
            params.insert(format!("{name}.b"), crate::params::zeros_init::<T>(&[c_out]));
        }
        PerceptualExtractor {
            cfg,
            params,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::<T>::new();
        archive.set_meta(
            "extractor_cfg",
            serde_json::to_string(&self.cfg).expect("cfg serializes"),
        );
        archive.set_meta(
            "input_mean",
            serde_json::to_string(&self.mean).expect("serializes"),
        );
        archive.set_meta(
            "input_std",
            serde_json::to_string(&self.std).expect("serializes"),
        );
        for (name, value) in self.params.iter() {
            archive.insert(name, (**value).clone());
        }
        archive.save(path)
    }

    /// Features after the 2nd and 5th pooling stages. `img` is `[3, H, W]`
    /// in the `[-1, 1]` network domain; H and W must be divisible by 32.
    pub fn features(&self, img: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = img.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("perceptual input", &[3, 0, 0], &shape));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 {
            return Err(Error::invalid(
                "perceptual input",
                format!(
                    "{}x{} not divisible by 32 (five pooling stages)",
                    shape[1], shape[2]
                ),
            ));
        }
        let graph = img.graph().clone();
        let bind = Binding::bind_frozen(&graph, &self.params);

        // [-1,1] -> [0,1] -> channelwise standardization
        let x01 = img.add_scalar(T::one()).scale(T::from_f64(0.5));
        let mut mean = ArrayD::<T>::zeros(ndarray::IxDyn(&[3, 1, 1]));
        let mut inv_std = ArrayD::<T>::zeros(ndarray::IxDyn(&[3, 1, 1]));
        for c in 0..3 {
            mean[[c, 0, 0]] = T::from_f64(self.mean[c]);
            inv_std[[c, 0, 0]] = T::from_f64(1.0 / self.std[c]);
        }
        let mut x = x01.sub(&graph.constant(mean)).mul(&graph.constant(inv_std));

        let spec = Conv2dSpec {
            stride: 1,
            pad: 1,
            dilation: 1,
        };
        let mut pool2 = None;
        for (s, &convs) in ExtractorCfg::CONVS_PER_STAGE.iter().enumerate() {
            for c in 0..convs {
                let name = format!("ext.s{}.c{}", s + 1, c + 1);
                let w = bind.get(&format!("{name}.w"));
                let b = bind.get(&format!("{name}.b"));
                let c_out = w.shape()[0];
                x = x.conv2d(w, spec).add(&b.reshape(&[c_out, 1, 1])).relu();
            }
            x = x.max_pool2d(2);
            if s == 1 {
                pool2 = Some(x.clone());
            }
        }
        Ok((pool2.expect("stage 2 always runs"), x))
    }
}

/// Mean squared difference between two feature maps.
pub fn feature_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.sub(b).sqr().mean_all()
}

/// Four-term cyclic perceptual loss: pool2 and pool5 feature MSE between
/// each source image and its cycle reconstruction.
pub fn perceptual_loss<T: Scalar>(
    extractor: &PerceptualExtractor<T>,
    a: &Tensor<T>,
    rec_a: &Tensor<T>,
    b: &Tensor<T>,
    rec_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (a2, a5) = extractor.features(a)?;
    let (ra2, ra5) = extractor.features(rec_a)?;
    let (b2, b5) = extractor.features(b)?;
    let (rb2, rb5) = extractor.features(rec_b)?;
    let term = feature_mse(&a2, &ra2)
        .add(&feature_mse(&b2, &rb2))
        .add(&feature_mse(&a5, &ra5))
        .add(&feature_mse(&b5, &rb5));
    Ok(term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny() -> PerceptualExtractor<f64> {
        PerceptualExtractor::seeded(ExtractorCfg::tiny(), 7)
    }

    #[test]
    fn missing_weight_file_is_explicit_error() {
        let err = match PerceptualExtractor::<f32>::load(Path::new("/nope/ext.nta")) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected error"),
        };
        assert!(err.contains("/nope/ext.nta"), "{err}");
    }

    #[test]
    fn save_load_round_trip_preserves_outputs() {
        let ext = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.nta");
        ext.save(&path).unwrap();
        let loaded = PerceptualExtractor::<f64>::load(&path).unwrap();
        assert_eq!(loaded.cfg, ext.cfg);
        assert_eq!(loaded.mean, ext.mean);

        let mut r = ChaCha8Rng::seed_from_u64(1);
        let img = uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r);
        let g = Graph::new();
        let t = g.constant(img.clone());
        let (p2a, p5a) = ext.features(&t).unwrap();
        let g2 = Graph::new();
        let t2 = g2.constant(img);
        let (p2b, p5b) = loaded.features(&t2).unwrap();
        assert_eq!(*p2a.value(), *p2b.value());
        assert_eq!(*p5a.value(), *p5b.value());
    }

    #[test]
    fn features_are_deterministic_across_calls() {
        let ext = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let img = uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r);
        let run = || {
            let g = Graph::new();
            let t = g.constant(img.clone());
            let (p2, p5) = ext.features(&t).unwrap();
            ((*p2.value()).clone(), (*p5.value()).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn feature_shapes_follow_the_pooling_trace() {
        let ext = tiny();
        let g = Graph::new();
        let t = g.zeros(&[3, 64, 32]);
        let (p2, p5) = ext.features(&t).unwrap();
        assert_eq!(p2.shape(), vec![16, 16, 8]);
        assert_eq!(p5.shape(), vec![32, 2, 1]);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let ext = tiny();
        let g = Graph::new();
        let t = g.zeros(&[3, 48, 48]);
        assert!(ext.features(&t).is_err());
    }

    #[test]
    fn perceptual_loss_zero_on_identical_reconstructions() {
        let ext = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let a = g.constant(uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r));
        let b = g.constant(uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r));
        let loss = perceptual_loss(&ext, &a, &a, &b, &b).unwrap();
        assert_abs_diff_eq!(loss.item(), 0.0);
    }

    #[test]
    fn feature_mse_is_quadratically_homogeneous() {
        let g = Graph::<f64>::new();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let base = g.constant(uniform::<f64>(&[4, 5, 5], -1.0, 1.0, &mut r));
        let delta = g.constant(uniform::<f64>(&[4, 5, 5], -0.3, 0.3, &mut r));
        let l1 = feature_mse(&base, &base.add(&delta)).item();
        let l2 = feature_mse(&base, &base.add(&delta.scale(2.0))).item();
        assert_abs_diff_eq!(l2, 4.0 * l1, epsilon = 1e-10);
    }

    #[test]
    fn perceptual_term_structure_is_symmetric_in_directions() {
        let ext = tiny();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let a = g.constant(uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r));
        let ra = g.constant(uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r));
        let b = g.constant(uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r));
        let rb = g.constant(uniform::<f64>(&[3, 32, 32], -1.0, 1.0, &mut r));
        let l1 = perceptual_loss(&ext, &a, &ra, &b, &rb).unwrap().item();
        let l2 = perceptual_loss(&ext, &b, &rb, &a, &ra).unwrap().item();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
    }
}
