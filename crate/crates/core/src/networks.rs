//! Generator, global-local discriminator, and contrastive projection heads.
//!
//! Parameter naming follows a dotted scheme rooted at the network tag:
//! `gA.enc.0.w`, `gA.fa.3.ca.conv1.b`, `gA.dfe.1.dcn2.offset.w`,
//! `dB.local.2.w`, `proj.t2.mlp1.w`. Weight archives are validated against
//! the exact expected name/shape set on load.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    instance_norm, BlockConfig, Conv2dLayer, ConvT2dLayer, DfeModule, FaBlock, SkFusion,
};
use crate::error::{Error, Result};
use crate::params::{normal_init, Binding, ParamStore};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::{concat_flat, l2_normalize_rows, Conv2dSpec, Tensor};
use rand::Rng;

pub const IMAGE_CHANNELS: usize = 3;
/// Side of the local-discriminator crops.
pub const LOCAL_PATCH: usize = 64;
/// Number of local-discriminator crops per image.
pub const LOCAL_PATCHES: usize = 3;
/// Number of contrastive tap points in the generator.
pub const TAP_POINTS: usize = 4;

/// Architecture hyperparameters for one generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Channel width after the stem conv; doubles at each downsampling.
    pub base_width: usize,
    pub n_fa_blocks: usize,
    pub n_dfe: usize,
    pub blocks: BlockConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_width: 64,
            n_fa_blocks: 6,
            n_dfe: 2,
            blocks: BlockConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// Channel count on the quarter-resolution latent grid.
    pub fn latent_width(&self) -> usize {
        self.base_width * 4
    }
}

/// Intermediate features exposed for the contrastive loss; all live on the
/// quarter-resolution latent grid.
pub struct GeneratorTaps<T: Scalar> {
    /// After the downsampling encoder.
    pub t1: Tensor<T>,
    /// Midway through the FA stack.
    pub t2: Tensor<T>,
    /// After the FA stack.
    pub t3: Tensor<T>,
    /// After SK fusion #1, just before upsampling.
    pub t4: Tensor<T>,
}

impl<T: Scalar> GeneratorTaps<T> {
    pub fn all(&self) -> [&Tensor<T>; TAP_POINTS] {
        [&self.t1, &self.t2, &self.t3, &self.t4]
    }
}

/// Encoder -> 6 FA + 2 DFE -> decoder, with SK fusions bridging the two
/// skip connections. Input and output are `[3, H, W]` in the `[-1, 1]`
/// network domain; H and W must be divisible by 4.
#[derive(Debug, Clone)]
pub struct Generator {
    pub tag: String,
    pub cfg: GeneratorConfig,
    enc0: Conv2dLayer,
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    fa: Vec<FaBlock>,
    dfe: Vec<DfeModule>,
    sk1: SkFusion,
    sk2: SkFusion,
    dec0: ConvT2dLayer,
    dec1: ConvT2dLayer,
    dec2: Conv2dLayer,
}

impl Generator {
    pub fn new(tag: &str, cfg: GeneratorConfig) -> Result<Self> {
        let w = cfg.base_width;
        let stride2 = |pad| Conv2dSpec {
            stride: 2,
            pad,
            dilation: 1,
        };
        let fa = (0..cfg.n_fa_blocks)
            .map(|i| FaBlock::new(&format!("{tag}.fa.{i}"), 4 * w, &cfg.blocks))
            .collect();
        let dfe = (0..cfg.n_dfe)
            .map(|i| DfeModule::new(&format!("{tag}.dfe.{i}"), 4 * w, 3))
            .collect::<Result<Vec<_>>>()?;
        Ok(Generator {
            tag: tag.to_string(),
            enc0: Conv2dLayer::same(format!("{tag}.enc.0"), IMAGE_CHANNELS, w, 7),
            enc1: Conv2dLayer::new(format!("{tag}.enc.1"), w, 2 * w, 3, stride2(1)),
            enc2: Conv2dLayer::new(format!("{tag}.enc.2"), 2 * w, 4 * w, 3, stride2(1)),
            fa,
            dfe,
            sk1: SkFusion::new(&format!("{tag}.sk1"), 4 * w, &cfg.blocks),
            sk2: SkFusion::new(&format!("{tag}.sk2"), 2 * w, &cfg.blocks),
            dec0: ConvT2dLayer::upsample2x(format!("{tag}.dec.0"), 4 * w, 2 * w),
            dec1: ConvT2dLayer::upsample2x(format!("{tag}.dec.1"), 2 * w, w),
            dec2: Conv2dLayer::same(format!("{tag}.dec.2"), w, IMAGE_CHANNELS, 7),
            cfg,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.enc0.register(store, rng);
        self.enc1.register(store, rng);
        self.enc2.register(store, rng);
        for fa in &self.fa {
            fa.register(store, rng);
        }
        for dfe in &self.dfe {
            dfe.register(store, rng);
        }
        self.sk1.register(store, rng);
        self.sk2.register(store, rng);
        self.dec0.register(store, rng);
        self.dec1.register(store, rng);
        self.dec2.register(store, rng);
    }

    fn validate_input<T: Scalar>(&self, img: &Tensor<T>) -> Result<()> {
        let shape = img.shape();
        if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
            return Err(Error::shape("generator input", &[IMAGE_CHANNELS, 0, 0], &shape));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "generator input",
                format!(
                    "{h}x{w} not divisible by 4; pad to {}x{} first",
                    h.div_ceil(4) * 4,
                    w.div_ceil(4) * 4
                ),
            ));
        }
        Ok(())
    }

    /// Runs the encoder and transformation stack up to SK fusion #1,
    /// yielding the four tap features. Shared by the full forward pass and
    /// tap-only encodings used by the contrastive objective.
    pub fn encode_taps<T: Scalar>(
        &self,
        bind: &Binding<T>,
        img: &Tensor<T>,
    ) -> Result<(GeneratorTaps<T>, Tensor<T>)> {
        self.validate_input(img)?;
        let e0 = instance_norm(&self.enc0.forward(bind, img)).relu();
        let d1 = instance_norm(&self.enc1.forward(bind, &e0)).relu();
        let d2 = instance_norm(&self.enc2.forward(bind, &d1)).relu();

        let mid = self.fa.len() / 2;
        let mut x = d2.clone();
        for fa in &self.fa[..mid] {
            x = fa.forward(bind, &x)?;
        }
        let t2 = x.clone();
        for fa in &self.fa[mid..] {
            x = fa.forward(bind, &x)?;
        }
        let t3 = x.clone();
        for dfe in &self.dfe {
            x = dfe.forward(bind, &x)?;
        }
        let fused = self.sk1.forward(bind, &d2, &x)?;
        let taps = GeneratorTaps {
            t1: d2,
            t2,
            t3,
            t4: fused.clone(),
        };
        Ok((taps, d1))
    }

    /// Full restoration pass. Output is `[3, H, W]` in `[-1, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<T>,
        img: &Tensor<T>,
        want_taps: bool,
    ) -> Result<(Tensor<T>, Option<GeneratorTaps<T>>)> {
        let (taps, d1) = self.encode_taps(bind, img)?;
        let u1 = instance_norm(&self.dec0.forward(bind, &taps.t4)).relu();
        let fused2 = self.sk2.forward(bind, &d1, &u1)?;
        let u2 = instance_norm(&self.dec1.forward(bind, &fused2)).relu();
        let out = self.dec2.forward(bind, &u2).tanh();
        Ok((out, want_taps.then_some(taps)))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.extend(self.enc0.param_shapes());
        out.extend(self.enc1.param_shapes());
        out.extend(self.enc2.param_shapes());
        for fa in &self.fa {
            out.extend(fa.param_shapes());
        }
        for dfe in &self.dfe {
            out.extend(dfe.param_shapes());
        }
        out.extend(self.sk1.param_shapes());
        out.extend(self.sk2.param_shapes());
        out.extend(self.dec0.param_shapes());
        out.extend(self.dec1.param_shapes());
        out.extend(self.dec2.param_shapes());
        out
    }
}

/// Discriminator architecture hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_width: 64 }
    }
}

/// Scores plus the sampled local-patch coordinates (reproducible from the
/// caller's RNG seed).
pub struct DiscriminatorOutput<T: Scalar> {
    /// Flattened sigmoid scores: global map then the local maps.
    pub scores: Tensor<T>,
    pub patch_origins: Vec<(usize, usize)>,
    pub global_len: usize,
    pub local_len: usize,
}

/// Full-image branch plus three random 64x64 patch branches with
/// independent weights; outputs are flattened, concatenated, and passed
/// through a sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub tag: String,
    global: Vec<Conv2dLayer>,
    local: Vec<Conv2dLayer>,
}

impl Discriminator {
    pub fn new(tag: &str, cfg: DiscriminatorConfig) -> Self {
        Discriminator {
            tag: tag.to_string(),
            global: Self::branch(&format!("{tag}.global"), cfg.base_width),
            local: Self::branch(&format!("{tag}.local"), cfg.base_width),
        }
    }

    /// Five conv blocks, kernel 4: widths w,2w,4w,8w stride 2, then a
    /// single-channel stride-1 head. Instance norm on the middle blocks.
    fn branch(prefix: &str, w: usize) -> Vec<Conv2dLayer> {
        let spec = |stride| Conv2dSpec {
            stride,
            pad: 1,
            dilation: 1,
        };
        vec![
            Conv2dLayer::new(format!("{prefix}.0"), IMAGE_CHANNELS, w, 4, spec(2)),
            Conv2dLayer::new(format!("{prefix}.1"), w, 2 * w, 4, spec(2)),
            Conv2dLayer::new(format!("{prefix}.2"), 2 * w, 4 * w, 4, spec(2)),
            Conv2dLayer::new(format!("{prefix}.3"), 4 * w, 8 * w, 4, spec(2)),
            Conv2dLayer::new(format!("{prefix}.4"), 8 * w, 1, 4, spec(1)),
        ]
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        for layer in self.global.iter().chain(&self.local) {
            layer.register(store, rng);
        }
    }

    fn run_branch<T: Scalar>(layers: &[Conv2dLayer], bind: &Binding<T>, x: &Tensor<T>) -> Tensor<T> {
        let slope = T::from_f64(0.2);
        let mut h = layers[0].forward(bind, x).leaky_relu(slope);
        for layer in &layers[1..4] {
            h = instance_norm(&layer.forward(bind, &h)).leaky_relu(slope);
        }
        layers[4].forward(bind, &h)
    }

    /// Raw (pre-sigmoid) full-image map; exposed for shape tracing.
    pub fn global_map<T: Scalar>(&self, bind: &Binding<T>, img: &Tensor<T>) -> Tensor<T> {
        Self::run_branch(&self.global, bind, img)
    }

    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<T>,
        img: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DiscriminatorOutput<T>> {
        let shape = img.shape();
        if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
            return Err(Error::shape("discriminator input", &[IMAGE_CHANNELS, 0, 0], &shape));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < LOCAL_PATCH || w < LOCAL_PATCH {
            return Err(Error::invalid(
                "discriminator input",
                format!("{h}x{w} smaller than the {LOCAL_PATCH}x{LOCAL_PATCH} local patch"),
            ));
        }

        let global = Self::run_branch(&self.global, bind, img);
        let global_len = global.value().len();

        let mut parts = vec![global];
        let mut patch_origins = Vec::with_capacity(LOCAL_PATCHES);
        let mut local_len = 0;
        for _ in 0..LOCAL_PATCHES {
            let y0 = rng.random_range(0..=h - LOCAL_PATCH);
            let x0 = rng.random_range(0..=w - LOCAL_PATCH);
            patch_origins.push((y0, x0));
            let patch = img.crop2d(y0, x0, LOCAL_PATCH, LOCAL_PATCH);
            let map = Self::run_branch(&self.local, bind, &patch);
            local_len = map.value().len();
            parts.push(map);
        }
        let scores = concat_flat(parts[0].graph(), &parts).sigmoid();
        Ok(DiscriminatorOutput {
            scores,
            patch_origins,
            global_len,
            local_len,
        })
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.global
            .iter()
            .chain(&self.local)
            .flat_map(|l| l.param_shapes())
            .collect()
    }
}

/// Two-layer MLP mapping sampled tap features to unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        ProjectionHead {
            name: name.into(),
            in_dim,
            hidden,
            out_dim,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.mlp1.w", self.name),
            normal_init(&[self.in_dim, self.hidden], crate::blocks::INIT_STD, rng),
        );
        store.insert(
            format!("{}.mlp1.b", self.name),
            normal_init(&[self.hidden], crate::blocks::INIT_STD, rng),
        );
        store.insert(
            format!("{}.mlp2.w", self.name),
            normal_init(&[self.hidden, self.out_dim], crate::blocks::INIT_STD, rng),
        );
        store.insert(
            format!("{}.mlp2.b", self.name),
            normal_init(&[self.out_dim], crate::blocks::INIT_STD, rng),
        );
    }

    /// Embeds the tap features at `locations` (linear indices into the
    /// spatial grid). Paired calls must pass identical locations so that
    /// positives stay co-located.
    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<T>,
        tap: &Tensor<T>,
        locations: &[usize],
    ) -> Result<Tensor<T>> {
        let shape = tap.shape();
        if shape.len() != 3 || shape[0] != self.in_dim {
            return Err(Error::shape("projection head", &[self.in_dim, 0, 0], &shape));
        }
        if shape[1] * shape[2] < locations.len() {
            return Err(Error::invalid(
                "projection head",
                format!(
                    "tap grid {}x{} has fewer than {} locations",
                    shape[1],
                    shape[2],
                    locations.len()
                ),
            ));
        }
        let rows = tap.gather_locations(locations);
        let w1 = bind.get(&format!("{}.mlp1.w", self.name));
        let b1 = bind.get(&format!("{}.mlp1.b", self.name));
        let w2 = bind.get(&format!("{}.mlp2.w", self.name));
        let b2 = bind.get(&format!("{}.mlp2.b", self.name));
        let h = rows.matmul(w1).add(&b1.reshape(&[1, self.hidden])).relu();
        let e = h.matmul(w2).add(&b2.reshape(&[1, self.out_dim]));
        Ok(l2_normalize_rows(&e, T::from_f64(1e-12)))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{}.mlp1.w", self.name), vec![self.in_dim, self.hidden]),
            (format!("{}.mlp1.b", self.name), vec![self.hidden]),
            (format!("{}.mlp2.w", self.name), vec![self.hidden, self.out_dim]),
            (format!("{}.mlp2.b", self.name), vec![self.out_dim]),
        ]
    }
}

/// Samples `count` distinct locations from an `h*w` grid.
pub fn sample_locations(h: usize, w: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let n = h * w;
    if n < count {
        return Err(Error::invalid(
            "sample_locations",
            format!("grid {h}x{w} has fewer than {count} locations"),
        ));
    }
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        all.swap(i, j);
    }
    all.truncate(count);
    Ok(all)
}

/// Full model configuration: both generators, both discriminators, and the
/// four projection heads.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub proj_hidden: usize,
    pub proj_out: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            proj_hidden: 256,
            proj_out: 256,
        }
    }
}

/// The assembled model: G_A maps degraded -> clean, G_B maps clean ->
/// degraded; D_A judges the degraded domain, D_B the clean domain.
/// Projection heads are shared across directions, one per tap point.
pub struct Networks {
    pub g_a: Generator,
    pub g_b: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    pub proj: Vec<ProjectionHead>,
}

impl Networks {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let latent = cfg.generator.latent_width();
        let proj = (1..=TAP_POINTS)
            .map(|i| {
                ProjectionHead::new(format!("proj.t{i}"), latent, cfg.proj_hidden, cfg.proj_out)
            })
            .collect();
        Ok(Networks {
            g_a: Generator::new("gA", cfg.generator.clone())?,
            g_b: Generator::new("gB", cfg.generator.clone())?,
            d_a: Discriminator::new("dA", cfg.discriminator.clone()),
            d_b: Discriminator::new("dB", cfg.discriminator.clone()),
            proj,
        })
    }

    /// Fresh parameter store, deterministically initialized from `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "init", 0);
        self.g_a.register(&mut store, &mut rng);
        self.g_b.register(&mut store, &mut rng);
        self.d_a.register(&mut store, &mut rng);
        self.d_b.register(&mut store, &mut rng);
        for head in &self.proj {
            head.register(&mut store, &mut rng);
        }
        store
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        out.extend(self.g_a.param_shapes());
        out.extend(self.g_b.param_shapes());
        out.extend(self.d_a.param_shapes());
        out.extend(self.d_b.param_shapes());
        for head in &self.proj {
            out.extend(head.param_shapes());
        }
        out
    }

    /// Loads weights from an archive, validating the name set and every
    /// shape exactly.
    pub fn load_params<T: Scalar>(&self, archive: &crate::Archive<T>, path_hint: &str) -> Result<ParamStore<T>> {
        let expected = self.param_shapes();
        archive.validate_exact(&expected, path_hint)?;
        let mut store = ParamStore::new();
        for (name, _) in &expected {
            store.insert(name.clone(), archive.tensors[name.as_str()].clone());
        }
        Ok(store)
    }
}
