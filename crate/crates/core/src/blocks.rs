//! Differentiable building blocks: channel/pixel attention, feature
//! attention blocks, modulated deformable layers, and SK fusion.
//!
//! Blocks are descriptors: construction fixes names and dimensions,
//! `register` fills a [`ParamStore`], and `forward` evaluates against a
//! [`Binding`]. They hold no tensors themselves, so a block value is reusable
//! across graphs and threads.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{normal_init, zeros_init, Binding, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{deform_conv2d, softmax, Conv2dSpec, ConvTranspose2dSpec, DeformSpec, Tensor};

/// Std of the zero-mean normal used for every conv/MLP weight and bias.
pub const INIT_STD: f64 = 0.02;

/// Hyperparameters shared by the attention blocks; all values have
/// conventional defaults and are exposed through the model config.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    /// Channel-attention bottleneck reduction (C -> C/r -> C).
    pub ca_reduction: usize,
    /// Pixel-attention bottleneck reduction.
    pub pa_reduction: usize,
    /// Dilation rate of the first pixel-attention conv.
    pub pa_dilation: usize,
    /// SK fusion MLP bottleneck reduction.
    pub sk_reduction: usize,
    /// Lower bound on the SK bottleneck width.
    pub sk_min_width: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            ca_reduction: 8,
            pa_reduction: 8,
            pa_dilation: 2,
            sk_reduction: 8,
            sk_min_width: 4,
        }
    }
}

fn ensure_finite<T: Scalar>(x: &Tensor<T>, context: &str) -> Result<()> {
    if x.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(context));
    }
    Ok(())
}

fn ensure_channels<T: Scalar>(x: &Tensor<T>, expected: usize, context: &str) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != expected {
        return Err(Error::shape(context, &[expected], &shape));
    }
    Ok(())
}

/// Plain convolution layer (weight + bias).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        Conv2dLayer {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            spec,
        }
    }

    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self::new(
            name,
            c_in,
            c_out,
            kernel,
            Conv2dSpec {
                stride: 1,
                pad: kernel / 2,
                dilation: 1,
            },
        )
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.w", self.name),
            normal_init(&[self.c_out, self.c_in, self.kernel, self.kernel], INIT_STD, rng),
        );
        store.insert(format!("{}.b", self.name), normal_init(&[self.c_out], INIT_STD, rng));
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>) -> Tensor<T> {
        let w = bind.get(&format!("{}.w", self.name));
        let b = bind.get(&format!("{}.b", self.name));
        x.conv2d(w, self.spec).add(&b.reshape(&[self.c_out, 1, 1]))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (
                format!("{}.w", self.name),
                vec![self.c_out, self.c_in, self.kernel, self.kernel],
            ),
            (format!("{}.b", self.name), vec![self.c_out]),
        ]
    }
}

/// Transposed convolution layer used for learned upsampling.
#[derive(Debug, Clone)]
pub struct ConvT2dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub spec: ConvTranspose2dSpec,
}

impl ConvT2dLayer {
    pub fn upsample2x(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        ConvT2dLayer {
            name: name.into(),
            c_in,
            c_out,
            kernel: 3,
            spec: ConvTranspose2dSpec {
                stride: 2,
                pad: 1,
                output_pad: 1,
            },
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        store.insert(
            format!("{}.w", self.name),
            normal_init(&[self.c_in, self.c_out, self.kernel, self.kernel], INIT_STD, rng),
        );
        store.insert(format!("{}.b", self.name), normal_init(&[self.c_out], INIT_STD, rng));
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>) -> Tensor<T> {
        let w = bind.get(&format!("{}.w", self.name));
        let b = bind.get(&format!("{}.b", self.name));
        x.conv_transpose2d(w, self.spec)
            .add(&b.reshape(&[self.c_out, 1, 1]))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (
                format!("{}.w", self.name),
                vec![self.c_in, self.c_out, self.kernel, self.kernel],
            ),
            (format!("{}.b", self.name), vec![self.c_out]),
        ]
    }
}

/// Parameter-free instance normalization over the spatial axes.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let eps = T::from_f64(1e-5);
    let mu = x.mean_keep(&[1, 2]);
    let centered = x.sub(&mu);
    let var = centered.sqr().mean_keep(&[1, 2]);
    centered.div(&var.add_scalar(eps).sqrt())
}

/// Channel attention: per-channel gates from globally pooled statistics.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(prefix: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mid = (channels / cfg.ca_reduction).max(1);
        ChannelAttention {
            conv1: Conv2dLayer::same(format!("{prefix}.ca.conv1"), channels, mid, 1),
            conv2: Conv2dLayer::same(format!("{prefix}.ca.conv2"), mid, channels, 1),
            channels,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.conv1.register(store, rng);
        self.conv2.register(store, rng);
    }

    /// Gate map `[C, 1, 1]`, each entry in (0, 1).
    pub fn gates<T: Scalar>(&self, bind: &Binding<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_channels(f, self.channels, "channel_attention")?;
        ensure_finite(f, "channel_attention input")?;
        let pooled = f.mean_keep(&[1, 2]);
        let hidden = self.conv1.forward(bind, &pooled).relu();
        Ok(self.conv2.forward(bind, &hidden).sigmoid())
    }

    /// `F* = CA (x) F`.
    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(f.mul(&self.gates(bind, f)?))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        [self.conv1.param_shapes(), self.conv2.param_shapes()].concat()
    }
}

/// Pixel attention: a single spatial gate map broadcast over channels,
/// with a dilated first conv to widen the receptive field.
#[derive(Debug, Clone)]
pub struct PixelAttention {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    channels: usize,
}

impl PixelAttention {
    pub fn new(prefix: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mid = (channels / cfg.pa_reduction).max(1);
        let dilated = Conv2dSpec {
            stride: 1,
            pad: cfg.pa_dilation,
            dilation: cfg.pa_dilation,
        };
        PixelAttention {
            conv1: Conv2dLayer::new(format!("{prefix}.pa.conv1"), channels, mid, 3, dilated),
            conv2: Conv2dLayer::same(format!("{prefix}.pa.conv2"), mid, mid, 3),
            conv3: Conv2dLayer::same(format!("{prefix}.pa.conv3"), mid, 1, 3),
            channels,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.conv1.register(store, rng);
        self.conv2.register(store, rng);
        self.conv3.register(store, rng);
    }

    /// Gate map `[1, H, W]`, entries in (0, 1).
    pub fn gates<T: Scalar>(&self, bind: &Binding<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_channels(f, self.channels, "pixel_attention")?;
        ensure_finite(f, "pixel_attention input")?;
        let h1 = self.conv1.forward(bind, f).relu();
        let h2 = self.conv2.forward(bind, &h1).relu();
        Ok(self.conv3.forward(bind, &h2).sigmoid())
    }

    /// `F~ = F* (x) PA`.
    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(f.mul(&self.gates(bind, f)?))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        [
            self.conv1.param_shapes(),
            self.conv2.param_shapes(),
            self.conv3.param_shapes(),
        ]
        .concat()
    }
}

/// Feature attention block: conv-relu-conv with a local residual, then
/// channel attention, pixel attention, and a block-level residual.
#[derive(Debug, Clone)]
pub struct FaBlock {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    pub ca: ChannelAttention,
    pub pa: PixelAttention,
    channels: usize,
}

impl FaBlock {
    pub fn new(prefix: &str, channels: usize, cfg: &BlockConfig) -> Self {
        FaBlock {
            conv1: Conv2dLayer::same(format!("{prefix}.conv1"), channels, channels, 3),
            conv2: Conv2dLayer::same(format!("{prefix}.conv2"), channels, channels, 3),
            ca: ChannelAttention::new(prefix, channels, cfg),
            pa: PixelAttention::new(prefix, channels, cfg),
            channels,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.conv1.register(store, rng);
        self.conv2.register(store, rng);
        self.ca.register(store, rng);
        self.pa.register(store, rng);
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_channels(f, self.channels, "fa_block")?;
        let conv = self.conv2.forward(bind, &self.conv1.forward(bind, f).relu());
        let local = conv.add(f);
        let gated = self.pa.forward(bind, &self.ca.forward(bind, &local)?)?;
        Ok(gated.add(f))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        [
            self.conv1.param_shapes(),
            self.conv2.param_shapes(),
            self.ca.param_shapes(),
            self.pa.param_shapes(),
        ]
        .concat()
    }
}

/// One modulated deformable convolution with its offset and mask heads.
/// Heads start at zero so training begins as a plain convolution.
#[derive(Debug, Clone)]
pub struct DeformableLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl DeformableLayer {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(
                "deformable_conv",
                format!("kernel {kernel} is even; the default offset grid is undefined"),
            ));
        }
        Ok(DeformableLayer {
            name: name.into(),
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let k = self.kernel;
        let k2 = k * k;
        store.insert(
            format!("{}.w", self.name),
            normal_init(&[self.c_out, self.c_in, k, k], INIT_STD, rng),
        );
        store.insert(format!("{}.b", self.name), normal_init(&[self.c_out], INIT_STD, rng));
        store.insert(
            format!("{}.offset.w", self.name),
            zeros_init::<T>(&[2 * k2, self.c_in, k, k]),
        );
        store.insert(format!("{}.offset.b", self.name), zeros_init::<T>(&[2 * k2]));
        store.insert(
            format!("{}.mask.w", self.name),
            zeros_init::<T>(&[k2, self.c_in, k, k]),
        );
        store.insert(format!("{}.mask.b", self.name), zeros_init::<T>(&[k2]));
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_channels(x, self.c_in, "deformable_conv")?;
        let k = self.kernel;
        let k2 = k * k;
        let spec = Conv2dSpec {
            stride: 1,
            pad: k / 2,
            dilation: 1,
        };
        let off_w = bind.get(&format!("{}.offset.w", self.name));
        let off_b = bind.get(&format!("{}.offset.b", self.name));
        let offsets = x.conv2d(off_w, spec).add(&off_b.reshape(&[2 * k2, 1, 1]));
        if offsets.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("deformable_conv offsets"));
        }
        let mask_w = bind.get(&format!("{}.mask.w", self.name));
        let mask_b = bind.get(&format!("{}.mask.b", self.name));
        let mask = x
            .conv2d(mask_w, spec)
            .add(&mask_b.reshape(&[k2, 1, 1]))
            .sigmoid();
        let w = bind.get(&format!("{}.w", self.name));
        let b = bind.get(&format!("{}.b", self.name));
        Ok(deform_conv2d(x, &offsets, &mask, w, DeformSpec { kernel: k })
            .add(&b.reshape(&[self.c_out, 1, 1])))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let k2 = k * k;
        vec![
            (format!("{}.w", self.name), vec![self.c_out, self.c_in, k, k]),
            (format!("{}.b", self.name), vec![self.c_out]),
            (format!("{}.offset.w", self.name), vec![2 * k2, self.c_in, k, k]),
            (format!("{}.offset.b", self.name), vec![2 * k2]),
            (format!("{}.mask.w", self.name), vec![k2, self.c_in, k, k]),
            (format!("{}.mask.b", self.name), vec![k2]),
        ]
    }
}

/// Dynamic feature enhancement: two deformable layers with a rectifier
/// between, no residual.
#[derive(Debug, Clone)]
pub struct DfeModule {
    pub dcn1: DeformableLayer,
    pub dcn2: DeformableLayer,
}

impl DfeModule {
    pub fn new(prefix: &str, channels: usize, kernel: usize) -> Result<Self> {
        Ok(DfeModule {
            dcn1: DeformableLayer::new(format!("{prefix}.dcn1"), channels, channels, kernel)?,
            dcn2: DeformableLayer::new(format!("{prefix}.dcn2"), channels, channels, kernel)?,
        })
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.dcn1.register(store, rng);
        self.dcn2.register(store, rng);
    }

    pub fn forward<T: Scalar>(&self, bind: &Binding<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.dcn1.forward(bind, x)?.relu();
        self.dcn2.forward(bind, &h)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        [self.dcn1.param_shapes(), self.dcn2.param_shapes()].concat()
    }
}

/// SK fusion: a softmaxed per-channel convex combination of a skip branch
/// and a main branch, weights from the globally pooled sum.
#[derive(Debug, Clone)]
pub struct SkFusion {
    mlp1: Conv2dLayer,
    mlp2: Conv2dLayer,
    channels: usize,
}

impl SkFusion {
    pub fn new(prefix: &str, channels: usize, cfg: &BlockConfig) -> Self {
        let mid = (channels / cfg.sk_reduction).max(cfg.sk_min_width);
        SkFusion {
            mlp1: Conv2dLayer::same(format!("{prefix}.mlp1"), channels, mid, 1),
            mlp2: Conv2dLayer::same(format!("{prefix}.mlp2"), mid, 2 * channels, 1),
            channels,
        }
    }

    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.mlp1.register(store, rng);
        self.mlp2.register(store, rng);
    }

    /// Branch weights `[2, C]`; rows sum to one per channel.
    pub fn branch_weights<T: Scalar>(
        &self,
        bind: &Binding<T>,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if x1.shape() != x2.shape() {
            return Err(Error::shape("sk_fusion", &x1.shape(), &x2.shape()));
        }
        ensure_channels(x1, self.channels, "sk_fusion")?;
        let pooled = x1.add(x2).mean_keep(&[1, 2]);
        let hidden = self.mlp1.forward(bind, &pooled).relu();
        let logits = self.mlp2.forward(bind, &hidden); // [2C,1,1]
        Ok(softmax(&logits.reshape(&[2, self.channels]), 0))
    }

    /// `y = a1*x1 + a2*x2`.
    pub fn forward<T: Scalar>(
        &self,
        bind: &Binding<T>,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let a = self.branch_weights(bind, x1, x2)?;
        let c = self.channels;
        let a1 = a.index_axis0(0).reshape(&[c, 1, 1]);
        let a2 = a.index_axis0(1).reshape(&[c, 1, 1]);
        Ok(x1.mul(&a1).add(&x2.mul(&a2)))
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        [self.mlp1.param_shapes(), self.mlp2.param_shapes()].concat()
    }
}

/// Sets every parameter of `names` to zero; test helper for the
/// zero-weight contract cases.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(String::from)
        .collect();
    for name in names {
        store.update(&name, |a| *a = ArrayD::zeros(a.raw_dim()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::uniform;
    use crate::tensor::gradcheck::{check_gradients, GradCheckCfg};
    use crate::tensor::Graph;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn store_with<T: Scalar>(
        f: impl Fn(&mut ParamStore<T>, &mut ChaCha8Rng),
        seed: u64,
    ) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        f(&mut store, &mut r);
        store
    }

    #[test]
    fn channel_attention_zero_weights_halve_input() {
        let cfg = BlockConfig::default();
        let ca = ChannelAttention::new("blk", 8, &cfg);
        let mut store = store_with::<f64>(|s, r| ca.register(s, r), 0);
        zero_params(&mut store, "blk.");
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let f = g.constant(uniform::<f64>(&[8, 5, 5], -1.0, 1.0, &mut rng(1)));
        let y = ca.forward(&bind, &f).unwrap();
        let (fv, yv) = (f.value(), y.value());
        for (a, b) in fv.iter().zip(yv.iter()) {
            assert_abs_diff_eq!(*b, 0.5 * a, epsilon = 1e-12);
        }
    }

    #[test]
    fn channel_attention_pools_constant_channels_exactly() {
        let cfg = BlockConfig::default();
        let ca = ChannelAttention::new("blk", 3, &cfg);
        let store = store_with::<f64>(|s, r| ca.register(s, r), 2);
        let g = Graph::new();
        let _bind = Binding::bind_frozen(&g, &store);
        let mut data = ArrayD::zeros(IxDyn(&[3, 4, 4]));
        for c in 0..3 {
            data.index_axis_mut(ndarray::Axis(0), c)
                .fill(0.3 * (c as f64 + 1.0));
        }
        let f = g.constant(data);
        let pooled = f.mean_keep(&[1, 2]);
        for c in 0..3 {
            assert_abs_diff_eq!(pooled.value()[[c, 0, 0]], 0.3 * (c as f64 + 1.0));
        }
    }

    #[test]
    fn channel_attention_rejects_non_finite() {
        let cfg = BlockConfig::default();
        let ca = ChannelAttention::new("blk", 2, &cfg);
        let store = store_with::<f64>(|s, r| ca.register(s, r), 3);
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let mut data = ArrayD::zeros(IxDyn(&[2, 3, 3]));
        data[[0, 1, 1]] = f64::NAN;
        let f = g.constant(data);
        assert!(ca.forward(&bind, &f).is_err());
    }

    #[test]
    fn channel_attention_gradcheck() {
        let cfg = BlockConfig::default();
        let ca = ChannelAttention::new("blk", 8, &cfg);
        let mut r = rng(4);
        for _ in 0..3 {
            let store = store_with::<f64>(|s, rr| ca.register(s, rr), r.random_range(0..1u64 << 40));
            let f = uniform::<f64>(&[8, 4, 4], -1.0, 1.0, &mut r);
            let out = check_gradients(&[f], GradCheckCfg::default(), &mut r, |g, leaves| {
                let bind = Binding::bind_frozen(g, &store);
                ca.forward(&bind, &leaves[0]).unwrap().mean_all()
            });
            assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
        }
    }

    #[test]
    fn pixel_attention_zero_weights_halve_input_and_bound_output() {
        let cfg = BlockConfig::default();
        let pa = PixelAttention::new("blk", 8, &cfg);
        let mut store = store_with::<f64>(|s, r| pa.register(s, r), 5);
        zero_params(&mut store, "blk.");
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let f = g.constant(uniform::<f64>(&[8, 6, 6], -1.0, 1.0, &mut rng(6)));
        let y = pa.forward(&bind, &f).unwrap();
        for (a, b) in f.value().iter().zip(y.value().iter()) {
            assert_abs_diff_eq!(*b, 0.5 * a, epsilon = 1e-12);
        }
        // sigmoid gate bound: |F~| <= |F*| elementwise for any weights
        let store2 = store_with::<f64>(|s, r| pa.register(s, r), 7);
        let bind2 = Binding::bind_frozen(&g, &store2);
        let y2 = pa.forward(&bind2, &f).unwrap();
        for (a, b) in f.value().iter().zip(y2.value().iter()) {
            assert!(b.abs() <= a.abs() + 1e-15);
        }
    }

    #[test]
    fn pixel_attention_gradcheck() {
        let cfg = BlockConfig::default();
        let pa = PixelAttention::new("blk", 8, &cfg);
        let mut r = rng(8);
        let store = store_with::<f64>(|s, rr| pa.register(s, rr), 9);
        let f = uniform::<f64>(&[8, 5, 5], -1.0, 1.0, &mut r);
        let out = check_gradients(&[f], GradCheckCfg::default(), &mut r, |g, leaves| {
            let bind = Binding::bind_frozen(g, &store);
            pa.forward(&bind, &leaves[0]).unwrap().mean_all()
        });
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    #[test]
    fn fa_block_zero_attention_matches_hand_composition() {
        // With zero CA/PA weights both gates are 0.5, so the block must
        // equal f + 0.25*(f + conv2(relu(conv1(f)))). The oracle composes
        // the primitive ops by hand.
        let cfg = BlockConfig::default();
        let fa = FaBlock::new("fa0", 8, &cfg);
        let mut store = store_with::<f64>(|s, r| fa.register(s, r), 10);
        zero_params(&mut store, "fa0.ca.");
        zero_params(&mut store, "fa0.pa.");
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let f = g.constant(uniform::<f64>(&[8, 6, 6], -1.0, 1.0, &mut rng(11)));
        let y = fa.forward(&bind, &f).unwrap();

        let conv1 = Conv2dLayer::same("fa0.conv1", 8, 8, 3);
        let conv2 = Conv2dLayer::same("fa0.conv2", 8, 8, 3);
        let conv = conv2.forward(&bind, &conv1.forward(&bind, &f).relu());
        let expected = f.add(&conv.add(&f).scale(0.25));
        let diff = (&*y.value() - &*expected.value())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn fa_block_zero_input_zero_biases_gives_zero() {
        let cfg = BlockConfig::default();
        let fa = FaBlock::new("fa0", 4, &cfg);
        let mut store = store_with::<f64>(|s, r| fa.register(s, r), 12);
        // zero all biases, keep weights
        let names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b"))
            .map(String::from)
            .collect();
        for n in names {
            store.update(&n, |a| *a = ArrayD::zeros(a.raw_dim()));
        }
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let f = g.zeros(&[4, 5, 5]);
        let y = fa.forward(&bind, &f).unwrap();
        assert!(y.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fa_block_rejects_channel_mismatch() {
        let cfg = BlockConfig::default();
        let fa = FaBlock::new("fa0", 4, &cfg);
        let store = store_with::<f64>(|s, r| fa.register(s, r), 13);
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let f = g.zeros(&[6, 5, 5]);
        assert!(fa.forward(&bind, &f).is_err());
    }

    #[test]
    fn fa_block_gradcheck() {
        let cfg = BlockConfig::default();
        let fa = FaBlock::new("fa0", 8, &cfg);
        let mut r = rng(14);
        let store = store_with::<f64>(|s, rr| fa.register(s, rr), 15);
        let f = uniform::<f64>(&[8, 5, 5], -1.0, 1.0, &mut r);
        let out = check_gradients(&[f], GradCheckCfg::default(), &mut r, |g, leaves| {
            let bind = Binding::bind_frozen(g, &store);
            fa.forward(&bind, &leaves[0]).unwrap().mean_all()
        });
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    #[test]
    fn deformable_layer_rejects_even_kernel() {
        assert!(DeformableLayer::new("d", 4, 4, 2).is_err());
        assert!(DeformableLayer::new("d", 4, 4, 3).is_ok());
    }

    #[test]
    fn deformable_layer_zero_input_outputs_bias() {
        let layer = DeformableLayer::new("d", 3, 5, 3).unwrap();
        let store = store_with::<f64>(|s, r| layer.register(s, r), 16);
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let x = g.zeros(&[3, 6, 6]);
        let y = layer.forward(&bind, &x).unwrap();
        let b = store.get("d.b").unwrap();
        for co in 0..5 {
            assert_abs_diff_eq!(y.value()[[co, 2, 3]], b[[co]], epsilon = 1e-12);
        }
    }

    #[test]
    fn deformable_layer_at_init_equals_standard_conv() {
        // Zero-initialized heads mean zero offsets and sigmoid(0)=0.5 masks;
        // output must equal 0.5 * standard conv + bias.
        let layer = DeformableLayer::new("d", 2, 3, 3).unwrap();
        let store = store_with::<f64>(|s, r| layer.register(s, r), 17);
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let x_arr = uniform::<f64>(&[2, 6, 6], -1.0, 1.0, &mut rng(18));
        let x = g.constant(x_arr.clone());
        let y = layer.forward(&bind, &x).unwrap();
        let oracle = crate::tensor::naive_conv2d_same(&x_arr, store.get("d.w").unwrap());
        let b = store.get("d.b").unwrap();
        for co in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_abs_diff_eq!(
                        y.value()[[co, i, j]],
                        0.5 * oracle[[co, i, j]] + b[[co]],
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn dfe_module_gradcheck_with_interior_offsets() {
        let dfe = DfeModule::new("dfe0", 4, 3).unwrap();
        let mut r = rng(19);
        let mut store = store_with::<f64>(|s, rr| dfe.register(s, rr), 20);
        // push offset biases to cell-interior values so FD stays off the
        // bilinear lattice
        for dcn in ["dfe0.dcn1", "dfe0.dcn2"] {
            store.update(&format!("{dcn}.offset.b"), |a| {
                for v in a.iter_mut() {
                    *v = 0.37;
                }
            });
        }
        let x = uniform::<f64>(&[4, 5, 5], -1.0, 1.0, &mut r);
        let out = check_gradients(&[x], GradCheckCfg::default(), &mut r, |g, leaves| {
            let bind = Binding::bind_frozen(g, &store);
            dfe.forward(&bind, &leaves[0]).unwrap().mean_all()
        });
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    #[test]
    fn dfe_zero_input_zero_biases_gives_zero() {
        let dfe = DfeModule::new("dfe0", 3, 3).unwrap();
        let mut store = store_with::<f64>(|s, r| dfe.register(s, r), 21);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b"))
            .map(String::from)
            .collect();
        for n in names {
            store.update(&n, |a| *a = ArrayD::zeros(a.raw_dim()));
        }
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let x = g.zeros(&[3, 5, 5]);
        let y = dfe.forward(&bind, &x).unwrap();
        assert!(y.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sk_fusion_equal_logits_average_and_saturation() {
        let cfg = BlockConfig::default();
        let sk = SkFusion::new("sk1", 8, &cfg);
        let mut store = store_with::<f64>(|s, r| sk.register(s, r), 22);
        zero_params(&mut store, "sk1."); // all logits zero -> a1=a2=0.5
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let mut r = rng(23);
        let x1 = g.constant(uniform::<f64>(&[8, 4, 4], -1.0, 1.0, &mut r));
        let x2 = g.constant(uniform::<f64>(&[8, 4, 4], -1.0, 1.0, &mut r));
        let y = sk.forward(&bind, &x1, &x2).unwrap();
        for ((a, b), c) in x1.value().iter().zip(x2.value().iter()).zip(y.value().iter()) {
            assert_abs_diff_eq!(*c, 0.5 * (a + b), epsilon = 1e-12);
        }

        // saturation: bias branch-1 logits to +20, branch-2 to -20
        store.update("sk1.mlp2.b", |arr| {
            for (i, v) in arr.iter_mut().enumerate() {
                *v = if i < 8 { 20.0 } else { -20.0 };
            }
        });
        let g2 = Graph::new();
        let bind2 = Binding::bind_frozen(&g2, &store);
        let x1b = g2.constant((*x1.value()).clone());
        let x2b = g2.constant((*x2.value()).clone());
        let y2 = sk.forward(&bind2, &x1b, &x2b).unwrap();
        for (a, c) in x1b.value().iter().zip(y2.value().iter()) {
            assert_abs_diff_eq!(*c, *a, epsilon = 1e-8);
        }
    }

    #[test]
    fn sk_fusion_is_convex_combination_per_channel() {
        let cfg = BlockConfig::default();
        let sk = SkFusion::new("sk1", 6, &cfg);
        let mut r = rng(24);
        for trial in 0..1000 {
            let store = store_with::<f64>(|s, rr| sk.register(s, rr), 1000 + trial);
            let g = Graph::new();
            let bind = Binding::bind_frozen(&g, &store);
            let x1 = g.constant(uniform::<f64>(&[6, 3, 3], -2.0, 2.0, &mut r));
            let x2 = g.constant(uniform::<f64>(&[6, 3, 3], -2.0, 2.0, &mut r));
            let a = sk.branch_weights(&bind, &x1, &x2).unwrap();
            let av = a.value();
            for c in 0..6 {
                let (a1, a2) = (av[[0, c]], av[[1, c]]);
                assert!(a1 > 0.0 && a1 < 1.0 && a2 > 0.0 && a2 < 1.0);
                assert_abs_diff_eq!(a1 + a2, 1.0, epsilon = 1e-6);
            }
            let y = sk.forward(&bind, &x1, &x2).unwrap();
            let (v1, v2, vy) = (x1.value(), x2.value(), y.value());
            for c in 0..6 {
                let max1 = (0..9).map(|i| v1[[c, i / 3, i % 3]].abs()).fold(0.0, f64::max);
                let max2 = (0..9).map(|i| v2[[c, i / 3, i % 3]].abs()).fold(0.0, f64::max);
                let maxy = (0..9).map(|i| vy[[c, i / 3, i % 3]].abs()).fold(0.0, f64::max);
                assert!(maxy <= max1.max(max2) + 1e-12, "trial {trial} channel {c}");
            }
        }
    }

    #[test]
    fn sk_fusion_rejects_shape_mismatch() {
        let cfg = BlockConfig::default();
        let sk = SkFusion::new("sk1", 4, &cfg);
        let store = store_with::<f64>(|s, r| sk.register(s, r), 25);
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let x1 = g.zeros(&[4, 4, 4]);
        let x2 = g.zeros(&[4, 4, 5]);
        assert!(sk.forward(&bind, &x1, &x2).is_err());
    }

    #[test]
    fn sk_fusion_gradcheck() {
        let cfg = BlockConfig::default();
        let sk = SkFusion::new("sk1", 8, &cfg);
        let mut r = rng(26);
        let store = store_with::<f64>(|s, rr| sk.register(s, rr), 27);
        let x1 = uniform::<f64>(&[8, 4, 4], -1.0, 1.0, &mut r);
        let x2 = uniform::<f64>(&[8, 4, 4], -1.0, 1.0, &mut r);
        let out = check_gradients(&[x1, x2], GradCheckCfg::default(), &mut r, |g, leaves| {
            let bind = Binding::bind_frozen(g, &store);
            sk.forward(&bind, &leaves[0], &leaves[1]).unwrap().mean_all()
        });
        assert!(out.max_rel_err < 1e-4, "rel err {}", out.max_rel_err);
    }

    #[test]
    fn blocks_preserve_shape() {
        let cfg = BlockConfig::default();
        let fa = FaBlock::new("fa0", 8, &cfg);
        let dfe = DfeModule::new("dfe0", 8, 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(28);
        fa.register(&mut store, &mut r);
        dfe.register(&mut store, &mut r);
        let g = Graph::new();
        let bind = Binding::bind_frozen(&g, &store);
        let x = g.constant(uniform::<f64>(&[8, 6, 7], -1.0, 1.0, &mut r));
        assert_eq!(fa.forward(&bind, &x).unwrap().shape(), vec![8, 6, 7]);
        assert_eq!(dfe.forward(&bind, &x).unwrap().shape(), vec![8, 6, 7]);
    }

    #[test]
    fn instance_norm_normalizes_per_channel() {
        let g = Graph::<f64>::new();
        let mut r = rng(29);
        let x = g.constant(uniform::<f64>(&[3, 8, 8], -2.0, 5.0, &mut r));
        let y = instance_norm(&x);
        let v = y.value();
        for c in 0..3 {
            let vals: Vec<f64> = (0..64).map(|i| v[[c, i / 8, i % 8]]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 64.0;
            let var: f64 = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
        }
    }
}
