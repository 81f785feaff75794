//! Unpaired corpus ingestion, augmentation, and synthetic degradations.
//!
//! Images are stored as `H x W x 3` f64 arrays in `[0, 1]` (sRGB). The
//! network side works in `[-1, 1]`; conversions live here so the boundary
//! is explicit. Synthetic generators (scenes, haze, rain, snow) make every
//! training and evaluation path runnable without shipping datasets.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// An sRGB raster in the `[0, 1]` storage domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::shape("image", &[1, 1, 3], &[h, w, c]));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image", "pixel outside [0, 1]"));
        }
        Ok(Image { pixels })
    }

    /// Clamps into `[0, 1]` before constructing; for outputs of additive
    /// compositors.
    pub fn from_clipped(mut pixels: Array3<f64>) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image { pixels }
    }

    pub fn constant(h: usize, w: usize, value: [f64; 3]) -> Self {
        let mut px = Array3::zeros((h, w, 3));
        for c in 0..3 {
            px.index_axis_mut(ndarray::Axis(2), c).fill(value[c]);
        }
        Image { pixels: px }
    }

    pub fn h(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn w(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Data {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut px = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                px[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
            }
        }
        Ok(Image { pixels: px })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let (h, w, _) = self.pixels.dim();
        let mut out = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (self.pixels[[y, x, 0]] * 255.0).round() as u8,
                    (self.pixels[[y, x, 1]] * 255.0).round() as u8,
                    (self.pixels[[y, x, 2]] * 255.0).round() as u8,
                ];
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out.save(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// `[0,1] HWC` -> `[-1,1] CHW` for the network.
    pub fn to_network<T: Scalar>(&self) -> ArrayD<T> {
        let (h, w, _) = self.pixels.dim();
        let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = T::from_f64(self.pixels[[y, x, c]] * 2.0 - 1.0);
                }
            }
        }
        out
    }

    /// `[-1,1] CHW` -> `[0,1] HWC`; clamps the tanh range edge.
    pub fn from_network<T: Scalar>(arr: &ArrayD<T>) -> Result<Self> {
        let shape = arr.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("network image", &[3, 0, 0], shape));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut px = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    px[[y, x, c]] = ((arr[[c, y, x]].to_f64() + 1.0) / 2.0).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Image { pixels: px })
    }

    /// Side-by-side horizontal concatenation (panels must share height).
    pub fn hconcat(panels: &[&Image]) -> Result<Image> {
        let h = panels[0].h();
        if panels.iter().any(|p| p.h() != h) {
            return Err(Error::invalid("hconcat", "panel heights differ"));
        }
        let total_w: usize = panels.iter().map(|p| p.w()).sum();
        let mut px = Array3::zeros((h, total_w, 3));
        let mut off = 0;
        for p in panels {
            px.slice_mut(ndarray::s![.., off..off + p.w(), ..])
                .assign(&p.pixels);
            off += p.w();
        }
        Ok(Image { pixels: px })
    }
}

/// Unpaired training corpus: file lists for the degraded (A) and clear (B)
/// domains, in deterministic lexicographic order.
#[derive(Debug, Clone)]
pub struct UnpairedCorpus {
    pub domain_a: Vec<PathBuf>,
    pub domain_b: Vec<PathBuf>,
    /// One entry per skipped unreadable file.
    pub warnings: Vec<String>,
}

fn list_images(root: &Path, warnings: &mut Vec<String>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::Data {
        path: root.display().to_string(),
        message: format!("cannot read directory: {e}"),
    })?;
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        // readability probe: decode just the header
        match image::image_dimensions(&path) {
            Ok(_) => out.push(path),
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data {
            path: root.display().to_string(),
            message: "no readable PNG/JPEG files".into(),
        });
    }
    Ok(out)
}

pub fn load_corpus(root_a: &Path, root_b: &Path) -> Result<UnpairedCorpus> {
    let mut warnings = Vec::new();
    let domain_a = list_images(root_a, &mut warnings)?;
    let domain_b = list_images(root_b, &mut warnings)?;
    Ok(UnpairedCorpus {
        domain_a,
        domain_b,
        warnings,
    })
}

/// Augmentation parameters. The crop side is drawn uniformly from
/// `[scale_lo, scale_hi] * min(H, W)` before resizing to `out_size`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentCfg {
    pub out_size: usize,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg {
            out_size: 256,
            scale_lo: 0.8,
            scale_hi: 1.0,
        }
    }
}

/// Bilinear resize with corner alignment: scale 1 is the identity and
/// constants are preserved exactly.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, _) = img.pixels.dim();
    let mut out = Array3::zeros((out_h, out_w, 3));
    let fy = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let fx = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for oy in 0..out_h {
        let sy = oy as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ly = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ox as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let lx = sx - x0 as f64;
            for c in 0..3 {
                let v = img.pixels[[y0, x0, c]] * (1.0 - ly) * (1.0 - lx)
                    + img.pixels[[y0, x1, c]] * (1.0 - ly) * lx
                    + img.pixels[[y1, x0, c]] * ly * (1.0 - lx)
                    + img.pixels[[y1, x1, c]] * ly * lx;
                out[[oy, ox, c]] = v;
            }
        }
    }
    Image { pixels: out }
}

/// Random crop of a random scale, then bilinear resize to the target side.
/// Images smaller than the target are upscaled first.
pub fn augment(img: &Image, cfg: &AugmentCfg, rng: &mut ChaCha8Rng) -> Image {
    let mut work = img.clone();
    let out = cfg.out_size;
    if work.h().min(work.w()) < out {
        let scale = out as f64 / work.h().min(work.w()) as f64;
        let nh = ((work.h() as f64 * scale).round() as usize).max(out);
        let nw = ((work.w() as f64 * scale).round() as usize).max(out);
        work = resize_bilinear(&work, nh, nw);
    }
    let min_side = work.h().min(work.w());
    let factor = rng.random_range(cfg.scale_lo..=cfg.scale_hi);
    let side = ((factor * min_side as f64).floor() as usize).clamp(2, min_side);
    let y0 = rng.random_range(0..=work.h() - side);
    let x0 = rng.random_range(0..=work.w() - side);
    let crop = Image {
        pixels: work
            .pixels
            .slice(ndarray::s![y0..y0 + side, x0..x0 + side, ..])
            .to_owned(),
    };
    if side == out {
        crop
    } else {
        resize_bilinear(&crop, out, out)
    }
}

/// Uniform unpaired draw from each domain, then augmentation.
pub fn sample_training_pair(
    corpus: &UnpairedCorpus,
    cfg: &AugmentCfg,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, Image)> {
    let ia = rng.random_range(0..corpus.domain_a.len());
    let ib = rng.random_range(0..corpus.domain_b.len());
    let a = Image::load(&corpus.domain_a[ia])?;
    let b = Image::load(&corpus.domain_b[ib])?;
    Ok((augment(&a, cfg, rng), augment(&b, cfg, rng)))
}

// ---------------------------------------------------------------------------
// synthetic degradations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HazeSpec {
    /// Scattering coefficient; 0 disables the haze entirely.
    pub beta: f64,
    /// Atmospheric light per channel.
    pub atmosphere: [f64; 3],
    /// Seed of the synthetic depth field.
    pub depth_seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RainSpec {
    pub streaks: usize,
    pub length_px: f64,
    pub angle_deg: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SnowSpec {
    pub flakes: usize,
    pub radius_px: f64,
    pub opacity: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationSpec {
    Haze(HazeSpec),
    Rain(RainSpec),
    Snow(SnowSpec),
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("degradation spec", msg));
        match self {
            DegradationSpec::Haze(h) => {
                if h.beta < 0.0 || !h.beta.is_finite() {
                    return fail(format!("beta {} must be >= 0", h.beta));
                }
                if h.atmosphere.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return fail(format!("atmosphere {:?} outside [0,1]", h.atmosphere));
                }
            }
            DegradationSpec::Rain(r) => {
                if r.length_px <= 0.0 || !(0.0..=1.0).contains(&r.intensity) {
                    return fail(format!(
                        "rain length {} must be > 0 and intensity {} in [0,1]",
                        r.length_px, r.intensity
                    ));
                }
            }
            DegradationSpec::Snow(s) => {
                if s.radius_px <= 0.0 || !(0.0..=1.0).contains(&s.opacity) {
                    return fail(format!(
                        "snow radius {} must be > 0 and opacity {} in [0,1]",
                        s.radius_px, s.opacity
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DegradationSpec::Haze(_) => "haze",
            DegradationSpec::Rain(_) => "rain",
            DegradationSpec::Snow(_) => "snow",
        }
    }
}

/// Smooth value noise in `[0, 1]`: a coarse random lattice, smoothstep
/// bilinear interpolation, two octaves, then min-max normalization.
pub fn value_noise(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut field = ndarray::Array2::<f64>::zeros((h, w));
    let mut amplitude = 1.0;
    let mut cell = (h.min(w) as f64 / 3.0).max(2.0);
    for octave in 0..2u64 {
        let mut rng = stream_rng(seed, "value-noise", octave);
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(0.0..1.0)).collect();
        for y in 0..h {
            let gy = y as f64 / cell;
            let y0 = gy.floor() as usize;
            let ty = smoothstep(gy - y0 as f64);
            for x in 0..w {
                let gx = x as f64 / cell;
                let x0 = gx.floor() as usize;
                let tx = smoothstep(gx - x0 as f64);
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let v = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
                field[[y, x]] += amplitude * v;
            }
        }
        amplitude *= 0.5;
        cell /= 2.0;
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    let mut out = Array3::zeros((h, w, 1));
    for y in 0..h {
        for x in 0..w {
            out[[y, x, 0]] = (field[[y, x]] - lo) / span;
        }
    }
    out
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Transmission `t = exp(-beta * d)` from a depth field.
pub fn transmission_from_depth(depth: &Array3<f64>, beta: f64) -> Array3<f64> {
    depth.mapv(|d| (-beta * d).exp())
}

/// Atmospheric scattering blend `I = J*t + A*(1 - t)`.
pub fn apply_haze(clean: &Image, transmission: &Array3<f64>, atmosphere: [f64; 3]) -> Image {
    let (h, w, _) = clean.pixels.dim();
    let mut px = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = transmission[[y, x, 0]];
            for c in 0..3 {
                px[[y, x, c]] = clean.pixels[[y, x, c]] * t + atmosphere[c] * (1.0 - t);
            }
        }
    }
    Image::from_clipped(px)
}

fn apply_rain(clean: &Image, spec: &RainSpec, rng: &mut ChaCha8Rng) -> Image {
    let (h, w, _) = clean.pixels.dim();
    let mut px = clean.pixels.clone();
    for _ in 0..spec.streaks {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let jitter: f64 = rng.random_range(-4.0..4.0);
        let theta = (spec.angle_deg + jitter).to_radians();
        let (dy, dx) = (theta.cos(), theta.sin());
        let steps = (spec.length_px * 2.0).ceil() as usize;
        for s in 0..=steps {
            let f = s as f64 / steps.max(1) as f64 - 0.5;
            let y = cy + f * spec.length_px * dy;
            let x = cx + f * spec.length_px * dx;
            if y < 0.0 || x < 0.0 {
                continue;
            }
            let (yi, xi) = (y as usize, x as usize);
            if yi >= h || xi >= w {
                continue;
            }
            // taper toward the streak ends
            let fade = 1.0 - (2.0 * f).abs();
            for c in 0..3 {
                px[[yi, xi, c]] += spec.intensity * fade;
            }
        }
    }
    Image::from_clipped(px)
}

fn apply_snow(clean: &Image, spec: &SnowSpec, rng: &mut ChaCha8Rng) -> Image {
    let (h, w, _) = clean.pixels.dim();
    let mut px = clean.pixels.clone();
    for _ in 0..spec.flakes {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = spec.radius_px * rng.random_range(0.6..1.4);
        let (y_lo, y_hi) = (
            (cy - r).floor().max(0.0) as usize,
            ((cy + r).ceil() as usize).min(h - 1),
        );
        let (x_lo, x_hi) = (
            (cx - r).floor().max(0.0) as usize,
            ((cx + r).ceil() as usize).min(w - 1),
        );
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 <= r * r {
                    // soft rim
                    let alpha = spec.opacity * (1.0 - (d2 / (r * r)).powi(2) * 0.5);
                    for c in 0..3 {
                        px[[y, x, c]] = px[[y, x, c]] * (1.0 - alpha) + alpha;
                    }
                }
            }
        }
    }
    Image::from_clipped(px)
}

/// Applies the degradation described by `spec`. Deterministic given the
/// spec (haze carries its own depth seed) and the caller's RNG state.
pub fn synth_degrade(clean: &Image, spec: &DegradationSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    spec.validate()?;
    Ok(match spec {
        DegradationSpec::Haze(hs) => {
            let depth = value_noise(clean.h(), clean.w(), hs.depth_seed);
            let t = transmission_from_depth(&depth, hs.beta);
            apply_haze(clean, &t, hs.atmosphere)
        }
        DegradationSpec::Rain(rs) => apply_rain(clean, rs, rng),
        DegradationSpec::Snow(ss) => apply_snow(clean, ss, rng),
    })
}

/// Procedural "clean" scene: smooth colored background plus random
/// rectangles, discs, and stripes. Gives the synthetic tasks real structure
/// to restore without shipping any dataset.
pub fn synth_clean_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut px = Array3::zeros((h, w, 3));
    let bg_seed: u64 = rng.random();
    for c in 0..3 {
        let noise = value_noise(h, w, bg_seed.wrapping_add(c as u64));
        let lo = rng.random_range(0.15..0.45);
        let hi = rng.random_range(0.55..0.9);
        for y in 0..h {
            for x in 0..w {
                px[[y, x, c]] = lo + (hi - lo) * noise[[y, x, 0]];
            }
        }
    }
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let color = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        match rng.random_range(0..3) {
            0 => {
                // rectangle
                let y0 = rng.random_range(0..h);
                let x0 = rng.random_range(0..w);
                let rh = rng.random_range(h / 8..h / 2 + 1);
                let rw = rng.random_range(w / 8..w / 2 + 1);
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        for c in 0..3 {
                            px[[y, x, c]] = color[c];
                        }
                    }
                }
            }
            1 => {
                // disc
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(h.min(w) as f64 / 10.0..h.min(w) as f64 / 3.0);
                for y in 0..h {
                    for x in 0..w {
                        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                            for c in 0..3 {
                                px[[y, x, c]] = color[c];
                            }
                        }
                    }
                }
            }
            _ => {
                // horizontal stripe with a soft gradient
                let y0 = rng.random_range(0..h);
                let band = rng.random_range(h / 12 + 1..h / 4 + 2);
                for y in y0..(y0 + band).min(h) {
                    let f = (y - y0) as f64 / band as f64;
                    for x in 0..w {
                        for c in 0..3 {
                            px[[y, x, c]] = px[[y, x, c]] * f + color[c] * (1.0 - f);
                        }
                    }
                }
            }
        }
    }
    Image::from_clipped(px)
}

// ---------------------------------------------------------------------------
// paired-evaluation manifest
// ---------------------------------------------------------------------------

/// One synthesized pair; paths are relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean: String,
    pub degraded: String,
    pub spec: DegradationSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SynthManifest {
    pub entries: Vec<ManifestEntry>,
}

impl SynthManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.display().to_string(),
            message: format!("bad manifest: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn domain_round_trip_is_exact() {
        let mut r = rng(1);
        let img = synth_clean_scene(16, 12, &mut r);
        let net = img.to_network::<f64>();
        let back = Image::from_network(&net).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn corpus_loads_sorted_and_counts_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let (da, db) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&da).unwrap();
        std::fs::create_dir_all(&db).unwrap();
        let mut r = rng(2);
        for i in 0..4 {
            synth_clean_scene(8, 8, &mut r)
                .save_png(&da.join(format!("{i:02}.png")))
                .unwrap();
        }
        for i in 0..3 {
            synth_clean_scene(8, 8, &mut r)
                .save_png(&db.join(format!("{i:02}.png")))
                .unwrap();
        }
        // corrupt one file in A
        std::fs::write(da.join("01.png"), b"not a png at all").unwrap();

        let corpus = load_corpus(&da, &db).unwrap();
        assert_eq!(corpus.domain_a.len(), 3);
        assert_eq!(corpus.domain_b.len(), 3);
        assert_eq!(corpus.warnings.len(), 1);
        let sorted = {
            let mut s = corpus.domain_a.clone();
            s.sort();
            s
        };
        assert_eq!(corpus.domain_a, sorted);

        let again = load_corpus(&da, &db).unwrap();
        assert_eq!(corpus.domain_a, again.domain_a);
        assert_eq!(corpus.domain_b, again.domain_b);
    }

    #[test]
    fn corpus_rejects_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let (da, db) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&da).unwrap();
        std::fs::create_dir_all(&db).unwrap();
        assert!(load_corpus(&da, &db).is_err());
    }

    #[test]
    fn sampling_is_seed_reproducible_and_roughly_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let (da, db) = (dir.path().join("a"), dir.path().join("b"));
        let mut r = rng(3);
        for i in 0..5 {
            synth_clean_scene(8, 8, &mut r)
                .save_png(&da.join(format!("{i}.png")))
                .unwrap();
        }
        synth_clean_scene(8, 8, &mut r)
            .save_png(&db.join("only.png"))
            .unwrap();
        let corpus = load_corpus(&da, &db).unwrap();

        // identical index sequences under the same seed
        let draw_indices = |seed: u64, n: usize| -> Vec<usize> {
            let mut rr = rng(seed);
            (0..n)
                .map(|_| {
                    let ia = rr.random_range(0..corpus.domain_a.len());
                    let _ib = rr.random_range(0..corpus.domain_b.len());
                    ia
                })
                .collect()
        };
        assert_eq!(draw_indices(7, 100), draw_indices(7, 100));

        // 5-sigma binomial bound on per-index frequency over 10k draws
        let counts = {
            let mut c = [0usize; 5];
            for ia in draw_indices(8, 10_000) {
                c[ia] += 1;
            }
            c
        };
        let p: f64 = 1.0 / 5.0;
        let sigma = (10_000.0 * p * (1.0 - p)).sqrt();
        for (i, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - 10_000.0 * p).abs();
            assert!(dev < 5.0 * sigma, "index {i} count {n} deviates {dev}");
        }

        // size-1 domain always yields that image
        let mut rr = rng(9);
        for _ in 0..10 {
            let ib = rr.random_range(0..corpus.domain_b.len());
            assert_eq!(ib, 0);
        }
    }

    #[test]
    fn augment_identity_when_crop_factor_forced_one() {
        let mut r = rng(4);
        let img = synth_clean_scene(32, 32, &mut r);
        let cfg = AugmentCfg {
            out_size: 32,
            scale_lo: 1.0,
            scale_hi: 1.0,
        };
        let out = augment(&img, &cfg, &mut rng(5));
        assert_eq!(out, img);
    }

    #[test]
    fn augment_preserves_constants_and_bounds() {
        let img = Image::constant(40, 56, [0.25, 0.5, 0.75]);
        let cfg = AugmentCfg {
            out_size: 32,
            scale_lo: 0.8,
            scale_hi: 1.0,
        };
        let out = augment(&img, &cfg, &mut rng(6));
        assert_eq!((out.h(), out.w()), (32, 32));
        for y in 0..32 {
            for x in 0..32 {
                assert_abs_diff_eq!(out.pixels()[[y, x, 1]], 0.5, epsilon = 1e-12);
            }
        }

        let mut r = rng(7);
        let scene = synth_clean_scene(20, 20, &mut r); // smaller than out: upscale path
        let (lo, hi) = scene.pixels().iter().fold((1.0f64, 0.0f64), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        let out2 = augment(&scene, &cfg, &mut r);
        for &v in out2.pixels().iter() {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn haze_blend_contract_cases() {
        let mut r = rng(8);
        let clean = synth_clean_scene(16, 16, &mut r);

        // beta = 0 -> identity
        let spec = DegradationSpec::Haze(HazeSpec {
            beta: 0.0,
            atmosphere: [0.8, 0.8, 0.8],
            depth_seed: 3,
        });
        let out = synth_degrade(&clean, &spec, &mut rng(9)).unwrap();
        assert_eq!(out, clean);

        // t = 0 everywhere -> pure atmosphere
        let t0 = Array3::zeros((16, 16, 1));
        let hazed = apply_haze(&clean, &t0, [0.7, 0.8, 0.9]);
        for y in 0..16 {
            assert_abs_diff_eq!(hazed.pixels()[[y, 3, 0]], 0.7, epsilon = 1e-12);
            assert_abs_diff_eq!(hazed.pixels()[[y, 3, 2]], 0.9, epsilon = 1e-12);
        }

        // t = 0.5, A = 1, J = 0.2 -> 0.6
        let j = Image::constant(8, 8, [0.2, 0.2, 0.2]);
        let t_half = Array3::from_elem((8, 8, 1), 0.5);
        let blended = apply_haze(&j, &t_half, [1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(blended.pixels()[[4, 4, 0]], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn haze_severity_is_monotone_in_beta() {
        let mut r = rng(10);
        let clean = synth_clean_scene(32, 32, &mut r);
        let mse = |a: &Image, b: &Image| -> f64 {
            a.pixels()
                .iter()
                .zip(b.pixels().iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / (32.0 * 32.0 * 3.0)
        };
        let mut last = 0.0;
        for beta in [0.5, 1.0, 2.0] {
            let spec = DegradationSpec::Haze(HazeSpec {
                beta,
                atmosphere: [0.9, 0.9, 0.9],
                depth_seed: 11,
            });
            let out = synth_degrade(&clean, &spec, &mut rng(12)).unwrap();
            let m = mse(&clean, &out);
            assert!(m > last, "beta {beta}: mse {m} not above {last}");
            last = m;
        }
    }

    #[test]
    fn degradations_stay_in_range_over_many_specs() {
        let mut r = rng(13);
        for trial in 0..1000 {
            let clean = if trial % 50 == 0 {
                synth_clean_scene(12, 12, &mut r)
            } else {
                // reuse a cheap constant image for the bulk
                Image::constant(12, 12, [0.9, 0.85, 0.8])
            };
            let spec = match trial % 3 {
                0 => DegradationSpec::Haze(HazeSpec {
                    beta: r.random_range(0.0..4.0),
                    atmosphere: [
                        r.random_range(0.0..1.0),
                        r.random_range(0.0..1.0),
                        r.random_range(0.0..1.0),
                    ],
                    depth_seed: r.random(),
                }),
                1 => DegradationSpec::Rain(RainSpec {
                    streaks: r.random_range(1..40),
                    length_px: r.random_range(2.0..10.0),
                    angle_deg: r.random_range(-40.0..40.0),
                    intensity: r.random_range(0.0..1.0),
                }),
                _ => DegradationSpec::Snow(SnowSpec {
                    flakes: r.random_range(1..30),
                    radius_px: r.random_range(0.5..3.0),
                    opacity: r.random_range(0.0..1.0),
                }),
            };
            let out = synth_degrade(&clean, &spec, &mut r).unwrap();
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn out_of_range_specs_are_rejected() {
        let clean = Image::constant(8, 8, [0.5; 3]);
        let bad = DegradationSpec::Haze(HazeSpec {
            beta: -1.0,
            atmosphere: [0.5; 3],
            depth_seed: 0,
        });
        assert!(synth_degrade(&clean, &bad, &mut rng(0)).is_err());
        let bad_rain = DegradationSpec::Rain(RainSpec {
            streaks: 3,
            length_px: 5.0,
            angle_deg: 0.0,
            intensity: 1.5,
        });
        assert!(synth_degrade(&clean, &bad_rain, &mut rng(0)).is_err());
    }

    #[test]
    fn synth_degrade_is_deterministic() {
        let mut r = rng(14);
        let clean = synth_clean_scene(16, 16, &mut r);
        let spec = DegradationSpec::Snow(SnowSpec {
            flakes: 10,
            radius_px: 1.5,
            opacity: 0.8,
        });
        let a = synth_degrade(&clean, &spec, &mut rng(15)).unwrap();
        let b = synth_degrade(&clean, &spec, &mut rng(15)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = SynthManifest {
            entries: vec![ManifestEntry {
                clean: "clean/0000.png".into(),
                degraded: "degraded/0000.png".into(),
                spec: DegradationSpec::Haze(HazeSpec {
                    beta: 1.2,
                    atmosphere: [0.9, 0.8, 0.7],
                    depth_seed: 5,
                }),
                seed: 42,
            }],
        };
        m.save(&path).unwrap();
        let back = SynthManifest::load(&path).unwrap();
        assert_eq!(back.entries.len(), 1);
        assert_eq!(back.entries[0].spec, m.entries[0].spec);
    }
}
