//! PSNR / SSIM evaluation and per-dataset aggregation.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

/// PSNR values above this are reported as the cap with a flag, keeping
/// exact matches out of the aggregates' way.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PsnrResult {
    pub db: f64,
    /// True when MSE was 0 (exact match) or the value exceeded the cap.
    pub capped: bool,
}

/// `10 * log10(R^2 / MSE)` over all pixels and channels.
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<PsnrResult> {
    if x.h() != y.h() || x.w() != y.w() {
        return Err(Error::shape(
            "psnr",
            &[x.h(), x.w()],
            &[y.h(), y.w()],
        ));
    }
    let n = (x.h() * x.w() * 3) as f64;
    let mse: f64 = x
        .pixels()
        .iter()
        .zip(y.pixels().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PsnrResult {
            db: PSNR_CAP_DB,
            capped: true,
        });
    }
    let db = 10.0 * (peak * peak / mse).log10();
    if db > PSNR_CAP_DB {
        Ok(PsnrResult {
            db: PSNR_CAP_DB,
            capped: true,
        })
    } else {
        Ok(PsnrResult { db, capped: false })
    }
}

/// Single-scale SSIM configuration; defaults follow the reference
/// formulation (11x11 Gaussian window, sigma 1.5, K1/K2 = 0.01/0.03, L=1).
/// Scores are computed per channel and averaged.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SsimCfg {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimCfg {
    fn default() -> Self {
        SsimCfg {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            (-(y * y + x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM over all valid window positions, channel-averaged.
pub fn ssim(x: &Image, y: &Image, cfg: &SsimCfg) -> Result<f64> {
    if x.h() != y.h() || x.w() != y.w() {
        return Err(Error::shape("ssim", &[x.h(), x.w()], &[y.h(), y.w()]));
    }
    let (h, w) = (x.h(), x.w());
    let n = cfg.window;
    if h < n || w < n {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {n}x{n} window"),
        ));
    }
    let win = gaussian_window(n, cfg.sigma);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for oy in 0..=(h - n) {
            for ox in 0..=(w - n) {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
                for wy in 0..n {
                    for wx in 0..n {
                        let g = win[wy * n + wx];
                        let a = x.pixels()[[oy + wy, ox + wx, ch]];
                        let b = y.pixels()[[oy + wy, ox + wx, ch]];
                        mx += g * a;
                        my += g * b;
                        sxx += g * (a * a);
                        syy += g * (b * b);
                        // grouping keeps ssim(x, y) == ssim(y, x) bitwise
                        sxy += g * (a * b);
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                let score = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += score;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
}

/// Per-image metrics plus aggregates and the metric configuration echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub count: usize,
    pub psnr_peak: f64,
    pub ssim_cfg: SsimCfg,
    /// Disclosure: SSIM is channel-averaged RGB, not luminance-only.
    pub channel_averaged_ssim: bool,
}

impl MetricReport {
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (String, Image, Image)>,
        peak: f64,
        ssim_cfg: &SsimCfg,
    ) -> Result<Self> {
        let mut per_image = Vec::new();
        for (name, reference, candidate) in pairs {
            let p = psnr(&reference, &candidate, peak)?;
            let s = ssim(&reference, &candidate, ssim_cfg)?;
            per_image.push(ImageMetrics {
                name,
                psnr_db: p.db,
                psnr_capped: p.capped,
                ssim: s,
            });
        }
        if per_image.is_empty() {
            return Err(Error::invalid("metric report", "no image pairs"));
        }
        let count = per_image.len();
        let mean_psnr_db = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / count as f64;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / count as f64;
        Ok(MetricReport {
            per_image,
            mean_psnr_db,
            mean_ssim,
            count,
            psnr_peak: peak,
            ssim_cfg: *ssim_cfg,
            channel_averaged_ssim: true,
        })
    }

    /// Plain-text table mirroring the usual PSNR/SSIM result columns.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<28} {:>10} {:>8}\n", "image", "PSNR(dB)", "SSIM"));
        for m in &self.per_image {
            let flag = if m.psnr_capped { "*" } else { " " };
            out.push_str(&format!(
                "{:<28} {:>9.4}{} {:>8.4}\n",
                m.name, m.psnr_db, flag, m.ssim
            ));
        }
        out.push_str(&format!(
            "{:<28} {:>9.4}  {:>8.4}   ({} images; * = capped at {} dB)\n",
            "mean", self.mean_psnr_db, self.mean_ssim, self.count, PSNR_CAP_DB
        ));
        out
    }
}
