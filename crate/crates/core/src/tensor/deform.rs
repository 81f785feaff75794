//! Modulated deformable convolution (DCNv2-style sampling).
//!
//! Each kernel tap samples the input at a learned fractional displacement
//! from its default grid position via bilinear interpolation, then gets
//! scaled by a per-tap modulation mask. Positions outside the image read
//! as zero. Gradients flow to the input, the offsets, the mask, and the
//! kernel weights.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use super::{Graph, Tensor};
use crate::scalar::Scalar;

/// Geometry for [`deform_conv2d`]: stride 1, zero padding `k/2`, odd `k`.
#[derive(Debug, Clone, Copy)]
pub struct DeformSpec {
    pub kernel: usize,
}

impl DeformSpec {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

struct Sampled<T> {
    /// Bilinear samples before modulation, `[C_in*k2, H*W]`.
    raw: Array2<T>,
    /// Modulated columns, `[C_in*k2, H*W]`.
    cols: Array2<T>,
}

fn bilinear_corners(sy: f64, sx: f64) -> (isize, isize, f64, f64) {
    let y0 = sy.floor();
    let x0 = sx.floor();
    (y0 as isize, x0 as isize, sy - y0, sx - x0)
}

#[allow(clippy::too_many_arguments)]
fn sample_columns<T: Scalar>(
    x: &ArrayD<T>,
    offsets: &ArrayD<T>,
    mask: &ArrayD<T>,
    k: usize,
    pad: usize,
) -> Sampled<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k2 = k * k;
    let hw = h * w;
    let xs = x.as_standard_layout();
    let xf = xs.as_slice().unwrap();
    let os = offsets.as_standard_layout();
    let of = os.as_slice().unwrap();
    let ms = mask.as_standard_layout();
    let mf = ms.as_slice().unwrap();

    let mut raw = Array2::<T>::zeros((c * k2, hw));
    let mut cols = Array2::<T>::zeros((c * k2, hw));
    {
        let rf = raw.as_slice_mut().unwrap();
        let cf = cols.as_slice_mut().unwrap();
        for tap in 0..k2 {
            let (ky, kx) = (tap / k, tap % k);
            for oy in 0..h {
                for ox in 0..w {
                    let p = oy * w + ox;
                    let dy = of[(2 * tap) * hw + p].to_f64();
                    let dx = of[(2 * tap + 1) * hw + p].to_f64();
                    let sy = (oy + ky) as f64 - pad as f64 + dy;
                    let sx = (ox + kx) as f64 - pad as f64 + dx;
                    let (y0, x0, ly, lx) = bilinear_corners(sy, sx);
                    let m = mf[tap * hw + p];
                    for ci in 0..c {
                        let mut v = 0.0f64;
                        for (cy, cx, wgt) in [
                            (y0, x0, (1.0 - ly) * (1.0 - lx)),
                            (y0, x0 + 1, (1.0 - ly) * lx),
                            (y0 + 1, x0, ly * (1.0 - lx)),
                            (y0 + 1, x0 + 1, ly * lx),
                        ] {
                            if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
                                v += wgt
                                    * xf[(ci * h + cy as usize) * w + cx as usize].to_f64();
                            }
                        }
                        let idx = (ci * k2 + tap) * hw + p;
                        let tv = T::from_f64(v);
                        rf[idx] = tv;
                        cf[idx] = tv * m;
                    }
                }
            }
        }
    }
    Sampled { raw, cols }
}

/// Deformable convolution.
///
/// * `x`: `[C_in, H, W]`
/// * `offsets`: `[2*k*k, H, W]`, per-tap `(dy, dx)` pairs interleaved
/// * `mask`: `[k*k, H, W]` modulation values (already activated)
/// * `weight`: `[C_out, C_in, k, k]`
///
/// Output: `[C_out, H, W]` (stride 1, zero padding `k/2`).
pub fn deform_conv2d<T: Scalar>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    mask: &Tensor<T>,
    weight: &Tensor<T>,
    spec: DeformSpec,
) -> Tensor<T> {
    let xv = x.value();
    let ov = offsets.value();
    let mv = mask.value();
    let wv = weight.value();
    let k = spec.kernel;
    let k2 = spec.taps();
    assert_eq!(xv.ndim(), 3, "deform_conv2d input must be [C, H, W]");
    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    assert_eq!(
        ov.shape(),
        &[2 * k2, h, w],
        "offsets must be [2k^2, H, W]"
    );
    assert_eq!(mv.shape(), &[k2, h, w], "mask must be [k^2, H, W]");
    assert_eq!(wv.shape()[1], c, "weight C_in mismatch");
    assert_eq!((wv.shape()[2], wv.shape()[3]), (k, k), "weight kernel mismatch");
    let c_out = wv.shape()[0];
    let hw = h * w;
    let pad = spec.pad();

    let sampled = Rc::new(sample_columns(&xv, &ov, &mv, k, pad));
    let w_mat = wv
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_out, c * k2))
        .unwrap();
    let y = super::conv::shaped(w_mat.dot(&sampled.cols), &[c_out, h, w]);

    let (x_rc, o_rc, m_rc, w_rc) = (
        Rc::clone(&xv),
        Rc::clone(&ov),
        Rc::clone(&mv),
        Rc::clone(&wv),
    );
    let graph = x.graph().clone();
    Tensor::nary(
        &graph,
        &[x, offsets, mask, weight],
        y,
        Some(Box::new(move |g| {
            let g_mat = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c_out, hw))
                .unwrap();
            let w_mat = w_rc
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c_out, c * k2))
                .unwrap();
            // weight grad from modulated columns
            let d_w = super::conv::shaped(g_mat.dot(&sampled.cols.t()), &[c_out, c, k, k]);
            // column grads
            let d_cols = w_mat.t().dot(&g_mat);
            let dc = d_cols.as_standard_layout();
            let dcf = dc.as_slice().unwrap();
            let raw = sampled.raw.as_slice().unwrap();

            let xs = x_rc.as_standard_layout();
            let xf = xs.as_slice().unwrap();
            let os = o_rc.as_standard_layout();
            let of = os.as_slice().unwrap();
            let ms = m_rc.as_standard_layout();
            let mf = ms.as_slice().unwrap();

            let mut d_x = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
            let mut d_off = ArrayD::<T>::zeros(IxDyn(&[2 * k2, h, w]));
            let mut d_mask = ArrayD::<T>::zeros(IxDyn(&[k2, h, w]));
            {
                let dxf = d_x.as_slice_mut().unwrap();
                let dof = d_off.as_slice_mut().unwrap();
                let dmf = d_mask.as_slice_mut().unwrap();
                for tap in 0..k2 {
                    let (ky, kx) = (tap / k, tap % k);
                    for oy in 0..h {
                        for ox in 0..w {
                            let p = oy * w + ox;
                            let dy = of[(2 * tap) * hw + p].to_f64();
                            let dx = of[(2 * tap + 1) * hw + p].to_f64();
                            let sy = (oy + ky) as f64 - pad as f64 + dy;
                            let sx = (ox + kx) as f64 - pad as f64 + dx;
                            let (y0, x0, ly, lx) = bilinear_corners(sy, sx);
                            let m = mf[tap * hw + p].to_f64();
                            let mut g_sy = 0.0f64;
                            let mut g_sx = 0.0f64;
                            for ci in 0..c {
                                let idx = (ci * k2 + tap) * hw + p;
                                let dcol = dcf[idx].to_f64();
                                if dcol == 0.0 {
                                    continue;
                                }
                                // modulation grad uses the raw sample
                                dmf[tap * hw + p] =
                                    dmf[tap * hw + p] + T::from_f64(dcol * raw[idx].to_f64());
                                let dsamp = dcol * m;
                                let mut corner = |cy: isize, cx: isize, wgt: f64| -> f64 {
                                    if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize
                                    {
                                        let xi = (ci * h + cy as usize) * w + cx as usize;
                                        dxf[xi] = dxf[xi] + T::from_f64(dsamp * wgt);
                                        xf[xi].to_f64()
                                    } else {
                                        0.0
                                    }
                                };
                                let xa = corner(y0, x0, (1.0 - ly) * (1.0 - lx));
                                let xb = corner(y0, x0 + 1, (1.0 - ly) * lx);
                                let xc = corner(y0 + 1, x0, ly * (1.0 - lx));
                                let xd = corner(y0 + 1, x0 + 1, ly * lx);
                                g_sy += dsamp
                                    * (-(1.0 - lx) * xa - lx * xb + (1.0 - lx) * xc + lx * xd);
                                g_sx += dsamp
                                    * (-(1.0 - ly) * xa + (1.0 - ly) * xb - ly * xc + ly * xd);
                            }
                            dof[(2 * tap) * hw + p] = T::from_f64(g_sy);
                            dof[(2 * tap + 1) * hw + p] = T::from_f64(g_sx);
                        }
                    }
                }
            }
            vec![d_x, d_off, d_mask, d_w]
        })),
    )
}

/// Reference standard convolution used as the zero-offset/unit-mask oracle
/// in tests; direct (non-GEMM) evaluation, stride 1, zero padding `k/2`.
pub fn naive_conv2d_same<T: Scalar>(x: &ArrayD<T>, weight: &ArrayD<T>) -> ArrayD<T> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (weight.shape()[0], weight.shape()[2]);
    let pad = k / 2;
    let mut y = ArrayD::<T>::zeros(IxDyn(&[c_out, h, w]));
    for co in 0..c_out {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = T::zero();
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc = acc
                                    + x[[ci, iy as usize, ix as usize]]
                                        * weight[[co, ci, ky, kx]];
                            }
                        }
                    }
                }
                y[[co, oy, ox]] = acc;
            }
        }
    }
    y
}

/// Convenience for tests: builds constant offset/mask tensors.
pub fn constant_offsets<T: Scalar>(
    graph: &Graph<T>,
    k: usize,
    h: usize,
    w: usize,
    dy: f64,
    dx: f64,
) -> (Tensor<T>, Tensor<T>) {
    let k2 = k * k;
    let mut off = ArrayD::<T>::zeros(IxDyn(&[2 * k2, h, w]));
    for tap in 0..k2 {
        off.index_axis_mut(ndarray::Axis(0), 2 * tap)
            .fill(T::from_f64(dy));
        off.index_axis_mut(ndarray::Axis(0), 2 * tap + 1)
            .fill(T::from_f64(dx));
    }
    let mask = ArrayD::<T>::from_elem(IxDyn(&[k2, h, w]), T::one());
    (graph.constant(off), graph.constant(mask))
}
