//! 2-D convolution, transposed convolution, and max pooling.
//!
//! Convolutions lower to im2col + GEMM; the transposed convolution is the
//! exact adjoint (data-backward) of the forward convolution with the same
//! geometry, built from the same two kernels. Layouts: activations
//! `[C, H, W]`, conv weights `[C_out, C_in, kh, kw]`, transposed-conv
//! weights `[C_in, C_out, kh, kw]`.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use super::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.pad >= span,
            "conv input {} too small for kernel span {} (pad {})",
            input,
            span,
            self.pad
        );
        (input + 2 * self.pad - span) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2dSpec {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        assert!(self.output_pad < self.stride, "output_pad must be < stride");
        (input - 1) * self.stride + kernel + self.output_pad - 2 * self.pad
    }
}

/// Gathers conv patches: `[C*kh*kw, hout*wout]` from `[C, H, W]`.
/// Out-of-bounds taps stay zero (implicit zero padding).
pub(crate) fn im2col<T: Scalar>(
    x: &ArrayD<T>,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    hout: usize,
    wout: usize,
) -> Array2<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_standard_layout();
    let xf = xs.as_slice().unwrap();
    let mut cols = Array2::<T>::zeros((c * kh * kw, hout * wout));
    let cf = cols.as_slice_mut().unwrap();
    let (s, p, d) = (spec.stride, spec.pad, spec.dilation);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let base = ((ci * kh + ky) * kw + kx) * (hout * wout);
                for oy in 0..hout {
                    let iy = (oy * s + ky * d) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    let orow = base + oy * wout;
                    if s == 1 {
                        // contiguous copy for the in-bounds span
                        let shift = kx as isize * d as isize - p as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((w as isize - shift).min(wout as isize)).max(0) as usize;
                        if lo < hi {
                            let src = (xrow as isize + lo as isize + shift) as usize;
                            cf[orow + lo..orow + hi]
                                .copy_from_slice(&xf[src..src + (hi - lo)]);
                        }
                    } else {
                        for ox in 0..wout {
                            let ix = (ox * s + kx * d) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                cf[orow + ox] = xf[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `[C, H, W]` image.
pub(crate) fn col2im<T: Scalar>(
    cols: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    hout: usize,
    wout: usize,
) -> ArrayD<T> {
    let mut x = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
    let xf = x.as_slice_mut().unwrap();
    let cs = cols.as_standard_layout();
    let cf = cs.as_slice().unwrap();
    let (s, p, d) = (spec.stride, spec.pad, spec.dilation);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let base = ((ci * kh + ky) * kw + kx) * (hout * wout);
                for oy in 0..hout {
                    let iy = (oy * s + ky * d) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + iy as usize) * w;
                    let orow = base + oy * wout;
                    for ox in 0..wout {
                        let ix = (ox * s + kx * d) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            xf[xrow + ix as usize] += cf[orow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn to_mat<T: Scalar>(x: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .unwrap()
}

/// Reshapes a GEMM result into `shape`. `dot` may hand back an F-layout
/// array (it computes the transposed product when operand layouts favor
/// it), so normalize first.
pub(crate) fn shaped<T: Scalar>(a: Array2<T>, shape: &[usize]) -> ArrayD<T> {
    let std = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    std.into_dyn().into_shape_with_order(IxDyn(shape)).unwrap()
}

impl<T: Scalar> Tensor<T> {
    /// `self`: input `[C_in, H, W]`; `weight`: `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor<T>, spec: Conv2dSpec) -> Tensor<T> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(w.ndim(), 4, "conv2d weight must be [C_out, C_in, kh, kw]");
        assert_eq!(
            x.shape()[0],
            w.shape()[1],
            "conv2d channel mismatch: input {} vs weight {}",
            x.shape()[0],
            w.shape()[1]
        );
        let (c_out, c_in, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (h, iw) = (x.shape()[1], x.shape()[2]);
        let hout = spec.out_size(h, kh);
        let wout = spec.out_size(iw, kw);

        let cols = Rc::new(im2col(&x, kh, kw, spec, hout, wout));
        let w_mat = to_mat(&w, c_out, c_in * kh * kw);
        let y = shaped(w_mat.dot(&*cols), &[c_out, hout, wout]);

        let w_rc = Rc::clone(&w);
        let in_shape = x.shape().to_vec();
        self.binary(
            weight,
            y,
            Some(Box::new(move |g| {
                let g_mat = to_mat(g, c_out, hout * wout);
                let w_mat = to_mat(&w_rc, c_out, c_in * kh * kw);
                let d_w = shaped(g_mat.dot(&cols.t()), &[c_out, c_in, kh, kw]);
                let d_cols = w_mat.t().dot(&g_mat);
                let d_x = col2im(
                    &d_cols, in_shape[0], in_shape[1], in_shape[2], kh, kw, spec, hout, wout,
                );
                vec![d_x, d_w]
            })),
        )
    }

    /// `self`: input `[C_in, H, W]`; `weight`: `[C_in, C_out, kh, kw]`.
    ///
    /// Exact adjoint of `conv2d` with stride/pad taken from `spec`; used for
    /// learned upsampling in the decoder.
    pub fn conv_transpose2d(&self, weight: &Tensor<T>, spec: ConvTranspose2dSpec) -> Tensor<T> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 3, "conv_transpose2d input must be [C, H, W]");
        assert_eq!(w.ndim(), 4, "conv_transpose2d weight must be [C_in, C_out, kh, kw]");
        assert_eq!(
            x.shape()[0],
            w.shape()[0],
            "conv_transpose2d channel mismatch"
        );
        let (c_in, c_out, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (h, iw) = (x.shape()[1], x.shape()[2]);
        let hout = spec.out_size(h, kh);
        let wout = spec.out_size(iw, kw);
        // Geometry of the underlying forward conv (output grid == x grid).
        let fwd = Conv2dSpec {
            stride: spec.stride,
            pad: spec.pad,
            dilation: 1,
        };
        debug_assert_eq!(fwd.out_size(hout, kh), h);
        debug_assert_eq!(fwd.out_size(wout, kw), iw);

        let x_mat = to_mat(&x, c_in, h * iw);
        let w_mat = to_mat(&w, c_in, c_out * kh * kw);
        let cols = w_mat.t().dot(&x_mat);
        let y = col2im(&cols, c_out, hout, wout, kh, kw, fwd, h, iw);

        let (x_rc, w_rc) = (Rc::clone(&x), Rc::clone(&w));
        self.binary(
            weight,
            y,
            Some(Box::new(move |g| {
                // d_cols = im2col(g) under the forward-conv geometry
                let g_cols = im2col(g, kh, kw, fwd, h, iw);
                let w_mat = to_mat(&w_rc, c_in, c_out * kh * kw);
                let x_mat = to_mat(&x_rc, c_in, h * iw);
                let d_x = shaped(w_mat.dot(&g_cols), &[c_in, h, iw]);
                let d_w = shaped(x_mat.dot(&g_cols.t()), &[c_in, c_out, kh, kw]);
                vec![d_x, d_w]
            })),
        )
    }

    /// Non-overlapping max pooling with window = stride = `k`.
    pub fn max_pool2d(&self, k: usize) -> Tensor<T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "max_pool2d input must be [C, H, W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(
            h % k == 0 && w % k == 0,
            "max_pool2d: {h}x{w} not divisible by window {k}"
        );
        let (ho, wo) = (h / k, w / k);
        let xs = x.as_standard_layout().into_owned();
        let xf = xs.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, ho, wo]));
        let mut argmax = vec![0usize; c * ho * wo];
        {
            let of = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = (ci * h + oy * k + dy) * w + ox * k + dx;
                                if xf[idx] > best {
                                    best = xf[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (ci * ho + oy) * wo + ox;
                        of[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.unary(
            out,
            Some(Box::new(move |g| {
                let gs = g.as_standard_layout().into_owned();
                let gf = gs.as_slice().unwrap();
                let mut dx = ArrayD::<T>::zeros(IxDyn(&in_shape));
                let df = dx.as_slice_mut().unwrap();
                for (o, &src) in argmax.iter().enumerate() {
                    df[src] += gf[o];
                }
                vec![dx]
            })),
        )
    }
}
