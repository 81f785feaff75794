//! Elementwise, broadcast, reduction, and indexing ops.

use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

use super::{Graph, Tensor};
use crate::scalar::Scalar;

/// Right-aligned NumPy broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sums `grad` down to `target` shape, undoing a broadcast.
pub fn reduce_to_shape<T: Scalar>(mut grad: ArrayD<T>, target: &[usize]) -> ArrayD<T> {
    while grad.ndim() > target.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && grad.shape()[ax] != 1 {
            grad = grad.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    grad
}

fn zip_broadcast<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    let shape = broadcast_shapes(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!(
            "cannot broadcast shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )
    });
    let av = a.broadcast(IxDyn(&shape)).unwrap();
    let bv = b.broadcast(IxDyn(&shape)).unwrap();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary(
            other,
            out,
            Some(Box::new(move |g| {
                vec![
                    reduce_to_shape(g.clone(), &sa),
                    reduce_to_shape(g.clone(), &sb),
                ]
            })),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary(
            other,
            out,
            Some(Box::new(move |g| {
                vec![
                    reduce_to_shape(g.clone(), &sa),
                    reduce_to_shape(g.mapv(|v| -v), &sb),
                ]
            })),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x * y);
        let (a2, b2) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(
            other,
            out,
            Some(Box::new(move |g| {
                vec![
                    reduce_to_shape(zip_broadcast(g, &b2, |x, y| x * y), a2.shape()),
                    reduce_to_shape(zip_broadcast(g, &a2, |x, y| x * y), b2.shape()),
                ]
            })),
        )
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        let out = zip_broadcast(&a, &b, |x, y| x / y);
        let (a2, b2) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(
            other,
            out,
            Some(Box::new(move |g| {
                let da = zip_broadcast(g, &b2, |x, y| x / y);
                let num = zip_broadcast(g, &a2, |x, y| x * y);
                let db = zip_broadcast(&num, &b2, |x, y| -x / (y * y));
                vec![
                    reduce_to_shape(da, a2.shape()),
                    reduce_to_shape(db, b2.shape()),
                ]
            })),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        let out = self.value().mapv(|x| -x);
        self.unary(out, Some(Box::new(|g| vec![g.mapv(|v| -v)])))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let out = self.value().mapv(|x| x * s);
        self.unary(out, Some(Box::new(move |g| vec![g.mapv(|v| v * s)])))
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let out = self.value().mapv(|x| x + s);
        self.unary(out, Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn relu(&self) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                })]
            })),
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(|v| if v > T::zero() { v } else { v * slope });
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        gv * slope
                    }
                })]
            })),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out = self.value().mapv(|v| T::one() / (T::one() + (-v).exp()));
        let y = Rc::new(out.clone());
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &y, |gv, yv| gv * yv * (T::one() - yv))]
            })),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out = self.value().mapv(|v| v.tanh());
        let y = Rc::new(out.clone());
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &y, |gv, yv| gv * (T::one() - yv * yv))]
            })),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let out = self.value().mapv(|v| v.exp());
        let y = Rc::new(out.clone());
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &y, |gv, yv| gv * yv)]
            })),
        )
    }

    pub fn ln(&self) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(|v| v.ln());
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &x, |gv, xv| gv / xv)]
            })),
        )
    }

    pub fn sqr(&self) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(|v| v * v);
        let two = T::from_f64(2.0);
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &x, |gv, xv| gv * two * xv)]
            })),
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let out = self.value().mapv(|v| v.sqrt());
        let y = Rc::new(out.clone());
        let half = T::from_f64(0.5);
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &y, |gv, yv| gv * half / yv)]
            })),
        )
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor<T> {
        let x = self.value();
        let out = x.mapv(|v| v.abs());
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![zip_broadcast(g, &x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })]
            })),
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let x = self.value();
        let out = ArrayD::from_elem(IxDyn(&[]), x.sum());
        let shape = x.shape().to_vec();
        self.unary(
            out,
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.value().len();
        self.sum_all().scale(T::from_f64(1.0 / n as f64))
    }

    /// Sum over `axes`, keeping reduced dims as size 1.
    pub fn sum_keep(&self, axes: &[usize]) -> Tensor<T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut out = (*x).clone();
        for &ax in axes {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![g.broadcast(IxDyn(&in_shape)).unwrap().to_owned()]
            })),
        )
    }

    /// Mean over `axes`, keeping reduced dims as size 1.
    pub fn mean_keep(&self, axes: &[usize]) -> Tensor<T> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_keep(axes).scale(T::from_f64(1.0 / count as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape: size mismatch {:?} -> {:?}",
            in_shape,
            shape
        );
        let out = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        self.unary(
            out,
            Some(Box::new(move |g| {
                vec![g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .unwrap()]
            })),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs not 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs not 2-D");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims differ");
        let out = a2.dot(&b2).into_dyn();
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(
            other,
            out,
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = ac.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bc.view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Gathers feature vectors at linear spatial indices of a `[C, H, W]`
    /// map, producing `[n, C]` rows.
    pub fn gather_locations(&self, indices: &[usize]) -> Tensor<T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "gather_locations expects [C, H, W]");
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hw = h * w;
        for &i in indices {
            assert!(i < hw, "gather index {i} out of bounds for {h}x{w} grid");
        }
        let xs = x.as_standard_layout().into_owned();
        let flat = xs.as_slice().unwrap();
        let n = indices.len();
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        {
            let o = out.as_slice_mut().unwrap();
            for (row, &loc) in indices.iter().enumerate() {
                for ch in 0..c {
                    o[row * c + ch] = flat[ch * hw + loc];
                }
            }
        }
        let idx = indices.to_vec();
        let in_shape = x.shape().to_vec();
        self.unary(
            out,
            Some(Box::new(move |g| {
                let gs = g.as_standard_layout().into_owned();
                let gf = gs.as_slice().unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                {
                    let d = dx.as_slice_mut().unwrap();
                    for (row, &loc) in idx.iter().enumerate() {
                        for ch in 0..c {
                            d[ch * hw + loc] += gf[row * c + ch];
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2d(&self) -> Tensor<T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "transpose2d expects a matrix");
        let out = x.t().as_standard_layout().into_owned();
        self.unary(
            out,
            Some(Box::new(|g| {
                vec![g.t().as_standard_layout().into_owned()]
            })),
        )
    }

    /// Selects index `i` along axis 0, dropping that axis.
    pub fn index_axis0(&self, i: usize) -> Tensor<T> {
        let x = self.value();
        assert!(i < x.shape()[0], "index_axis0 out of bounds");
        let out = x.index_axis(Axis(0), i).to_owned();
        let in_shape = x.shape().to_vec();
        self.unary(
            out,
            Some(Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.index_axis_mut(Axis(0), i).assign(g);
                vec![dx]
            })),
        )
    }

    /// Crops `[C, H, W]` to a `[C, h, w]` window at `(y0, x0)`.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "crop2d expects [C, H, W]");
        let (ch, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(y0 + h <= ih && x0 + w <= iw, "crop window out of bounds");
        let out = x
            .slice(ndarray::s![.., y0..y0 + h, x0..x0 + w])
            .to_owned()
            .into_dyn();
        let in_shape = vec![ch, ih, iw];
        self.unary(
            out,
            Some(Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_mut(ndarray::s![.., y0..y0 + h, x0..x0 + w])
                    .assign(g);
                vec![dx]
            })),
        )
    }
}

/// Flattens each input and concatenates into one vector.
pub fn concat_flat<T: Scalar>(graph: &Graph<T>, parts: &[Tensor<T>]) -> Tensor<T> {
    assert!(!parts.is_empty(), "concat_flat of zero tensors");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let lens: Vec<usize> = values.iter().map(|v| v.len()).collect();
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total);
    for v in &values {
        data.extend(v.as_standard_layout().iter().copied());
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let out = ArrayD::from_shape_vec(IxDyn(&[total]), data).unwrap();
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::nary(
        graph,
        &refs,
        out,
        Some(Box::new(move |g| {
            let gf = g.as_standard_layout().into_owned();
            let gs = gf.as_slice().unwrap();
            let mut outs = Vec::with_capacity(lens.len());
            let mut off = 0;
            for (len, shape) in lens.iter().zip(&shapes) {
                outs.push(
                    ArrayD::from_shape_vec(IxDyn(shape), gs[off..off + len].to_vec()).unwrap(),
                );
                off += len;
            }
            outs
        })),
    )
}

/// Softmax along `axis`, numerically stabilized. Built from primitive ops;
/// shift-invariance of softmax makes routing the max through a constant
/// gradient-exact.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let v = x.value();
    let mut m = (*v).clone();
    m = m.fold_axis(Axis(axis), T::neg_infinity(), |acc, &e| {
        if e > *acc {
            e
        } else {
            *acc
        }
    });
    let m = m.insert_axis(Axis(axis));
    let shifted = x.sub(&x.graph().constant(m));
    let e = shifted.exp();
    let denom = e.sum_keep(&[axis]);
    e.div(&denom)
}

/// Row-wise L2 normalization of a `[n, d]` matrix.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let norm = x.sqr().sum_keep(&[1]).add_scalar(eps).sqrt();
    x.div(&norm)
}

/// log(sum(exp(x))) along `axis` (keepdims), stabilized.
pub fn logsumexp<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let v = x.value();
    let m = v
        .fold_axis(Axis(axis), T::neg_infinity(), |acc, &e| {
            if e > *acc {
                e
            } else {
                *acc
            }
        })
        .insert_axis(Axis(axis));
    let mc = x.graph().constant(m);
    let shifted = x.sub(&mc);
    shifted.exp().sum_keep(&[axis]).ln().add(&mc)
}
