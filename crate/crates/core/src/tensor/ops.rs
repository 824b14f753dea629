//! Forward constructors for every graph op.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn};

use super::graph::{sigmoid_scalar, flip_swap, Graph, Op, SparseMat, Tid};
use super::kernels;

impl Graph {
    fn unary(&mut self, a: Tid, out: ArrayD<f64>, op: Op) -> Tid {
        let ng = self.needs_grad(a);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: Tid, b: Tid, out: ArrayD<f64>, op: Op) -> Tid {
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.binary(a, b, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        self.binary(a, b, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.binary(a, b, out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let out = self.value(a) / self.value(b);
        self.binary(a, b, out, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Tid, c: f64) -> Tid {
        let out = self.value(a).mapv(|v| v + c);
        self.unary(a, out, Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let out = self.value(a).mapv(|v| v * c);
        self.unary(a, out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Tid) -> Tid {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(f64::exp);
        self.unary(a, out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(f64::ln);
        self.unary(a, out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(f64::sqrt);
        self.unary(a, out, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(f64::abs);
        self.unary(a, out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(|v| v * v);
        self.unary(a, out, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(sigmoid_scalar);
        self.unary(a, out, Op::Sigmoid(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(|v| {
            if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        });
        self.unary(a, out, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(f64::tanh);
        self.unary(a, out, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Tid, slope: f64) -> Tid {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(a, out, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.unary(a, out, Op::Relu(a))
    }

    /// `(m,k) @ (k,n)`.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = kernels::matmul(&av, &bv).into_dyn();
        self.binary(a, b, out, Op::MatMul(a, b))
    }

    /// Batched `(B,m,k) @ (B,k,n)`.
    pub fn bmm(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.value(a);
        let bv = self.value(b);
        let (nb, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        assert_eq!(nb, bv.shape()[0]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[nb, m, n]));
        for bi in 0..nb {
            let ab = av.index_axis(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().unwrap();
            let bb = bv.index_axis(Axis(0), bi).into_dimensionality::<ndarray::Ix2>().unwrap();
            out.index_axis_mut(Axis(0), bi)
                .assign(&kernels::matmul(&ab, &bb));
        }
        self.binary(a, b, out, Op::Bmm(a, b))
    }

    pub fn permute(&mut self, a: Tid, axes: &[usize]) -> Tid {
        let out = self
            .value(a)
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.unary(a, out, Op::Permute(a, axes.to_vec()))
    }

    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Tid {
        let out = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.unary(a, out, Op::Reshape(a))
    }

    pub fn concat(&mut self, parts: &[Tid], axis: usize) -> Tid {
        let views: Vec<_> = parts.iter().map(|&t| self.value(t).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let ng = parts.iter().any(|&t| self.needs_grad(t));
        self.push(out.as_standard_layout().to_owned(), Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn slice(&mut self, a: Tid, axis: usize, start: usize, end: usize) -> Tid {
        let out = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        self.unary(a, out, Op::Slice(a, axis, start, end))
    }

    pub fn select_row(&mut self, table: Tid, idx: usize) -> Tid {
        let out = self.value(table).index_axis(Axis(0), idx).to_owned().into_dyn();
        self.unary(table, out, Op::SelectRow(table, idx))
    }

    pub fn gather_rows(&mut self, a: Tid, idx: Arc<Vec<usize>>) -> Tid {
        let av = self.value(a);
        let mut shape: Vec<usize> = av.shape().to_vec();
        shape[0] = idx.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (r, &src) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), r).assign(&av.index_axis(Axis(0), src));
        }
        self.unary(a, out, Op::GatherRows(a, idx))
    }

    /// Repeat a vector `(d,)` into `(n, d)` rows.
    pub fn tile_rows(&mut self, a: Tid, n: usize) -> Tid {
        let av = self.value(a);
        let d = av.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, d]));
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(av);
        }
        self.unary(a, out, Op::TileRows(a, n))
    }

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let s = self.value(a).sum();
        self.unary(a, ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Tid) -> Tid {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.unary(a, ArrayD::from_elem(IxDyn(&[1]), s), Op::MeanAll(a))
    }

    pub fn mean_axis0(&mut self, a: Tid) -> Tid {
        let out = self.value(a).mean_axis(Axis(0)).unwrap();
        self.unary(a, out, Op::MeanAxis0(a))
    }

    /// `x + b` with `b` broadcast over all leading axes (last axis must match).
    pub fn add_rowvec(&mut self, x: Tid, b: Tid) -> Tid {
        let d = self.value(b).len();
        assert_eq!(*self.shape(x).last().unwrap(), d, "rowvec dim");
        let bv = self.value(b).as_slice().unwrap().to_vec();
        let mut out = self.value(x).clone();
        for (k, v) in out.iter_mut().enumerate() {
            *v += bv[k % d];
        }
        self.binary(x, b, out, Op::AddRowVec(x, b))
    }

    /// `x * b` with `b` broadcast over all leading axes.
    pub fn mul_rowvec(&mut self, x: Tid, b: Tid) -> Tid {
        let d = self.value(b).len();
        assert_eq!(*self.shape(x).last().unwrap(), d, "rowvec dim");
        let bv = self.value(b).as_slice().unwrap().to_vec();
        let mut out = self.value(x).clone();
        for (k, v) in out.iter_mut().enumerate() {
            *v *= bv[k % d];
        }
        self.binary(x, b, out, Op::MulRowVec(x, b))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Tid) -> Tid {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let rows = v.len() / d;
        let vs = v.as_slice().unwrap();
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &vs[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - mx).exp();
                out[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                out[r * d + c] /= z;
            }
        }
        let out = ArrayD::from_shape_vec(v.raw_dim(), out).unwrap();
        self.unary(a, out, Op::Softmax(a))
    }

    /// Zero-mean unit-variance over the last axis (no affine part).
    pub fn layer_norm_core(&mut self, a: Tid, eps: f64) -> Tid {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let rows = v.len() / d;
        let vs = v.as_slice().unwrap();
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &vs[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv;
            }
        }
        let out = ArrayD::from_shape_vec(v.raw_dim(), out).unwrap();
        self.unary(a, out, Op::LayerNormCore(a, eps))
    }

    /// Normalize each row of a 2-d array to unit length; rows with norm below
    /// `eps` fall back to the unit vector `e0` (used for quaternions, where
    /// `e0` is the identity rotation).
    pub fn row_normalize(&mut self, a: Tid, eps: f64) -> Tid {
        let v = self.value(a);
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        let mut out = ArrayD::<f64>::zeros(v.raw_dim());
        for r in 0..rows {
            let norm: f64 = (0..d).map(|c| v[[r, c]] * v[[r, c]]).sum::<f64>().sqrt();
            if norm < eps {
                out[[r, 0]] = 1.0;
            } else {
                for c in 0..d {
                    out[[r, c]] = v[[r, c]] / norm;
                }
            }
        }
        self.unary(a, out, Op::RowNormalize(a, eps))
    }

    /// `x: (cin,h,w)`, `w: (cout,cin,kh,kw)`.
    pub fn conv2d(&mut self, x: Tid, w: Tid, stride: usize, pad: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let wv = self.value(w);
        let (cout, cin, kh, kw) =
            (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(xv.dim().0, cin, "conv2d channel mismatch");
        let (cols, oh, ow) = kernels::im2col(&xv.view(), kh, kw, stride, pad);
        let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
        let out = kernels::matmul(&wmat.view(), &cols.view())
            .into_shape_with_order(IxDyn(&[cout, oh, ow]))
            .unwrap();
        self.binary(x, w, out, Op::Conv2d { x, w, stride, pad })
    }

    /// Transposed convolution, `w: (cin,cout,kh,kw)`. With `kh=4, stride=2,
    /// pad=1` this is an exact 2x upsampler.
    pub fn conv_transpose2d(&mut self, x: Tid, w: Tid, stride: usize, pad: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let wv = self.value(w);
        let (cin, cout, kh, kw) =
            (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(xv.dim().0, cin, "conv_transpose2d channel mismatch");
        let xup = kernels::zero_insert(&xv.view(), stride);
        let wf = flip_swap(wv);
        let pad_eff = kh - 1 - pad;
        let (cols, oh, ow) = kernels::im2col(&xup.view(), kh, kw, 1, pad_eff);
        let wmat = wf.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
        let out = kernels::matmul(&wmat.view(), &cols.view())
            .into_shape_with_order(IxDyn(&[cout, oh, ow]))
            .unwrap();
        self.binary(x, w, out, Op::ConvT2d { x, w, stride, pad })
    }

    /// One kernel per channel, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Tid, k: Tid, pad: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let kv = self.value(k).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let out = kernels::depthwise_conv(&xv, &kv, pad).into_dyn();
        self.binary(x, k, out, Op::DepthwiseConv2d { x, k, pad })
    }

    pub fn max_pool2d(&mut self, x: Tid, k: usize, stride: usize, pad: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (out, _) = kernels::max_pool(&xv, k, stride, pad);
        self.unary(x, out.into_dyn(), Op::MaxPool2d { x, k, stride, pad })
    }

    pub fn avg_pool2d(&mut self, x: Tid, k: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let out = kernels::avg_pool(&xv, k).into_dyn();
        self.unary(x, out, Op::AvgPool2d { x, k })
    }

    pub fn resize_bilinear(&mut self, x: Tid, oh: usize, ow: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let out = kernels::resize_bilinear(&xv, oh, ow).into_dyn();
        self.unary(x, out, Op::ResizeBilinear { x, oh, ow })
    }

    /// `y = M x` for a fixed sparse matrix (anchoring, Laplacian, ...).
    pub fn sparse_apply(&mut self, m: Arc<SparseMat>, x: Tid) -> Tid {
        let out = m.apply(&self.value(x).view());
        self.unary(x, out, Op::SparseApply { m, x })
    }

    // ---- composite conveniences -------------------------------------------

    /// Mean of |a - b|.
    pub fn l1_loss(&mut self, a: Tid, b: Tid) -> Tid {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Mean of (a - b)^2.
    pub fn mse_loss(&mut self, a: Tid, b: Tid) -> Tid {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean_all(d)
    }
}
