//! Reverse-mode autodiff on a flat tape of `ndarray` values.
//!
//! A [`Graph`] is rebuilt per training step (define-by-run). Nodes are
//! appended in topological order, so the backward pass is a single reverse
//! sweep. Parameters enter as named leaves; after `backward` their gradients
//! are pulled back into the [`ParamStore`](super::params::ParamStore).

use std::sync::Arc;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};

use super::kernels;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tid(pub(crate) usize);

/// Fixed sparse row-combination matrix (CSR) used for mesh-anchoring and
/// graph-Laplacian style linear maps.
#[derive(Clone, Debug)]
pub struct SparseMat {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseMat {
    /// `y = M x` for `x: (ncols, d)`.
    pub fn apply(&self, x: &ArrayViewD<f64>) -> ArrayD<f64> {
        let d = x.shape()[1];
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[self.nrows, d]));
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let (j, w) = (self.indices[k], self.weights[k]);
                for c in 0..d {
                    y[[r, c]] += w * x[[j, c]];
                }
            }
        }
        y
    }

    /// `x_grad = M^T g`.
    pub fn apply_transpose(&self, g: &ArrayViewD<f64>) -> ArrayD<f64> {
        let d = g.shape()[1];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[self.ncols, d]));
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let (j, w) = (self.indices[k], self.weights[k]);
                for c in 0..d {
                    out[[j, c]] += w * g[[r, c]];
                }
            }
        }
        out
    }
}

/// Externally defined differentiable operation (e.g. the Gaussian rasterizer).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Per-input gradients given input values and the output cotangent.
    /// Entries may be `None` for inputs that do not require gradients.
    fn backward(
        &self,
        inputs: &[ArrayViewD<f64>],
        out_grad: &ArrayViewD<f64>,
        need: &[bool],
    ) -> Vec<Option<ArrayD<f64>>>;
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Param(String),
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Div(Tid, Tid),
    AddScalar(Tid, f64),
    Scale(Tid, f64),
    Exp(Tid),
    Ln(Tid),
    Sqrt(Tid),
    Abs(Tid),
    Square(Tid),
    Sigmoid(Tid),
    Softplus(Tid),
    Tanh(Tid),
    LeakyRelu(Tid, f64),
    Relu(Tid),
    MatMul(Tid, Tid),
    Bmm(Tid, Tid),
    Permute(Tid, Vec<usize>),
    Reshape(Tid),
    Concat(Vec<Tid>, usize),
    Slice(Tid, usize, usize, usize),
    SelectRow(Tid, usize),
    GatherRows(Tid, Arc<Vec<usize>>),
    TileRows(Tid, usize),
    SumAll(Tid),
    MeanAll(Tid),
    MeanAxis0(Tid),
    AddRowVec(Tid, Tid),
    MulRowVec(Tid, Tid),
    Softmax(Tid),
    LayerNormCore(Tid, f64),
    RowNormalize(Tid, f64),
    Conv2d { x: Tid, w: Tid, stride: usize, pad: usize },
    ConvT2d { x: Tid, w: Tid, stride: usize, pad: usize },
    DepthwiseConv2d { x: Tid, k: Tid, pad: usize },
    MaxPool2d { x: Tid, k: usize, stride: usize, pad: usize },
    AvgPool2d { x: Tid, k: usize },
    ResizeBilinear { x: Tid, oh: usize, ow: usize },
    SparseApply { m: Arc<SparseMat>, x: Tid },
    Custom { f: Arc<dyn CustomOp>, inputs: Vec<Tid> },
}

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Tid {
        self.nodes.push(Node { value, op, needs_grad });
        Tid(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tid) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, t: Tid) -> f64 {
        let v = &self.nodes[t.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    pub fn needs_grad(&self, t: Tid) -> bool {
        self.nodes[t.0].needs_grad
    }

    /// Gradient of the last `backward` root w.r.t. node `t`, if it was reached.
    pub fn grad(&self, t: Tid) -> Option<&ArrayD<f64>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    /// Constant leaf (no gradient tracked).
    pub fn input(&mut self, value: ArrayD<f64>) -> Tid {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in differentiation but is not a named parameter
    /// (used for direct gradient probes in tests and fitting loops).
    pub fn var(&mut self, value: ArrayD<f64>) -> Tid {
        self.push(value, Op::Leaf, true)
    }

    pub(crate) fn param_node(&mut self, name: &str, value: ArrayD<f64>) -> Tid {
        self.push(value, Op::Param(name.to_string()), true)
    }

    pub fn custom(&mut self, f: Arc<dyn CustomOp>, inputs: Vec<Tid>, value: ArrayD<f64>) -> Tid {
        let ng = inputs.iter().any(|&t| self.needs_grad(t));
        self.push(value, Op::Custom { f, inputs }, ng)
    }

    /// Reverse sweep from `root` (must be a single-element node).
    pub fn backward(&mut self, root: Tid) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
    }

    fn accum(grads: &mut [Option<ArrayD<f64>>], t: Tid, g: ArrayD<f64>) {
        match &mut grads[t.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gout: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let node = &self.nodes[i];
        let ng = |t: Tid| self.nodes[t.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout.clone());
                }
                if ng(*b) {
                    Self::accum(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout.clone());
                }
                if ng(*b) {
                    Self::accum(grads, *b, gout.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout * &self.nodes[b.0].value);
                }
                if ng(*b) {
                    Self::accum(grads, *b, gout * &self.nodes[a.0].value);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if ng(*a) {
                    Self::accum(grads, *a, gout / bv);
                }
                if ng(*b) {
                    let av = &self.nodes[a.0].value;
                    Self::accum(grads, *b, -(gout * av) / (bv * bv));
                }
            }
            Op::AddScalar(a, _) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout.clone());
                }
            }
            Op::Scale(a, c) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout.mapv(|v| v * c));
                }
            }
            Op::Exp(a) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout * &node.value);
                }
            }
            Op::Ln(a) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout / &self.nodes[a.0].value);
                }
            }
            Op::Sqrt(a) => {
                if ng(*a) {
                    let g = gout / &node.value.mapv(|v| 2.0 * v);
                    Self::accum(grads, *a, g);
                }
            }
            Op::Abs(a) => {
                if ng(*a) {
                    let sign = self.nodes[a.0].value.mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    Self::accum(grads, *a, gout * &sign);
                }
            }
            Op::Square(a) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout * &self.nodes[a.0].value.mapv(|v| 2.0 * v));
                }
            }
            Op::Sigmoid(a) => {
                if ng(*a) {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    Self::accum(grads, *a, gout * &d);
                }
            }
            Op::Softplus(a) => {
                if ng(*a) {
                    let d = self.nodes[a.0].value.mapv(sigmoid_scalar);
                    Self::accum(grads, *a, gout * &d);
                }
            }
            Op::Tanh(a) => {
                if ng(*a) {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    Self::accum(grads, *a, gout * &d);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if ng(*a) {
                    let s = *slope;
                    let d = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { s });
                    Self::accum(grads, *a, gout * &d);
                }
            }
            Op::Relu(a) => {
                if ng(*a) {
                    let d = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    Self::accum(grads, *a, gout * &d);
                }
            }
            Op::MatMul(a, b) => {
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let gv = as2(gout);
                if ng(*a) {
                    let g = kernels::matmul(&gv.view(), &bv.t());
                    Self::accum(grads, *a, g.into_dyn());
                }
                if ng(*b) {
                    let g = kernels::matmul(&av.t(), &gv.view());
                    Self::accum(grads, *b, g.into_dyn());
                }
            }
            Op::Bmm(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let nb = av.shape()[0];
                if ng(*a) {
                    let mut g = ArrayD::<f64>::zeros(av.raw_dim());
                    for bi in 0..nb {
                        let gb = as2slice(gout, bi);
                        let bb = as2slice(bv, bi);
                        let r = kernels::matmul(&gb.view(), &bb.t());
                        g.index_axis_mut(Axis(0), bi).assign(&r);
                    }
                    Self::accum(grads, *a, g);
                }
                if ng(*b) {
                    let mut g = ArrayD::<f64>::zeros(bv.raw_dim());
                    for bi in 0..nb {
                        let ab = as2slice(av, bi);
                        let gb = as2slice(gout, bi);
                        let r = kernels::matmul(&ab.t(), &gb.view());
                        g.index_axis_mut(Axis(0), bi).assign(&r);
                    }
                    Self::accum(grads, *b, g);
                }
            }
            Op::Permute(a, axes) => {
                if ng(*a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (k, &ax) in axes.iter().enumerate() {
                        inv[ax] = k;
                    }
                    let g = gout.clone().permuted_axes(IxDyn(&inv));
                    Self::accum(grads, *a, g.as_standard_layout().to_owned());
                }
            }
            Op::Reshape(a) => {
                if ng(*a) {
                    let shape = self.nodes[a.0].value.raw_dim();
                    let g = gout
                        .clone()
                        .into_shape_with_order(shape)
                        .expect("reshape backward");
                    Self::accum(grads, *a, g);
                }
            }
            Op::Concat(parts, axis) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if ng(p) {
                        let g = gout
                            .slice_axis(Axis(*axis), ndarray::Slice::from(off..off + len))
                            .to_owned();
                        Self::accum(grads, p, g);
                    }
                    off += len;
                }
            }
            Op::Slice(a, axis, start, end) => {
                if ng(*a) {
                    let mut g = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                    g.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                        .assign(gout);
                    Self::accum(grads, *a, g);
                }
            }
            Op::SelectRow(a, idx) => {
                if ng(*a) {
                    let mut g = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                    g.index_axis_mut(Axis(0), *idx)
                        .assign(&gout.view().into_dimensionality::<ndarray::Ix1>().unwrap());
                    Self::accum(grads, *a, g);
                }
            }
            Op::GatherRows(a, idx) => {
                if ng(*a) {
                    let mut g = ArrayD::<f64>::zeros(self.nodes[a.0].value.raw_dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let gr = gout.index_axis(Axis(0), r);
                        let mut dst = g.index_axis_mut(Axis(0), src);
                        dst += &gr;
                    }
                    Self::accum(grads, *a, g);
                }
            }
            Op::TileRows(a, _n) => {
                if ng(*a) {
                    let g = gout.sum_axis(Axis(0));
                    Self::accum(grads, *a, g);
                }
            }
            Op::SumAll(a) => {
                if ng(*a) {
                    let gv = gout.iter().next().copied().unwrap();
                    Self::accum(grads, *a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv));
                }
            }
            Op::MeanAll(a) => {
                if ng(*a) {
                    let len = self.nodes[a.0].value.len() as f64;
                    let gv = gout.iter().next().copied().unwrap() / len;
                    Self::accum(grads, *a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv));
                }
            }
            Op::MeanAxis0(a) => {
                if ng(*a) {
                    let n0 = self.nodes[a.0].value.shape()[0] as f64;
                    let shape = self.nodes[a.0].value.raw_dim();
                    let mut g = ArrayD::<f64>::zeros(shape);
                    for mut row in g.axis_iter_mut(Axis(0)) {
                        row.assign(&gout.mapv(|v| v / n0));
                    }
                    Self::accum(grads, *a, g);
                }
            }
            Op::AddRowVec(a, b) => {
                if ng(*a) {
                    Self::accum(grads, *a, gout.clone());
                }
                if ng(*b) {
                    let d = self.nodes[b.0].value.len();
                    let g2 = gout.to_shape((gout.len() / d, d)).unwrap().to_owned();
                    Self::accum(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulRowVec(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let d = bv.len();
                if ng(*a) {
                    let mut g = gout.clone();
                    let bvs = bv.as_slice().unwrap();
                    for (k, v) in g.iter_mut().enumerate() {
                        *v *= bvs[k % d];
                    }
                    Self::accum(grads, *a, g);
                }
                if ng(*b) {
                    let prod = gout * av;
                    let g2 = prod.to_shape((prod.len() / d, d)).unwrap().to_owned();
                    Self::accum(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Softmax(a) => {
                if ng(*a) {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let rows = y.len() / d;
                    let ys = y.as_slice().unwrap();
                    let gs = gout.as_slice().unwrap();
                    let mut g = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &ys[r * d..(r + 1) * d];
                        let gr = &gs[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..d {
                            g[r * d + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    Self::accum(grads, *a, ArrayD::from_shape_vec(y.raw_dim(), g).unwrap());
                }
            }
            Op::LayerNormCore(a, eps) => {
                if ng(*a) {
                    let x = &self.nodes[a.0].value;
                    let d = *x.shape().last().unwrap();
                    let rows = x.len() / d;
                    let xs = x.as_slice().unwrap();
                    let ys = node.value.as_slice().unwrap();
                    let gs = gout.as_slice().unwrap();
                    let mut g = vec![0.0; x.len()];
                    for r in 0..rows {
                        let xr = &xs[r * d..(r + 1) * d];
                        let yr = &ys[r * d..(r + 1) * d];
                        let gr = &gs[r * d..(r + 1) * d];
                        let mean: f64 = xr.iter().sum::<f64>() / d as f64;
                        let var: f64 =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean: f64 = gr.iter().sum::<f64>() / d as f64;
                        let gydot: f64 =
                            gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                        for c in 0..d {
                            g[r * d + c] = inv * (gr[c] - gmean - yr[c] * gydot);
                        }
                    }
                    Self::accum(grads, *a, ArrayD::from_shape_vec(x.raw_dim(), g).unwrap());
                }
            }
            Op::RowNormalize(a, eps) => {
                if ng(*a) {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let d = x.shape()[1];
                    let rows = x.shape()[0];
                    let mut g = ArrayD::<f64>::zeros(x.raw_dim());
                    for r in 0..rows {
                        let norm: f64 = (0..d).map(|c| x[[r, c]] * x[[r, c]]).sum::<f64>().sqrt();
                        if norm < *eps {
                            continue; // fallback row: constant output, zero grad
                        }
                        let dot: f64 = (0..d).map(|c| y[[r, c]] * gout[[r, c]]).sum();
                        for c in 0..d {
                            g[[r, c]] = (gout[[r, c]] - y[[r, c]] * dot) / norm;
                        }
                    }
                    Self::accum(grads, *a, g);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = as3(&self.nodes[x.0].value);
                let wv = &self.nodes[w.0].value;
                let (cout, cin, kh, kw) = (
                    wv.shape()[0],
                    wv.shape()[1],
                    wv.shape()[2],
                    wv.shape()[3],
                );
                let (_, h, wd) = xv.dim();
                let gv = as3(gout);
                let (_, oh, ow) = gv.dim();
                let gmat = gv
                    .to_shape((cout, oh * ow))
                    .unwrap()
                    .to_owned();
                if ng(*w) {
                    let (cols, _, _) = kernels::im2col(&xv.view(), kh, kw, *stride, *pad);
                    let gw = kernels::matmul(&gmat.view(), &cols.t());
                    Self::accum(
                        grads,
                        *w,
                        gw.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap(),
                    );
                }
                if ng(*x) {
                    let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                    let gcols = kernels::matmul(&wmat.t(), &gmat.view());
                    let gx =
                        kernels::col2im_add(&gcols.view(), cin, h, wd, kh, kw, *stride, *pad);
                    Self::accum(grads, *x, gx.into_dyn());
                }
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let xv = as3(&self.nodes[x.0].value);
                let wv = &self.nodes[w.0].value; // (cin, cout, kh, kw)
                let (cin, cout, kh, kw) = (
                    wv.shape()[0],
                    wv.shape()[1],
                    wv.shape()[2],
                    wv.shape()[3],
                );
                let (_, h, wd) = xv.dim();
                let gv = as3(gout);
                let (_, oh, ow) = gv.dim();
                let pad_eff = kh - 1 - pad;
                let xup = kernels::zero_insert(&xv.view(), *stride);
                let gmat = gv.to_shape((cout, oh * ow)).unwrap().to_owned();
                if ng(*w) {
                    let (cols, _, _) = kernels::im2col(&xup.view(), kh, kw, 1, pad_eff);
                    let gwf = kernels::matmul(&gmat.view(), &cols.t()); // (cout, cin*kh*kw)
                    // un-flip / un-swap into (cin, cout, kh, kw)
                    let mut gw = ArrayD::<f64>::zeros(IxDyn(&[cin, cout, kh, kw]));
                    for o in 0..cout {
                        for i in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    gw[[i, o, kh - 1 - ky, kw - 1 - kx]] =
                                        gwf[[o, i * kh * kw + ky * kw + kx]];
                                }
                            }
                        }
                    }
                    Self::accum(grads, *w, gw);
                }
                if ng(*x) {
                    let wf = flip_swap(wv); // (cout, cin, kh, kw) flipped
                    let wmat = wf.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                    let gcols = kernels::matmul(&wmat.t(), &gmat.view());
                    let gup = kernels::col2im_add(
                        &gcols.view(),
                        cin,
                        xup.dim().1,
                        xup.dim().2,
                        kh,
                        kw,
                        1,
                        pad_eff,
                    );
                    let gx = kernels::zero_insert_adjoint(&gup.view(), *stride, h, wd);
                    Self::accum(grads, *x, gx.into_dyn());
                }
            }
            Op::DepthwiseConv2d { x, k, pad } => {
                let xv = as3(&self.nodes[x.0].value);
                let kv = as3(&self.nodes[k.0].value);
                let gv = as3(gout);
                if ng(*x) {
                    let (_, h, w) = xv.dim();
                    let gx = kernels::depthwise_conv_backward_input(
                        &gv.view(),
                        &kv.view(),
                        *pad,
                        h,
                        w,
                    );
                    Self::accum(grads, *x, gx.into_dyn());
                }
                if ng(*k) {
                    let (c, h, w) = xv.dim();
                    let (_, kh, kw) = kv.dim();
                    let (_, oh, ow) = gv.dim();
                    let mut gk = ArrayD::<f64>::zeros(IxDyn(&[c, kh, kw]));
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut s = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        s += gv[[ci, oy, ox]]
                                            * xv[[ci, iy as usize, ix as usize]];
                                    }
                                }
                                gk[[ci, ky, kx]] = s;
                            }
                        }
                    }
                    Self::accum(grads, *k, gk);
                }
            }
            Op::MaxPool2d { x, k, stride, pad } => {
                if ng(*x) {
                    let xv = as3(&self.nodes[x.0].value);
                    let (_, arg) = kernels::max_pool(&xv.view(), *k, *stride, *pad);
                    let mut gx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                    let gxs = gx.as_slice_mut().unwrap();
                    for (o, &src) in arg.iter().enumerate() {
                        if src != usize::MAX {
                            gxs[src] += gout.as_slice().unwrap()[o];
                        }
                    }
                    Self::accum(grads, *x, gx);
                }
            }
            Op::AvgPool2d { x, k } => {
                if ng(*x) {
                    let (_, h, w) = as3(&self.nodes[x.0].value).dim();
                    let gv = as3(gout);
                    let gx = kernels::avg_pool_backward(&gv.view(), *k, h, w);
                    Self::accum(grads, *x, gx.into_dyn());
                }
            }
            Op::ResizeBilinear { x, .. } => {
                if ng(*x) {
                    let (_, h, w) = as3(&self.nodes[x.0].value).dim();
                    let gv = as3(gout);
                    let gx = kernels::resize_bilinear_backward(&gv.view(), h, w);
                    Self::accum(grads, *x, gx.into_dyn());
                }
            }
            Op::SparseApply { m, x } => {
                if ng(*x) {
                    let g = m.apply_transpose(&gout.view());
                    Self::accum(grads, *x, g);
                }
            }
            Op::Custom { f, inputs } => {
                let need: Vec<bool> = inputs.iter().map(|&t| ng(t)).collect();
                let vals: Vec<ArrayViewD<f64>> =
                    inputs.iter().map(|&t| self.nodes[t.0].value.view()).collect();
                let gs = f.backward(&vals, &gout.view(), &need);
                assert_eq!(gs.len(), inputs.len(), "custom op {} grad arity", f.name());
                for (t, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        Self::accum(grads, *t, g);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("2-d value")
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<f64> {
    a.view().into_dimensionality::<ndarray::Ix3>().expect("3-d value")
}

fn as2slice(a: &ArrayD<f64>, b: usize) -> ndarray::ArrayView2<f64> {
    a.index_axis(Axis(0), b)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// `(cin, cout, kh, kw)` -> `(cout, cin, kh, kw)` with both kernel axes flipped.
pub(crate) fn flip_swap(w: &ArrayD<f64>) -> ArrayD<f64> {
    let (cin, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[cout, cin, kh, kw]));
    for i in 0..cin {
        for o in 0..cout {
            for ky in 0..kh {
                for kx in 0..kw {
                    out[[o, i, kh - 1 - ky, kw - 1 - kx]] = w[[i, o, ky, kx]];
                }
            }
        }
    }
    out
}
