//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward operation appends a node to the tape, so node order is a
//! topological order by construction and the backward pass is a single reverse
//! sweep. Values are `f64` throughout; shapes are fixed at build time and
//! mismatches are programmer errors, so the builders panic rather than return
//! `Result`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, s};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

// some payloads (the AddConst constant, the softmax mask) are not needed by
// the backward rules but stay for debug printouts of the tape
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    AddConst(TensorId, f64),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    Minimum(TensorId, TensorId),
    Maximum(TensorId, TensorId),
    Relu(TensorId),
    Exp(TensorId),
    /// (M,K) x (K,N)
    MatMul(TensorId, TensorId),
    /// (M,K) x (N,K)^T
    MatMulNT(TensorId, TensorId),
    /// (M,) x (C,) -> (M,C)
    Outer(TensorId, TensorId),
    /// rows of (M,C) scaled by (M,)
    RowScale(TensorId, TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    /// mask marks columns excluded from every row's softmax
    SoftmaxRows {
        x: TensorId,
        mask: Option<Arc<Vec<bool>>>,
    },
    /// per-row normalization over the last axis of (M,C)
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    /// per-column normalization over the M axis of (M,C)
    NormCols {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    /// x (Cin,H,W), w (Cout,Cin,kh,kw), b (Cout,)
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    },
    Reshape(TensorId),
    Transpose2(TensorId),
    SliceRows(TensorId, usize, usize),
    SliceCols(TensorId, usize, usize),
    ConcatRows(Vec<TensorId>),
    GatherRows(TensorId, Arc<Vec<usize>>),
    /// mask already folds in the 1/keep scale
    Dropout(TensorId, Arc<ArrayD<f64>>),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
}

/// Computation tape. Build one per forward pass and throw it away.
pub struct Graph {
    nodes: Vec<Node>,
    pub training: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            training,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn input(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id.idx()].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.nodes[id.idx()].grad.as_ref()
    }

    fn v2(&self, id: TensorId) -> ArrayView2<'_, f64> {
        self.nodes[id.idx()]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d tensor")
    }

    // ---- builders ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    /// (M,C) + (C,) broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.v2(a);
        let bv = self.nodes[b.idx()]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("add_row: bias must be 1-d");
        assert_eq!(av.ncols(), bv.len(), "add_row width");
        let v = (&av + &bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::AddRow(a, b), v, ng)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) + c;
        let ng = self.needs(a);
        self.push(Op::AddConst(a, c), v, ng)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "div shapes");
        let v = self.value(a) / self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "min shapes");
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Minimum(a, b), v, ng)
    }

    pub fn maximum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "max shapes");
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Maximum(a, b), v, ng)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.v2(a), self.v2(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim");
        let mut c = Array2::<f64>::zeros((av.nrows(), bv.ncols()));
        general_mat_mul(1.0, &av, &bv, 0.0, &mut c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), c.into_dyn(), ng)
    }

    /// a x b^T, the natural layout for row-major weight matrices.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.v2(a), self.v2(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt inner dim");
        let mut c = Array2::<f64>::zeros((av.nrows(), bv.nrows()));
        general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT(a, b), c.into_dyn(), ng)
    }

    pub fn outer(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let (m, c) = (av.len(), bv.len());
        let mut out = Array2::<f64>::zeros((m, c));
        for (i, &x) in av.iter().enumerate() {
            for (j, &y) in bv.iter().enumerate() {
                out[(i, j)] = x * y;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Outer(a, b), out.into_dyn(), ng)
    }

    pub fn row_scale(&mut self, x: TensorId, scales: TensorId) -> TensorId {
        let xv = self.v2(x);
        let sv = self.value(scales).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.nrows(), sv.len(), "row_scale length");
        let mut out = xv.to_owned();
        for (mut row, &sc) in out.rows_mut().into_iter().zip(sv.iter()) {
            row.mapv_inplace(|v| v * sc);
        }
        let ng = self.needs(x) || self.needs(scales);
        self.push(Op::RowScale(x, scales), out.into_dyn(), ng)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::SumAll(a), v, ng)
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum() / n);
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), v, ng)
    }

    /// Row-wise softmax of (M,N). `mask[j] == true` excludes column j from
    /// every row; excluded columns get exactly zero weight. Each row must keep
    /// at least one column.
    pub fn softmax_rows(&mut self, x: TensorId, mask: Option<&[bool]>) -> TensorId {
        let xv = self.v2(x);
        let mask: Option<Arc<Vec<bool>>> = mask.map(|m| {
            assert_eq!(m.len(), xv.ncols(), "softmax mask width");
            assert!(m.iter().any(|&b| !b), "softmax: all columns masked");
            Arc::new(m.to_vec())
        });
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if mask.as_ref().map_or(true, |m| !m[j]) {
                    mx = mx.max(v);
                }
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mask.as_ref().map_or(true, |m| !m[j]) {
                    let e = (v - mx).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..row.len() {
                out[(i, j)] /= sum;
            }
        }
        let ng = self.needs(x);
        self.push(Op::SoftmaxRows { x, mask }, out.into_dyn(), ng)
    }

    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let xv = self.v2(x);
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let b = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), g.len(), "layer_norm width");
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..row.len() {
                out[(i, j)] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNormRows { x, gamma, beta, eps }, out.into_dyn(), ng)
    }

    /// Normalizes each column of (M,C) over the M axis, then applies a
    /// per-column affine. Population statistics, no running averages.
    pub fn norm_cols(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let xv = self.v2(x);
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let b = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), g.len(), "norm_cols width");
        assert!(xv.nrows() > 0, "norm_cols: empty input");
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for j in 0..xv.ncols() {
            let col = xv.column(j);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let rstd = 1.0 / (var + eps).sqrt();
            for i in 0..col.len() {
                out[(i, j)] = (col[i] - mean) * rstd * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::NormCols { x, gamma, beta, eps }, out.into_dyn(), ng)
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be (Cin,H,W)");
        assert_eq!(ws.len(), 4, "conv2d kernel must be (Cout,Cin,kh,kw)");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;

        let col = im2col(self.value(x), kh, kw, stride, pad, ho, wo);
        let wmat = self
            .value(w)
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let mut y = Array2::<f64>::zeros((cout, ho * wo));
        general_mat_mul(1.0, &wmat, &col.view(), 0.0, &mut y);
        let bias = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(bias.len(), cout, "conv2d bias length");
        for (mut row, &bv) in y.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        let out = y.into_shape_with_order((cout, ho, wo)).unwrap().into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, out, ng)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        // copies may carry fortran layout (e.g. out of transpose2)
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs(a);
        self.push(Op::Reshape(a), v, ng)
    }

    pub fn transpose2(&mut self, a: TensorId) -> TensorId {
        let v = self.v2(a).t().as_standard_layout().into_owned().into_dyn();
        let ng = self.needs(a);
        self.push(Op::Transpose2(a), v, ng)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> TensorId {
        let av = self.v2(a);
        assert!(start < end && end <= av.nrows(), "slice_rows range");
        let v = av.slice(s![start..end, ..]).to_owned().into_dyn();
        let ng = self.needs(a);
        self.push(Op::SliceRows(a, start, end), v, ng)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> TensorId {
        let av = self.v2(a);
        assert!(start < end && end <= av.ncols(), "slice_cols range");
        let v = av.slice(s![.., start..end]).to_owned().into_dyn();
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start, end), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let ncols = self.v2(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.v2(p).nrows()).sum();
        let mut out = Array2::<f64>::zeros((total, ncols));
        let mut at = 0;
        for &p in parts {
            let pv = self.v2(p);
            assert_eq!(pv.ncols(), ncols, "concat_rows width");
            out.slice_mut(s![at..at + pv.nrows(), ..]).assign(&pv);
            at += pv.nrows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), out.into_dyn(), ng)
    }

    /// Selects rows by index; duplicate indices are allowed and accumulate in
    /// the backward pass.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let av = self.v2(a);
        let mut out = Array2::<f64>::zeros((indices.len(), av.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < av.nrows(), "gather_rows index out of range");
            out.row_mut(k).assign(&av.row(i));
        }
        let ng = self.needs(a);
        self.push(
            Op::GatherRows(a, Arc::new(indices.to_vec())),
            out.into_dyn(),
            ng,
        )
    }

    /// Inverted dropout; identity when the graph is in eval mode.
    pub fn dropout(&mut self, a: TensorId, p: f64, rng: &mut ChaCha12Rng) -> TensorId {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        if !self.training || p == 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask = self
            .value(a)
            .mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let v = self.value(a) * &mask;
        let ng = self.needs(a);
        self.push(Op::Dropout(a, Arc::new(mask)), v, ng)
    }

    // ---- backward ----

    fn acc(&mut self, id: TensorId, contrib: ArrayD<f64>) {
        if !self.nodes[id.idx()].needs_grad {
            return;
        }
        match &mut self.nodes[id.idx()].grad {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc2(&mut self, id: TensorId, contrib: Array2<f64>) {
        self.acc(id, contrib.into_dyn());
    }

    /// Accumulates d(loss)/d(leaf) into every differentiable leaf reachable
    /// from `loss`, which must be a single-element tensor. Intermediate
    /// gradients are freed as the sweep passes them.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        assert!(self.needs(loss), "backward: loss does not depend on params");
        self.nodes[loss.idx()].grad = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..=loss.idx()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            match op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    self.acc(a, g.clone());
                    self.acc(b, g);
                }
                Op::AddRow(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let db = g2.sum_axis(Axis(0));
                    self.acc(b, db.into_dyn());
                    self.acc(a, g);
                }
                Op::AddConst(a, _) => self.acc(a, g),
                Op::Sub(a, b) => {
                    self.acc(a, g.clone());
                    self.acc(b, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(b);
                    let db = &g * self.value(a);
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    let da = &g / bv;
                    let y = self.value(a) / bv;
                    let db = -(&g * &y / bv);
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Scale(a, c) => self.acc(a, g * c),
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut da = g.clone();
                    let mut db = g;
                    // ties route to the first argument
                    ndarray::Zip::from(&mut da).and(av).and(bv).for_each(|d, &x, &y| {
                        if x > y {
                            *d = 0.0;
                        }
                    });
                    ndarray::Zip::from(&mut db).and(av).and(bv).for_each(|d, &x, &y| {
                        if x <= y {
                            *d = 0.0;
                        }
                    });
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut da = g.clone();
                    let mut db = g;
                    ndarray::Zip::from(&mut da).and(av).and(bv).for_each(|d, &x, &y| {
                        if x < y {
                            *d = 0.0;
                        }
                    });
                    ndarray::Zip::from(&mut db).and(av).and(bv).for_each(|d, &x, &y| {
                        if x >= y {
                            *d = 0.0;
                        }
                    });
                    self.acc(a, da);
                    self.acc(b, db);
                }
                Op::Relu(a) => {
                    let mut da = g;
                    ndarray::Zip::from(&mut da).and(self.value(a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    self.acc(a, da);
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[i].value;
                    self.acc(a, da);
                }
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(a) {
                        let bv = self.v2(b);
                        let mut da = Array2::<f64>::zeros((g2.nrows(), bv.nrows()));
                        general_mat_mul(1.0, &g2, &bv.t(), 0.0, &mut da);
                        self.acc2(a, da);
                    }
                    if self.needs(b) {
                        let av = self.v2(a);
                        let mut db = Array2::<f64>::zeros((av.ncols(), g2.ncols()));
                        general_mat_mul(1.0, &av.t(), &g2, 0.0, &mut db);
                        self.acc2(b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(a) {
                        let bv = self.v2(b);
                        let mut da = Array2::<f64>::zeros((g2.nrows(), bv.ncols()));
                        general_mat_mul(1.0, &g2, &bv, 0.0, &mut da);
                        self.acc2(a, da);
                    }
                    if self.needs(b) {
                        let av = self.v2(a);
                        let mut db = Array2::<f64>::zeros((g2.ncols(), av.ncols()));
                        general_mat_mul(1.0, &g2.t(), &av, 0.0, &mut db);
                        self.acc2(b, db);
                    }
                }
                Op::Outer(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(a) {
                        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
                        let da = g2.dot(&bv);
                        self.acc(a, da.into_dyn());
                    }
                    if self.needs(b) {
                        let av = self.value(a).view().into_dimensionality::<Ix1>().unwrap();
                        let db = g2.t().dot(&av);
                        self.acc(b, db.into_dyn());
                    }
                }
                Op::RowScale(x, scl) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(x) {
                        let sv = self.value(scl).view().into_dimensionality::<Ix1>().unwrap();
                        let mut dx = g2.to_owned();
                        for (mut row, &sc) in dx.rows_mut().into_iter().zip(sv.iter()) {
                            row.mapv_inplace(|v| v * sc);
                        }
                        self.acc2(x, dx);
                    }
                    if self.needs(scl) {
                        let xv = self.v2(x);
                        let ds: Array1<f64> = g2
                            .rows()
                            .into_iter()
                            .zip(xv.rows())
                            .map(|(gr, xr)| gr.dot(&xr))
                            .collect();
                        self.acc(scl, ds.into_dyn());
                    }
                }
                Op::SumAll(a) => {
                    let gv = g[[0]];
                    let da = self.value(a).mapv(|_| gv);
                    self.acc(a, da);
                }
                Op::MeanAll(a) => {
                    let n = self.value(a).len() as f64;
                    let gv = g[[0]] / n;
                    let da = self.value(a).mapv(|_| gv);
                    self.acc(a, da);
                }
                Op::SoftmaxRows { x, .. } => {
                    let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = Array2::<f64>::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g2.row(r);
                        let dot = yr.dot(&gr);
                        for c in 0..y.ncols() {
                            dx[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.acc2(x, dx);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = self.v2(x).to_owned();
                    let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let c = xv.ncols() as f64;
                    let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                    let mut dgamma = Array1::<f64>::zeros(xv.ncols());
                    let mut dbeta = Array1::<f64>::zeros(xv.ncols());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let rstd = 1.0 / (var + eps).sqrt();
                        let xhat = row.mapv(|v| (v - mean) * rstd);
                        let gr = g2.row(r);
                        let dxhat: Array1<f64> = gr
                            .iter()
                            .zip(gv.iter())
                            .map(|(&gg, &ga)| gg * ga)
                            .collect();
                        let m1 = dxhat.sum() / c;
                        let m2 = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(&d, &xh)| d * xh)
                            .sum::<f64>()
                            / c;
                        for j in 0..xv.ncols() {
                            dx[(r, j)] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    self.acc2(x, dx);
                    self.acc(gamma, dgamma.into_dyn());
                    self.acc(beta, dbeta.into_dyn());
                }
                Op::NormCols { x, gamma, beta, eps } => {
                    let xv = self.v2(x).to_owned();
                    let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let m = xv.nrows() as f64;
                    let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                    let mut dgamma = Array1::<f64>::zeros(xv.ncols());
                    let mut dbeta = Array1::<f64>::zeros(xv.ncols());
                    for j in 0..xv.ncols() {
                        let col = xv.column(j);
                        let mean = col.mean().unwrap();
                        let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let rstd = 1.0 / (var + eps).sqrt();
                        let xhat = col.mapv(|v| (v - mean) * rstd);
                        let gc = g2.column(j);
                        let dxhat = gc.mapv(|gg| gg * gv[j]);
                        let m1 = dxhat.sum() / m;
                        let m2 = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(&d, &xh)| d * xh)
                            .sum::<f64>()
                            / m;
                        for r in 0..xv.nrows() {
                            dx[(r, j)] = rstd * (dxhat[r] - m1 - xhat[r] * m2);
                            dgamma[j] += gc[r] * xhat[r];
                            dbeta[j] += gc[r];
                        }
                    }
                    self.acc2(x, dx);
                    self.acc(gamma, dgamma.into_dyn());
                    self.acc(beta, dbeta.into_dyn());
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xs = self.value(x).shape().to_vec();
                    let ws = self.value(w).shape().to_vec();
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                    let gs = g.shape().to_vec();
                    let (ho, wo) = (gs[1], gs[2]);
                    let g2 = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    if self.needs(b) {
                        let db = g2.sum_axis(Axis(1));
                        self.acc(b, db.into_dyn());
                    }
                    // im2col is recomputed instead of cached in the node
                    let col = im2col(self.value(x), kh, kw, stride, pad, ho, wo);
                    if self.needs(w) {
                        let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
                        general_mat_mul(1.0, &g2.view(), &col.t(), 0.0, &mut dw);
                        let dw = dw
                            .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                            .unwrap();
                        self.acc(w, dw);
                    }
                    if self.needs(x) {
                        let wmat = self
                            .value(w)
                            .view()
                            .into_shape_with_order((cout, cin * kh * kw))
                            .unwrap()
                            .to_owned();
                        let mut dcol = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
                        general_mat_mul(1.0, &wmat.t(), &g2.view(), 0.0, &mut dcol);
                        let dx = col2im(&dcol, cin, h, wd, kh, kw, stride, pad, ho, wo);
                        self.acc(x, dx.into_dyn());
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .unwrap();
                    self.acc(a, da);
                }
                Op::Transpose2(a) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    self.acc(a, g2.t().as_standard_layout().into_owned().into_dyn());
                }
                Op::SliceRows(a, start, end) => {
                    let full = self.v2(a).raw_dim();
                    let mut da = Array2::<f64>::zeros(full);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    da.slice_mut(s![start..end, ..]).assign(&g2);
                    self.acc2(a, da);
                }
                Op::SliceCols(a, start, end) => {
                    let full = self.v2(a).raw_dim();
                    let mut da = Array2::<f64>::zeros(full);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    da.slice_mut(s![.., start..end]).assign(&g2);
                    self.acc2(a, da);
                }
                Op::ConcatRows(parts) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut at = 0;
                    for &p in &parts {
                        let n = self.v2(p).nrows();
                        let dp = g2.slice(s![at..at + n, ..]).to_owned();
                        at += n;
                        self.acc2(p, dp);
                    }
                }
                Op::GatherRows(a, indices) => {
                    let full = self.v2(a).raw_dim();
                    let mut da = Array2::<f64>::zeros(full);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    for (k, &idx) in indices.iter().enumerate() {
                        let mut row = da.row_mut(idx);
                        row += &g2.row(k);
                    }
                    self.acc2(a, da);
                }
                Op::Dropout(a, mask) => {
                    let da = &g * mask.as_ref();
                    self.acc(a, da);
                }
            }
        }
    }
}

fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let xs = x.shape();
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let mut col = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[(row, oy * wo + ox)] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcol[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    dx
}
