//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] borrows the parameter store, records every operation applied to
//! it and replays them backwards. Parameters that are not marked trainable
//! never receive a gradient: the weight-gradient products for frozen groups
//! are skipped entirely, which is also what makes freezing exact.
//!
//! Besides elementwise and matrix primitives the tape has two fused sequence
//! ops, [`Tape::causal_conv`] and [`Tape::ssd_scan`], which operate on packed
//! batches: several independent sequences stacked row-wise and described by
//! `(start, len)` segments.

use crate::params::{ParamId, ParamStore};
use crate::real::{sigmoid, softplus, Real};
use crate::tensor::{gemm_into, Mat, Op as GemmOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Param(ParamId),
    Node(usize),
}

/// Row range of one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

/// Shape description of an SSD scan: heads of width `headdim` sharing B/C in
/// `n_groups` groups of width `d_state`.
#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub n_heads: usize,
    pub headdim: usize,
    pub n_groups: usize,
    pub d_state: usize,
    pub chunk_len: usize,
}

impl ScanDims {
    fn group_of(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_groups)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softplus(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    CausalConv {
        x: Var,
        w: Var,
        segs: Vec<Segment>,
        init: Option<Vec<Mat<T>>>,
    },
    Scan(Box<ScanSaved<T>>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weight: T,
        probs: Mat<T>,
    },
    Sum(Vec<Var>),
}

struct ScanSaved<T> {
    x: Var,
    dt: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d: Var,
    dims: ScanDims,
    segs: Vec<Segment>,
    /// State entering each chunk, per segment: `(n_heads*headdim) x d_state`.
    chunk_states: Vec<Vec<Mat<T>>>,
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`]. Parameters that
/// were frozen or not reached by the loss have no entry.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub params: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    /// True when the parameter has no gradient or an all-zero one.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id)
            .map_or(true, |g| g.data.iter().all(|v| *v == T::zero()))
    }

    pub fn global_norm(&self) -> T {
        self.params
            .iter()
            .flatten()
            .map(Mat::sum_sq)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    trainable: Vec<bool>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    /// Tape that records no parameter gradients (inference).
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self::new(store, vec![false; store.len()])
    }

    pub fn new(store: &'p ParamStore<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self {
            store,
            trainable,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match v {
            Var::Param(id) => self.store.value(id),
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    pub fn take_value(&mut self, v: Var) -> Mat<T> {
        match v {
            Var::Param(id) => self.store.value(id).clone(),
            Var::Node(i) => std::mem::replace(&mut self.nodes[i].value, Mat::zeros(0, 0)),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        match v {
            Var::Param(id) => self.trainable[id],
            Var::Node(i) => self.nodes[i].requires_grad,
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var::Node(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shapes");
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.len(), va.cols, "row broadcast width");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *o = *o + b;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.data.len(), vb.data.len(), "mul shapes");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let out = Mat {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|&x| x * s).collect(),
        };
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|&x| crate::real::silu(x)).collect(),
        };
        let rg = self.requires_grad(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|&x| softplus(x)).collect(),
        };
        let rg = self.requires_grad(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Row-wise RMS normalization with a learned `1 x cols` gain.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: T) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.len(), vx.cols, "norm width");
        let n = T::of(vx.cols as f64);
        let mut out = Mat::zeros(vx.rows, vx.cols);
        let mut inv_rms = Vec::with_capacity(vx.rows);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(&vw.data) {
                *o = v * inv * g;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w);
        self.push(out, Op::RmsNorm { x, w, inv_rms }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.cols, "column slice out of range");
        let mut out = Mat::zeros(vx.rows, len);
        for r in 0..vx.rows {
            out.row_mut(r)
                .copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat widths");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(Mat { rows, cols, data }, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects rows of `x`; also serves as the embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let mut out = Mat::zeros(idx.len(), vx.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(r));
        }
        let rg = self.requires_grad(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Depthwise causal convolution. `w` is `channels x width`; the last
    /// column multiplies the current position. `init` optionally supplies the
    /// `width-1` inputs preceding each segment (oldest first).
    ///
    /// Returns the output and, per segment, the last `width-1` inputs.
    pub fn causal_conv(
        &mut self,
        x: Var,
        w: Var,
        segs: &[Segment],
        init: Option<Vec<Mat<T>>>,
    ) -> (Var, Vec<Mat<T>>) {
        let (vx, vw) = (self.value(x), self.value(w));
        let (ch, k) = (vw.rows, vw.cols);
        assert_eq!(vx.cols, ch, "conv channels");
        let hist = k - 1;
        let mut out = Mat::zeros(vx.rows, ch);
        let mut finals = Vec::with_capacity(segs.len());
        for (si, seg) in segs.iter().enumerate() {
            let buf = init.as_ref().map(|b| &b[si]);
            let input = |tau: isize, c: usize| -> T {
                if tau >= 0 {
                    vx.at(seg.start + tau as usize, c)
                } else {
                    buf.map_or(T::zero(), |b| b.at((hist as isize + tau) as usize, c))
                }
            };
            for t in 0..seg.len {
                let orow = seg.start + t;
                for c in 0..ch {
                    let wr = vw.row(c);
                    let mut acc = T::zero();
                    for (j, &wj) in wr.iter().enumerate() {
                        acc = acc + wj * input(t as isize - hist as isize + j as isize, c);
                    }
                    out.data[orow * ch + c] = acc;
                }
            }
            let mut fb = Mat::zeros(hist, ch);
            for i in 0..hist {
                let tau = seg.len as isize - hist as isize + i as isize;
                for c in 0..ch {
                    fb.data[i * ch + c] = input(tau, c);
                }
            }
            finals.push(fb);
        }
        let rg = self.requires_grad(x) || self.requires_grad(w);
        let v = self.push(
            out,
            Op::CausalConv {
                x,
                w,
                segs: segs.to_vec(),
                init,
            },
            rg,
        );
        (v, finals)
    }

    /// Chunked state-space-duality scan.
    ///
    /// Per head `h` with decay `a_t = exp(-dt_t * exp(a_log_h))` the
    /// recurrence is `S_t = a_t S_{t-1} + dt_t x_t B_t^T`,
    /// `y_t = S_t C_t + D_h x_t`. Each chunk is evaluated in its quadratic
    /// (attention-like) form and the state is passed between chunks.
    ///
    /// `x` is `rows x (n_heads*headdim)`, `dt` is `rows x n_heads` (already
    /// positive), `b`/`c` are `rows x (n_groups*d_state)`, `a_log`/`d` are
    /// `1 x n_heads`. Returns `y` and the final state of every segment.
    #[allow(clippy::too_many_arguments)]
    pub fn ssd_scan(
        &mut self,
        x: Var,
        dt: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
        dims: ScanDims,
        segs: &[Segment],
        init: Option<&[Mat<T>]>,
    ) -> (Var, Vec<Mat<T>>) {
        let rg = [x, dt, a_log, b, c, d]
            .iter()
            .any(|&v| self.requires_grad(v));
        let (y, finals, chunk_states) = scan_forward(
            self.value(x),
            self.value(dt),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d),
            dims,
            segs,
            init,
            rg,
        );
        let saved = ScanSaved {
            x,
            dt,
            a_log,
            b,
            c,
            d,
            dims,
            segs: segs.to_vec(),
            chunk_states,
        };
        let v = self.push(y, Op::Scan(Box::new(saved)), rg);
        (v, finals)
    }

    /// `weight * sum_i -log softmax(logits_i)[targets_i]` as a `1x1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weight: T) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len(), "one target per logit row");
        let mut probs = Mat::zeros(vl.rows, vl.cols);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            for p in probs.row_mut(r) {
                *p = *p / z;
            }
            total = total + (z.ln() + max - row[t]);
        }
        let rg = self.requires_grad(logits);
        self.push(
            Mat::row_vector(vec![total * weight]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weight,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, scalars: &[Var]) -> Var {
        let total = scalars
            .iter()
            .map(|&s| self.value(s).data[0])
            .fold(T::zero(), |a, b| a + b);
        let rg = scalars.iter().any(|&s| self.requires_grad(s));
        self.push(Mat::row_vector(vec![total]), Op::Sum(scalars.to_vec()), rg)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data[0]
    }

    /// Back-propagates from a `1x1` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut g = GradBuf {
            nodes: (0..self.nodes.len()).map(|_| None).collect(),
            params: (0..self.store.len()).map(|_| None).collect(),
        };
        let Var::Node(root) = loss else {
            return Grads { params: g.params };
        };
        if !self.nodes[root].requires_grad {
            return Grads { params: g.params };
        }
        g.nodes[root] = Some(Mat::row_vector(vec![T::one()]));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = g.nodes[i].take() else {
                continue;
            };
            self.backprop(node, &grad, &mut g);
        }
        Grads { params: g.params }
    }

    fn backprop(&self, node: &Node<T>, grad: &Mat<T>, g: &mut GradBuf<T>) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let vb = self.value(b);
                    let ga = g.slot(self, a);
                    gemm_into(grad, GemmOp::N, vb, GemmOp::T, T::one(), ga);
                }
                if self.requires_grad(b) {
                    let va = self.value(a);
                    let gb = g.slot(self, b);
                    gemm_into(va, GemmOp::T, grad, GemmOp::N, T::one(), gb);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(v) {
                        g.slot(self, v).add_assign(grad);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.requires_grad(a) {
                    g.slot(self, a).add_assign(grad);
                }
                if self.requires_grad(row) {
                    let gr = g.slot(self, row);
                    for r in 0..grad.rows {
                        for (o, &v) in gr.data.iter_mut().zip(grad.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let vb = self.value(b);
                    let ga = g.slot(self, a);
                    for ((o, &gv), &bv) in ga.data.iter_mut().zip(&grad.data).zip(&vb.data) {
                        *o = *o + gv * bv;
                    }
                }
                if self.requires_grad(b) {
                    let va = self.value(a);
                    let gb = g.slot(self, b);
                    for ((o, &gv), &av) in gb.data.iter_mut().zip(&grad.data).zip(&va.data) {
                        *o = *o + gv * av;
                    }
                }
            }
            &Op::Scale(a, s) => {
                let ga = g.slot(self, a);
                for (o, &gv) in ga.data.iter_mut().zip(&grad.data) {
                    *o = *o + gv * s;
                }
            }
            &Op::Silu(a) => {
                let va = self.value(a);
                let ga = g.slot(self, a);
                for ((o, &gv), &x) in ga.data.iter_mut().zip(&grad.data).zip(&va.data) {
                    let s = sigmoid(x);
                    *o = *o + gv * s * (T::one() + x * (T::one() - s));
                }
            }
            &Op::Softplus(a) => {
                let va = self.value(a);
                let ga = g.slot(self, a);
                for ((o, &gv), &x) in ga.data.iter_mut().zip(&grad.data).zip(&va.data) {
                    *o = *o + gv * sigmoid(x);
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let vx = self.value(x);
                let vw = self.value(w);
                let n = T::of(vx.cols as f64);
                if self.requires_grad(w) {
                    let gw = g.slot(self, w);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for ((o, &gv), &xv) in gw.data.iter_mut().zip(grad.row(r)).zip(vx.row(r))
                        {
                            *o = *o + gv * xv * inv;
                        }
                    }
                }
                if self.requires_grad(x) {
                    let gx = g.slot(self, x);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = vx.row(r);
                        let gr = grad.row(r);
                        // dot(g*w, x_hat) / n
                        let mut dot = T::zero();
                        for ((&gv, &wv), &xv) in gr.iter().zip(&vw.data).zip(xr) {
                            dot = dot + gv * wv * xv * inv;
                        }
                        let mean = dot / n;
                        for (((o, &gv), &wv), &xv) in
                            gx.row_mut(r).iter_mut().zip(gr).zip(&vw.data).zip(xr)
                        {
                            *o = *o + inv * (gv * wv - xv * inv * mean);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let gx = g.slot(self, x);
                for r in 0..grad.rows {
                    let dst = &mut gx.row_mut(r)[start..start + grad.cols];
                    for (o, &v) in dst.iter_mut().zip(grad.row(r)) {
                        *o = *o + v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.requires_grad(p) {
                        let gp = g.slot(self, p);
                        let src = &grad.data[offset * grad.cols..(offset + rows) * grad.cols];
                        for (o, &v) in gp.data.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    offset += rows;
                }
            }
            Op::GatherRows { x, idx } => {
                let gx = g.slot(self, *x);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(grad.row(i)) {
                        *o = *o + v;
                    }
                }
            }
            Op::CausalConv { x, w, segs, init } => {
                self.conv_backward(*x, *w, segs, init.as_deref(), grad, g);
            }
            Op::Scan(saved) => self.scan_backward(saved, grad, g),
            Op::CrossEntropy {
                logits,
                targets,
                weight,
                probs,
            } => {
                let scale = grad.data[0] * *weight;
                let gl = g.slot(self, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for (o, &p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = *o + scale * p;
                    }
                    let o = &mut gl.data[r * probs.cols + t];
                    *o = *o - scale;
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if self.requires_grad(p) {
                        let gp = g.slot(self, p);
                        gp.data[0] = gp.data[0] + grad.data[0];
                    }
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        segs: &[Segment],
        init: Option<&[Mat<T>]>,
        grad: &Mat<T>,
        g: &mut GradBuf<T>,
    ) {
        let vx = self.value(x);
        let vw = self.value(w);
        let k = vw.cols;
        let hist = k as isize - 1;
        if self.requires_grad(w) {
            let gw = g.slot(self, w);
            for (si, seg) in segs.iter().enumerate() {
                let buf = init.map(|b| &b[si]);
                for t in 0..seg.len {
                    let gr = grad.row(seg.start + t);
                    for j in 0..k {
                        let tau = t as isize - hist + j as isize;
                        for (c, &gv) in gr.iter().enumerate() {
                            let inp = if tau >= 0 {
                                vx.at(seg.start + tau as usize, c)
                            } else {
                                buf.map_or(T::zero(), |b| b.at((hist + tau) as usize, c))
                            };
                            let o = &mut gw.data[c * k + j];
                            *o = *o + gv * inp;
                        }
                    }
                }
            }
        }
        if self.requires_grad(x) {
            let gx = g.slot(self, x);
            for seg in segs {
                for t in 0..seg.len {
                    let gr = grad.row(seg.start + t);
                    for j in 0..k {
                        let tau = t as isize - hist + j as isize;
                        if tau < 0 {
                            continue;
                        }
                        let dst = gx.row_mut(seg.start + tau as usize);
                        for (c, &gv) in gr.iter().enumerate() {
                            dst[c] = dst[c] + gv * vw.data[c * k + j];
                        }
                    }
                }
            }
        }
    }

    fn scan_backward(&self, s: &ScanSaved<T>, grad: &Mat<T>, g: &mut GradBuf<T>) {
        let dims = s.dims;
        let (nh, p, n) = (dims.n_heads, dims.headdim, dims.d_state);
        let gn = dims.n_groups * n;
        let vx = self.value(s.x);
        let vdt = self.value(s.dt);
        let val = self.value(s.a_log);
        let vb = self.value(s.b);
        let vc = self.value(s.c);
        let vd = self.value(s.d);
        let rows = vx.rows;

        let mut dx = Mat::zeros(rows, nh * p);
        let mut ddt = Mat::zeros(rows, nh);
        let mut db = Mat::zeros(rows, gn);
        let mut dc = Mat::zeros(rows, gn);
        let mut dal = vec![T::zero(); nh];
        let mut dd = vec![T::zero(); nh];

        let a_pos: Vec<T> = val.data.iter().map(|v| v.exp()).collect();
        let q = dims.chunk_len;
        let hp = p * n;

        for (si, seg) in s.segs.iter().enumerate() {
            let n_chunks = seg.len.div_ceil(q);
            // dL/dS carried backwards, per head.
            let mut carry = vec![T::zero(); nh * hp];
            for ci in (0..n_chunks).rev() {
                let c0 = ci * q;
                let c1 = (c0 + q).min(seg.len);
                let len = c1 - c0;
                // states[t] = S after step t-1 of the chunk; states[0] is the chunk input.
                let mut states = vec![T::zero(); (len + 1) * nh * hp];
                states[..nh * hp].copy_from_slice(&s.chunk_states[si][ci].data);
                for t in 0..len {
                    let r = seg.start + c0 + t;
                    let (prev, next) = states.split_at_mut((t + 1) * nh * hp);
                    let prev = &prev[t * nh * hp..];
                    let next = &mut next[..nh * hp];
                    for h in 0..nh {
                        let grp = dims.group_of(h);
                        let dt = vdt.at(r, h);
                        let a = (-dt * a_pos[h]).exp();
                        let brow = &vb.row(r)[grp * n..(grp + 1) * n];
                        for i in 0..p {
                            let xi = dt * vx.at(r, h * p + i);
                            let base = h * hp + i * n;
                            for j in 0..n {
                                next[base + j] = a * prev[base + j] + xi * brow[j];
                            }
                        }
                    }
                }
                for t in (0..len).rev() {
                    let r = seg.start + c0 + t;
                    let s_prev = &states[t * nh * hp..(t + 1) * nh * hp];
                    let s_cur = &states[(t + 1) * nh * hp..(t + 2) * nh * hp];
                    let gy = grad.row(r);
                    for h in 0..nh {
                        let grp = dims.group_of(h);
                        let dt = vdt.at(r, h);
                        let a = (-dt * a_pos[h]).exp();
                        let crow = &vc.row(r)[grp * n..(grp + 1) * n];
                        let brow = &vb.row(r)[grp * n..(grp + 1) * n];
                        let gh = &mut carry[h * hp..(h + 1) * hp];
                        let sc = &s_cur[h * hp..(h + 1) * hp];
                        let sp = &s_prev[h * hp..(h + 1) * hp];
                        let mut da = T::zero();
                        let mut ddt_direct = T::zero();
                        for i in 0..p {
                            let gyi = gy[h * p + i];
                            let xi = vx.at(r, h * p + i);
                            // skip connection
                            let dxi = &mut dx.data[r * nh * p + h * p + i];
                            *dxi = *dxi + vd.data[h] * gyi;
                            dd[h] = dd[h] + gyi * xi;
                            let row = &mut gh[i * n..(i + 1) * n];
                            let mut gb_dot = T::zero();
                            for j in 0..n {
                                // y_t = S_t C_t
                                dc.data[r * gn + grp * n + j] =
                                    dc.data[r * gn + grp * n + j] + sc[i * n + j] * gyi;
                                row[j] = row[j] + gyi * crow[j];
                                da = da + row[j] * sp[i * n + j];
                                gb_dot = gb_dot + row[j] * brow[j];
                                db.data[r * gn + grp * n + j] =
                                    db.data[r * gn + grp * n + j] + dt * row[j] * xi;
                            }
                            ddt_direct = ddt_direct + xi * gb_dot;
                            let dxi = &mut dx.data[r * nh * p + h * p + i];
                            *dxi = *dxi + dt * gb_dot;
                        }
                        let dadt = da * a;
                        let o = &mut ddt.data[r * nh + h];
                        *o = *o + ddt_direct - dadt * a_pos[h];
                        dal[h] = dal[h] - dadt * dt * a_pos[h];
                        for v in gh.iter_mut() {
                            *v = *v * a;
                        }
                    }
                }
            }
        }

        let parts = [
            (s.x, dx),
            (s.dt, ddt),
            (s.b, db),
            (s.c, dc),
            (s.a_log, Mat::row_vector(dal)),
            (s.d, Mat::row_vector(dd)),
        ];
        for (v, m) in parts {
            if self.requires_grad(v) {
                g.slot(self, v).add_assign(&m);
            }
        }
    }
}

struct GradBuf<T> {
    nodes: Vec<Option<Mat<T>>>,
    params: Vec<Option<Mat<T>>>,
}

impl<T: Real> GradBuf<T> {
    fn slot<'a>(&'a mut self, tape: &Tape<'_, T>, v: Var) -> &'a mut Mat<T> {
        let shape = tape.value(v);
        let (rows, cols) = (shape.rows, shape.cols);
        let entry = match v {
            Var::Param(id) => &mut self.params[id],
            Var::Node(i) => &mut self.nodes[i],
        };
        entry.get_or_insert_with(|| Mat::zeros(rows, cols))
    }
}

/// Forward chunked scan over plain matrices. Returns `(y, final states,
/// chunk-entry states)`; chunk states are only collected when `save` is set.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn scan_forward<T: Real>(
    x: &Mat<T>,
    dt: &Mat<T>,
    a_log: &Mat<T>,
    b: &Mat<T>,
    c: &Mat<T>,
    d: &Mat<T>,
    dims: ScanDims,
    segs: &[Segment],
    init: Option<&[Mat<T>]>,
    save: bool,
) -> (Mat<T>, Vec<Mat<T>>, Vec<Vec<Mat<T>>>) {
    let (nh, p, n) = (dims.n_heads, dims.headdim, dims.d_state);
    assert_eq!(x.cols, nh * p, "scan x width");
    assert_eq!(dt.cols, nh, "scan dt width");
    assert_eq!(b.cols, dims.n_groups * n, "scan B width");
    assert_eq!(c.cols, dims.n_groups * n, "scan C width");
    let q = dims.chunk_len.max(1);
    let hp = p * n;
    let a_pos: Vec<T> = a_log.data.iter().map(|v| v.exp()).collect();

    let mut y = Mat::zeros(x.rows, nh * p);
    let mut finals = Vec::with_capacity(segs.len());
    let mut all_chunk_states = Vec::new();

    let mut cum = vec![T::zero(); q];
    let mut cb = vec![T::zero(); q * q];

    for (si, seg) in segs.iter().enumerate() {
        let mut state = match init {
            Some(states) => states[si].clone(),
            None => Mat::zeros(nh * p, n),
        };
        let mut chunk_states = Vec::new();
        let mut c0 = 0;
        while c0 < seg.len {
            let len = q.min(seg.len - c0);
            if save {
                chunk_states.push(state.clone());
            }
            let r0 = seg.start + c0;
            for grp in 0..dims.n_groups {
                // C_t . B_s for s <= t within the chunk
                for t in 0..len {
                    let ct = &c.row(r0 + t)[grp * n..(grp + 1) * n];
                    for s in 0..=t {
                        let bs = &b.row(r0 + s)[grp * n..(grp + 1) * n];
                        cb[t * q + s] = ct.iter().zip(bs).map(|(&u, &v)| u * v).sum();
                    }
                }
                let hpg = nh / dims.n_groups;
                for h in grp * hpg..(grp + 1) * hpg {
                    let mut acc = T::zero();
                    for t in 0..len {
                        acc = acc - dt.at(r0 + t, h) * a_pos[h];
                        cum[t] = acc;
                    }
                    let s0 = &state.data[h * hp..(h + 1) * hp];
                    for t in 0..len {
                        let r = r0 + t;
                        let ct = &c.row(r)[grp * n..(grp + 1) * n];
                        let decay0 = cum[t].exp();
                        let yrow = &mut y.data[r * nh * p + h * p..r * nh * p + (h + 1) * p];
                        for (i, yi) in yrow.iter_mut().enumerate() {
                            let srow = &s0[i * n..(i + 1) * n];
                            let carried: T = srow.iter().zip(ct).map(|(&u, &v)| u * v).sum();
                            *yi = decay0 * carried + d.data[h] * x.at(r, h * p + i);
                        }
                        for s in 0..=t {
                            let w = (cum[t] - cum[s]).exp() * dt.at(r0 + s, h) * cb[t * q + s];
                            let xs = &x.row(r0 + s)[h * p..(h + 1) * p];
                            for (yi, &xv) in yrow.iter_mut().zip(xs) {
                                *yi = *yi + w * xv;
                            }
                        }
                    }
                    // state passed to the next chunk
                    let last = cum[len - 1];
                    let sh = &mut state.data[h * hp..(h + 1) * hp];
                    let carry = last.exp();
                    for v in sh.iter_mut() {
                        *v = *v * carry;
                    }
                    for s in 0..len {
                        let w = (last - cum[s]).exp() * dt.at(r0 + s, h);
                        let bs = &b.row(r0 + s)[grp * n..(grp + 1) * n];
                        let xs = &x.row(r0 + s)[h * p..(h + 1) * p];
                        for (i, &xv) in xs.iter().enumerate() {
                            let wx = w * xv;
                            for (sv, &bv) in sh[i * n..(i + 1) * n].iter_mut().zip(bs) {
                                *sv = *sv + wx * bv;
                            }
                        }
                    }
                }
            }
            c0 += len;
        }
        finals.push(state);
        all_chunk_states.push(chunk_states);
    }
    (y, finals, all_chunk_states)
}
