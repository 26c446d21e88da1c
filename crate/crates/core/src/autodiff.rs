//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records one forward computation as a list of nodes in
//! topological order; [`Tape::backward`] sweeps it in reverse from any set of
//! seeded output gradients. Parameters are referenced, not copied, and their
//! gradients are accumulated into a [`Grads`] buffer. Frozen parameters and
//! constants never require gradients, so no work is spent on them.

use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{self, HeadView, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Mat<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Mat<T>> },
    GatherRows { src: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceCols { src: NodeId, start: usize },
    MeanRows(NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    CrossEntropySum { logits: NodeId, targets: Vec<usize>, probs: Mat<T> },
    Clamp { x: NodeId, lo: T, hi: T },
    Reparam { mu: NodeId, log_var: NodeId, eps: Vec<T> },
    KlStdNormal { mu: NodeId, log_var: NodeId },
    KernelRegress { z: NodeId, y: Vec<T>, h: T, weights: Mat<T>, denom: Vec<T> },
    MeanSquaredError { pred: NodeId, target: Vec<T> },
    SumScalars(Vec<NodeId>),
}

struct Node<T> {
    op: Op<T>,
    value: Mat<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        match self.nodes[id.0].op {
            Op::Param(pid) => self.params.value(pid),
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Mat<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Non-parameter input whose gradient is wanted (read back from the
    /// result of [`Tape::backward`]).
    pub fn input(&mut self, value: Mat<T>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let frozen = self.params.get(id).frozen;
        self.push(Op::Param(id), Mat::zeros(0, 0), !frozen)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), v, rg)
    }

    /// `x · w + b` applied row by row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear: input width {} vs weight rows {}", xv.cols(), wv.rows());
        let mut out = Mat::zeros(xv.rows(), wv.cols());
        tensor::gemm_acc(xv.data(), xv.rows(), wv, out.data_mut());
        if let Some(b) = b {
            let bv = self.value(b).data();
            for i in 0..out.rows() {
                for (o, &bi) in out.row_mut(i).iter_mut().zip(bv) {
                    *o += bi;
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        self.push(Op::Linear { x, w, b }, out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), v, rg)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.len());
        for i in 0..v.rows() {
            for (x, &ri) in v.row_mut(i).iter_mut().zip(&r) {
                *x += ri;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(Op::AddRow(a, row), v, rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.len());
        for i in 0..v.rows() {
            for (x, &ri) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= ri;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(Op::MulRow(a, row), v, rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddConst(a), v, rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, s), v, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(tensor::gelu);
        let rg = self.rg(&[a]);
        self.push(Op::Gelu(a), v, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::tanh);
        let rg = self.rg(&[a]);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let mut xh = vec![T::zero(); d];
            rstd.push(tensor::layer_norm_row(xv.row(i), g, b, &mut xh, out.row_mut(i)));
            xhat.row_mut(i).copy_from_slice(&xh);
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, out, rg)
    }

    /// Multi-head causal self-attention; `q`, `k`, `v` are `n × d` with the
    /// heads laid out as contiguous column blocks.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        let mut head_out = vec![T::zero(); dh];
        for h in 0..heads {
            let off = h * dh;
            let keys = HeadView { buf: kv.data(), stride: d, offset: off, head_dim: dh };
            let values = HeadView { buf: vv.data(), stride: d, offset: off, head_dim: dh };
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let qrow = &qv.row(i)[off..off + dh];
                tensor::attend_row(qrow, i, keys, values, scale, p.row_mut(i), &mut head_out);
                out.row_mut(i)[off..off + dh].copy_from_slice(&head_out);
            }
            probs.push(p);
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Op::Attention { q, k, v, heads, probs }, out, rg)
    }

    /// Row gather: output row `r` is `src` row `idx[r]`.
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let sv = self.value(src);
        let mut out = Mat::zeros(idx.len(), sv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(sv.row(i));
        }
        let rg = self.rg(&[src]);
        self.push(Op::GatherRows { src, idx: idx.to_vec() }, out, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data), rg)
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let sv = self.value(src);
        let mut out = Mat::zeros(sv.rows(), len);
        for i in 0..sv.rows() {
            out.row_mut(i).copy_from_slice(&sv.row(i)[start..start + len]);
        }
        let rg = self.rg(&[src]);
        self.push(Op::SliceCols { src, start }, out, rg)
    }

    pub fn mean_rows(&mut self, src: NodeId) -> NodeId {
        let sv = self.value(src);
        let mut out = Mat::zeros(1, sv.cols());
        for i in 0..sv.rows() {
            out.row_mut(0).iter_mut().zip(sv.row(i)).for_each(|(o, &x)| *o += x);
        }
        let inv = T::one() / T::lit(sv.rows() as f64);
        out.scale_assign(inv);
        let rg = self.rg(&[src]);
        self.push(Op::MeanRows(src), out, rg)
    }

    pub fn reshape(&mut self, src: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(src).clone().reshaped(rows, cols);
        let rg = self.rg(&[src]);
        self.push(Op::Reshape(src), v, rg)
    }

    pub fn softmax(&mut self, src: NodeId) -> NodeId {
        let sv = self.value(src);
        let mut out = Mat::zeros(sv.rows(), sv.cols());
        for i in 0..sv.rows() {
            out.row_mut(i).copy_from_slice(&tensor::softmax_row(sv.row(i)));
        }
        let rg = self.rg(&[src]);
        self.push(Op::Softmax(src), out, rg)
    }

    /// Summed token cross-entropy `Σ_i −log softmax(logits_i)[targets_i]` (1×1).
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let lp = tensor::log_softmax_row(lv.row(i));
            total -= lp[t];
            for (p, l) in probs.row_mut(i).iter_mut().zip(lp) {
                *p = l.exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(Op::CrossEntropySum { logits, targets: targets.to_vec(), probs }, Mat::scalar(total), rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(Op::Clamp { x, lo, hi }, v, rg)
    }

    /// `mu + exp(log_var / 2) ⊙ eps`.
    pub fn reparam(&mut self, mu: NodeId, log_var: NodeId, eps: &[T]) -> NodeId {
        let m = self.value(mu).data();
        let lv = self.value(log_var).data();
        assert_eq!(m.len(), eps.len());
        let half = T::lit(0.5);
        let c: Vec<T> = m.iter().zip(lv).zip(eps).map(|((&m, &l), &e)| m + (l * half).exp() * e).collect();
        let rg = self.rg(&[mu, log_var]);
        self.push(Op::Reparam { mu, log_var, eps: eps.to_vec() }, Mat::row_vector(&c), rg)
    }

    /// `KL(N(mu, diag(exp(log_var))) ‖ N(0, I))` in closed form (1×1).
    pub fn kl_std_normal(&mut self, mu: NodeId, log_var: NodeId) -> NodeId {
        let v = kl_closed_form(self.value(mu).data(), self.value(log_var).data());
        let rg = self.rg(&[mu, log_var]);
        self.push(Op::KlStdNormal { mu, log_var }, Mat::scalar(v), rg)
    }

    /// Leave-one-out Gaussian-kernel regression of `y` over the rows of `z`
    /// with bandwidth `h`; `y` and `h` are constants. Output is `N×1`.
    pub fn kernel_regress(&mut self, z: NodeId, y: &[T], h: T) -> NodeId {
        let zv = self.value(z);
        let (weights, yhat, denom) = kernel_weights(zv, y, h);
        let rg = self.rg(&[z]);
        let out = Mat::from_vec(yhat.len(), 1, yhat);
        self.push(Op::KernelRegress { z, y: y.to_vec(), h, weights, denom }, out, rg)
    }

    /// `(1/N) Σ (pred_i − target_i)²` (1×1).
    pub fn mse(&mut self, pred: NodeId, target: &[T]) -> NodeId {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len());
        let n = T::lit(p.len() as f64);
        let v = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let rg = self.rg(&[pred]);
        self.push(Op::MeanSquaredError { pred, target: target.to_vec() }, Mat::scalar(v), rg)
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().map(|&p| self.value(p).item()).sum();
        let rg = self.rg(parts);
        self.push(Op::SumScalars(parts.to_vec()), Mat::scalar(v), rg)
    }

    /// Reverse sweep from the seeded gradients. Parameter gradients are added
    /// into `param_grads`; the returned vector holds every node's gradient
    /// (`None` where nothing flowed).
    pub fn backward(&self, seeds: &[(NodeId, Mat<T>)], param_grads: &mut Grads<T>) -> Vec<Option<Mat<T>>> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(self.value(*id).shape(), g.shape(), "seed gradient shape");
            acc(&mut grads, *id, g.clone());
        }
        let half = T::lit(0.5);
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            // leaves keep their gradient for the caller
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    param_grads.get_mut(*pid).add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, tensor::matmul_nt(&g, self.value(*b)));
                    }
                    if need(*b) {
                        let av = self.value(*a);
                        let mut gb = Mat::zeros(av.cols(), g.cols());
                        tensor::matmul_tn_acc(av, &g, &mut gb);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    if need(*x) {
                        acc(&mut grads, *x, tensor::matmul_nt(&g, self.value(*w)));
                    }
                    if need(*w) {
                        let xv = self.value(*x);
                        let mut gw = Mat::zeros(xv.cols(), g.cols());
                        tensor::matmul_tn_acc(xv, &g, &mut gw);
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if need(*b) {
                            acc(&mut grads, *b, column_sums(&g));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if need(*row) {
                        acc(&mut grads, *row, column_sums(&g));
                    }
                    if need(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let r = self.value(*row).data();
                    if need(*row) {
                        let mut gr = Mat::zeros(1, r.len());
                        for i in 0..g.rows() {
                            for ((o, &gi), &ai) in gr.row_mut(0).iter_mut().zip(g.row(i)).zip(av.row(i)) {
                                *o += gi * ai;
                            }
                        }
                        acc(&mut grads, *row, gr);
                    }
                    if need(*a) {
                        let mut ga = g.clone();
                        for i in 0..ga.rows() {
                            ga.row_mut(i).iter_mut().zip(r).for_each(|(x, &ri)| *x *= ri);
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let mut ga = g;
                    ga.data_mut().iter_mut().zip(av.data()).for_each(|(x, &a)| *x *= tensor::gelu_grad(a));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.data_mut().iter_mut().zip(node.value.data()).for_each(|(x, &t)| *x *= T::one() - t * t);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain).data();
                    let (n, d) = g.shape();
                    if need(*gain) || need(*bias) {
                        let mut gg = Mat::zeros(1, d);
                        let mut gbias = Mat::zeros(1, d);
                        for i in 0..n {
                            for j in 0..d {
                                gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                                gbias.data_mut()[j] += g.get(i, j);
                            }
                        }
                        if need(*gain) {
                            acc(&mut grads, *gain, gg);
                        }
                        if need(*bias) {
                            acc(&mut grads, *bias, gbias);
                        }
                    }
                    if need(*x) {
                        let dn = T::lit(d as f64);
                        let mut gx = Mat::zeros(n, d);
                        for i in 0..n {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dxh = g.get(i, j) * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat.get(i, j);
                            }
                            m1 /= dn;
                            m2 /= dn;
                            for j in 0..d {
                                let dxh = g.get(i, j) * gv[j];
                                gx.set(i, j, rstd[i] * (dxh - m1 - xhat.get(i, j) * m2));
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / heads;
                    let scale = T::one() / T::lit(dh as f64).sqrt();
                    let mut gq = Mat::zeros(n, d);
                    let mut gk = Mat::zeros(n, d);
                    let mut gv = Mat::zeros(n, d);
                    let mut ds = vec![T::zero(); n];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..n {
                            let go = &g.row(i)[off..off + dh];
                            let prow = p.row(i);
                            let mut inner = T::zero();
                            for j in 0..=i {
                                let dp = tensor::dot(go, &vv.row(j)[off..off + dh]);
                                ds[j] = dp;
                                inner += dp * prow[j];
                            }
                            for j in 0..=i {
                                let pij = prow[j];
                                tensor::axpy(pij, go, &mut gv.row_mut(j)[off..off + dh]);
                                let s = pij * (ds[j] - inner) * scale;
                                tensor::axpy(s, &kv.row(j)[off..off + dh], &mut gq.row_mut(i)[off..off + dh]);
                                tensor::axpy(s, &qv.row(i)[off..off + dh], &mut gk.row_mut(j)[off..off + dh]);
                            }
                        }
                    }
                    if need(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if need(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if need(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::GatherRows { src, idx } => {
                    let sv = self.value(*src);
                    let mut gs = Mat::zeros(sv.rows(), sv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        gs.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(o, &x)| *o += x);
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if need(p) {
                            let slice = g.data()[start * g.cols()..(start + r) * g.cols()].to_vec();
                            acc(&mut grads, p, Mat::from_vec(r, g.cols(), slice));
                        }
                        start += r;
                    }
                }
                Op::SliceCols { src, start } => {
                    let sv = self.value(*src);
                    let mut gs = Mat::zeros(sv.rows(), sv.cols());
                    for i in 0..g.rows() {
                        gs.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::MeanRows(src) => {
                    let sv = self.value(*src);
                    let inv = T::one() / T::lit(sv.rows() as f64);
                    let mut gs = Mat::zeros(sv.rows(), sv.cols());
                    for i in 0..sv.rows() {
                        gs.row_mut(i).iter_mut().zip(g.row(0)).for_each(|(o, &x)| *o = x * inv);
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::Reshape(src) => {
                    let (r, c) = self.value(*src).shape();
                    acc(&mut grads, *src, g.reshaped(r, c));
                }
                Op::Softmax(src) => {
                    let p = &node.value;
                    let mut gs = Mat::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let inner = tensor::dot(g.row(i), p.row(i));
                        for j in 0..p.cols() {
                            gs.set(i, j, p.get(i, j) * (g.get(i, j) - inner));
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::CrossEntropySum { logits, targets, probs } => {
                    let up = g.item();
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = gl.row_mut(i);
                        row[t] -= T::one();
                        row.iter_mut().for_each(|x| *x *= up);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    gx.data_mut().iter_mut().zip(xv.data()).for_each(|(gi, &a)| {
                        if a < *lo || a > *hi {
                            *gi = T::zero();
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Reparam { mu, log_var, eps } => {
                    if need(*mu) {
                        acc(&mut grads, *mu, g.clone());
                    }
                    if need(*log_var) {
                        let lv = self.value(*log_var).data();
                        let gl: Vec<T> =
                            g.data().iter().zip(lv).zip(eps).map(|((&gi, &l), &e)| gi * e * (l * half).exp() * half).collect();
                        acc(&mut grads, *log_var, Mat::row_vector(&gl));
                    }
                }
                Op::KlStdNormal { mu, log_var } => {
                    let up = g.item();
                    if need(*mu) {
                        acc(&mut grads, *mu, self.value(*mu).map(|m| m * up));
                    }
                    if need(*log_var) {
                        acc(&mut grads, *log_var, self.value(*log_var).map(|l| up * half * (l.exp() - T::one())));
                    }
                }
                Op::KernelRegress { z, y, h, weights, denom } => {
                    let zv = self.value(*z);
                    let (n, dz) = zv.shape();
                    let yhat = node.value.data();
                    let inv_h2 = T::one() / (*h * *h);
                    let mut gz = Mat::zeros(n, dz);
                    for i in 0..n {
                        let gi = g.get(i, 0);
                        if gi == T::zero() {
                            continue;
                        }
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            // d yhat_i / d W_ij, then d W_ij / d z_i = −W_ij (z_i − z_j) / h².
                            let gw = gi * (y[j] - yhat[i]) / denom[i];
                            let coef = gw * weights.get(i, j) * inv_h2;
                            for c in 0..dz {
                                let diff = zv.get(i, c) - zv.get(j, c);
                                let cur_i = gz.get(i, c);
                                gz.set(i, c, cur_i - coef * diff);
                                let cur_j = gz.get(j, c);
                                gz.set(j, c, cur_j + coef * diff);
                            }
                        }
                    }
                    acc(&mut grads, *z, gz);
                }
                Op::MeanSquaredError { pred, target } => {
                    let up = g.item();
                    let p = self.value(*pred);
                    let n = T::lit(target.len() as f64);
                    let two = T::lit(2.0);
                    let gp: Vec<T> = p.data().iter().zip(target).map(|(&a, &b)| up * two * (a - b) / n).collect();
                    acc(&mut grads, *pred, Mat::from_vec(p.rows(), p.cols(), gp));
                }
                Op::SumScalars(parts) => {
                    for &p in parts {
                        if need(p) {
                            acc(&mut grads, p, g.clone());
                        }
                    }
                }
            }
        }
        grads
    }
}

fn column_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols());
    for i in 0..g.rows() {
        out.row_mut(0).iter_mut().zip(g.row(i)).for_each(|(o, &x)| *o += x);
    }
    out
}

/// `Σ_d ½(mu_d² + exp(log_var_d) − 1 − log_var_d)`.
pub fn kl_closed_form<T: Scalar>(mu: &[T], log_var: &[T]) -> T {
    let half = T::lit(0.5);
    mu.iter().zip(log_var).map(|(&m, &l)| half * (m * m + l.exp() - T::one() - l)).sum()
}

/// Leave-one-out Nadaraya-Watson weights. Returns `(W, yhat, row_sums)` with
/// `W_ij = exp(−‖z_i − z_j‖² / 2h²)` for `j ≠ i` and a zero diagonal.
pub fn kernel_weights<T: Scalar>(z: &Mat<T>, y: &[T], h: T) -> (Mat<T>, Vec<T>, Vec<T>) {
    let n = z.rows();
    assert_eq!(y.len(), n);
    let two_h2 = T::lit(2.0) * h * h;
    let mut w = Mat::zeros(n, n);
    let mut yhat = vec![T::zero(); n];
    let mut denom = vec![T::zero(); n];
    for i in 0..n {
        let mut num = T::zero();
        let mut den = T::zero();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d2: T = z.row(i).iter().zip(z.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let wij = (-d2 / two_h2).exp();
            w.set(i, j, wij);
            num += wij * y[j];
            den += wij;
        }
        yhat[i] = num / den;
        denom[i] = den;
    }
    (w, yhat, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` over every element of the input leaf.
    fn check_input_grad(x0: Mat<f64>, f: impl Fn(&mut Tape<'_, f64>, NodeId) -> NodeId, tol: f64) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(x0.clone());
        let out = f(&mut tape, x);
        let mut pg = Grads::zeros_like(&store);
        let grads = tape.backward(&[(out, Mat::scalar(1.0))], &mut pg);
        let analytic = grads[x.0].clone().unwrap_or_else(|| Mat::zeros(x0.rows(), x0.cols()));
        let eval = |m: Mat<f64>| {
            let mut t = Tape::new(&store);
            let xi = t.input(m);
            let o = f(&mut t, xi);
            t.value(o).item()
        };
        let h = 1e-6;
        for e in 0..x0.data().len() {
            let mut p = x0.clone();
            p.data_mut()[e] += h;
            let mut m = x0.clone();
            m.data_mut()[e] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[e];
            assert!((fd - a).abs() <= tol * (1.0 + fd.abs()), "element {e}: analytic {a} vs fd {fd}");
        }
    }

    fn rand_mat(seed: u64, r: usize, c: usize) -> Mat<f64> {
        gaussian(&mut ChaCha8Rng::seed_from_u64(seed), r, c, 1.0)
    }

    #[test]
    fn attention_gradient() {
        let w = rand_mat(9, 5, 8);
        check_input_grad(
            rand_mat(1, 5, 8),
            |t, x| {
                let k = t.tanh(x);
                let a = t.causal_attention(x, k, x, 2);
                let wc = t.constant(w.clone());
                let m = t.add(a, wc);
                let s = t.softmax(m);
                t.cross_entropy_sum(s, &[0, 1, 2, 3, 4])
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_and_gelu_gradient() {
        let gain = rand_mat(2, 1, 6);
        let bias = rand_mat(3, 1, 6);
        check_input_grad(
            rand_mat(4, 3, 6),
            move |t, x| {
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                let n = t.layer_norm(x, g, b);
                let a = t.gelu(n);
                let m = t.mean_rows(a);
                t.cross_entropy_sum(m, &[3])
            },
            1e-6,
        );
    }

    #[test]
    fn kernel_regression_gradient() {
        let y = vec![0.1, 0.9, 0.4, 0.7, 0.2];
        check_input_grad(
            rand_mat(5, 5, 2),
            move |t, z| {
                let yh = t.kernel_regress(z, &y, 0.8);
                t.mse(yh, &[0.3, 0.5, 0.5, 0.1, 0.9])
            },
            1e-6,
        );
    }

    #[test]
    fn gather_concat_slice_film_gradient() {
        check_input_grad(
            rand_mat(6, 3, 4),
            |t, x| {
                let g = t.gather_rows(x, &[2, 0, 0, 1]);
                let row = t.slice_cols(x, 0, 4);
                let r0 = t.gather_rows(row, &[1]);
                let gamma = t.add_const(r0, 1.0);
                let m = t.mul_row(g, gamma);
                let m = t.add_row(m, r0);
                let c = t.concat_rows(&[m, x]);
                let flat = t.reshape(c, 1, 28);
                let s = t.scale(flat, 0.3);
                t.cross_entropy_sum(s, &[5])
            },
            1e-6,
        );
    }

    #[test]
    fn reparam_kl_clamp_gradient() {
        let eps = vec![0.3, -1.2, 0.8];
        check_input_grad(
            rand_mat(7, 1, 6),
            move |t, x| {
                let mu = t.slice_cols(x, 0, 3);
                let lv = t.slice_cols(x, 3, 3);
                let lv = t.clamp(lv, -10.0, 10.0);
                let c = t.reparam(mu, lv, &eps);
                let kl = t.kl_std_normal(mu, lv);
                let ce = t.cross_entropy_sum(c, &[1]);
                t.sum_scalars(&[kl, ce])
            },
            1e-6,
        );
    }

    #[test]
    fn linear_and_matmul_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_mat(8, 4, 3), false);
        let b = store.add("b", rand_mat(9, 1, 3), false);
        let frozen = store.add("f", rand_mat(10, 3, 3), true);
        let x0 = rand_mat(11, 2, 4);
        let run = |s: &ParamStore<f64>| {
            let mut t = Tape::new(s);
            let x = t.constant(x0.clone());
            let (wn, bn, fnode) = (t.param(w), t.param(b), t.param(frozen));
            let y = t.linear(x, wn, Some(bn));
            let y = t.matmul(y, fnode);
            let o = t.cross_entropy_sum(y, &[0, 2]);
            let mut g = Grads::zeros_like(s);
            t.backward(&[(o, Mat::scalar(1.0))], &mut g);
            (t.value(o).item(), g)
        };
        let (_, g) = run(&store);
        assert!(g.get(frozen).data().iter().all(|&v| v == 0.0));
        for id in [w, b] {
            for e in 0..store.value(id).data().len() {
                let mut p = store.clone();
                p.get_mut(id).value.data_mut()[e] += 1e-6;
                let mut m = store.clone();
                m.get_mut(id).value.data_mut()[e] -= 1e-6;
                let fd = (run(&p).0 - run(&m).0) / 2e-6;
                assert!((fd - g.get(id).data()[e]).abs() < 1e-7);
            }
        }
    }
}
