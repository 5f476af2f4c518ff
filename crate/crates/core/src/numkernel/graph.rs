//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves are
//! created with [`Graph::param`] (gradient tracked) or [`Graph::constant`]
//! (not tracked); [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every tracked node.
//!
//! Each training step builds a fresh graph; a graph is single-writer and all
//! kernels run sequentially so results are bit-reproducible on one platform.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    SmoothL1(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Interpolate {
        x: Var,
        plan: GridResample,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recording tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to each tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(&[x]);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(&[a, b]);
        self.push(value, op, t)
    }

    /// Elementwise sum; `b` may broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.ends_with(sb) {
            return Err(Error::dim("add", sa, sb));
        }
        let bv = self.value(b).data();
        let n = bv.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        Ok(self.binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(a, b, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(a, b, out, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.binary(a, b, out, Op::Minimum(a, b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("maximum", a, b, |x, y| if x >= y { x } else { y })?;
        Ok(self.binary(a, b, out, Op::Maximum(a, b)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.unary(x, out, Op::Scale(x, c))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        Ok(self.binary(x, s, out, Op::ScaleBy(x, s)))
    }

    /// `[M, K] × [K, N] → [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.binary(a, b, out, Op::MatMul(a, b)))
    }

    /// Batched `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            mm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::from_parts(vec![bs, m, n], out);
        Ok(self.binary(a, b, out, Op::Bmm(a, b)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.unary(x, out, Op::Permute(x, perm.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).detached().reshape(shape)?;
        Ok(self.unary(x, out, Op::Reshape(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.unary(x, out, Op::Softmax(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.unary(x, out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.unary(x, out, Op::Sigmoid(x))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim("layer_norm", t.shape(), g.shape()));
        }
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in t.data().chunks(d) {
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_std.push(inv as f32);
            xhat.extend(row.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
        }
        let (gd, bd) = (g.data(), b.data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gd[i % d] + bd[i % d])
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Gathers rows of a `[R, C]` view; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        Ok(self.unary(x, out, Op::GatherRows(x, idx.to_vec())))
    }

    /// Stacks `[Ra, C]` over `[Rb, C]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.last_dim() != tb.last_dim() {
            return Err(Error::dim("concat_rows", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::from_parts(vec![ta.rows() + tb.rows(), ta.last_dim()], data);
        Ok(self.binary(a, b, out, Op::ConcatRows(a, b)))
    }

    /// Joins `[R, Ca]` and `[R, Cb]` along the last axis, `a` first.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.rows() != tb.rows() {
            return Err(Error::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let (ca, cb) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::from_parts(vec![ta.rows(), ca + cb], data);
        Ok(self.binary(a, b, out, Op::ConcatCols(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.unary(x, Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / t.len() as f64) as f32);
        self.unary(x, out, Op::Mean(x))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mse", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar((s / ta.len() as f64) as f32);
        Ok(self.binary(a, b, out, Op::Mse(a, b)))
    }

    /// Huber loss with transition at |d| = 1, averaged over elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ta, tb) = (self.value(pred), self.value(target));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("smooth_l1", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x as f64 - y as f64).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        let out = Tensor::scalar((s / ta.len() as f64) as f32);
        Ok(self.binary(pred, target, out, Op::SmoothL1(pred, target)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[N, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let k = t.last_dim();
        if t.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::ClassRange {
                index: bad,
                classes: k,
            });
        }
        let mut probs = Vec::with_capacity(t.len());
        let mut nll = 0.0f64;
        for (row, &c) in t.data().chunks(k).zip(targets) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + z.ln();
            nll += lse - row[c] as f64;
            probs.extend(row.iter().map(|&v| ((v as f64 - lse).exp()) as f32));
        }
        let out = Tensor::scalar((nll / targets.len() as f64) as f32);
        Ok(self.unary(
            logits,
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Bilinear resampling of a `[rows·cols, C]` feature map to
    /// `[target_rows·target_cols, C]`.
    pub fn interpolate(&mut self, x: Var, plan: GridResample) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || t.rows() != plan.src_rows * plan.src_cols {
            return Err(Error::dim(
                "interpolate",
                t.shape(),
                &[plan.src_rows, plan.src_cols],
            ));
        }
        let out = plan.apply(t);
        Ok(self.unary(x, out, Op::Interpolate { x, plan }))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Evaluation(format!(
                "backward needs a scalar, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, gy, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len();
                    for (i, &g) in gy.iter().enumerate() {
                        gb[i % n] += g;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, gy, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, gy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &d), &o) in ga.iter_mut().zip(gy).zip(vb) {
                        *g += d * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((g, &d), &o) in gb.iter_mut().zip(gy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, gy, *c);
                }
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, gy, c);
                }
                if let Some(gs) = self.slot(grads, *s) {
                    let d: f64 = gy.iter().zip(vx).map(|(&g, &v)| g as f64 * v as f64).sum();
                    gs[0] += d as f32;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    mm_grad_a(gy, vb, m, k, n, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    mm_grad_b(va, gy, m, k, n, gb);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..bs {
                        mm_grad_a(
                            &gy[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..bs {
                        mm_grad_b(
                            &va[i * m * k..(i + 1) * m * k],
                            &gy[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
            }
            Op::Permute(x, perm) => {
                let map = permute_map(self.shape(*x), perm);
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, &i) in map.iter().enumerate() {
                        gx[i] += gy[o];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, gy, 1.0);
                }
            }
            Op::Softmax(x) => {
                let d = y.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((gxr, yr), gyr) in
                        gx.chunks_mut(d).zip(y.data().chunks(d)).zip(gy.chunks(d))
                    {
                        let dot: f64 = yr.iter().zip(gyr).map(|(&p, &g)| p as f64 * g as f64).sum();
                        for ((g, &p), &gi) in gxr.iter_mut().zip(yr).zip(gyr) {
                            *g += p * (gi - dot as f32);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, &d), &v) in gx.iter_mut().zip(gy).zip(vx) {
                        *g += d * gelu_grad(v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((g, &d), &s) in gx.iter_mut().zip(gy).zip(y.data()) {
                        *g += d * s * (1.0 - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = y.last_dim();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (i, (&g, &h)) in gy.iter().zip(xhat).enumerate() {
                        gg[i % d] += g * h;
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (i, &g) in gy.iter().enumerate() {
                        gb[i % d] += g;
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0f32; d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gyr, hr) = (&gy[span.clone()], &xhat[span.clone()]);
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..d {
                            dxhat[j] = gyr[j] * gv[j];
                            s1 += dxhat[j] as f64;
                            s2 += dxhat[j] as f64 * hr[j] as f64;
                        }
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for (j, g) in gx[span].iter_mut().enumerate() {
                            *g += (inv as f64 * (dxhat[j] as f64 - m1 - hr[j] as f64 * m2)) as f32;
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let c = y.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gx[i * c..(i + 1) * c], &gy[r * c..(r + 1) * c], 1.0);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, &gy[..na], 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, &gy[na..], 1.0);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, g) in ga.chunks_mut(ca).enumerate() {
                        axpy(g, &gy[r * (ca + cb)..r * (ca + cb) + ca], 1.0);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (r, g) in gb.chunks_mut(cb).enumerate() {
                        axpy(g, &gy[r * (ca + cb) + ca..(r + 1) * (ca + cb)], 1.0);
                    }
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick_a: Vec<bool> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &z)| if take_min { x <= z } else { x >= z })
                    .collect();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &d), &p) in ga.iter_mut().zip(gy).zip(&pick_a) {
                        if p {
                            *g += d;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((g, &d), &p) in gb.iter_mut().zip(gy).zip(&pick_a) {
                        if !p {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = gy[0] / gx.len() as f32;
                    gx.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * gy[0] / va.len() as f32;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((g, &x), &z) in ga.iter_mut().zip(va).zip(vb) {
                        *g += s * (x - z);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((g, &x), &z) in gb.iter_mut().zip(va).zip(vb) {
                        *g -= s * (x - z);
                    }
                }
            }
            Op::SmoothL1(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = gy[0] / va.len() as f32;
                let dl: Vec<f32> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &z)| {
                        let d = x - z;
                        if d.abs() < 1.0 {
                            d
                        } else {
                            d.signum()
                        }
                    })
                    .collect();
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, &dl, s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, &dl, -s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).last_dim();
                let s = gy[0] / targets.len() as f32;
                if let Some(gx) = self.slot(grads, *logits) {
                    for (r, &c) in targets.iter().enumerate() {
                        let row = &mut gx[r * k..(r + 1) * k];
                        axpy(row, &probs[r * k..(r + 1) * k], s);
                        row[c] -= s;
                    }
                }
            }
            Op::Interpolate { x, plan } => {
                let c = y.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    plan.scatter(gy, c, gx);
                }
            }
        }
    }
}

/// Source taps for bilinear resampling of a row-major grid. Sample positions
/// use pixel-center alignment (`src = (dst + 0.5) · S / T − 0.5`, clamped to
/// the source extent), so corners are not pinned to corners.
#[derive(Clone, Debug, PartialEq)]
pub struct GridResample {
    pub src_rows: usize,
    pub src_cols: usize,
    pub dst_rows: usize,
    pub dst_cols: usize,
    row_taps: Vec<(usize, usize, f32)>,
    col_taps: Vec<(usize, usize, f32)>,
}

impl GridResample {
    pub fn new(src_rows: usize, src_cols: usize, dst_rows: usize, dst_cols: usize) -> Result<Self> {
        if [src_rows, src_cols, dst_rows, dst_cols].contains(&0) {
            return Err(Error::Geometry(format!(
                "cannot resample {src_rows}x{src_cols} to {dst_rows}x{dst_cols}"
            )));
        }
        Ok(Self {
            src_rows,
            src_cols,
            dst_rows,
            dst_cols,
            row_taps: axis_taps(src_rows, dst_rows),
            col_taps: axis_taps(src_cols, dst_cols),
        })
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.last_dim();
        let src = x.data();
        let mut out = Vec::with_capacity(self.dst_rows * self.dst_cols * c);
        for &(r0, r1, fy) in &self.row_taps {
            for &(c0, c1, fx) in &self.col_taps {
                let a = &src[(r0 * self.src_cols + c0) * c..][..c];
                let b = &src[(r0 * self.src_cols + c1) * c..][..c];
                let p = &src[(r1 * self.src_cols + c0) * c..][..c];
                let q = &src[(r1 * self.src_cols + c1) * c..][..c];
                for ch in 0..c {
                    let top = a[ch] + fx * (b[ch] - a[ch]);
                    let bot = p[ch] + fx * (q[ch] - p[ch]);
                    out.push(top + fy * (bot - top));
                }
            }
        }
        Tensor::from_parts(vec![self.dst_rows * self.dst_cols, c], out)
    }

    fn scatter(&self, gy: &[f32], c: usize, gx: &mut [f32]) {
        let mut o = 0;
        for &(r0, r1, fy) in &self.row_taps {
            for &(c0, c1, fx) in &self.col_taps {
                let taps = [
                    (r0 * self.src_cols + c0, (1.0 - fx) * (1.0 - fy)),
                    (r0 * self.src_cols + c1, fx * (1.0 - fy)),
                    (r1 * self.src_cols + c0, (1.0 - fx) * fy),
                    (r1 * self.src_cols + c1, fx * fy),
                ];
                for (cell, w) in taps {
                    axpy(
                        &mut gx[cell * c..(cell + 1) * c],
                        &gy[o * c..(o + 1) * c],
                        w,
                    );
                }
                o += 1;
            }
        }
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

fn axpy(y: &mut [f32], x: &[f32], a: f32) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(orow, &b[p * n..(p + 1) * n], av);
            }
        }
    }
}

// dA += dY · Bᵀ
fn mm_grad_a(gy: &[f32], b: &[f32], m: usize, k: usize, n: usize, ga: &mut [f32]) {
    for i in 0..m {
        let grow = &gy[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

// dB += Aᵀ · dY
fn mm_grad_b(a: &[f32], gy: &[f32], m: usize, k: usize, n: usize, gb: &mut [f32]) {
    for i in 0..m {
        let grow = &gy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut gb[p * n..(p + 1) * n], grow, av);
            }
        }
    }
}

/// For each output element of a permutation, the linear index of its source.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / z) as f32;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_3d_roundtrip() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[1, 0, 2]).unwrap();
        // y[j, i, k] == x[i, j, k]
        assert_eq!(g.value(y).data()[(2 + 1) * 4 + 2], data[(3 + 1) * 4 + 2]);
        let z = g.permute(y, &[1, 0, 2]).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn add_broadcasts_suffix_only() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(t(&[3], &[1., 2., 3.]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 1., 2., 3.]);
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn untracked_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[1], &[2.0]));
        let c = g.constant(t(&[1], &[3.0]));
        let y = g.mul(w, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_class() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 4]));
        match g.cross_entropy(x, &[4]) {
            Err(Error::ClassRange {
                index: 4,
                classes: 4,
            }) => {}
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }
}
