use crate::error::{Error, Result};

use super::conv::{col2im, im2col, ConvGeom};
use super::gemm::gemm;
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axes selection for reductions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    Some(Vec<usize>),
}

impl Axes {
    fn mask(&self, rank: usize) -> Result<Vec<bool>> {
        match self {
            Axes::All => Ok(vec![true; rank]),
            Axes::Some(list) => {
                let mut mask = vec![false; rank];
                for &a in list {
                    if a >= rank {
                        return Err(Error::shape(format!("axis {a} out of range for rank {rank}")));
                    }
                    mask[a] = true;
                }
                Ok(mask)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AddBias(Var, Var),
    Relu(Var),
    GlobalAvgPool(Var),
    Softmax {
        x: Var,
        axis: usize,
        temperature: f64,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
        temperature: f64,
    },
    Reduce {
        x: Var,
        mask: Vec<bool>,
        kind: ReduceKind,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode autodiff tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it and the
/// insertion order is a valid topological order. Values live on the tape; a [`Var`]
/// is only an index into it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `(outer, extent, inner)` strides for iterating along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that accumulates gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a @ b` for `a: M x K`, `b: K x N`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, k2, n) = match (&sa[..], &sb[..]) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::shape(format!(
                    "matmul needs rank-2 operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, 1, m, k, n, false, false, vec![m, n])
    }

    /// Batched `op(a) @ op(b)` on rank-3 operands, where `op` optionally swaps the
    /// last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ba, ra, ca, bb, rb, cb) = match (&sa[..], &sb[..]) {
            (&[ba, ra, ca], &[bb, rb, cb]) => (ba, ra, ca, bb, rb, cb),
            _ => {
                return Err(Error::shape(format!(
                    "bmm needs rank-3 operands, got {sa:?} and {sb:?}"
                )))
            }
        };
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::shape(format!(
                "bmm operand mismatch: {sa:?} (transposed: {trans_a}) x {sb:?} (transposed: {trans_b})"
            )));
        }
        self.matmul_impl(a, b, ba, m, k, n, trans_a, trans_b, vec![ba, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[bi * m * k..(bi + 1) * m * k],
                    trans_a,
                    &vb[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_a,
            trans_b,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// 2-D cross-correlation (no kernel flip) over an `N x Cin x H x W` input.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::resolve(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    geom.cout,
                    self.shape(b)
                )));
            }
        }
        let plane = geom.out_plane();
        let patch = geom.patch_len();
        let mut out = vec![0.0; geom.n * geom.cout * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut col = if geom.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; patch * plane]
            };
            for s in 0..geom.n {
                let xs = &xv[s * geom.in_sample()..(s + 1) * geom.in_sample()];
                let cols: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(&geom, xs, &mut col);
                    &col
                };
                let dst = &mut out[s * geom.cout * plane..(s + 1) * geom.cout * plane];
                gemm(geom.cout, patch, plane, wv, false, cols, false, dst, false);
                if let Some(b) = bias {
                    let bv = self.value(b).data();
                    for (c, row) in dst.chunks_mut(plane).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let shape = [geom.n, geom.cout, geom.ho, geom.wo];
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b: bias, geom }, rg))
    }

    /// Adds a per-channel bias `b: [C]` broadcast over axis 1 of an `N x C (x H x W)` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match channel axis of {xs:?}",
                self.shape(b)
            )));
        }
        let (outer, c, inner) = axis_layout(&xs, 1);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        debug_assert_eq!(data.len(), outer * c * inner);
        for (i, plane) in data.chunks_mut(inner.max(1)).enumerate() {
            let add = bv[i % c];
            plane.iter_mut().for_each(|v| *v += add);
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Spatial mean: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("global_avg_pool needs H, W >= 1"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::GlobalAvgPool(x), rg))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Max-shifted softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, temperature, false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis, temperature }, rg))
    }

    /// Log of [`Tape::softmax`], computed without forming the probabilities first.
    pub fn log_softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        self.check_axis(x, axis)?;
        let out = softmax_values(self.value(x), axis, temperature, true);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis, temperature }, rg))
    }

    pub fn sum(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(x, axes, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.reduce(x, axes, ReduceKind::Mean)
    }

    fn reduce(&mut self, x: Var, axes: Axes, kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mask = axes.mask(shape.len())?;
        let (out_shape, map) = reduce_map(&shape, &mask);
        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        for (v, &o) in self.value(x).data().iter().zip(&map) {
            out[o] += v;
        }
        if kind == ReduceKind::Mean {
            let count = (shape.iter().product::<usize>() / out_len.max(1)) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Reduce { x, mask, kind }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` along axis 1.
    ///
    /// `logits` is `N x K` (one label per sample) or `N x K x H x W` (one label per pixel,
    /// ordered `n, y, x`). Positions labelled `ignore_label` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore_label: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (n, k, plane) = match shape[..] {
            [n, k] => (n, k, 1),
            [n, k, h, w] => (n, k, h * w),
            _ => {
                return Err(Error::shape(format!(
                    "cross_entropy logits must be N x K or N x K x H x W, got {shape:?}"
                )))
            }
        };
        if labels.len() != n * plane {
            return Err(Error::shape(format!(
                "cross_entropy expects {} labels for logits {shape:?}, got {}",
                n * plane,
                labels.len()
            )));
        }
        let probs = softmax_values(self.value(logits), 1, 1.0, false).into_data();
        let mut targets = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (pos, &label) in labels.iter().enumerate() {
            if Some(label) == ignore_label {
                targets.push(None);
                continue;
            }
            if label >= k {
                return Err(Error::Label(format!(
                    "label {label} at position {pos} outside [0, {k})"
                )));
            }
            let (s, p) = (pos / plane, pos % plane);
            let logit_idx = (s * k + label) * plane + p;
            let lsm = log_softmax_at(self.value(logits).data(), s, k, plane, p, label);
            debug_assert!(logit_idx < probs.len());
            total += -lsm;
            count += 1;
            targets.push(Some(label));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Accumulates `d root / d node` into every node that requires gradient.
    ///
    /// Gradients add to whatever is already stored, so calling this twice without
    /// [`Tape::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::new(rv.shape(), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => existing.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = self.value(*b).data();
                    let d = gd.iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.accumulate(adj, *a, Tensor::new(g.shape(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let va = self.value(*a).data();
                    let d = gd.iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(adj, *b, Tensor::new(g.shape(), d).expect("shape"));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(adj, *a, g.map(|v| v * s));
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let bs = &vb[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_a {
                            gemm(k, n, m, bs, trans_b, gs, true, dst, false);
                        } else {
                            gemm(m, n, k, gs, false, bs, !trans_b, dst, false);
                        }
                    }
                    let shape = self.shape(a).to_vec();
                    self.accumulate(adj, a, Tensor::new(&shape, da).expect("shape"));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let as_ = &va[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gs, true, as_, trans_a, dst, false);
                        } else {
                            gemm(k, m, n, as_, !trans_a, gs, false, dst, false);
                        }
                    }
                    let shape = self.shape(b).to_vec();
                    self.accumulate(adj, b, Tensor::new(&shape, db).expect("shape"));
                }
            }
            &Op::Conv2d { x, w, b, geom } => self.conv2d_backward(x, w, b, geom, g, adj),
            Op::AddBias(x, b) => {
                self.accumulate(adj, *x, g.clone());
                if self.wants(*b) {
                    let (outer, c, inner) = axis_layout(g.shape(), 1);
                    let mut db = vec![0.0; c];
                    for o in 0..outer {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            let base = (o * c + ch) * inner;
                            *acc += gd[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(adj, *b, Tensor::new(&[c], db).expect("shape"));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(adj, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f64;
                let d = gd.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                self.accumulate(adj, *x, Tensor::new(&xs, d).expect("shape"));
            }
            &Op::Softmax { x, axis, temperature } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_layout(node.value.shape(), axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot) / temperature;
                        }
                    }
                }
                self.accumulate(adj, x, Tensor::new(node.value.shape(), d).expect("shape"));
            }
            &Op::LogSoftmax { x, axis, temperature } => {
                let z = node.value.data();
                let (outer, len, inner) = axis_layout(node.value.shape(), axis);
                let mut d = vec![0.0; z.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let gsum: f64 = (0..len).map(|j| gd[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = (gd[idx(j)] - z[idx(j)].exp() * gsum) / temperature;
                        }
                    }
                }
                self.accumulate(adj, x, Tensor::new(node.value.shape(), d).expect("shape"));
            }
            Op::Reduce { x, mask, kind } => {
                let xs = self.shape(*x).to_vec();
                let (out_shape, map) = reduce_map(&xs, mask);
                let out_len: usize = out_shape.iter().product();
                let factor = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => out_len as f64 / map.len() as f64,
                };
                let d = map.iter().map(|&o| gd[o] * factor).collect();
                self.accumulate(adj, *x, Tensor::new(&xs, d).expect("shape"));
            }
            Op::Reshape(x) => {
                let xs = self.shape(*x).to_vec();
                self.accumulate(adj, *x, g.clone().reshape(&xs).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                let shape = self.shape(*logits).to_vec();
                let (k, plane) = (shape[1], shape[2..].iter().product::<usize>());
                let mut d = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = gd[0] / *count as f64;
                    for (pos, t) in targets.iter().enumerate() {
                        let Some(label) = t else { continue };
                        let (s, p) = (pos / plane, pos % plane);
                        for c in 0..k {
                            let idx = (s * k + c) * plane + p;
                            let onehot = if c == *label { 1.0 } else { 0.0 };
                            d[idx] = (probs[idx] - onehot) * scale;
                        }
                    }
                }
                self.accumulate(adj, *logits, Tensor::new(&shape, d).expect("shape"));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let gd = g.data();
        let plane = geom.out_plane();
        let patch = geom.patch_len();
        let out_sample = geom.cout * plane;
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            let mut db = vec![0.0; geom.cout];
            for s in 0..geom.n {
                for (c, acc) in db.iter_mut().enumerate() {
                    let base = s * out_sample + c * plane;
                    *acc += gd[base..base + plane].iter().sum::<f64>();
                }
            }
            self.accumulate(adj, b, Tensor::new(&[geom.cout], db).expect("shape"));
        }
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        if !want_x && !want_w {
            return;
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dw = if want_w {
            vec![0.0; geom.cout * patch]
        } else {
            Vec::new()
        };
        let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { patch * plane }];
        let mut dcol = vec![
            0.0;
            if want_x && !geom.is_pointwise() {
                patch * plane
            } else {
                0
            }
        ];
        for s in 0..geom.n {
            let gs = &gd[s * out_sample..(s + 1) * out_sample];
            let xs = &xv[s * geom.in_sample()..(s + 1) * geom.in_sample()];
            if want_w {
                let cols: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(&geom, xs, &mut col);
                    &col
                };
                gemm(geom.cout, plane, patch, gs, false, cols, true, &mut dw, true);
            }
            if want_x {
                let dxs = &mut dx[s * geom.in_sample()..(s + 1) * geom.in_sample()];
                if geom.is_pointwise() {
                    gemm(patch, geom.cout, plane, wv, true, gs, false, dxs, false);
                } else {
                    gemm(patch, geom.cout, plane, wv, true, gs, false, &mut dcol, false);
                    col2im(&geom, &dcol, dxs);
                }
            }
        }
        if want_w {
            let shape = self.shape(w).to_vec();
            self.accumulate(adj, w, Tensor::new(&shape, dw).expect("shape"));
        }
        if want_x {
            let shape = self.shape(x).to_vec();
            self.accumulate(adj, x, Tensor::new(&shape, dx).expect("shape"));
        }
    }
}

/// Output shape of a reduction plus, for each input element, its output slot.
fn reduce_map(shape: &[usize], mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape.iter().zip(mask).filter(|(_, &m)| !m).map(|(&d, _)| d).collect();
    // Output stride of each input axis (0 for reduced axes).
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        if !mask[ax] {
            strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    let len: usize = shape.iter().product();
    let mut map = Vec::with_capacity(len);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..len {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    (out_shape, map)
}

fn softmax_values(x: &Tensor, axis: usize, temperature: f64, log: bool) -> Tensor {
    let xv = x.data();
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let z = (xv[idx(j)] - max) / temperature;
                out[idx(j)] = z;
                denom += z.exp();
            }
            if log {
                let lse = denom.ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = out[idx(j)].exp() / denom;
                }
            }
        }
    }
    Tensor::new(x.shape(), out).expect("shape")
}

fn log_softmax_at(x: &[f64], s: usize, k: usize, plane: usize, p: usize, label: usize) -> f64 {
    let at = |c: usize| x[(s * k + c) * plane + p];
    let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
    at(label) - max - lse
}
