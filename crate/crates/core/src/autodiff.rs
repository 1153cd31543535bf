//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends a node to the [`Tape`]; nodes are
//! stored in creation order, which is a topological order of the graph, so a
//! backward sweep in reverse index order sees each node only after all of its
//! consumers have pushed their contributions.
//!
//! ```
//! use vrm_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(&[1.0, 2.0, 3.0]));
//! let loss = tape.sum_all(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, check_axis, permute_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient mistakes, used to prove the verification suite can
/// catch a broken backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the Huber residual derivative.
    HuberGradSign,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    Tanh(usize),
    Permute(usize, Vec<usize>),
    SumAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Softmax { x: usize, axis: usize, tau: f64 },
    L2Normalize { x: usize, axis: usize, eps: f64 },
    Huber { a: usize, b: usize, delta: f64 },
    Entropy { p: usize, axis: usize },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    Kld { teacher: usize, student: usize, tau: f64 },
    PairwiseSub(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// `backward` borrows the tape immutably and returns a fresh [`Gradients`]
/// map, so it may be called repeatedly (for example on different losses built
/// on the same tape); each call is independent and yields identical results
/// for the same loss.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
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

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a.0, b.0), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a.0, b.0), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a.0, b.0), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, Op::Scale(a.0, factor), &[a])
    }

    /// `[m,k] x [k,n] -> [m,n]`, or batched `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a.0, b.0), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.rank() != 1 || vx.shape()[1] != vb.shape()[0] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let n = vb.numel();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddBias(x.0, bias.0), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(x.0), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push_op(out, Op::Tanh(x.0), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push_op(out, Op::Permute(x.0, axes.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = sum_axis_forward(self.value(x), axis)?;
        Ok(self.push_op(out, Op::SumAxis(x.0, axis), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push_op(Tensor::scalar(s), Op::SumAll(x.0), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push_op(Tensor::scalar(s), Op::MeanAll(x.0), &[x]))
    }

    /// Temperature softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: f64) -> Result<Var> {
        let out = softmax(self.value(x), axis, tau)?;
        Ok(self.push_op(out, Op::Softmax { x: x.0, axis, tau }, &[x]))
    }

    /// Unit-normalizes every fiber along `axis`; fibers shorter than `eps`
    /// become zero and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let out = l2_normalize(self.value(x), axis, eps)?;
        Ok(self.push_op(out, Op::L2Normalize { x: x.0, axis, eps }, &[x]))
    }

    /// Elementwise Huber penalty of `a - b`.
    pub fn huber(&mut self, a: Var, b: Var, delta: f64) -> Result<Var> {
        self.same_shape("huber", a, b)?;
        let out = huber(self.value(a), self.value(b), delta)?;
        Ok(self.push_op(out, Op::Huber { a: a.0, b: b.0, delta }, &[a, b]))
    }

    /// Shannon entropy (nats) of each probability fiber along `axis`.
    pub fn entropy(&mut self, p: Var, axis: usize) -> Result<Var> {
        let out = entropy(self.value(p), axis)?;
        Ok(self.push_op(out, Op::Entropy { p: p.0, axis }, &[p]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = cross_entropy(self.value(logits), labels)?;
        Ok(self.push_op(
            Tensor::scalar(out),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// `tau^2`-scaled batch-mean KL divergence from the softened teacher to
    /// the softened student.
    pub fn kld(&mut self, teacher: Var, student: Var, tau: f64) -> Result<Var> {
        self.same_shape("kld", teacher, student)?;
        let out = kld(self.value(teacher), self.value(student), tau)?;
        Ok(self.push_op(
            Tensor::scalar(out),
            Op::Kld {
                teacher: teacher.0,
                student: student.0,
                tau,
            },
            &[teacher, student],
        ))
    }

    /// `[m,k]` and `[n,k]` to `[m,n,k]` with `out[i,j,:] = a[i,:] - b[j,:]`.
    pub fn pairwise_sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = pairwise_sub_forward(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::PairwiseSub(a.0, b.0), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss variable is not on this tape".into()))?;
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let shape = |i: usize| self.nodes[i].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, g));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, g));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for (x, gi) in d.iter_mut().zip(g) {
                            *x -= gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let vb = val(*b);
                    accumulate(grads, *a, g.len(), |d| {
                        for ((x, gi), y) in d.iter_mut().zip(g).zip(vb) {
                            *x += gi * y;
                        }
                    });
                }
                if self.wants(*b) {
                    let va = val(*a);
                    accumulate(grads, *b, g.len(), |d| {
                        for ((x, gi), y) in d.iter_mut().zip(g).zip(va) {
                            *x += gi * y;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |d| {
                        for (x, gi) in d.iter_mut().zip(g) {
                            *x += gi * s;
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (groups, m, k, n) = matmul_dims(ta.shape(), tb.shape());
                if self.wants(*a) {
                    accumulate(grads, *a, ta.numel(), |d| {
                        for gr in 0..groups {
                            let go = &g[gr * m * n..(gr + 1) * m * n];
                            let bo = &tb.data()[gr * k * n..(gr + 1) * k * n];
                            let dout = &mut d[gr * m * k..(gr + 1) * m * k];
                            for i in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    for j in 0..n {
                                        s += go[i * n + j] * bo[p * n + j];
                                    }
                                    dout[i * k + p] += s;
                                }
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, tb.numel(), |d| {
                        for gr in 0..groups {
                            let go = &g[gr * m * n..(gr + 1) * m * n];
                            let ao = &ta.data()[gr * m * k..(gr + 1) * m * k];
                            let dout = &mut d[gr * k * n..(gr + 1) * k * n];
                            for i in 0..m {
                                for p in 0..k {
                                    let av = ao[i * k + p];
                                    if av == 0.0 {
                                        continue;
                                    }
                                    for j in 0..n {
                                        dout[p * n + j] += av * go[i * n + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |d| add_into(d, g));
                }
                if self.wants(*b) {
                    let n = shape(*b)[0];
                    accumulate(grads, *b, n, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i % n] += gi;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let vx = val(*x);
                    accumulate(grads, *x, g.len(), |d| {
                        for ((o, gi), xi) in d.iter_mut().zip(g).zip(vx) {
                            if *xi > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let y = node.value.data();
                    accumulate(grads, *x, g.len(), |d| {
                        for ((o, gi), yi) in d.iter_mut().zip(g).zip(y) {
                            *o += gi * (1.0 - yi * yi);
                        }
                    });
                }
            }
            Op::Permute(x, axes) => {
                if self.wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (k, &a) in axes.iter().enumerate() {
                        inverse[a] = k;
                    }
                    let mut back = vec![0.0; g.len()];
                    permute_into(g, node.value.shape(), &inverse, &mut back);
                    accumulate(grads, *x, g.len(), |d| add_into(d, &back));
                }
            }
            Op::SumAxis(x, axis) => {
                if self.wants(*x) {
                    let (outer, len, inner) = axis_extents(shape(*x), *axis);
                    accumulate(grads, *x, outer * len * inner, |d| {
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    d[(o * len + k) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    accumulate(grads, *x, n, |d| d.iter_mut().for_each(|v| *v += g[0]));
                }
            }
            Op::MeanAll(x) => {
                if self.wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    let gi = g[0] / n as f64;
                    accumulate(grads, *x, n, |d| d.iter_mut().for_each(|v| *v += gi));
                }
            }
            Op::Softmax { x, axis, tau } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    accumulate(grads, *x, y.len(), |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let s: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                                for k in 0..len {
                                    d[at(k)] += y[at(k)] * (g[at(k)] - s) / tau;
                                }
                            }
                        }
                    });
                }
            }
            Op::L2Normalize { x, axis, eps } => {
                if self.wants(*x) {
                    let vx = val(*x);
                    let y = node.value.data();
                    let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                    accumulate(grads, *x, y.len(), |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let norm = (0..len).map(|k| vx[at(k)] * vx[at(k)]).sum::<f64>().sqrt();
                                if norm < *eps {
                                    continue;
                                }
                                let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                                for k in 0..len {
                                    d[at(k)] += (g[at(k)] - y[at(k)] * dot) / norm;
                                }
                            }
                        }
                    });
                }
            }
            Op::Huber { a, b, delta } => {
                let sign = if self.fault == Some(Fault::HuberGradSign) { -1.0 } else { 1.0 };
                let (va, vb) = (val(*a), val(*b));
                let deriv: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .zip(g)
                    .map(|((x, y), gi)| sign * gi * (x - y).clamp(-delta, *delta))
                    .collect();
                if self.wants(*a) {
                    accumulate(grads, *a, g.len(), |d| add_into(d, &deriv));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.len(), |d| {
                        for (x, di) in d.iter_mut().zip(&deriv) {
                            *x -= di;
                        }
                    });
                }
            }
            Op::Entropy { p, axis } => {
                if self.wants(*p) {
                    let vp = val(*p);
                    let (outer, len, inner) = axis_extents(shape(*p), *axis);
                    accumulate(grads, *p, vp.len(), |d| {
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    let idx = (o * len + k) * inner + i;
                                    // 0 log 0 = 0 is taken as locally flat.
                                    if vp[idx] > 0.0 {
                                        d[idx] -= g[o * inner + i] * (vp[idx].ln() + 1.0);
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let z = &self.nodes[*logits].value;
                    let probs = softmax(z, 1, 1.0).expect("validated on forward");
                    let (b, c) = (z.shape()[0], z.shape()[1]);
                    let scale = g[0] / b as f64;
                    accumulate(grads, *logits, b * c, |d| {
                        for (r, &label) in labels.iter().enumerate() {
                            for k in 0..c {
                                let target = if k == label { 1.0 } else { 0.0 };
                                d[r * c + k] += scale * (probs.data()[r * c + k] - target);
                            }
                        }
                    });
                }
            }
            Op::Kld { teacher, student, tau } => {
                let zt = &self.nodes[*teacher].value;
                let zs = &self.nodes[*student].value;
                let pt = softmax(zt, 1, *tau).expect("validated on forward");
                let ps = softmax(zs, 1, *tau).expect("validated on forward");
                let (b, c) = (zt.shape()[0], zt.shape()[1]);
                let scale = g[0] * tau / b as f64;
                if self.wants(*student) {
                    accumulate(grads, *student, b * c, |d| {
                        for (x, (s, t)) in d.iter_mut().zip(ps.data().iter().zip(pt.data())) {
                            *x += scale * (s - t);
                        }
                    });
                }
                if self.wants(*teacher) {
                    let lpt = log_softmax(zt, *tau);
                    let lps = log_softmax(zs, *tau);
                    accumulate(grads, *teacher, b * c, |d| {
                        for r in 0..b {
                            let row = r * c..(r + 1) * c;
                            let ratio: Vec<f64> = row.clone().map(|i| lpt[i] - lps[i]).collect();
                            let mean: f64 = row.clone().zip(&ratio).map(|(i, q)| pt.data()[i] * q).sum();
                            for (k, i) in row.enumerate() {
                                d[i] += scale * pt.data()[i] * (ratio[k] - mean);
                            }
                        }
                    });
                }
            }
            Op::PairwiseSub(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[0];
                if self.wants(*a) {
                    accumulate(grads, *a, m * k, |d| {
                        for i in 0..m {
                            for j in 0..n {
                                let base = (i * n + j) * k;
                                for c in 0..k {
                                    d[i * k + c] += g[base + c];
                                }
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, n * k, |d| {
                        for i in 0..m {
                            for j in 0..n {
                                let base = (i * n + j) * k;
                                for c in 0..k {
                                    d[j * k + c] -= g[base + c];
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    match (a.len(), b.len()) {
        (2, 2) => (1, a[0], a[1], b[1]),
        _ => (a[0], a[1], a[2], b[2]),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let ok = match (sa.len(), sb.len()) {
        (2, 2) => sa[1] == sb[0],
        (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
        _ => false,
    };
    if !ok {
        return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (groups, m, k, n) = matmul_dims(sa, sb);
    let mut out = vec![0.0; groups * m * n];
    for gr in 0..groups {
        let ao = &a.data()[gr * m * k..(gr + 1) * m * k];
        let bo = &b.data()[gr * k * n..(gr + 1) * k * n];
        let oo = &mut out[gr * m * n..(gr + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ao[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bo[p * n..(p + 1) * n];
                for (o, bv) in oo[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let shape = if sa.len() == 2 { vec![m, n] } else { vec![groups, m, n] };
    Tensor::new(shape, out)
}

fn sum_axis_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum_axis", x.shape(), axis)?;
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                out[o * inner + i] += x.data()[(o * len + k) * inner + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn pairwise_sub_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(
            "pairwise_sub",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, n, k) = (a.shape()[0], b.shape()[0], a.shape()[1]);
    let mut out = Vec::with_capacity(m * n * k);
    for i in 0..m {
        let ra = a.row(i);
        for j in 0..n {
            out.extend(ra.iter().zip(b.row(j)).map(|(x, y)| x - y));
        }
    }
    Tensor::new(vec![m, n, k], out)
}

// ---------------------------------------------------------------------------
// Forward-only kernels. These are also the public functional API.

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `exp(z/tau) / sum exp(z/tau)` along `axis`, computed with max subtraction.
pub fn softmax(z: &Tensor, axis: usize, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    check_axis("softmax", z.shape(), axis)?;
    let (outer, len, inner) = axis_extents(z.shape(), axis);
    let src = z.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = ((src[at(k)] - max) / tau).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Row-wise log-softmax of a `[B,C]` matrix at temperature `tau`.
fn log_softmax(z: &Tensor, tau: f64) -> Vec<f64> {
    let c = z.shape()[1];
    let mut out = Vec::with_capacity(z.numel());
    for row in z.data().chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| (v - max) / tau - lse));
    }
    out
}

/// Unit-normalizes fibers along `axis`; fibers with norm below `eps` map to zero.
pub fn l2_normalize(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    check_axis("l2_normalize", x.shape(), axis)?;
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let norm = (0..len).map(|k| src[at(k)] * src[at(k)]).sum::<f64>().sqrt();
            if norm < eps {
                continue;
            }
            for k in 0..len {
                out[at(k)] = src[at(k)] / norm;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Elementwise Huber penalty: `0.5 r^2` inside `delta`, `delta (|r| - delta/2)` outside.
pub fn huber(a: &Tensor, b: &Tensor, delta: f64) -> Result<Tensor> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("huber delta must be positive, got {delta}")));
    }
    if a.shape() != b.shape() {
        return Err(Error::shape("huber", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| huber_scalar(x - y, delta))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn huber_scalar(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

const PROB_TOL: f64 = 1e-9;

/// `-sum p ln p` along `axis` with `0 ln 0 = 0`.
pub fn entropy(p: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("entropy", p.shape(), axis)?;
    let (outer, len, inner) = axis_extents(p.shape(), axis);
    let src = p.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut total = 0.0;
            let mut h = 0.0;
            for k in 0..len {
                let v = src[at(k)];
                if v < -PROB_TOL || !v.is_finite() {
                    return Err(Error::Input(format!("probability entry {v} is not a valid probability")));
                }
                total += v;
                if v > 0.0 {
                    h -= v * v.ln();
                }
            }
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::Input(format!("probability fiber sums to {total}")));
            }
            out[o * inner + i] = h;
        }
    }
    let mut shape = p.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn check_batch(op: &'static str, logits: &Tensor) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::shape(op, format!("expected [B,C], got {:?}", logits.shape())));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Batch-mean cross-entropy of integer `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, c) = check_batch("cross_entropy", logits)?;
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let lsm = log_softmax(logits, 1.0);
    let total: f64 = labels.iter().enumerate().map(|(r, &l)| -lsm[r * c + l]).sum();
    Ok(total / b as f64)
}

/// `tau^2 * mean_b KL(softmax(t/tau) || softmax(s/tau))`.
pub fn kld(teacher: &Tensor, student: &Tensor, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let (b, _) = check_batch("kld", teacher)?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            "kld",
            format!("{:?} vs {:?}", teacher.shape(), student.shape()),
        ));
    }
    let lpt = log_softmax(teacher, tau);
    let lps = log_softmax(student, tau);
    let total: f64 = lpt
        .iter()
        .zip(&lps)
        .map(|(t, s)| t.exp() * (t - s))
        .sum();
    Ok(tau * tau * total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_and_pinned() {
        let u = softmax(&Tensor::vector(&[0.0, 0.0, 0.0]), 0, 1.0).unwrap();
        for v in u.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let p = softmax(&Tensor::vector(&[2.0, 0.0, 0.0]), 0, 2.0).unwrap();
        let expected = [0.5761168847658291, 0.21194155761708547, 0.21194155761708547];
        for (v, e) in p.data().iter().zip(expected) {
            assert!(close(*v, e, 1e-15), "{v} vs {e}");
        }
    }

    #[test]
    fn softmax_temperature_flattens_monotonically() {
        let z = Tensor::vector(&[1.0, 0.0]);
        let mut prev = f64::INFINITY;
        for tau in [0.5, 1.0, 2.0, 4.0, 16.0, 256.0] {
            let gap = softmax(&z, 0, tau).unwrap().data()[0] - 0.5;
            assert!(gap > 0.0 && gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        let z = Tensor::vector(&[1.0, 0.0]);
        assert!(matches!(softmax(&z, 0, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&z, 0, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let z = Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, -5.0]]).unwrap();
        let p = softmax(&z, 0, 1.0).unwrap();
        assert!(close(p.at(&[0, 0]), 0.5, 1e-15));
        assert!(close(p.at(&[0, 1]) + p.at(&[1, 1]), 1.0, 1e-15));
    }

    #[test]
    fn l2_normalize_examples() {
        let a = l2_normalize(&Tensor::vector(&[3.0, 4.0]), 0, 1e-12).unwrap();
        assert!(close(a.data()[0], 0.6, 1e-15) && close(a.data()[1], 0.8, 1e-15));
        let z = l2_normalize(&Tensor::vector(&[0.0, 0.0]), 0, 1e-12).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
        let s = l2_normalize(&Tensor::vector(&[1.0, -1.0]), 0, 1e-12).unwrap();
        assert!(close(s.data()[0], 0.70710678, 1e-8) && close(s.data()[1], -0.70710678, 1e-8));
    }

    #[test]
    fn huber_branches() {
        let h = |r: f64| huber(&Tensor::vector(&[r]), &Tensor::vector(&[0.0]), 1.0).unwrap().data()[0];
        assert_eq!(h(0.0), 0.0);
        assert!(close(h(0.5), 0.125, 1e-15));
        assert!(close(h(2.0), 1.5, 1e-15));
        assert!(close(h(-2.0), 1.5, 1e-15));
        // C1 at the joint
        assert!(close(h(1.0), 0.5, 1e-15));
    }

    #[test]
    fn entropy_examples() {
        let e = |p: &[f64]| entropy(&Tensor::vector(p), 0).unwrap().data()[0];
        assert!(close(e(&[0.5, 0.5]), std::f64::consts::LN_2, 1e-15));
        assert_eq!(e(&[1.0, 0.0]), 0.0);
        assert!(close(e(&[0.75, 0.25]), 0.5623351446188083, 1e-15));
        assert!(entropy(&Tensor::vector(&[1.5, -0.5]), 0).is_err());
        assert!(entropy(&Tensor::vector(&[0.3, 0.3]), 0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[1, 10]);
        assert!(close(cross_entropy(&uniform, &[3]).unwrap(), 10f64.ln(), 1e-15));
        let confident = Tensor::from_rows(&[vec![100.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-40);
        assert!(matches!(cross_entropy(&confident, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_matches_per_sample_sum() {
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![-0.5, 0.1, 0.7]]).unwrap();
        let labels = [2, 0];
        let mut manual = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = z.row(r);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            manual += -(row[l].exp() / denom).ln();
        }
        manual /= 2.0;
        assert!(close(cross_entropy(&z, &labels).unwrap(), manual, 1e-14));
    }

    #[test]
    fn kld_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(close(kld(&t, &s, 1.0).unwrap(), 0.46211715726000974, 1e-14));
        assert_eq!(kld(&t, &t, 4.0).unwrap(), 0.0);
        let shifted = Tensor::from_rows(&[vec![3.5, 4.5]]).unwrap();
        assert!(close(kld(&t, &s, 1.0).unwrap(), kld(&t, &shifted, 1.0).unwrap(), 1e-14));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn huber_gradient_branches() {
        for (x, expected) in [(0.5, 0.5), (2.0, 1.0), (-3.0, -1.0)] {
            let mut tape = Tape::new();
            let v = tape.param(Tensor::vector(&[x]));
            let zero = tape.constant(Tensor::vector(&[0.0]));
            let h = tape.huber(v, zero, 1.0).unwrap();
            let loss = tape.sum_all(h).unwrap();
            let g = tape.backward(loss).unwrap();
            assert_eq!(g.get(v).unwrap().data()[0], expected);
            assert!(g.get(zero).is_none());
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[0.2, -0.4, 1.1]));
        let y = tape.softmax(x, 0, 2.0).unwrap();
        let w = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let a = tape.backward(loss).unwrap();
        let b = tape.backward(loss).unwrap();
        assert_eq!(a.get(x), b.get(x));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(x * x) => grad = 2x
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn zero_branch_of_normalize_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[0.0, 0.0]));
        let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn fault_flips_huber_gradient() {
        let mut tape = Tape::with_fault(Fault::HuberGradSign);
        let v = tape.param(Tensor::vector(&[0.5]));
        let zero = tape.constant(Tensor::vector(&[0.0]));
        let h = tape.huber(v, zero, 1.0).unwrap();
        let loss = tape.sum_all(h).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(v).unwrap().data()[0], -0.5);
    }
}
