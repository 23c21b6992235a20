//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is built fresh for each forward pass: leaves are pushed first,
//! every op appends one node, and [`Graph::backward`] walks the tape in
//! reverse. Nodes whose inputs never require gradients are skipped entirely,
//! which is how frozen parameters stay out of the backward pass.

use super::exec::{map_indexed, Exec};
use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddTrailing(NodeId, NodeId),
    MulTrailing(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { x: NodeId, index: Vec<usize> },
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    MeanMiddle(NodeId),
    SumAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    GradReverse(NodeId),
    GatedMix { a: NodeId, m: NodeId, alpha: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`; `None` if no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Push an input. Gradients are only accumulated for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let _ = name;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// `a[.., k] · b[k, n]`; leading axes of `a` are kept.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let out = kernels::matmul(self.exec, self.data(a), self.data(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Grouped product: `a[g, m, k] · b[g, k, n]`, or `· b[g, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let blocks = map_indexed(self.exec, g, |i| {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            if trans_b {
                kernels::matmul_bt(Exec::Sequential, ai, bi, m, k, n)
            } else {
                kernels::matmul(Exec::Sequential, ai, bi, m, k, n)
            }
        });
        let value = Tensor::new(vec![g, m, n], blocks.concat())?;
        self.push("batch_matmul", value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn trailing_check(&self, op: &'static str, x: NodeId, b: NodeId) -> Result<usize> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sb:?} is not a trailing shape of {sx:?}")));
        }
        Ok(self.value(b).len())
    }

    /// `x + b` with `b` repeated over the leading axes of `x`.
    pub fn add_trailing(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let w = self.trailing_check("add_trailing", x, b)?;
        let bd = self.data(b);
        let out = self.data(x).iter().enumerate().map(|(i, &v)| v + bd[i % w]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("add_trailing", value, Op::AddTrailing(x, b), &[x, b])
    }

    /// `x ⊙ s` with `s` repeated over the leading axes of `x`.
    pub fn mul_trailing(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let w = self.trailing_check("mul_trailing", x, s)?;
        let sd = self.data(s);
        let out = self.data(x).iter().enumerate().map(|(i, &v)| v * sd[i % w]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("mul_trailing", value, Op::MulTrailing(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    /// Multiply every entry of `x` by the single-entry node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", format!("scale must have one entry, got {:?}", self.shape(s))));
        }
        let c = self.data(s)[0];
        let out = self.data(x).iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("scale_by", value, Op::ScaleBy(x, s), &[x, s])
    }

    fn map_unary(&mut self, name: &'static str, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(name, value, op, &[x])
    }

    /// Exact Gaussian-error GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary("gelu", x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary("sigmoid", x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary("grad_reverse", x, Op::GradReverse(x), |v| v)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let w = self.value(x).last_dim();
        let mut out = vec![0.0; self.value(x).len()];
        for (src, dst) in self.data(x).chunks(w).zip(out.chunks_mut(w)) {
            kernels::softmax_row(src, dst);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let w = self.value(x).last_dim();
        if self.value(gain).len() != w || self.value(bias).len() != w {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias {:?}/{:?} vs width {w}", self.shape(gain), self.shape(bias)),
            ));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = self.value(x).len() / w.max(1);
        let mut xhat = vec![0.0; rows * w];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * w];
        for (r, src) in self.data(x).chunks(w).enumerate() {
            let mean = src.iter().sum::<f64>() / w as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..w {
                let centered = src[j] - mean;
                let xh = if centered == 0.0 { 0.0 } else { centered * inv };
                xhat[r * w + j] = xh;
                out[r * w + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// `out[i] = x[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let n = self.value(x).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {n} entries")));
        }
        let xd = self.data(x);
        let out = index.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape, out)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Flat concatenation of several nodes into a 1-D node.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let out: Vec<f64> = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        let value = Tensor::vector(out);
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Mean over the middle axis of `[b, t, d]`, giving `[b, d]`.
    pub fn mean_middle(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::shape("mean_middle", format!("expected [b, t>0, d], got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &xd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        let value = Tensor::new(vec![b, d], out)?;
        self.push("mean_middle", value, Op::MeanMiddle(x), &[x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.data(x).iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean negative log-softmax at the true class over rows of `logits[b, k]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; s[0] * k];
        let mut loss = 0.0;
        for (r, (src, dst)) in self.data(logits).chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - src[labels[r]];
            kernels::softmax_row(src, dst);
        }
        loss /= s[0] as f64;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Elementwise `α⊙a + (1−α)⊙m` with `alpha` broadcast over leading axes.
    pub fn gated_mix(&mut self, a: NodeId, m: NodeId, alpha: NodeId) -> Result<NodeId> {
        self.same_shape("gated_mix", a, m)?;
        let w = self.trailing_check("gated_mix", a, alpha)?;
        let al = self.data(alpha);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(m))
            .enumerate()
            .map(|(i, (&x, &y))| kernels::gated_mix(x, y, al[i % w]))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("gated_mix", value, Op::GatedMix { a, m, alpha }, &[a, m, alpha])
    }

    /// Reverse pass from a single-entry `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let exec = self.exec;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                if self.requires_grad(*a) {
                    let da = kernels::matmul_bt(exec, g, self.data(*b), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_at(exec, self.data(*a), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let trans_b = *trans_b;
                if self.requires_grad(*a) {
                    let blocks = map_indexed(exec, groups, |i| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            kernels::matmul(Exec::Sequential, gi, bi, m, n, k)
                        } else {
                            kernels::matmul_bt(Exec::Sequential, gi, bi, m, n, k)
                        }
                    });
                    self.accumulate(grads, *a, blocks.concat());
                }
                if self.requires_grad(*b) {
                    let blocks = map_indexed(exec, groups, |i| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            kernels::matmul_at(Exec::Sequential, gi, ai, m, n, k)
                        } else {
                            kernels::matmul_at(Exec::Sequential, ai, gi, m, k, n)
                        }
                    });
                    self.accumulate(grads, *b, blocks.concat());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            Op::AddTrailing(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*b) {
                    let w = self.value(*b).len();
                    let mut db = vec![0.0; w];
                    g.iter().enumerate().for_each(|(i, v)| db[i % w] += v);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MulTrailing(x, s) => {
                let sd = self.data(*s);
                let w = sd.len();
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.iter().enumerate().map(|(i, v)| v * sd[i % w]).collect());
                }
                if self.requires_grad(*s) {
                    let xd = self.data(*x);
                    let mut ds = vec![0.0; w];
                    g.iter().zip(xd).enumerate().for_each(|(i, (gv, xv))| ds[i % w] += gv * xv);
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::ScaleBy(x, s) => {
                let c = self.data(*s)[0];
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
                }
                if self.requires_grad(*s) {
                    let ds = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, vec![ds]);
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, g.iter().zip(xd).map(|(gv, &v)| gv * kernels::gelu_grad(v)).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
            }
            Op::GradReverse(x) => self.accumulate(grads, *x, g.iter().map(|v| -v).collect()),
            Op::GatedMix { a, m, alpha } => {
                let al = self.data(*alpha);
                let w = al.len();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().enumerate().map(|(i, v)| v * al[i % w]).collect());
                }
                if self.requires_grad(*m) {
                    self.accumulate(grads, *m, g.iter().enumerate().map(|(i, v)| v * (1.0 - al[i % w])).collect());
                }
                if self.requires_grad(*alpha) {
                    let (ad, md) = (self.data(*a), self.data(*m));
                    let mut dal = vec![0.0; w];
                    for (i, v) in g.iter().enumerate() {
                        dal[i % w] += v * (ad[i] - md[i]);
                    }
                    self.accumulate(grads, *alpha, dal);
                }
            }
            Op::Softmax(x) => {
                let w = node.value.last_dim();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(y.chunks(w)).zip(dx.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let w = node.value.last_dim();
                let gd = self.data(*gain);
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; w];
                    let mut db = vec![0.0; w];
                    for (gr, xr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let wf = w as f64;
                    for (r, ((gr, xr), dr)) in g.chunks(w).zip(xhat.chunks(w)).zip(dx.chunks_mut(w)).enumerate() {
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            dr[j] = inv_std[r] / wf * (wf * dxhat[j] - sum - xr[j] * dot);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, v) in index.iter().zip(g) {
                    dx[i] += v;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MeanMiddle(x) => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        for di in 0..d {
                            dx[(bi * t + ti) * d + di] = g[bi * d + di] / t as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => self.accumulate(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let b = g.leaf(Tensor::vector(vec![3.0, 4.0]), false);
        let c = g.mul(a, b).unwrap();
        let l = g.sum_all(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn gradient_reversal_negates() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, -2.0]), true);
        let r = g.grad_reverse(a).unwrap();
        let sq = g.mul(r, r).unwrap();
        let l = g.sum_all(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[-2.0, 4.0]);
    }

    #[test]
    fn trailing_broadcast_rejects_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(g.add_trailing(x, b).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }
}
