//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is exactly what the denoiser networks need: 3x3 same-padded
//! convolution, 2x2 max-pool, 2x2 nearest-neighbor up-sample, channel
//! concatenation, fully connected, ReLU/sigmoid, L1 and binary
//! cross-entropy losses, plus elementwise add/mul/scale/sum used to
//! compose losses. No broadcasting.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<u32> },
    Upsample2 { input: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    Dense { input: NodeId, weight: NodeId, bias: NodeId },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sum { input: NodeId },
    Reshape { input: NodeId },
    L1Loss { pred: NodeId, target: NodeId },
    BceLoss { prob: NodeId, label: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single forward/backward tape. Build ops, call [`Graph::backward`] on a
/// scalar loss, then read gradients per node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a tensor as a graph input. Tensors are validated finite at
    /// construction, so the graph boundary rejects NaN/Inf by contract.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// 3x3 convolution, stride 1, same-padding with zero fill.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (bsz, ci, h, w) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let (co, kci, kh, kw) = match kshape[..] {
            [co, kci, kh, kw] => (co, kci, kh, kw),
            _ => return Err(Error::Dimension(format!("kernel must be 4-d, got {kshape:?}"))),
        };
        if (kh, kw) != (3, 3) {
            return Err(Error::Dimension(format!("kernel spatial size must be 3x3, got {kh}x{kw}")));
        }
        if kci != ci {
            return Err(Error::Dimension(format!(
                "kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {co} output channels",
                self.value(bias).shape()
            )));
        }
        let mut out = vec![0.0; bsz * co * h * w];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            let bv = self.value(bias).data();
            conv2d_forward(x, k, bv, bsz, ci, co, h, w, &mut out);
        }
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        let value = Tensor::new(vec![bsz, co, h, w], out)?;
        Ok(self.push(Op::Conv2d { input, kernel, bias }, value, needs))
    }

    /// 2x2 max-pool over disjoint windows; ties route the gradient to the
    /// first element in scan order.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (bsz, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        {
            let x = self.value(input).data();
            for p in 0..bsz * c {
                let plane = p * h * w;
                let oplane = p * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[oplane + oy * ow + ox] = best;
                        argmax[oplane + oy * ow + ox] = best_idx as u32;
                    }
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![bsz, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, value, needs))
    }

    /// 2x2 nearest-neighbor up-sampling: each cell fills a 2x2 block.
    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let (bsz, c, h, w) = self.value(input).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; bsz * c * oh * ow];
        {
            let x = self.value(input).data();
            for p in 0..bsz * c {
                let plane = p * h * w;
                let oplane = p * oh * ow;
                for y in 0..h {
                    for xcol in 0..w {
                        let v = x[plane + y * w + xcol];
                        let base = oplane + 2 * y * ow + 2 * xcol;
                        out[base] = v;
                        out[base + 1] = v;
                        out[base + ow] = v;
                        out[base + ow + 1] = v;
                    }
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![bsz, c, oh, ow], out)?;
        Ok(self.push(Op::Upsample2 { input }, value, needs))
    }

    /// Channel concatenation: channels of `a` precede channels of `b`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat batch/spatial mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let mut out = vec![0.0; ba * (ca + cb) * plane];
        {
            let xa = self.value(a).data();
            let xb = self.value(b).data();
            for i in 0..ba {
                let dst = i * (ca + cb) * plane;
                out[dst..dst + ca * plane].copy_from_slice(&xa[i * ca * plane..(i + 1) * ca * plane]);
                out[dst + ca * plane..dst + (ca + cb) * plane]
                    .copy_from_slice(&xb[i * cb * plane..(i + 1) * cb * plane]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(Op::ConcatChannels { a, b }, value, needs))
    }

    /// Fully connected layer: out = input x weight^T + bias, per batch row.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (bsz, n) = self.value(input).dims2()?;
        let (m, wn) = self.value(weight).dims2()?;
        if wn != n {
            return Err(Error::Dimension(format!(
                "dense inner dims disagree: input {n}, weight {wn}"
            )));
        }
        if self.value(bias).shape() != [m] {
            return Err(Error::Dimension(format!(
                "dense bias shape {:?}, expected [{m}]",
                self.value(bias).shape()
            )));
        }
        let mut out = vec![0.0; bsz * m];
        {
            let x = self.value(input).data();
            let wgt = self.value(weight).data();
            let bv = self.value(bias).data();
            for i in 0..bsz {
                for j in 0..m {
                    let mut acc = bv[j];
                    let xrow = &x[i * n..(i + 1) * n];
                    let wrow = &wgt[j * n..(j + 1) * n];
                    for t in 0..n {
                        acc += xrow[t] * wrow[t];
                    }
                    out[i * m + j] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![bsz, m], out)?;
        Ok(self.push(Op::Dense { input, weight, bias }, value, needs))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        let value = Tensor::new(shape, out).expect("relu shape");
        self.push(Op::Relu { input }, value, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + libm::exp(-v)))
            .collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        let value = Tensor::new(shape, out).expect("sigmoid shape");
        self.push(Op::Sigmoid { input }, value, needs)
    }

    /// Linear activation is the identity; no node is recorded.
    pub fn linear(&mut self, input: NodeId) -> NodeId {
        input
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, out)?, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, out)?, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(input).shape().to_vec();
        let needs = self.needs(input);
        let value = Tensor::new(shape, out).expect("scale shape");
        self.push(Op::Scale { input, factor }, value, needs)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        let needs = self.needs(input);
        self.push(Op::Sum { input }, Tensor::scalar(s), needs)
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.value(input).shape()
            )));
        }
        let data = self.value(input).data().to_vec();
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape { input }, Tensor::new(shape, data)?, needs))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::Dimension(format!(
                "l1_loss shape mismatch: {:?} vs {:?}",
                self.value(pred).shape(),
                self.value(target).shape()
            )));
        }
        let n = self.value(pred).numel() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Op::L1Loss { pred, target }, Tensor::scalar(s / n), needs))
    }

    /// Mean binary cross-entropy; probabilities clamped before logs.
    pub fn bce_loss(&mut self, prob: NodeId, label: NodeId) -> Result<NodeId> {
        if self.value(prob).shape() != self.value(label).shape() {
            return Err(Error::Dimension(format!(
                "bce_loss shape mismatch: {:?} vs {:?}",
                self.value(prob).shape(),
                self.value(label).shape()
            )));
        }
        let n = self.value(prob).numel() as f64;
        let s: f64 = self
            .value(prob)
            .data()
            .iter()
            .zip(self.value(label).data())
            .map(|(&p, &l)| {
                let p = clamp_prob(p);
                -(l * libm::log(p) + (1.0 - l) * libm::log(1.0 - p))
            })
            .sum();
        let needs = self.needs(prob) || self.needs(label);
        Ok(self.push(Op::BceLoss { prob, label }, Tensor::scalar(s / n), needs))
    }

    /// Reverse pass from a scalar loss. Gradients from any previous
    /// backward call are discarded, then repopulated; fan-out accumulates
    /// additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = if node.needs_grad {
                Some(vec![0.0; node.value.numel()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn take_grad(&mut self, idx: usize) -> Vec<f64> {
        self.nodes[idx].grad.take().expect("grad present")
    }

    fn put_grad(&mut self, idx: usize, g: Vec<f64>) {
        self.nodes[idx].grad = Some(g);
    }

    fn add_into(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            f(g);
        }
    }

    fn backprop_node(&mut self, idx: usize) {
        // Temporarily move the output gradient out to satisfy the borrow
        // checker while scattering into input gradients.
        let go = self.take_grad(idx);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (bsz, ci, h, w) = self.value(input).dims4().unwrap();
                let co = self.value(kernel).shape()[0];
                let x = self.value(input).data();
                let k = self.value(kernel).data();
                let mut din = if self.nodes[input.0].grad.is_some() {
                    Some(vec![0.0; x.len()])
                } else {
                    None
                };
                let mut dk = if self.nodes[kernel.0].grad.is_some() {
                    Some(vec![0.0; k.len()])
                } else {
                    None
                };
                let mut db = if self.nodes[bias.0].grad.is_some() {
                    Some(vec![0.0; co])
                } else {
                    None
                };
                conv2d_backward(
                    x, k, &go, bsz, ci, co, h, w,
                    din.as_deref_mut(), dk.as_deref_mut(), db.as_deref_mut(),
                );
                if let Some(d) = din {
                    self.add_into(input, |g| accumulate(g, &d));
                }
                if let Some(d) = dk {
                    self.add_into(kernel, |g| accumulate(g, &d));
                }
                if let Some(d) = db {
                    self.add_into(bias, |g| accumulate(g, &d));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                self.add_into(input, |g| {
                    for (o, &src) in argmax.iter().enumerate() {
                        g[src as usize] += go[o];
                    }
                });
            }
            Op::Upsample2 { input } => {
                let input = *input;
                let (bsz, c, h, w) = self.value(input).dims4().unwrap();
                let ow = 2 * w;
                self.add_into(input, |g| {
                    for p in 0..bsz * c {
                        let plane = p * h * w;
                        let oplane = p * 4 * h * w;
                        for y in 0..h {
                            for xcol in 0..w {
                                let base = oplane + 2 * y * ow + 2 * xcol;
                                g[plane + y * w + xcol] +=
                                    go[base] + go[base + 1] + go[base + ow] + go[base + ow + 1];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let (bsz, ca, h, w) = self.value(a).dims4().unwrap();
                let cb = self.value(b).shape()[1];
                let plane = h * w;
                self.add_into(a, |g| {
                    for i in 0..bsz {
                        let src = i * (ca + cb) * plane;
                        for t in 0..ca * plane {
                            g[i * ca * plane + t] += go[src + t];
                        }
                    }
                });
                self.add_into(b, |g| {
                    for i in 0..bsz {
                        let src = i * (ca + cb) * plane + ca * plane;
                        for t in 0..cb * plane {
                            g[i * cb * plane + t] += go[src + t];
                        }
                    }
                });
            }
            Op::Dense { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (bsz, n) = self.value(input).dims2().unwrap();
                let m = self.value(weight).shape()[0];
                let x = self.value(input).data().to_vec();
                let wgt = self.value(weight).data().to_vec();
                self.add_into(input, |g| {
                    for i in 0..bsz {
                        for j in 0..m {
                            let go_ij = go[i * m + j];
                            for t in 0..n {
                                g[i * n + t] += go_ij * wgt[j * n + t];
                            }
                        }
                    }
                });
                self.add_into(weight, |g| {
                    for i in 0..bsz {
                        for j in 0..m {
                            let go_ij = go[i * m + j];
                            for t in 0..n {
                                g[j * n + t] += go_ij * x[i * n + t];
                            }
                        }
                    }
                });
                self.add_into(bias, |g| {
                    for i in 0..bsz {
                        for j in 0..m {
                            g[j] += go[i * m + j];
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let input = *input;
                let x = self.value(input).data().to_vec();
                self.add_into(input, |g| {
                    for (t, &xi) in x.iter().enumerate() {
                        if xi > 0.0 {
                            g[t] += go[t];
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let input = *input;
                let s = self.nodes[idx].value.data().to_vec();
                self.add_into(input, |g| {
                    for t in 0..s.len() {
                        g[t] += go[t] * s[t] * (1.0 - s[t]);
                    }
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_into(a, |g| accumulate(g, &go));
                self.add_into(b, |g| accumulate(g, &go));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let xa = self.value(a).data().to_vec();
                let xb = self.value(b).data().to_vec();
                self.add_into(a, |g| {
                    for t in 0..g.len() {
                        g[t] += go[t] * xb[t];
                    }
                });
                self.add_into(b, |g| {
                    for t in 0..g.len() {
                        g[t] += go[t] * xa[t];
                    }
                });
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                self.add_into(input, |g| {
                    for (t, gv) in g.iter_mut().enumerate() {
                        *gv += go[t] * factor;
                    }
                });
            }
            Op::Sum { input } => {
                let input = *input;
                self.add_into(input, |g| {
                    for gv in g.iter_mut() {
                        *gv += go[0];
                    }
                });
            }
            Op::Reshape { input } => {
                let input = *input;
                self.add_into(input, |g| accumulate(g, &go));
            }
            Op::L1Loss { pred, target } => {
                let (pred, target) = (*pred, *target);
                let p = self.value(pred).data().to_vec();
                let tv = self.value(target).data().to_vec();
                let n = p.len() as f64;
                self.add_into(pred, |g| {
                    for t in 0..g.len() {
                        g[t] += go[0] * sign(p[t] - tv[t]) / n;
                    }
                });
                self.add_into(target, |g| {
                    for t in 0..g.len() {
                        g[t] -= go[0] * sign(p[t] - tv[t]) / n;
                    }
                });
            }
            Op::BceLoss { prob, label } => {
                let (prob, label) = (*prob, *label);
                let p = self.value(prob).data().to_vec();
                let l = self.value(label).data().to_vec();
                let n = p.len() as f64;
                self.add_into(prob, |g| {
                    for t in 0..g.len() {
                        let pc = clamp_prob(p[t]);
                        g[t] += go[0] * (-(l[t] / pc) + (1.0 - l[t]) / (1.0 - pc)) / n;
                    }
                });
                self.add_into(label, |g| {
                    for t in 0..g.len() {
                        let pc = clamp_prob(p[t]);
                        g[t] += go[0] * (libm::log(1.0 - pc) - libm::log(pc)) / n;
                    }
                });
            }
        }
        self.put_grad(idx, go);
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    bsz: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    for ib in 0..bsz {
        for (oc, &bv) in bias.iter().enumerate() {
            let oplane = (ib * co + oc) * plane;
            out[oplane..oplane + plane].fill(bv);
            for ic in 0..ci {
                let iplane = (ib * ci + ic) * plane;
                let kbase = (oc * ci + ic) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wgt = k[kbase + ky * 3 + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let y0 = 1usize.saturating_sub(ky);
                        let y1 = (h + 1 - ky).min(h);
                        let x0 = 1usize.saturating_sub(kx);
                        let x1 = (w + 1 - kx).min(w);
                        for y in y0..y1 {
                            let orow = oplane + y * w;
                            let irow = iplane + (y + ky - 1) * w;
                            for xx in x0..x1 {
                                out[orow + xx] += wgt * x[irow + xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    go: &[f64],
    bsz: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    mut din: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let plane = h * w;
    if let Some(db) = db.take() {
        for (oc, dbv) in db.iter_mut().enumerate() {
            for ib in 0..bsz {
                let oplane = (ib * co + oc) * plane;
                let mut acc = 0.0;
                for t in 0..plane {
                    acc += go[oplane + t];
                }
                *dbv += acc;
            }
        }
    }
    if din.is_none() && dk.is_none() {
        return;
    }
    for ib in 0..bsz {
        for oc in 0..co {
            let oplane = (ib * co + oc) * plane;
            for ic in 0..ci {
                let iplane = (ib * ci + ic) * plane;
                let kbase = (oc * ci + ic) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wgt = k[kbase + ky * 3 + kx];
                        let y0 = 1usize.saturating_sub(ky);
                        let y1 = (h + 1 - ky).min(h);
                        let x0 = 1usize.saturating_sub(kx);
                        let x1 = (w + 1 - kx).min(w);
                        let mut kacc = 0.0;
                        for y in y0..y1 {
                            let orow = oplane + y * w;
                            let irow = iplane + (y + ky - 1) * w;
                            match din.as_deref_mut() {
                                Some(din) => {
                                    for xx in x0..x1 {
                                        let g = go[orow + xx];
                                        din[irow + xx + kx - 1] += wgt * g;
                                        kacc += g * x[irow + xx + kx - 1];
                                    }
                                }
                                None => {
                                    for xx in x0..x1 {
                                        kacc += go[orow + xx] * x[irow + xx + kx - 1];
                                    }
                                }
                            }
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[kbase + ky * 3 + kx] += kacc;
                        }
                    }
                }
            }
        }
    }
}
