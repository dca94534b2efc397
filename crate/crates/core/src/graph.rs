//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A `Graph` owns operation records in insertion order, which is also a
//! topological order: every node's inputs precede it. `backward` walks the
//! tape once in reverse. Graphs are rebuilt from scratch every training step
//! and are confined to one worker at a time.
//!
//! Subgradient conventions: ReLU picks 0 at exactly 0; max-pool routes the
//! gradient to the first maximal element in scan order.

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Per-channel statistics produced by a training-mode batchnorm forward,
/// for the caller to fold into its running buffers.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
struct BnSaved<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        saved: BnSaved<T>,
    },
    L2Norm(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    Transpose2d(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Insert a leaf. Gradients accumulate on it across `backward` calls
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if any flowed into it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad mirrors value shape")
        })
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Dim(format!(
                "matmul shapes {} and {} do not chain",
                fmt_shape(ash),
                fmt_shape(bsh)
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let out = mm(m, k, n, av.data(), bv.data());
        let requires = self.requires(a) || self.requires(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, requires, Op::Matmul(a, b)))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = conv::conv2d_forward(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let requires = self.requires(x)
            || self.requires(k)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            value,
            requires,
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let value = conv::convt2d_forward(
            self.value(x),
            self.value(k),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let requires = self.requires(x)
            || self.requires(k)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            value,
            requires,
            Op::ConvT2d {
                x,
                k,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (value, argmax) = conv::maxpool2d_forward(self.value(x), kernel, stride)?;
        let requires = self.requires(x);
        Ok(self.push(value, requires, Op::MaxPool2d { x, argmax }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.map_unary(x, |v| if v > T::zero() { v } else { T::zero() });
        let requires = self.requires(x);
        self.push(value, requires, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let value = self.map_unary(x, |v| if v > T::zero() { v } else { v * slope });
        let requires = self.requires(x);
        self.push(value, requires, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.map_unary(x, |v| v.tanh());
        let requires = self.requires(x);
        self.push(value, requires, Op::Tanh(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_binary("add", a, b, |x, y| x + y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_binary("sub", a, b, |x, y| x - y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_binary("mul", a, b, |x, y| x * y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip_binary("div", a, b, |x, y| x / y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(value, requires, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let value = self.map_unary(x, |v| v * k);
        let requires = self.requires(x);
        self.push(value, requires, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.map_unary(x, |v| v + c);
        let requires = self.requires(x);
        self.push(value, requires, Op::AddScalar(x))
    }

    /// Broadcast multiply of `x` by a one-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Dim(format!(
                "scale_by factor must be scalar, got {}",
                fmt_shape(self.value(s).shape())
            )));
        }
        let sv = self.value(s).item();
        let value = self.map_unary(x, |v| v * sv);
        let requires = self.requires(x) || self.requires(s);
        Ok(self.push(value, requires, Op::ScaleBy { x, s }))
    }

    /// Training-mode batchnorm over a CHW or NCHW input: per-channel
    /// normalization over the non-channel axes with batch statistics, then
    /// affine. Also returns the batch statistics so the caller can update
    /// its running buffers.
    pub fn batchnorm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BnBatchStats<T>)> {
        let layout = bn_layout(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let xv = self.value(x);
        let mut mean = vec![T::zero(); layout.channels];
        let mut var = vec![T::zero(); layout.channels];
        let m = T::from_f64_lit(layout.per_channel as f64);
        for c in 0..layout.channels {
            let mut acc = T::zero();
            for_channel(&layout, c, |i| acc += xv.data()[i]);
            let mu = acc / m;
            let mut vacc = T::zero();
            for_channel(&layout, c, |i| {
                let d = xv.data()[i] - mu;
                vacc += d * d;
            });
            mean[c] = mu;
            var[c] = vacc / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let value = bn_apply(&layout, xv, self.value(gamma), self.value(beta), &mean, &inv_std);
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let id = self.push(
            value,
            requires,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                saved: BnSaved {
                    mean: mean.clone(),
                    inv_std,
                    train: true,
                },
            },
        );
        Ok((id, BnBatchStats { mean, var }))
    }

    /// Eval-mode batchnorm: normalizes with the provided running statistics,
    /// which are treated as constants.
    pub fn batchnorm2d_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let layout = bn_layout(self.value(x), self.value(gamma), self.value(beta), eps)?;
        if running_mean.len() != layout.channels || running_var.len() != layout.channels {
            return Err(Error::Dim(format!(
                "batchnorm running stats of length {}/{} vs {} channels",
                running_mean.len(),
                running_var.len(),
                layout.channels
            )));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| (v + eps).sqrt().recip())
            .collect();
        let value = bn_apply(
            &layout,
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            &inv_std,
        );
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            value,
            requires,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                saved: BnSaved {
                    mean: running_mean.to_vec(),
                    inv_std,
                    train: false,
                },
            },
        ))
    }

    /// Euclidean norm, returned as a one-element tensor. Backward is
    /// `v / max(‖v‖, 1e-9)`, which yields a zero gradient at the origin.
    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).l2();
        let requires = self.requires(x);
        self.push(Tensor::scalar(n), requires, Op::L2Norm(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let requires = self.requires(x);
        self.push(Tensor::scalar(s), requires, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let requires = self.requires(x);
        Ok(self.push(value, requires, Op::Reshape(x)))
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Dim(format!(
                "transpose2d expects a matrix, got {}",
                fmt_shape(xv.shape())
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, requires, Op::Transpose2d(x)))
    }

    /// Arithmetic mean of several scalar nodes.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("mean_of over an empty list".into()));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, T::from_f64_lit(1.0 / parts.len() as f64)))
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar root. Leaf gradients accumulate
    /// across repeated calls until `zero_grads`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {}",
                fmt_shape(self.value(root).shape())
            )));
        }
        if !self.nodes[root.0].requires {
            return Ok(());
        }
        {
            let g = self.nodes[root.0].grad.get_or_insert(vec![T::zero()]);
            g[0] += T::one();
        }
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if !self.nodes[i].requires {
                continue;
            }
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = self.contributions(i, &g);
            for (target, c) in contribs {
                self.accumulate(target, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<T>) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.len(), contribution.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi += *ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Gradient contributions of node `i` to its inputs. Inputs that do not
    /// require gradients are skipped.
    fn contributions(&self, i: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let mut out: Vec<(NodeId, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        let need = |id: NodeId| self.nodes[id.0].requires;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if need(*a) {
                    out.push((*a, mm_nt(m, n, k, g, bv.data())));
                }
                if need(*b) {
                    out.push((*b, mm_tn(k, m, n, av.data(), g)));
                }
            }
            Op::Conv2d {
                x,
                k,
                bias,
                stride,
                pad,
            } => {
                let need_b = bias.map(|b| need(b)).unwrap_or(false);
                let (gx, gk, gb) = conv::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[k.0].value,
                    g,
                    *stride,
                    *pad,
                    need(*x),
                    need(*k),
                    need_b,
                );
                if need(*x) {
                    out.push((*x, gx));
                }
                if need(*k) {
                    out.push((*k, gk));
                }
                if need_b {
                    out.push((bias.unwrap(), gb));
                }
            }
            Op::ConvT2d {
                x,
                k,
                bias,
                stride,
                pad,
            } => {
                let need_b = bias.map(|b| need(b)).unwrap_or(false);
                let (gx, gk, gb) = conv::convt2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[k.0].value,
                    g,
                    *stride,
                    *pad,
                    need(*x),
                    need(*k),
                    need_b,
                );
                if need(*x) {
                    out.push((*x, gx));
                }
                if need(*k) {
                    out.push((*k, gk));
                }
                if need_b {
                    out.push((bias.unwrap(), gb));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if need(*x) {
                    let mut gx = vec![T::zero(); self.nodes[x.0].value.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    out.push((*x, gx));
                }
            }
            Op::Relu(x) => {
                if need(*x) {
                    let xv = self.nodes[x.0].value.data();
                    let gx = xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if need(*x) {
                    let xv = self.nodes[x.0].value.data();
                    let gx = xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > T::zero() { gi } else { gi * *slope })
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::Tanh(x) => {
                if need(*x) {
                    let yv = node.value.data();
                    let gx = yv
                        .iter()
                        .zip(g)
                        .map(|(&y, &gi)| gi * (T::one() - y * y))
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g.to_vec()));
                }
                if need(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g.to_vec()));
                }
                if need(*b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if need(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &b)| gi * b).collect()));
                }
                if need(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &a)| gi * a).collect()));
                }
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if need(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &b)| gi / b).collect()));
                }
                if need(*b) {
                    let gb = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gi, (&a, &b))| -gi * a / (b * b))
                        .collect();
                    out.push((*b, gb));
                }
            }
            Op::Scale(x, k) => {
                if need(*x) {
                    out.push((*x, g.iter().map(|&v| v * *k).collect()));
                }
            }
            Op::AddScalar(x) => {
                if need(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value.item();
                let xv = self.nodes[x.0].value.data();
                if need(*x) {
                    out.push((*x, g.iter().map(|&v| v * sv).collect()));
                }
                if need(*s) {
                    let gs = g
                        .iter()
                        .zip(xv)
                        .fold(T::zero(), |acc, (&gi, &x)| acc + gi * x);
                    out.push((*s, vec![gs]));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                saved,
            } => {
                let layout = bn_layout(
                    &self.nodes[x.0].value,
                    &self.nodes[gamma.0].value,
                    &self.nodes[beta.0].value,
                    *eps,
                )
                .expect("validated at forward");
                let xv = self.nodes[x.0].value.data();
                let gam = self.nodes[gamma.0].value.data();
                let m = T::from_f64_lit(layout.per_channel as f64);
                let mut gx = vec![T::zero(); if need(*x) { xv.len() } else { 0 }];
                let mut gg = vec![T::zero(); layout.channels];
                let mut gb = vec![T::zero(); layout.channels];
                for c in 0..layout.channels {
                    let (mu, istd) = (saved.mean[c], saved.inv_std[c]);
                    let mut sum_g = T::zero();
                    let mut sum_gxh = T::zero();
                    for_channel(&layout, c, |i| {
                        let xh = (xv[i] - mu) * istd;
                        sum_g += g[i];
                        sum_gxh += g[i] * xh;
                    });
                    gg[c] = sum_gxh;
                    gb[c] = sum_g;
                    if need(*x) {
                        if saved.train {
                            let coef = gam[c] * istd / m;
                            for_channel(&layout, c, |i| {
                                let xh = (xv[i] - mu) * istd;
                                gx[i] = coef * (m * g[i] - sum_g - xh * sum_gxh);
                            });
                        } else {
                            let coef = gam[c] * istd;
                            for_channel(&layout, c, |i| {
                                gx[i] = coef * g[i];
                            });
                        }
                    }
                }
                if need(*x) {
                    out.push((*x, gx));
                }
                if need(*gamma) {
                    out.push((*gamma, gg));
                }
                if need(*beta) {
                    out.push((*beta, gb));
                }
            }
            Op::L2Norm(x) => {
                if need(*x) {
                    let y = node.value.item();
                    let denom = y.max(T::from_f64_lit(1e-9));
                    let xv = self.nodes[x.0].value.data();
                    let gx = xv.iter().map(|&v| g[0] * v / denom).collect();
                    out.push((*x, gx));
                }
            }
            Op::Sum(x) => {
                if need(*x) {
                    out.push((*x, vec![g[0]; self.nodes[x.0].value.len()]));
                }
            }
            Op::Reshape(x) => {
                if need(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Transpose2d(x) => {
                if need(*x) {
                    let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] = g[i * r + j];
                        }
                    }
                    out.push((*x, gx));
                }
            }
        }
        out
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = &self.nodes[x.0].value;
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("unary op preserves shape")
    }

    fn zip_binary(
        &self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Dim(format!(
                "{name} shape mismatch: {} vs {}",
                fmt_shape(av.shape()),
                fmt_shape(bv.shape())
            )));
        }
        Tensor::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }
}

struct BnLayout {
    batch: usize,
    channels: usize,
    spatial: usize,
    per_channel: usize,
}

fn for_channel(layout: &BnLayout, c: usize, mut f: impl FnMut(usize)) {
    let chw = layout.channels * layout.spatial;
    for n in 0..layout.batch {
        let base = n * chw + c * layout.spatial;
        for i in base..base + layout.spatial {
            f(i);
        }
    }
}

fn bn_layout<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BnLayout> {
    if eps <= T::zero() {
        return Err(Error::Config("batchnorm eps must be > 0".into()));
    }
    let s = x.shape();
    let (batch, channels, spatial) = match s.len() {
        3 => (1, s[0], s[1] * s[2]),
        4 => (s[0], s[1], s[2] * s[3]),
        _ => {
            return Err(Error::Dim(format!(
                "batchnorm input must be CxHxW or NxCxHxW, got {}",
                fmt_shape(s)
            )))
        }
    };
    if gamma.len() != channels || beta.len() != channels {
        return Err(Error::Dim(format!(
            "batchnorm affine lengths {}/{} vs {} channels",
            gamma.len(),
            beta.len(),
            channels
        )));
    }
    Ok(BnLayout {
        batch,
        channels,
        spatial,
        per_channel: batch * spatial,
    })
}

fn bn_apply<T: Real>(
    layout: &BnLayout,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Tensor<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..layout.channels {
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        let (mu, istd) = (mean[c], inv_std[c]);
        for_channel(layout, c, |i| {
            out[i] = (x.data()[i] - mu) * istd * g + b;
        });
    }
    Tensor::new(x.shape().to_vec(), out).expect("bn preserves shape")
}

// Row-major matrix product kernels.
fn mm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let row_b = kk * n;
            let row_o = i * n;
            for j in 0..n {
                out[row_o + j] += av * b[row_b + j];
            }
        }
    }
    out
}

/// `a · bᵀ` where `a` is m×k and `b` is n×k.
fn mm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for kk in 0..k {
                acc += a[i * k + kk] * b[j * k + kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵀ · b` where `a` is m×k and `b` is m×n; result k×n.
fn mm_tn<T: Real>(k: usize, m: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let row_b = i * n;
            let row_o = kk * n;
            for j in 0..n {
                out[row_o + j] += av * b[row_b + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let r = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);

        let b = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let zero = g.leaf(t(&[2, 2], &[0.0; 4]), false);
        let z = g.matmul(b, zero).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 3], &[0.0; 3]), false);
        let b = g.leaf(t(&[2, 2], &[0.0; 4]), false);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("1x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn conv2d_one_by_one_kernel_scales() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3, 3], &[1.0; 9]), false);
        let k = g.leaf(t(&[1, 1, 1, 1], &[2.0]), false);
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_padding_preserves_size() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 4, 4]), false);
        let k = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]), false);
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 4]);
    }

    #[test]
    fn conv2d_nonpositive_output_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 2, 2]), false);
        let k = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]), false);
        assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(Error::Dim(_))));
    }

    #[test]
    fn convt2d_center_block_from_unit_input() {
        // 1x1 input of value 1, 4x4 kernel, stride 2, pad 1: the 2x2 output
        // equals the kernel's center 2x2 block.
        let kernel: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1], &[1.0]), false);
        let k = g.leaf(Tensor::new(vec![1, 1, 4, 4], kernel.clone()).unwrap(), false);
        let y = g.conv2d_transpose(x, k, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        let expect = [kernel[5], kernel[6], kernel[9], kernel[10]];
        assert_eq!(g.value(y).data(), &expect);
    }

    #[test]
    fn convt2d_zero_input_gives_zero_output() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 3, 3]), false);
        let k = g.leaf(Tensor::filled(vec![2, 4, 4, 4], 0.3), false);
        let y = g.conv2d_transpose(x, k, None, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = g.leaf(t(&[1], &[0.0]), false);
        let th = g.tanh(z);
        assert_eq!(g.value(th).data(), &[0.0]);

        let a = g.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), false);
        assert!(matches!(g.add(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn l2_norm_examples() {
        let mut g = Graph::new();
        let v = g.leaf(t(&[1, 2], &[3.0, 4.0]), true);
        let n = g.l2_norm(v);
        assert_eq!(g.value(n).item(), 5.0);

        let z = g.leaf(t(&[1, 3], &[0.0; 3]), true);
        let nz = g.l2_norm(z);
        assert_eq!(g.value(nz).item(), 0.0);
        g.backward(nz).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn backward_norm_squared_gives_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 3], &[1.0, -2.0, 0.5]), true);
        let n = g.l2_norm(x);
        let n2 = g.mul(n, n).unwrap();
        g.backward(n2).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.data().iter().zip([1.0f32, -2.0, 0.5]) {
            assert!((gv - 2.0 * xv).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn batchnorm_constant_channel_collapses_to_beta() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::filled(vec![1, 2, 2], 5.0), false);
        let gamma = g.leaf(t(&[1], &[1.0]), false);
        let beta = g.leaf(t(&[1], &[0.0]), false);
        let (y, stats) = g.batchnorm2d_train(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-6));
        assert!((stats.mean[0] - 5.0).abs() < 1e-6);
        assert!(stats.var[0].abs() < 1e-9);
    }

    #[test]
    fn batchnorm_normalizes_to_affine_targets() {
        // 4d input, batch 2: per-channel mean ~= beta, std ~= gamma.
        let data: Vec<f32> = (0..16).map(|i| (i as f32) * 0.37 - 2.0).collect();
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2, 2, 2], &data), false);
        let gamma = g.leaf(t(&[2], &[1.5, 0.5]), false);
        let beta = g.leaf(t(&[2], &[-1.0, 2.0]), false);
        let (y, _) = g.batchnorm2d_train(x, gamma, beta, 1e-8).unwrap();
        let yd = g.value(y).data();
        for c in 0..2 {
            let mut vals = Vec::new();
            for n in 0..2 {
                for s in 0..4 {
                    vals.push(yd[n * 8 + c * 4 + s]);
                }
            }
            let mean: f32 = vals.iter().sum::<f32>() / 8.0;
            let var: f32 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            let (want_b, want_g) = if c == 0 { (-1.0, 1.5) } else { (2.0, 0.5) };
            assert!((mean - want_b).abs() < 1e-4, "mean {mean} vs {want_b}");
            assert!((var.sqrt() - want_g).abs() < 1e-4, "std {} vs {want_g}", var.sqrt());
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let mut g = Graph::new();
        // Two equal maxima in the window; scan order picks index 0.
        let x = g.leaf(t(&[1, 2, 2], &[3.0, 1.0, 3.0, 0.0]), true);
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(t(&[1, 4, 4], &(0..16).map(|i| i as f32 * 0.1).collect::<Vec<_>>()), false);
            let k = g.leaf(t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f32).sin()).collect::<Vec<_>>()), false);
            let c = g.conv2d(x, k, None, 1, 1).unwrap();
            let r = g.relu(c);
            let s = g.sum(r);
            g.value(s).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
