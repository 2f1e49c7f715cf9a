//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every input id refers to an
//! earlier node and the tape is acyclic by construction. Values are computed
//! eagerly; `backward` walks the tape in reverse.

use std::collections::HashMap;

use super::conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, Padding,
};
use super::{Real, Tensor};
use crate::entropy::{factorized, gaussian};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded at a tape node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Constant input; never receives a gradient.
    Input,
    /// Leaf that may be trainable. `key` identifies a model parameter, if any.
    Leaf { key: Option<usize> },
    Conv2d { stride: usize, pad: Padding },
    ConvTranspose2d { stride: usize, pad: Padding, output_padding: (usize, usize) },
    SliceLeading,
    LeakyRelu { slope: f64 },
    Gdn { inverse: bool },
    Square,
    AddScalar { c: f64 },
    MulScalar { c: f64 },
    Add,
    Sub,
    Softplus,
    LowerBound { bound: f64 },
    ConcatChannels,
    SliceChannels { start: usize },
    GaussianLikelihood,
    FactorizedLikelihood,
    NegLog2Sum,
    Mse,
    Sum,
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A computation tape over tensors of element type `T`.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, NodeId>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable leaf. Leaves the loss does not depend on get zeros.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable model parameter bound into the graph, keyed by parameter key.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(move |&(k, id)| self.get(id).map(|g| (k, g)))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Ids in recording order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { key: None },
            inputs: Vec::new(),
            value,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a model parameter. Repeated calls with the same key return the same node.
    pub fn param(&mut self, key: usize, value: &Tensor<f32>, trainable: bool) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Leaf { key: Some(key) },
            inputs: Vec::new(),
            value: value.cast(),
            requires_grad: trainable,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(key, id);
        id
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: Padding,
    ) -> Result<NodeId> {
        let v = conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv2d { stride, pad }, inputs, v))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: Padding,
        output_padding: (usize, usize),
    ) -> Result<NodeId> {
        let v = conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            output_padding,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Op::ConvTranspose2d {
                stride,
                pad,
                output_padding,
            },
            inputs,
            v,
        ))
    }

    pub fn slice_leading(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.value(x).shape() == shape {
            return Ok(x);
        }
        let v = self.value(x).slice_leading(shape)?;
        Ok(self.push(Op::SliceLeading, vec![x], v))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::of(slope);
        let v = self.value(x).map(|a| if a >= T::zero() { a } else { a * s });
        self.push(Op::LeakyRelu { slope }, vec![x], v)
    }

    /// Divisive normalization with effective (already positive) `beta[C]` and `gamma[C,C]`.
    pub fn gdn(&mut self, x: NodeId, beta: NodeId, gamma: NodeId, inverse: bool) -> Result<NodeId> {
        let v = gdn_forward(self.value(x), self.value(beta), self.value(gamma), inverse)?;
        Ok(self.push(Op::Gdn { inverse }, vec![x, beta, gamma], v))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        self.push(Op::Square, vec![x], v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let cc = T::of(c);
        let v = self.value(x).map(|a| a + cc);
        self.push(Op::AddScalar { c }, vec![x], v)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let cc = T::of(c);
        let v = self.value(x).map(|a| a * cc);
        self.push(Op::MulScalar { c }, vec![x], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        self.push(Op::Softplus, vec![x], v)
    }

    /// `max(x, bound)`; the gradient is zero where the bound is active.
    pub fn lower_bound(&mut self, x: NodeId, bound: f64) -> NodeId {
        let b = T::of(bound);
        let v = self.value(x).map(|a| if a >= b { a } else { b });
        self.push(Op::LowerBound { bound }, vec![x], v)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatChannels, vec![a, b], v))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_channels(start, len)?;
        Ok(self.push(Op::SliceChannels { start }, vec![x], v))
    }

    /// Probability mass of the unit bin around `q` under `N(mu, sigma)`, clamped below at 1e-9.
    pub fn gaussian_likelihood(&mut self, q: NodeId, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        let v = gaussian::likelihood(self.value(q), self.value(mu), self.value(sigma))?;
        Ok(self.push(Op::GaussianLikelihood, vec![q, mu, sigma], v))
    }

    /// Per-channel factorized likelihood. `params` are the eleven raw parameter
    /// tensors of one width, in [`factorized::PARAM_NAMES`] order.
    pub fn factorized_likelihood(&mut self, q: NodeId, params: &[NodeId]) -> Result<NodeId> {
        if params.len() != factorized::PARAM_COUNT {
            return Err(Error::invalid(format!(
                "factorized likelihood takes {} parameter tensors, got {}",
                factorized::PARAM_COUNT,
                params.len()
            )));
        }
        let ps: Vec<&Tensor<T>> = params.iter().map(|&p| self.value(p)).collect();
        let v = factorized::likelihood(self.value(q), &ps)?;
        let mut inputs = vec![q];
        inputs.extend_from_slice(params);
        Ok(self.push(Op::FactorizedLikelihood, inputs, v))
    }

    /// Total information content `sum(-log2 p)` in bits.
    pub fn neg_log2_sum(&mut self, p: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(p).data() {
            acc -= v.log2();
        }
        self.push(Op::NegLog2Sum, vec![p], Tensor::scalar(acc))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "mse: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut acc = T::zero();
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            acc += (x - y) * (x - y);
        }
        let n = T::of(va.numel() as f64);
        Ok(self.push(Op::Mse, vec![a, b], Tensor::scalar(acc / n)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape().iter().any(|&d| d != 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf { .. });
            if is_leaf && node.requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(node.value.zeros_like());
                }
            } else {
                grads[i] = None;
            }
        }
        let mut params: Vec<(usize, NodeId)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i].0].value;
        let need = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        Ok(match &node.op {
            Op::Input | Op::Leaf { .. } => Vec::new(),
            Op::Conv2d { stride, pad } => {
                let has_b = node.inputs.len() == 3;
                let r = conv2d_backward(
                    inp(0),
                    inp(1),
                    g,
                    *stride,
                    *pad,
                    (need(0), need(1), has_b && need(2)),
                )?;
                vec![r.x, r.w, r.b]
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let has_b = node.inputs.len() == 3;
                let r = conv_transpose2d_backward(
                    inp(0),
                    inp(1),
                    g,
                    *stride,
                    *pad,
                    (need(0), need(1), has_b && need(2)),
                )?;
                vec![r.x, r.w, r.b]
            }
            Op::SliceLeading => {
                let mut full = inp(0).zeros_like();
                full.add_leading(g);
                vec![Some(full)]
            }
            Op::LeakyRelu { slope } => {
                let s = T::of(*slope);
                vec![Some(inp(0).zip_map(g, |x, gv| if x >= T::zero() { gv } else { gv * s })?)]
            }
            Op::Gdn { inverse } => {
                let (gx, gb, gg) = gdn_backward(inp(0), inp(1), inp(2), g, *inverse)?;
                vec![Some(gx), Some(gb), Some(gg)]
            }
            Op::Square => vec![Some(inp(0).zip_map(g, |x, gv| T::of(2.0) * x * gv)?)],
            Op::AddScalar { .. } => vec![Some(g.clone())],
            Op::MulScalar { c } => {
                let cc = T::of(*c);
                vec![Some(g.map(|v| v * cc))]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Softplus => vec![Some(inp(0).zip_map(g, |x, gv| sigmoid(x) * gv)?)],
            Op::LowerBound { bound } => {
                let b = T::of(*bound);
                vec![Some(inp(0).zip_map(g, |x, gv| if x >= b { gv } else { T::zero() })?)]
            }
            Op::ConcatChannels => {
                let ca = inp(0).shape()[1];
                let cb = inp(1).shape()[1];
                vec![Some(g.slice_channels(0, ca)?), Some(g.slice_channels(ca, cb)?)]
            }
            Op::SliceChannels { start } => {
                let x = inp(0);
                let (b, c, h, w) = x.dims4()?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut full = x.zeros_like();
                for bi in 0..b {
                    let dst = (bi * c + start) * plane;
                    let src = bi * len * plane;
                    full.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[src..src + len * plane]);
                }
                vec![Some(full)]
            }
            Op::GaussianLikelihood => {
                let (gq, gm, gs) = gaussian::likelihood_backward(inp(0), inp(1), inp(2), g)?;
                vec![Some(gq), Some(gm), Some(gs)]
            }
            Op::FactorizedLikelihood => {
                let ps: Vec<&Tensor<T>> = (1..node.inputs.len()).map(inp).collect();
                let (gq, gp) = factorized::likelihood_backward(inp(0), &ps, g)?;
                let mut out = vec![Some(gq)];
                out.extend(gp.into_iter().map(Some));
                out
            }
            Op::NegLog2Sum => {
                let gv = g.data()[0];
                let k = T::of(-1.0 / std::f64::consts::LN_2);
                vec![Some(inp(0).map(|p| gv * k / p))]
            }
            Op::Mse => {
                let gv = g.data()[0];
                let n = T::of(inp(0).numel() as f64);
                let two = T::of(2.0);
                let ga = inp(0).zip_map(inp(1), |a, b| two * (a - b) * gv / n)?;
                let gb = ga.map(|v| -v);
                vec![Some(ga), Some(gb)]
            }
            Op::Sum => {
                let gv = g.data()[0];
                vec![Some(Tensor::full(inp(0).shape(), gv))]
            }
        })
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gdn_norm<T: Real>(x: &Tensor<T>, beta: &Tensor<T>, gamma: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if beta.numel() != c || gamma.shape() != [c, c] {
        return Err(Error::shape(format!(
            "gdn: input has {c} channels but beta {:?} / gamma {:?}",
            beta.shape(),
            gamma.shape()
        )));
    }
    let plane = h * w;
    let mut norm = Tensor::zeros(x.shape());
    let xd = x.data();
    let nd = norm.data_mut();
    for bi in 0..b {
        for i in 0..c {
            let dst = &mut nd[(bi * c + i) * plane..][..plane];
            dst.fill(beta.data()[i]);
            for j in 0..c {
                let gv = gamma.data()[i * c + j];
                let src = &xd[(bi * c + j) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += gv * s * s;
                }
            }
        }
    }
    Ok(norm)
}

pub(crate) fn gdn_forward<T: Real>(
    x: &Tensor<T>,
    beta: &Tensor<T>,
    gamma: &Tensor<T>,
    inverse: bool,
) -> Result<Tensor<T>> {
    let norm = gdn_norm(x, beta, gamma)?;
    x.zip_map(&norm, |v, n| if inverse { v * n.sqrt() } else { v / n.sqrt() })
}

fn gdn_backward<T: Real>(
    x: &Tensor<T>,
    beta: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    inverse: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    let norm = gdn_norm(x, beta, gamma)?;
    let half = T::of(0.5);
    let sign = if inverse { T::one() } else { -T::one() };
    // t_i = g_i x_i / d_i (inverse) or g_i x_i / d_i^3 (forward)
    let t: Vec<T> = (0..x.numel())
        .map(|i| {
            let d = norm.data()[i].sqrt();
            let gx = g.data()[i] * x.data()[i];
            if inverse {
                gx / d
            } else {
                gx / (d * d * d)
            }
        })
        .collect();
    let mut gx = Tensor::zeros(x.shape());
    let mut gbeta = Tensor::zeros(beta.shape());
    let mut ggamma = Tensor::zeros(gamma.shape());
    for bi in 0..b {
        for m in 0..c {
            let off = (bi * c + m) * plane;
            for p in 0..plane {
                let d = norm.data()[off + p].sqrt();
                gx.data_mut()[off + p] = if inverse {
                    g.data()[off + p] * d
                } else {
                    g.data()[off + p] / d
                };
            }
        }
        for i in 0..c {
            let ti = &t[(bi * c + i) * plane..][..plane];
            let mut tsum = T::zero();
            for &v in ti {
                tsum += v;
            }
            gbeta.data_mut()[i] += sign * half * tsum;
            for j in 0..c {
                let xj = &x.data()[(bi * c + j) * plane..][..plane];
                let gij = gamma.data()[i * c + j];
                let mut acc = T::zero();
                for (&tv, &xv) in ti.iter().zip(xj) {
                    acc += tv * xv * xv;
                }
                ggamma.data_mut()[i * c + j] += sign * half * acc;
                let gxj = &mut gx.data_mut()[(bi * c + j) * plane..][..plane];
                for ((d, &tv), &xv) in gxj.iter_mut().zip(ti).zip(xj) {
                    *d += sign * gij * tv * xv;
                }
            }
        }
    }
    Ok((gx, gbeta, ggamma))
}
