//! Reverse-mode automatic differentiation over 4-D feature maps.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is created) and [`Graph::backward`] walks the tape in reverse. Only the
//! operations the restoration model needs are provided; each carries a
//! hand-written adjoint that the gradient-check suite verifies.

mod kernels;

use std::collections::HashMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;


#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv1x1 { x: NodeId, w: NodeId, b: Option<NodeId> },
    Depthwise3x3 { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv3x3 { x: NodeId, w: NodeId, b: Option<NodeId> },
    Concat { parts: Vec<NodeId> },
    Narrow { x: NodeId, start: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale { x: NodeId, s: NodeId },
    Sigmoid(NodeId),
    Gelu(NodeId),
    LeakyRelu { x: NodeId, slope: T },
    LayerNorm { x: NodeId, w: NodeId, b: NodeId, mean: Vec<T>, rstd: Vec<T> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        alpha: NodeId,
        heads: usize,
        normalize: bool,
        cache: Box<kernels::AttentionCache<T>>,
    },
    PixelUnshuffle(NodeId),
    PixelShuffle(NodeId),
    FreqL1 { pred: NodeId, target: Tensor<T>, lambda: T },
    WeightedSum { x: NodeId, weights: Tensor<T> },
    Mean(NodeId),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. Borrowing a [`ParamStore`] lets layers fetch parameters as leaves.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
    macs: u64,
    last_loss_parts: Option<(T, T)>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A parameter-free graph with gradients enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_nodes: HashMap::new(),
            grad_enabled: true,
            macs: 0,
            last_loss_parts: None,
        }
    }

    /// A training graph over `params`.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// An evaluation graph: no gradients, intermediates may be released with [`Graph::release_since`].
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulate count of the convolutions and attention products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// `(spatial L1, frequency L1)` components of the most recent [`Graph::freq_l1_loss`].
    pub fn last_loss_parts(&self) -> Option<(T, T)> {
        self.last_loss_parts
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("node value was released; only released nodes created inside a finished scope")
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn dims4(&self, id: NodeId) -> Result<(usize, usize, usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(Error::invalid(format!("expected a 4-D feature map, got shape {s:?}"))),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let shape = value.shape().to_vec();
        self.nodes.push(Node { value: Some(value), shape, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient (when gradients are enabled).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let needs_grad = self.grad_enabled;
        let shape = value.shape().to_vec();
        self.nodes.push(Node { value: Some(value), shape, op: Op::Leaf, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.nodes.push(Node { value: Some(value), shape, op: Op::Leaf, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let store = self.params.expect("graph was built without a parameter store");
        let n = self.input(store.get(id).clone());
        self.param_nodes.insert(id, n);
        n
    }

    /// Index marking the current end of the tape.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// In inference mode, drops the values of non-leaf nodes created at or
    /// after `mark` except those listed in `keep`. A no-op while gradients are enabled.
    pub fn release_since(&mut self, mark: usize, keep: &[NodeId]) {
        if self.grad_enabled {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate().skip(mark) {
            if !matches!(node.op, Op::Leaf) && !keep.iter().any(|k| k.0 == i) {
                node.value = None;
                node.op = Op::Leaf;
            }
        }
    }

    fn check_param_shape(&self, id: NodeId, want: &[usize], what: &str) -> Result<()> {
        if self.shape(id) != want {
            return Err(Error::invalid(format!(
                "{what} has shape {:?}, expected {want:?}",
                self.shape(id)
            )));
        }
        Ok(())
    }

    fn finite_check(&self, id: NodeId, what: &str) -> Result<()> {
        if !self.value(id).all_finite() {
            return Err(Error::NumericDomain(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    /// Pointwise convolution; `w` is `(c_out, c_in, 1, 1)`, `b` is `(c_out)`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, c_in, h, wd) = self.dims4(x)?;
        let c_out = self.shape(w).first().copied().unwrap_or(0);
        self.check_param_shape(w, &[c_out, c_in, 1, 1], "pointwise weight")?;
        if let Some(b) = b {
            self.check_param_shape(b, &[c_out], "pointwise bias")?;
        }
        let d = kernels::ConvDims { batch, c_in, c_out, h, w: wd };
        let out = kernels::conv1x1_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
        );
        self.macs += (batch * c_in * c_out * h * wd) as u64;
        let t = Tensor::from_vec(&[batch, c_out, h, wd], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv1x1 { x, w, b }, &parents))
    }

    /// Depthwise 3x3 convolution with zero padding; `w` is `(c, 1, 3, 3)`.
    pub fn depthwise3x3(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, c, h, wd) = self.dims4(x)?;
        self.check_param_shape(w, &[c, 1, 3, 3], "depthwise weight")?;
        if let Some(b) = b {
            self.check_param_shape(b, &[c], "depthwise bias")?;
        }
        let d = kernels::ConvDims { batch, c_in: c, c_out: c, h, w: wd };
        let out = kernels::depthwise3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
        );
        self.macs += (batch * c * 9 * h * wd) as u64;
        let t = Tensor::from_vec(&[batch, c, h, wd], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Depthwise3x3 { x, w, b }, &parents))
    }

    /// Dense 3x3 convolution with zero padding; `w` is `(c_out, c_in, 3, 3)`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, c_in, h, wd) = self.dims4(x)?;
        let c_out = self.shape(w).first().copied().unwrap_or(0);
        self.check_param_shape(w, &[c_out, c_in, 3, 3], "3x3 weight")?;
        if let Some(b) = b {
            self.check_param_shape(b, &[c_out], "3x3 bias")?;
        }
        let d = kernels::ConvDims { batch, c_in, c_out, h, w: wd };
        let out = kernels::conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
        );
        self.macs += (batch * c_in * c_out * 9 * h * wd) as u64;
        let t = Tensor::from_vec(&[batch, c_out, h, wd], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv3x3 { x, w, b }, &parents))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (batch, _, h, w) = self.dims4(first)?;
        let mut total = 0;
        for &p in parts {
            let (pb, pc, ph, pw) = self.dims4(p)?;
            if (pb, ph, pw) != (batch, h, w) {
                return Err(Error::invalid(format!(
                    "concat spatial/batch mismatch: {:?} vs {:?}",
                    self.shape(p),
                    self.shape(first)
                )));
            }
            total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(batch * total * hw);
        for b in 0..batch {
            for &p in parts {
                let (_, pc, _, _) = self.dims4(p)?;
                data.extend_from_slice(&self.value(p).data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let t = Tensor::from_vec(&[batch, total, h, w], data)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Channel slice `[start, start + len)`.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (batch, c, h, w) = self.dims4(x)?;
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!("channel slice {start}+{len} out of range {c}")));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * len * hw);
        for b in 0..batch {
            data.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let t = Tensor::from_vec(&[batch, len, h, w], data)?;
        Ok(self.push(t, Op::Narrow { x, start }, &[x]))
    }

    /// Splits the channel axis into `n` equal chunks.
    pub fn chunk(&mut self, x: NodeId, n: usize) -> Result<Vec<NodeId>> {
        let (_, c, _, _) = self.dims4(x)?;
        if n == 0 || c % n != 0 {
            return Err(Error::invalid(format!("cannot split {c} channels into {n} chunks")));
        }
        let len = c / n;
        (0..n).map(|i| self.narrow(x, i * len, len)).collect()
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::invalid(format!("scale factor must hold one element, got {:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * sv);
        Ok(self.push(t, Op::Scale { x, s }, &[x, s]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let slope = T::lit(slope);
        let t = self.value(x).map(|v| if v >= T::zero() { v } else { v * slope });
        self.push(t, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Per-pixel normalization across channels with affine `(c)` weight and bias.
    pub fn layer_norm(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, c, h, wd) = self.dims4(x)?;
        self.check_param_shape(w, &[c], "layer-norm weight")?;
        self.check_param_shape(b, &[c], "layer-norm bias")?;
        let (out, mean, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            batch,
            c,
            h * wd,
        );
        let t = Tensor::from_vec(&[batch, c, h, wd], out)?;
        Ok(self.push(t, Op::LayerNorm { x, w, b, mean, rstd }, &[x, w, b]))
    }

    /// Channel-wise (transposed) multi-head attention.
    ///
    /// For each head the `c x c` matrix `softmax(q_hat k_hat^T / alpha)` mixes the
    /// value channels; rows are distributions over key channels. With
    /// `normalize` the query and key channel vectors are L2-normalized along
    /// the spatial axis first. `alpha` holds one temperature per head.
    pub fn channel_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        alpha: NodeId,
        heads: usize,
        normalize: bool,
    ) -> Result<NodeId> {
        let (batch, c, h, w) = self.dims4(q)?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::invalid(format!(
                "q/k/v shape mismatch: {:?}, {:?}, {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid(format!("{c} channels not divisible by {heads} heads")));
        }
        self.check_param_shape(alpha, &[heads], "attention temperature")?;
        for (id, what) in [(q, "query"), (k, "key"), (v, "value"), (alpha, "temperature")] {
            self.finite_check(id, what)?;
        }
        let d = kernels::AttentionDims { batch, channels: c, heads, tokens: h * w };
        let (out, cache) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(alpha).data(),
            normalize,
            &d,
        );
        self.macs += (2 * batch * c * (c / heads) * h * w) as u64;
        let t = Tensor::from_vec(&[batch, c, h, w], out)?;
        let op = Op::Attention { q, k, v, alpha, heads, normalize, cache: Box::new(cache) };
        Ok(self.push(t, op, &[q, k, v, alpha]))
    }

    /// Softmax attention probabilities of an attention node, `(batch, heads, c, c)` flattened.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { cache, .. } => Some(&cache.probs),
            _ => None,
        }
    }

    /// `(B, C, H, W) -> (B, 4C, H/2, W/2)`.
    pub fn pixel_unshuffle(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("pixel-unshuffle needs even spatial dims, got {h}x{w}")));
        }
        let out = kernels::pixel_unshuffle(self.value(x).data(), b, c, h, w);
        let t = Tensor::from_vec(&[b, 4 * c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::PixelUnshuffle(x), &[x]))
    }

    /// `(B, C, H, W) -> (B, C/4, 2H, 2W)`.
    pub fn pixel_shuffle(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = self.dims4(x)?;
        if c % 4 != 0 {
            return Err(Error::invalid(format!("pixel-shuffle needs channels divisible by 4, got {c}")));
        }
        let out = kernels::pixel_shuffle(self.value(x).data(), b, c, h, w);
        let t = Tensor::from_vec(&[b, c / 4, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::PixelShuffle(x), &[x]))
    }

    /// `mean|pred - target| + lambda * mean over re/im of |F(pred) - F(target)|`,
    /// with `F` the unnormalized 2-D DFT of every `(H, W)` plane.
    pub fn freq_l1_loss(&mut self, pred: NodeId, target: &Tensor<T>, lambda: T) -> Result<NodeId> {
        let (b, c, h, w) = self.dims4(pred)?;
        if self.shape(pred) != target.shape() {
            return Err(Error::invalid(format!(
                "prediction {:?} and target {:?} differ in shape",
                self.shape(pred),
                target.shape()
            )));
        }
        let diff = self.value(pred).zip_map(target, |p, t| p - t)?;
        let n = T::lit(diff.len() as f64);
        let spatial = diff.data().iter().fold(T::zero(), |a, v| a + v.abs()) / n;
        let mut freq_sum = T::zero();
        if lambda != T::zero() {
            let mut planner = FftPlanner::new();
            for plane in diff.data().chunks(h * w) {
                let spec = fft2(plane, h, w, &mut planner, false);
                freq_sum += spec.iter().fold(T::zero(), |a, z| a + z.re.abs() + z.im.abs());
            }
        }
        let freq = freq_sum / (T::lit(2.0) * n);
        debug_assert_eq!(diff.len(), b * c * h * w);
        self.last_loss_parts = Some((spatial, freq));
        let t = Tensor::scalar(spatial + lambda * freq);
        Ok(self.push(t, Op::FreqL1 { pred, target: target.clone(), lambda }, &[pred]))
    }

    /// `sum x * weights` with constant weights; a smooth scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        if self.shape(x) != weights.shape() {
            return Err(Error::invalid("weighted-sum weights must match the input shape"));
        }
        let s = self.value(x).data().iter().zip(weights.data()).fold(T::zero(), |a, (&p, &q)| a + p * q);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Gradients of the single-element node `loss` with respect to every leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward on a graph built without gradients"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a single-element loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads)?;
        }
        Ok(Gradients { grads, param_nodes: self.param_nodes.clone() })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let shape = self.nodes[i].shape.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv1x1 { x, w, b } | Op::Depthwise3x3 { x, w, b } | Op::Conv3x3 { x, w, b } => {
                let (batch, c_in, h, wd) = self.dims4(*x)?;
                let d = kernels::ConvDims { batch, c_in, c_out: shape[1], h, w: wd };
                let backward = match &self.nodes[i].op {
                    Op::Conv1x1 { .. } => kernels::conv1x1_backward,
                    Op::Depthwise3x3 { .. } => kernels::depthwise3x3_backward,
                    _ => kernels::conv3x3_backward,
                };
                let (dx, dw, db) = backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &d,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db)?);
                }
            }
            Op::Concat { parts } => {
                let (batch, total, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(batch * pc * hw);
                        for b in 0..batch {
                            let start = (b * total + offset) * hw;
                            data.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        accumulate(grads, p, Tensor::from_vec(self.shape(p), data)?);
                    }
                    offset += pc;
                }
            }
            Op::Narrow { x, start } => {
                let (batch, c, h, w) = self.dims4(*x)?;
                let len = shape[1];
                let hw = h * w;
                let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&[batch, c, h, w]));
                for b in 0..batch {
                    let dst = &mut slot.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw];
                    let src = &g.data()[b * len * hw..(b + 1) * len * hw];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.wants(*s) {
                    let ds = g.data().iter().zip(self.value(*x).data()).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    accumulate(grads, *s, Tensor::from_vec(self.shape(*s), vec![ds])?);
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g.map(|v| v * sv));
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_ref().expect("sigmoid output retained");
                accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?);
            }
            Op::Gelu(x) => {
                accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv * kernels::gelu_grad(xv))?);
            }
            Op::LeakyRelu { x, slope } => {
                let s = *slope;
                accumulate(
                    grads,
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| if xv >= T::zero() { gv } else { gv * s })?,
                );
            }
            Op::LayerNorm { x, w, b, mean, rstd } => {
                let (batch, c, h, wd) = self.dims4(*x)?;
                let (dx, dw, db) = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    mean,
                    rstd,
                    g.data(),
                    batch,
                    c,
                    h * wd,
                );
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                if self.wants(*w) {
                    accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db)?);
                }
            }
            Op::Attention { q, k, v, alpha, heads, normalize, cache } => {
                let (batch, c, h, w) = self.dims4(*q)?;
                let d = kernels::AttentionDims { batch, channels: c, heads: *heads, tokens: h * w };
                let ag = kernels::attention_backward(
                    self.value(*v).data(),
                    self.value(*alpha).data(),
                    cache,
                    g.data(),
                    *normalize,
                    &d,
                );
                for (id, data) in [(*q, ag.dq), (*k, ag.dk), (*v, ag.dv)] {
                    if self.wants(id) {
                        accumulate(grads, id, Tensor::from_vec(&shape, data)?);
                    }
                }
                if self.wants(*alpha) {
                    accumulate(grads, *alpha, Tensor::from_vec(self.shape(*alpha), ag.dalpha)?);
                }
            }
            Op::PixelUnshuffle(x) => {
                let (b, c, h, w) = self.dims4(*x)?;
                let back = kernels::pixel_shuffle(g.data(), b, 4 * c, h / 2, w / 2);
                accumulate(grads, *x, Tensor::from_vec(&[b, c, h, w], back)?);
            }
            Op::PixelShuffle(x) => {
                let (b, c, h, w) = self.dims4(*x)?;
                let back = kernels::pixel_unshuffle(g.data(), b, c / 4, 2 * h, 2 * w);
                accumulate(grads, *x, Tensor::from_vec(&[b, c, h, w], back)?);
            }
            Op::FreqL1 { pred, target, lambda } => {
                let (_, _, h, w) = self.dims4(*pred)?;
                let upstream = g.data()[0];
                let diff = self.value(*pred).zip_map(target, |p, t| p - t)?;
                let n = T::lit(diff.len() as f64);
                let mut out: Vec<T> = diff.data().iter().map(|&d| kernels::sign(d) / n).collect();
                if *lambda != T::zero() {
                    let mut planner = FftPlanner::new();
                    let coef = *lambda / (T::lit(2.0) * n);
                    for (plane, dst) in diff.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
                        let spec = fft2(plane, h, w, &mut planner, false);
                        let signs: Vec<Complex<T>> = spec
                            .iter()
                            .map(|z| Complex::new(kernels::sign(z.re), kernels::sign(z.im)))
                            .collect();
                        let back = fft2_complex(signs, h, w, &mut planner, true);
                        dst.iter_mut().zip(&back).for_each(|(d, z)| *d += coef * z.re);
                    }
                }
                out.iter_mut().for_each(|v| *v *= upstream);
                accumulate(grads, *pred, Tensor::from_vec(self.shape(*pred), out)?);
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                accumulate(grads, *x, weights.map(|w| w * gv));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let gv = g.data()[0] / n;
                accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Unnormalized 2-D DFT of a real plane.
pub(crate) fn fft2<T: Scalar>(plane: &[T], h: usize, w: usize, planner: &mut FftPlanner<T>, inverse: bool) -> Vec<Complex<T>> {
    let buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_complex(buf, h, w, planner, inverse)
}

/// Unnormalized 2-D DFT (or inverse DFT without the `1/(hw)` factor) in row-major layout.
pub(crate) fn fft2_complex<T: Scalar>(
    mut buf: Vec<Complex<T>>,
    h: usize,
    w: usize,
    planner: &mut FftPlanner<T>,
    inverse: bool,
) -> Vec<Complex<T>> {
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    row_fft.process(&mut buf);
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_nodes.get(&id).and_then(|n| self.get(*n))
    }

    /// Removes and returns the gradient of every parameter touched by the graph.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .param_nodes
            .iter()
            .filter_map(|(&p, &n)| self.grads[n.0].take().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
