//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records one forward computation as a topologically ordered
//! list of nodes; [`Tape::backward`] replays it in reverse, accumulating
//! vector-Jacobian products. Leaves registered with [`Tape::leaf`] receive
//! gradients; everything else is an intermediate.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxFlat(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    L1Loss(NodeId, NodeId),
    Conv3d { input: NodeId, kernel: NodeId, stride: (usize, usize, usize) },
    DepthwiseConv3d { input: NodeId, kernel: NodeId, stride: (usize, usize, usize), shared: bool },
    AddChannelBias { input: NodeId, bias: NodeId },
    Quantize { input: NodeId, lo: T, hi: T },
    Shuffle { input: NodeId, r: usize, s: usize },
    Resample { input: NodeId, target: [usize; 3] },
    DeformConv2d { feature: NodeId, offsets: NodeId, kernel: NodeId },
    BilinearPoint { feature: NodeId, offset: NodeId, base: (usize, usize) },
}

struct TapeNode<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Recorded forward computation. Confined to one training/inference pass;
/// not shared across threads.
pub struct Tape<T: Scalar> {
    nodes: Vec<TapeNode<T>>,
    leaves: Vec<NodeId>,
}

/// Gradients produced by [`Tape::backward`]. Registered leaves that the
/// loss does not reach report zero gradients.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: Vec::new() }
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

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TapeNode { op, value, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a differentiable leaf (a parameter or input that should
    /// receive a gradient).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, true);
        self.leaves.push(id);
        id
    }

    /// Records a value that participates in the computation but never
    /// receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    // -- elementwise ------------------------------------------------------

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), data, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), data, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), data, needs))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| -v);
        let needs = self.needs(a);
        self.push(Op::Neg(a), value, needs)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        let needs = self.needs(a);
        self.push(Op::Scale(a, factor), value, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(T::zero()));
        let needs = self.needs(a);
        self.push(Op::Relu(a), value, needs)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { slope * v });
        let needs = self.needs(a);
        self.push(Op::LeakyRelu(a, slope), value, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let value = self.value(a).map(|v| one / (one + (-v).exp()));
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.tanh());
        let needs = self.needs(a);
        self.push(Op::Tanh(a), value, needs)
    }

    /// Softmax over the flattened tensor; output keeps the input shape,
    /// entries lie in [0,1] and sum to 1.
    pub fn softmax_flat(&mut self, a: NodeId) -> Result<NodeId> {
        self.value(a).check_finite("softmax input")?;
        let out = kernels::softmax_flat_fwd(self.value(a).data());
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxFlat(a), value, needs))
    }

    // -- structure --------------------------------------------------------

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of rank {}", first.len())));
        }
        let mut ext = 0;
        for &n in inputs {
            let s = self.value(n).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!("concat shape {s:?} vs {first:?} on axis {axis}")));
            }
            ext += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = ext;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * ext * inner];
        for u in 0..outer {
            let mut at = 0;
            for &n in inputs {
                let v = self.value(n);
                let e = v.shape()[axis];
                let block = &v.data()[u * e * inner..][..e * inner];
                data[(u * ext + at) * inner..][..e * inner].copy_from_slice(block);
                at += e;
            }
        }
        let needs = inputs.iter().any(|&n| self.needs(n));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value, needs))
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape;
        out_shape[axis] = len;
        let src = self.value(input).data();
        let mut data = vec![T::zero(); outer * len * inner];
        for u in 0..outer {
            data[u * len * inner..][..len * inner]
                .copy_from_slice(&src[(u * ext + start) * inner..][..len * inner]);
        }
        let needs = self.needs(input);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::Slice { input, axis, start, len }, value, needs))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape(input), value, needs))
    }

    // -- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).iter().cloned().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s: T = self.value(a).iter().cloned().sum();
        let needs = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(s / n), needs)
    }

    /// mean(|a - b|)
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "l1_loss")?;
        let n = T::from_f64(self.value(a).numel() as f64);
        let s: T = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::L1Loss(a, b), Tensor::scalar(s / n), needs))
    }

    // -- convolution and sampling -------------------------------------------

    /// input (Ci,T,H,W) * kernel (Co,Ci,kt,kh,kw), replicate padding,
    /// output extents ceil(ext/stride) per axis.
    pub fn conv3d(&mut self, input: NodeId, kernel: NodeId, stride: (usize, usize, usize)) -> Result<NodeId> {
        let ish = as4(self.value(input).shape(), "conv3d input")?;
        let ksh = as5(self.value(kernel).shape(), "conv3d kernel")?;
        let oshape = kernels::conv3d_out_shape(ish, ksh, stride).ok_or_else(|| {
            Error::Shape(format!(
                "conv3d: input {:?} kernel {:?} stride {:?} (kernel extents must be odd, channels must match)",
                self.value(input).shape(),
                self.value(kernel).shape(),
                stride
            ))
        })?;
        let (data, _) = kernels::conv3d_fwd(
            self.value(input).data(),
            ish,
            self.value(kernel).data(),
            ksh,
            stride,
        );
        let needs = self.needs(input) || self.needs(kernel);
        let value = Tensor::new(oshape.to_vec(), data)?;
        Ok(self.push(Op::Conv3d { input, kernel, stride }, value, needs))
    }

    /// Per-channel 3D convolution. With `shared`, one (kt,kh,kw) kernel is
    /// applied to every channel; otherwise the kernel is (C,kt,kh,kw).
    pub fn depthwise_conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: (usize, usize, usize),
        shared: bool,
    ) -> Result<NodeId> {
        let (c, t, h, w) = as4(self.value(input).shape(), "depthwise input")?;
        let ksh = self.value(kernel).shape().to_vec();
        let (kt, kh, kw) = match (shared, ksh.as_slice()) {
            (true, [a, b, cc]) => (*a, *b, *cc),
            (false, [ch, a, b, cc]) if *ch == c => (*a, *b, *cc),
            _ => {
                return Err(Error::Shape(format!(
                    "depthwise kernel {ksh:?} incompatible with {c} channels (shared={shared})"
                )))
            }
        };
        kernels::conv3d_out_shape((1, t, h, w), (1, 1, kt, kh, kw), stride).ok_or_else(|| {
            Error::Shape(format!("depthwise kernel {ksh:?} stride {stride:?} invalid"))
        })?;
        let (to, ho, wo) = (
            kernels::div_ceil(t, stride.0),
            kernels::div_ceil(h, stride.1),
            kernels::div_ceil(w, stride.2),
        );
        let mut data = vec![T::zero(); c * to * ho * wo];
        let kdata = self.value(kernel).data();
        let idata = self.value(input).data();
        for ch in 0..c {
            let kslice = if shared { kdata } else { &kdata[ch * kt * kh * kw..][..kt * kh * kw] };
            let (out, _) = kernels::conv3d_fwd(
                &idata[ch * t * h * w..][..t * h * w],
                (1, t, h, w),
                kslice,
                (1, 1, kt, kh, kw),
                stride,
            );
            data[ch * to * ho * wo..][..to * ho * wo].copy_from_slice(&out);
        }
        let needs = self.needs(input) || self.needs(kernel);
        let value = Tensor::new(vec![c, to, ho, wo], data)?;
        Ok(self.push(Op::DepthwiseConv3d { input, kernel, stride, shared }, value, needs))
    }

    /// x (C,...) + bias (C,) broadcast over trailing axes.
    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.value(input).shape().to_vec();
        let c = shape[0];
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match {c} channels",
                self.value(bias).shape()
            )));
        }
        let block = self.value(input).numel() / c;
        let mut data = self.value(input).data().to_vec();
        let bdata = self.value(bias).data();
        for (ch, &b) in bdata.iter().enumerate() {
            for v in &mut data[ch * block..(ch + 1) * block] {
                *v = *v + b;
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::AddChannelBias { input, bias }, value, needs))
    }

    /// Forward: round(clamp(x, lo, hi)), half away from zero. Backward:
    /// the non-vanishing surrogate (factor 2 on/outside the bounds, 1
    /// strictly inside, with round's derivative overridden to 1).
    pub fn quantize(&mut self, input: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if lo >= hi {
            return Err(Error::InvalidArg(format!("quantize range [{lo}, {hi}]")));
        }
        let data = kernels::quantize_fwd(self.value(input).data(), lo, hi);
        let needs = self.needs(input);
        let value = Tensor::new(self.value(input).shape().to_vec(), data)?;
        Ok(self.push(Op::Quantize { input, lo, hi }, value, needs))
    }

    /// (r*s*s*C, N, H, W) -> (C, r*N, s*H, s*W).
    pub fn space_time_shuffle(&mut self, input: NodeId, r: usize, s: usize) -> Result<NodeId> {
        let ish = as4(self.value(input).shape(), "shuffle input")?;
        if r == 0 || s == 0 || ish.0 % (r * s * s) != 0 {
            return Err(Error::Shape(format!(
                "shuffle: {} channels not divisible by r*s*s = {}",
                ish.0,
                r * s * s
            )));
        }
        let (data, oshape) = kernels::shuffle_fwd(self.value(input).data(), ish, r, s);
        let needs = self.needs(input);
        let value = Tensor::new(oshape.to_vec(), data)?;
        Ok(self.push(Op::Shuffle { input, r, s }, value, needs))
    }

    /// Linear resampling of the T, H, W axes of a (C,T,H,W) tensor to the
    /// target extents (align-corners-false).
    pub fn resample_linear(&mut self, input: NodeId, target: [usize; 3]) -> Result<NodeId> {
        let (c, t, h, w) = as4(self.value(input).shape(), "resample input")?;
        if target.contains(&0) {
            return Err(Error::Shape("resample to zero extent".into()));
        }
        let (d1, s1) = kernels::resample_axis_fwd(self.value(input).data(), [c, t, h, w], 1, target[0]);
        let (d2, s2) = kernels::resample_axis_fwd(&d1, s1, 2, target[1]);
        let (d3, s3) = kernels::resample_axis_fwd(&d2, s2, 3, target[2]);
        let needs = self.needs(input);
        let value = Tensor::new(s3.to_vec(), d3)?;
        Ok(self.push(Op::Resample { input, target }, value, needs))
    }

    /// Deformable 3x3-style convolution on a (Ci,H,W) frame with per-pixel
    /// per-tap offsets (2*K*K,H,W) laid out as (dy,dx) pairs and kernel
    /// (Co,Ci,K,K).
    pub fn deform_conv2d(&mut self, feature: NodeId, offsets: NodeId, kernel: NodeId) -> Result<NodeId> {
        let fsh = as3(self.value(feature).shape(), "deform feature")?;
        let osh = as3(self.value(offsets).shape(), "deform offsets")?;
        let ksh = self.value(kernel).shape().to_vec();
        let (co, ci, k) = match ksh.as_slice() {
            [co, ci, k1, k2] if k1 == k2 && *ci == fsh.0 && k1 % 2 == 1 => (*co, *ci, *k1),
            _ => {
                return Err(Error::Shape(format!(
                    "deform kernel {ksh:?} incompatible with feature {fsh:?}"
                )))
            }
        };
        let _ = ci;
        if osh.0 != 2 * k * k || osh.1 != fsh.1 || osh.2 != fsh.2 {
            return Err(Error::Shape(format!(
                "deform offsets {osh:?} incompatible with K={k} feature {fsh:?}"
            )));
        }
        let data = kernels::deform_conv2d_fwd(
            self.value(feature).data(),
            fsh,
            self.value(offsets).data(),
            self.value(kernel).data(),
            (co, k),
        );
        let needs = self.needs(feature) || self.needs(offsets) || self.needs(kernel);
        let value = Tensor::new(vec![co, fsh.1, fsh.2], data)?;
        Ok(self.push(Op::DeformConv2d { feature, offsets, kernel }, value, needs))
    }

    /// Bilinear sample of a (C,H,W) feature at `base + offset`, clamped to
    /// the frame. `base` is (row, col); `offset` is a 2-element tensor
    /// (dx, dy). Differentiable in both the feature and the offset.
    pub fn bilinear_sample(&mut self, feature: NodeId, base: (usize, usize), offset: NodeId) -> Result<NodeId> {
        let fsh = as3(self.value(feature).shape(), "bilinear feature")?;
        if self.value(offset).numel() != 2 {
            return Err(Error::Shape("bilinear offset must have 2 elements".into()));
        }
        if base.0 >= fsh.1 || base.1 >= fsh.2 {
            return Err(Error::Shape(format!("bilinear base {base:?} outside {fsh:?}")));
        }
        let off = self.value(offset).data();
        let (dx, dy) = (off[0].to_f64(), off[1].to_f64());
        let data = kernels::bilinear_value(
            self.value(feature).data(),
            fsh,
            base.0 as f64 + dy,
            base.1 as f64 + dx,
        );
        let needs = self.needs(feature) || self.needs(offset);
        let value = Tensor::new(vec![fsh.0], data)?;
        Ok(self.push(Op::BilinearPoint { feature, offset, base }, value, needs))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse accumulation from a scalar loss. Every registered leaf gets
    /// a gradient; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut bufs: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        bufs[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = bufs[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backward_node(idx, &g, &mut bufs);
            }
            bufs[idx] = Some(g);
        }

        let mut grads: Vec<Option<Tensor<T>>> = bufs
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.map(|v| Tensor::new(self.nodes[i].value.shape().to_vec(), v).expect("grad shape")))
            .collect();
        for &leaf in &self.leaves {
            if grads[leaf.0].is_none() {
                grads[leaf.0] = Some(Tensor::zeros(self.nodes[leaf.0].value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[T], bufs: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc(bufs, *a, || g.to_vec());
                self.acc(bufs, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(bufs, *a, || g.to_vec());
                self.acc(bufs, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(bufs, *a, || g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                self.acc(bufs, *b, || g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
            }
            Op::Neg(a) => self.acc(bufs, *a, || g.iter().map(|&v| -v).collect()),
            Op::Scale(a, f) => {
                let f = *f;
                self.acc(bufs, *a, || g.iter().map(|&v| v * f).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(bufs, *a, || {
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect()
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (x, s) = (self.value(*a).data(), *slope);
                self.acc(bufs, *a, || {
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * s })
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(bufs, *a, || {
                    g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect()
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc(bufs, *a, || {
                    g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect()
                });
            }
            Op::SoftmaxFlat(a) => {
                self.acc(bufs, *a, || kernels::softmax_flat_bwd(node.value.data(), g));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let ext = shape[*axis];
                let mut at = 0;
                for &n in inputs {
                    let e = self.value(n).shape()[*axis];
                    let start = at;
                    self.acc(bufs, n, || {
                        let mut part = vec![T::zero(); outer * e * inner];
                        for u in 0..outer {
                            part[u * e * inner..][..e * inner]
                                .copy_from_slice(&g[(u * ext + start) * inner..][..e * inner]);
                        }
                        part
                    });
                    at += e;
                }
            }
            Op::Slice { input, axis, start, len } => {
                let ishape = self.value(*input).shape();
                let outer: usize = ishape[..*axis].iter().product();
                let inner: usize = ishape[*axis + 1..].iter().product();
                let ext = ishape[*axis];
                self.acc(bufs, *input, || {
                    let mut full = vec![T::zero(); self.value(*input).numel()];
                    for u in 0..outer {
                        full[(u * ext + start) * inner..][..len * inner]
                            .copy_from_slice(&g[u * len * inner..][..len * inner]);
                    }
                    full
                });
            }
            Op::Reshape(a) => self.acc(bufs, *a, || g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(bufs, *a, || vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gv = g[0] / T::from_f64(n as f64);
                self.acc(bufs, *a, || vec![gv; n]);
            }
            Op::L1Loss(a, b) => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                let gv = g[0] / n;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let signed: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        if x > y {
                            gv
                        } else if x < y {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(bufs, *a, || signed.clone());
                self.acc(bufs, *b, || signed.iter().map(|&v| -v).collect());
            }
            Op::Conv3d { input, kernel, stride } => {
                let ish = as4(self.value(*input).shape(), "").unwrap();
                let ksh = as5(self.value(*kernel).shape(), "").unwrap();
                self.acc(bufs, *kernel, || {
                    kernels::conv3d_bwd_kernel(self.value(*input).data(), ish, ksh, *stride, g)
                });
                self.acc(bufs, *input, || {
                    kernels::conv3d_bwd_input(ish, self.value(*kernel).data(), ksh, *stride, g)
                });
            }
            Op::DepthwiseConv3d { input, kernel, stride, shared } => {
                let (c, t, h, w) = as4(self.value(*input).shape(), "").unwrap();
                let ksh = self.value(*kernel).shape();
                let (kt, kh, kw) = if *shared {
                    (ksh[0], ksh[1], ksh[2])
                } else {
                    (ksh[1], ksh[2], ksh[3])
                };
                let (to, ho, wo) = (
                    kernels::div_ceil(t, stride.0),
                    kernels::div_ceil(h, stride.1),
                    kernels::div_ceil(w, stride.2),
                );
                let idata = self.value(*input).data();
                let kdata = self.value(*kernel).data();
                let ksz = kt * kh * kw;
                self.acc(bufs, *kernel, || {
                    let mut dkernel = vec![T::zero(); if *shared { ksz } else { c * ksz }];
                    for ch in 0..c {
                        let dk = kernels::conv3d_bwd_kernel(
                            &idata[ch * t * h * w..][..t * h * w],
                            (1, t, h, w),
                            (1, 1, kt, kh, kw),
                            *stride,
                            &g[ch * to * ho * wo..][..to * ho * wo],
                        );
                        if *shared {
                            for (d, s) in dkernel.iter_mut().zip(&dk) {
                                *d = *d + *s;
                            }
                        } else {
                            dkernel[ch * ksz..][..ksz].copy_from_slice(&dk);
                        }
                    }
                    dkernel
                });
                self.acc(bufs, *input, || {
                    let mut dinput = vec![T::zero(); c * t * h * w];
                    for ch in 0..c {
                        let kslice = if *shared { kdata } else { &kdata[ch * ksz..][..ksz] };
                        let di = kernels::conv3d_bwd_input(
                            (1, t, h, w),
                            kslice,
                            (1, 1, kt, kh, kw),
                            *stride,
                            &g[ch * to * ho * wo..][..to * ho * wo],
                        );
                        dinput[ch * t * h * w..][..t * h * w].copy_from_slice(&di);
                    }
                    dinput
                });
            }
            Op::AddChannelBias { input, bias } => {
                let c = self.value(*bias).numel();
                let block = self.value(*input).numel() / c;
                self.acc(bufs, *input, || g.to_vec());
                self.acc(bufs, *bias, || {
                    (0..c)
                        .map(|ch| g[ch * block..(ch + 1) * block].iter().cloned().sum())
                        .collect()
                });
            }
            Op::Quantize { input, lo, hi } => {
                let x = self.value(*input).data();
                let (lo, hi) = (*lo, *hi);
                self.acc(bufs, *input, || {
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| gv * kernels::quantize_surrogate_factor(xv, lo, hi))
                        .collect()
                });
            }
            Op::Shuffle { input, r, s } => {
                let ish = as4(self.value(*input).shape(), "").unwrap();
                self.acc(bufs, *input, || kernels::shuffle_inv(g, ish, *r, *s));
            }
            Op::Resample { input, target } => {
                let (c, t, h, w) = as4(self.value(*input).shape(), "").unwrap();
                self.acc(bufs, *input, || {
                    let d = kernels::resample_axis_bwd(g, [c, target[0], target[1], w], 3, target[2]);
                    let d = kernels::resample_axis_bwd(&d, [c, target[0], h, w], 2, target[1]);
                    kernels::resample_axis_bwd(&d, [c, t, h, w], 1, target[0])
                });
            }
            Op::DeformConv2d { feature, offsets, kernel } => {
                let fsh = as3(self.value(*feature).shape(), "").unwrap();
                let ksh = self.value(*kernel).shape();
                let (df, doff, dk) = kernels::deform_conv2d_bwd(
                    self.value(*feature).data(),
                    fsh,
                    self.value(*offsets).data(),
                    self.value(*kernel).data(),
                    (ksh[0], ksh[2]),
                    g,
                );
                self.acc(bufs, *feature, || df.clone());
                self.acc(bufs, *offsets, || doff.clone());
                self.acc(bufs, *kernel, || dk.clone());
            }
            Op::BilinearPoint { feature, offset, base } => {
                let fsh = as3(self.value(*feature).shape(), "").unwrap();
                let off = self.value(*offset).data();
                let (dx, dy) = (off[0].to_f64(), off[1].to_f64());
                let py = base.0 as f64 + dy;
                let px = base.1 as f64 + dx;
                self.acc(bufs, *feature, || {
                    let mut df = vec![T::zero(); self.value(*feature).numel()];
                    kernels::bilinear_scatter(&mut df, fsh, py, px, g);
                    df
                });
                self.acc(bufs, *offset, || {
                    let pos = kernels::bilinear_pos_grad(self.value(*feature).data(), fsh, py, px);
                    let mut gx = T::zero();
                    let mut gy = T::zero();
                    for (c, &gv) in g.iter().enumerate() {
                        gy = gy + gv * pos[c].0;
                        gx = gx + gv * pos[c].1;
                    }
                    vec![gx, gy]
                });
            }
        }
    }

    fn acc(&self, bufs: &mut [Option<Vec<T>>], id: NodeId, produce: impl FnOnce() -> Vec<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let contribution = produce();
        match &mut bufs[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e = *e + *c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

fn as3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::Shape(format!("{what}: expected rank 3, got {shape:?}"))),
    }
}

fn as4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(Error::Shape(format!("{what}: expected rank 4, got {shape:?}"))),
    }
}

fn as5(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize, usize)> {
    match shape {
        [a, b, c, d, e] => Ok((*a, *b, *c, *d, *e)),
        _ => Err(Error::Shape(format!("{what}: expected rank 5, got {shape:?}"))),
    }
}
