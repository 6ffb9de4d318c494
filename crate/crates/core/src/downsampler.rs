//! The learned space-time anti-aliasing downsampler: a constrained 3D
//! filter shared across color channels, strided sampling, and the
//! differentiable quantization layer.

use crate::autodiff::{kernels, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::VideoVolume;

/// Constraint applied to the raw filter weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Raw weights pass through unchanged.
    None,
    /// Softmax over all taps: weights in [0,1], summing to 1.
    Softmax,
    /// Softmax plus the quantization layer on the downsampled output.
    SoftmaxQuantize,
}

impl Constraint {
    pub fn applies_softmax(self) -> bool {
        matches!(self, Constraint::Softmax | Constraint::SoftmaxQuantize)
    }

    pub fn applies_quantize(self) -> bool {
        matches!(self, Constraint::SoftmaxQuantize)
    }
}

/// Downsampler parameters: raw 3D kernel weights, the constraint mode and
/// the (time, space) strides. One kernel is shared across the color
/// channels unless `per_channel` is set, in which case the raw tensor is
/// (C, kt, kh, kw) and the constraint applies per channel.
#[derive(Debug, Clone)]
pub struct FilterBank<T: Scalar> {
    pub raw: Tensor<T>,
    pub constraint: Constraint,
    /// (r in time, s in space)
    pub stride: (usize, usize),
    pub per_channel: bool,
}

impl<T: Scalar> FilterBank<T> {
    /// Shared 3D kernel initialized to zeros (softmax of zeros is the
    /// uniform box, a mild low-pass start).
    pub fn new(extents: (usize, usize, usize), constraint: Constraint, stride: (usize, usize)) -> Result<Self> {
        let (kt, kh, kw) = extents;
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArg(format!("kernel extents {extents:?} must be odd")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArg(format!("stride {stride:?}")));
        }
        Ok(Self {
            raw: Tensor::zeros(&[kt, kh, kw]),
            constraint,
            stride,
            per_channel: false,
        })
    }

    pub fn with_raw(mut self, raw: Tensor<T>) -> Result<Self> {
        if raw.shape().len() != if self.per_channel { 4 } else { 3 } {
            return Err(Error::Shape(format!("raw kernel shape {:?}", raw.shape())));
        }
        self.raw = raw;
        Ok(self)
    }

    /// Kernel extents (kt, kh, kw).
    pub fn kernel_extents(&self) -> (usize, usize, usize) {
        let s = self.raw.shape();
        let o = s.len() - 3;
        (s[o], s[o + 1], s[o + 2])
    }

    /// The constrained kernel actually applied: raw weights for
    /// `Constraint::None`, otherwise a softmax over all taps (per channel
    /// in per-channel mode).
    pub fn effective_kernel(&self) -> Result<Tensor<T>> {
        self.raw.check_finite("filter weights")?;
        if !self.constraint.applies_softmax() {
            return Ok(self.raw.clone());
        }
        if self.per_channel {
            let (kt, kh, kw) = self.kernel_extents();
            let ksz = kt * kh * kw;
            let mut out = Vec::with_capacity(self.raw.numel());
            for chunk in self.raw.data().chunks_exact(ksz) {
                out.extend(kernels::softmax_flat_fwd(chunk));
            }
            Tensor::new(self.raw.shape().to_vec(), out)
        } else {
            Tensor::new(
                self.raw.shape().to_vec(),
                kernels::softmax_flat_fwd(self.raw.data()),
            )
        }
    }
}

/// Builds the downsampling computation on a tape: constraint on the raw
/// weights, the strided depthwise convolution, and (when configured) the
/// quantization layer. `raw` is the filter-weight node (a leaf during
/// training), `input` the (C,T,H,W) volume node.
pub fn build_downsample<T: Scalar>(
    tape: &mut Tape<T>,
    input: NodeId,
    raw: NodeId,
    constraint: Constraint,
    stride: (usize, usize),
    per_channel: bool,
    quantize_range: (T, T),
) -> Result<NodeId> {
    let kernel = if constraint.applies_softmax() {
        if per_channel {
            let kshape = tape.value(raw).shape().to_vec();
            let c = kshape[0];
            let mut parts = Vec::with_capacity(c);
            for ch in 0..c {
                let part = tape.slice(raw, 0, ch, 1)?;
                parts.push(tape.softmax_flat(part)?);
            }
            tape.concat(&parts, 0)?
        } else {
            tape.softmax_flat(raw)?
        }
    } else {
        raw
    };
    let (r, s) = stride;
    let mut out = tape.depthwise_conv3d(input, kernel, (r, s, s), !per_channel)?;
    if constraint.applies_quantize() {
        out = tape.quantize(out, quantize_range.0, quantize_range.1)?;
    }
    Ok(out)
}

/// Downsamples a volume through the filter bank (inference path).
pub fn downsample(v: &VideoVolume, fb: &FilterBank<f32>) -> Result<VideoVolume> {
    let mut tape: Tape<f32> = Tape::new();
    let input = tape.constant(v.data.clone());
    let raw = tape.constant(fb.raw.clone());
    let out = build_downsample(
        &mut tape,
        input,
        raw,
        fb.constraint,
        fb.stride,
        fb.per_channel,
        (v.value_range[0], v.value_range[1]),
    )?;
    let mut vol = VideoVolume::new(tape.value(out).clone(), v.fps.scaled(1, fb.stride.0 as u32)?)?;
    vol.value_range = v.value_range;
    Ok(vol)
}
