//! Classical downsampling filters used as comparison points: nearest,
//! bicubic (Keys), separable Gaussian, and the temporal box filter that
//! models motion blur.

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::VideoVolume;

/// A fixed (non-learned) downsampling filter.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassicalFilter {
    /// Strided indexing in space and time.
    Nearest,
    /// Keys cubic in x,y (antialiased for ratios > 1), nearest in time.
    Bicubic { a: f64 },
    /// Separable Gaussian over t,x,y followed by striding.
    Gaussian3d { sigma_t: f64, sigma_s: f64, extent: usize },
    /// Temporal mean over a window (the motion-blur model), nearest in
    /// space.
    BoxTemporal { length: usize },
}

impl ClassicalFilter {
    pub fn bicubic() -> Self {
        ClassicalFilter::Bicubic { a: -0.5 }
    }

    pub fn gaussian() -> Self {
        ClassicalFilter::Gaussian3d { sigma_t: 0.8, sigma_s: 0.8, extent: 3 }
    }
}

/// Sampled, normalized 1D Gaussian of odd extent.
pub fn gaussian_kernel<T: Scalar>(sigma: f64, extent: usize) -> Result<Tensor<T>> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArg(format!("gaussian sigma {sigma}")));
    }
    if extent % 2 == 0 || extent == 0 {
        return Err(Error::InvalidArg(format!("gaussian extent {extent} must be odd")));
    }
    let c = (extent / 2) as f64;
    let raw: Vec<f64> = (0..extent)
        .map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    let data: Vec<T> = raw.into_iter().map(|v| T::from_f64(v / sum)).collect();
    Tensor::new(vec![extent], data)
}

/// 3D Gaussian kernel as the outer product of per-axis 1D kernels.
pub fn gaussian_kernel_3d<T: Scalar>(
    sigma_t: f64,
    sigma_s: f64,
    extent: usize,
) -> Result<Tensor<T>> {
    let kt = gaussian_kernel::<T>(sigma_t, extent)?;
    let ks = gaussian_kernel::<T>(sigma_s, extent)?;
    let mut data = Vec::with_capacity(extent * extent * extent);
    for &a in kt.data() {
        for &b in ks.data() {
            for &c in ks.data() {
                data.push(a * b * c);
            }
        }
    }
    Tensor::new(vec![extent, extent, extent], data)
}

/// Keys cubic kernel, typically a = -0.5.
fn keys(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Resamples one spatial axis with the Keys kernel, align-corners-false.
/// For downscaling the kernel support is stretched by the ratio, and the
/// clamped taps are renormalized to preserve constants.
fn bicubic_resample_axis(
    data: &[f32],
    shape: [usize; 4],
    axis: usize,
    out_ext: usize,
    a: f64,
) -> (Vec<f32>, [usize; 4]) {
    let ext = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ratio = (ext as f64 / out_ext as f64).max(1.0);
    let support = 2.0 * ratio;

    let stencils: Vec<(Vec<(usize, f64)>,)> = (0..out_ext)
        .map(|o| {
            let src = (o as f64 + 0.5) * ext as f64 / out_ext as f64 - 0.5;
            let lo = (src - support).ceil() as i64;
            let hi = (src + support).floor() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = keys((i as f64 - src) / ratio, a);
                if w != 0.0 {
                    let idx = i.clamp(0, ext as i64 - 1) as usize;
                    taps.push((idx, w));
                    sum += w;
                }
            }
            for t in &mut taps {
                t.1 /= sum;
            }
            (taps,)
        })
        .collect();

    let mut out_shape = shape;
    out_shape[axis] = out_ext;
    let mut out = vec![0.0f32; outer * out_ext * inner];
    for u in 0..outer {
        let src = &data[u * ext * inner..][..ext * inner];
        for (o, (taps,)) in stencils.iter().enumerate() {
            let dst = &mut out[(u * out_ext + o) * inner..][..inner];
            for &(i, w) in taps {
                let row = &src[i * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += (w * s as f64) as f32;
                }
            }
        }
    }
    (out, out_shape)
}

/// Applies a classical filter and strides by (r in time, s in space).
pub fn classical_downsample(
    v: &VideoVolume,
    filter: &ClassicalFilter,
    (r, s): (usize, usize),
) -> Result<VideoVolume> {
    if r == 0 || s == 0 {
        return Err(Error::InvalidArg(format!("stride ({r},{s})")));
    }
    let (c, t, h, w) = (v.channels(), v.frames(), v.height(), v.width());
    let (to, ho, wo) = (
        kernels::div_ceil(t, r),
        kernels::div_ceil(h, s),
        kernels::div_ceil(w, s),
    );
    let data = v.data.data();

    let out: Vec<f32> = match filter {
        ClassicalFilter::Nearest => {
            let mut out = Vec::with_capacity(c * to * ho * wo);
            for ci in 0..c {
                for ti in 0..to {
                    for yi in 0..ho {
                        for xi in 0..wo {
                            out.push(data[((ci * t + r * ti) * h + s * yi) * w + s * xi]);
                        }
                    }
                }
            }
            out
        }
        ClassicalFilter::Bicubic { a } => {
            // Nearest in time first, then Keys in x and y.
            let mut strided = Vec::with_capacity(c * to * h * w);
            for ci in 0..c {
                for ti in 0..to {
                    strided.extend_from_slice(&data[(ci * t + r * ti) * h * w..][..h * w]);
                }
            }
            let (d, sh) = bicubic_resample_axis(&strided, [c, to, h, w], 2, ho, *a);
            let (d, _) = bicubic_resample_axis(&d, sh, 3, wo, *a);
            d
        }
        ClassicalFilter::Gaussian3d { sigma_t, sigma_s, extent } => {
            let kernel = gaussian_kernel_3d::<f32>(*sigma_t, *sigma_s, *extent)?;
            let mut out = vec![0.0f32; c * to * ho * wo];
            for ci in 0..c {
                let (chan, _) = kernels::conv3d_fwd(
                    &data[ci * t * h * w..][..t * h * w],
                    (1, t, h, w),
                    kernel.data(),
                    (1, 1, *extent, *extent, *extent),
                    (r, s, s),
                );
                out[ci * to * ho * wo..][..to * ho * wo].copy_from_slice(&chan);
            }
            out
        }
        ClassicalFilter::BoxTemporal { length } => {
            if *length == 0 {
                return Err(Error::InvalidArg("box length 0".into()));
            }
            let back = (*length - 1) / 2;
            let mut out = Vec::with_capacity(c * to * ho * wo);
            for ci in 0..c {
                for ti in 0..to {
                    for yi in 0..ho {
                        for xi in 0..wo {
                            let mut acc = 0.0f64;
                            for d in 0..*length {
                                let src_t =
                                    (r * ti + d).saturating_sub(back).min(t - 1);
                                acc += data[((ci * t + src_t) * h + s * yi) * w + s * xi] as f64;
                            }
                            out.push((acc / *length as f64) as f32);
                        }
                    }
                }
            }
            out
        }
    };

    let mut vol = VideoVolume::new(Tensor::new(vec![c, to, ho, wo], out)?, v.fps)?;
    vol.fps = v.fps.scaled(1, r as u32)?;
    Ok(vol)
}
