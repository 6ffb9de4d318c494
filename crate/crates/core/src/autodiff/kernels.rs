//! Numeric kernels behind the tape ops.
//!
//! Every kernel is written in gather form: each output element is produced
//! by one owner with a fixed accumulation order, so parallel execution is
//! bit-identical to sequential execution.

use crate::parallel;
use crate::tensor::Scalar;

/// ceil(a/b)
#[inline]
pub fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

// ---------------------------------------------------------------------------
// replicate padding
// ---------------------------------------------------------------------------

/// Pads a (C,T,H,W) volume by (pt,ph,pw) on both sides of each axis past the
/// channel axis, replicating edge values.
pub fn pad_replicate<T: Scalar>(
    input: &[T],
    (c, t, h, w): (usize, usize, usize, usize),
    (pt, ph, pw): (usize, usize, usize),
) -> Vec<T> {
    let (tp, hp, wp) = (t + 2 * pt, h + 2 * ph, w + 2 * pw);
    let _ = c;
    let mut out = vec![T::zero(); c * tp * hp * wp];
    parallel::for_each_chunk_mut(&mut out, hp * wp, |plane_idx, plane| {
        let ci = plane_idx / tp;
        let ti = (plane_idx % tp).saturating_sub(pt).min(t - 1);
        let src_plane = &input[(ci * t + ti) * h * w..][..h * w];
        for xi in 0..hp {
            let si = xi.saturating_sub(ph).min(h - 1);
            let src_row = &src_plane[si * w..][..w];
            let dst_row = &mut plane[xi * wp..][..wp];
            for (yi, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[yi.saturating_sub(pw).min(w - 1)];
            }
        }
    });
    out
}

/// Collapses one padded axis back to the original extent, summing pad
/// positions into the edge elements (adjoint of replicate padding along that
/// axis). `shape` is the current 4D shape, `axis` the axis to fold, `pad` the
/// one-sided pad width.
pub fn fold_replicate_axis<T: Scalar>(
    data: &[T],
    shape: [usize; 4],
    axis: usize,
    pad: usize,
) -> (Vec<T>, [usize; 4]) {
    let ext_p = shape[axis];
    let ext = ext_p - 2 * pad;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape;
    out_shape[axis] = ext;
    let mut out = vec![T::zero(); outer * ext * inner];
    parallel::for_each_chunk_mut(&mut out, ext * inner, |u, block| {
        let src = &data[u * ext_p * inner..][..ext_p * inner];
        for e in 0..ext {
            let lo = if e == 0 { 0 } else { e + pad };
            let hi = if e == ext - 1 { ext_p - 1 } else { e + pad };
            let dst = &mut block[e * inner..][..inner];
            for p in lo..=hi {
                let row = &src[p * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
    });
    (out, out_shape)
}

// ---------------------------------------------------------------------------
// conv3d (replicate padding, per-axis stride, window centered at stride*out)
// ---------------------------------------------------------------------------

pub fn conv3d_out_shape(
    (ci, t, h, w): (usize, usize, usize, usize),
    (co, kci, kt, kh, kw): (usize, usize, usize, usize, usize),
    (st, sh, sw): (usize, usize, usize),
) -> Option<[usize; 4]> {
    if ci != kci || kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 || st == 0 || sh == 0 || sw == 0 {
        return None;
    }
    Some([co, div_ceil(t, st), div_ceil(h, sh), div_ceil(w, sw)])
}

/// Full 3D convolution: input (Ci,T,H,W), kernel (Co,Ci,kt,kh,kw),
/// replicate padding of (k-1)/2 per axis, output window centered at
/// stride*output_index.
pub fn conv3d_fwd<T: Scalar>(
    input: &[T],
    ishape: (usize, usize, usize, usize),
    kernel: &[T],
    kshape: (usize, usize, usize, usize, usize),
    stride: (usize, usize, usize),
) -> (Vec<T>, [usize; 4]) {
    let (ci, t, h, w) = ishape;
    let (_, _, kt, kh, kw) = kshape;
    let (st, sh, sw) = stride;
    let oshape = conv3d_out_shape(ishape, kshape, stride).expect("validated by caller");
    let [co, to, ho, wo] = oshape;
    let (pt, ph, pw) = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let (tp, hp, wp) = (t + 2 * pt, h + 2 * ph, w + 2 * pw);
    let padded = pad_replicate(input, ishape, (pt, ph, pw));

    let mut out = vec![T::zero(); co * to * ho * wo];
    // One chunk per (o, t') output plane.
    parallel::for_each_chunk_mut(&mut out, ho * wo, |plane_idx, plane| {
        let tt = plane_idx % to;
        let o = plane_idx / to;
        for c in 0..ci {
            for i in 0..kt {
                let pbase = (c * tp + st * tt + i) * hp;
                for j in 0..kh {
                    let krow = &kernel[(((o * ci + c) * kt + i) * kh + j) * kw..][..kw];
                    for xx in 0..ho {
                        let prow = &padded[(pbase + sh * xx + j) * wp..][..wp];
                        let row = &mut plane[xx * wo..][..wo];
                        if sw == 1 && kw == 3 {
                            // Hot path: one fused pass over the row.
                            let (k0, k1, k2) = (krow[0], krow[1], krow[2]);
                            for (yy, r) in row.iter_mut().enumerate() {
                                *r = *r + k0 * prow[yy] + k1 * prow[yy + 1] + k2 * prow[yy + 2];
                            }
                        } else {
                            for (k, &kv) in krow.iter().enumerate() {
                                if sw == 1 {
                                    let src = &prow[k..k + wo];
                                    for (r, &s) in row.iter_mut().zip(src) {
                                        *r = *r + kv * s;
                                    }
                                } else {
                                    for (yy, r) in row.iter_mut().enumerate() {
                                        *r = *r + kv * prow[sw * yy + k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    (out, oshape)
}

/// Gradient of conv3d w.r.t. the kernel.
pub fn conv3d_bwd_kernel<T: Scalar>(
    input: &[T],
    ishape: (usize, usize, usize, usize),
    kshape: (usize, usize, usize, usize, usize),
    stride: (usize, usize, usize),
    dout: &[T],
) -> Vec<T> {
    let (ci, t, h, w) = ishape;
    let (co, _, kt, kh, kw) = kshape;
    let (st, sh, sw) = stride;
    let [_, to, ho, wo] = conv3d_out_shape(ishape, kshape, stride).expect("validated by caller");
    let (pt, ph, pw) = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let (tp, hp, wp) = (t + 2 * pt, h + 2 * ph, w + 2 * pw);
    let padded = pad_replicate(input, ishape, (pt, ph, pw));

    let mut dkernel = vec![T::zero(); co * ci * kt * kh * kw];
    // One chunk per (o,c) kernel block.
    parallel::for_each_chunk_mut(&mut dkernel, kt * kh * kw, |block_idx, block| {
        let c = block_idx % ci;
        let o = block_idx / ci;
        for tt in 0..to {
            for i in 0..kt {
                let pbase = (c * tp + st * tt + i) * hp;
                for xx in 0..ho {
                    let grow = &dout[((o * to + tt) * ho + xx) * wo..][..wo];
                    for j in 0..kh {
                        let prow = &padded[(pbase + sh * xx + j) * wp..][..wp];
                        let krow = &mut block[(i * kh + j) * kw..][..kw];
                        for (k, kr) in krow.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for (yy, &g) in grow.iter().enumerate() {
                                acc = acc + g * prow[sw * yy + k];
                            }
                            *kr = *kr + acc;
                        }
                    }
                }
            }
        }
    });
    dkernel
}

/// Gradient of conv3d w.r.t. the input. Gathers into the padded domain
/// (where the output-to-input map is affine per axis) and folds the pads
/// back into the edges.
pub fn conv3d_bwd_input<T: Scalar>(
    ishape: (usize, usize, usize, usize),
    kernel: &[T],
    kshape: (usize, usize, usize, usize, usize),
    stride: (usize, usize, usize),
    dout: &[T],
) -> Vec<T> {
    let (ci, t, h, w) = ishape;
    let (co, _, kt, kh, kw) = kshape;
    let (st, sh, sw) = stride;
    let [_, to, ho, wo] = conv3d_out_shape(ishape, kshape, stride).expect("validated by caller");
    let (pt, ph, pw) = ((kt - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let (tp, hp, wp) = (t + 2 * pt, h + 2 * ph, w + 2 * pw);

    // Per-axis contributor lists: which (output index, tap) pairs touch a
    // given padded coordinate.
    let contrib = |ext_out: usize, ktaps: usize, s: usize, ext_p: usize| {
        let mut lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ext_p];
        for oidx in 0..ext_out {
            for tap in 0..ktaps {
                lists[s * oidx + tap].push((oidx, tap));
            }
        }
        lists
    };
    let ct = contrib(to, kt, st, tp);
    let ch = contrib(ho, kh, sh, hp);

    let mut dpadded = vec![T::zero(); ci * tp * hp * wp];
    // One chunk per (c, pt) padded plane.
    parallel::for_each_chunk_mut(&mut dpadded, hp * wp, |plane_idx, plane| {
        let ptt = plane_idx % tp;
        let c = plane_idx / tp;
        for o in 0..co {
            for &(tt, i) in &ct[ptt] {
                for px in 0..hp {
                    let drow = &mut plane[px * wp..][..wp];
                    for &(xx, j) in &ch[px] {
                        let grow = &dout[((o * to + tt) * ho + xx) * wo..][..wo];
                        let krow = &kernel[(((o * ci + c) * kt + i) * kh + j) * kw..][..kw];
                        for (k, &kv) in krow.iter().enumerate() {
                            if sw == 1 {
                                let dst = &mut drow[k..k + wo];
                                for (d, &g) in dst.iter_mut().zip(grow) {
                                    *d = *d + kv * g;
                                }
                            } else {
                                for (yy, &g) in grow.iter().enumerate() {
                                    drow[sw * yy + k] = drow[sw * yy + k] + kv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    let (folded, shape) = fold_replicate_axis(&dpadded, [ci, tp, hp, wp], 1, pt);
    let (folded, shape) = fold_replicate_axis(&folded, shape, 2, ph);
    let (dinput, _) = fold_replicate_axis(&folded, shape, 3, pw);
    let _ = (t, h, w);
    dinput
}

// ---------------------------------------------------------------------------
// linear resampling (align-corners-false), one axis at a time
// ---------------------------------------------------------------------------

/// Two-tap stencil per output index for linear interpolation with
/// align-corners-false source positions, edges clamped.
pub fn linear_taps(in_ext: usize, out_ext: usize) -> Vec<(usize, f64, usize, f64)> {
    (0..out_ext)
        .map(|o| {
            let src = (o as f64 + 0.5) * in_ext as f64 / out_ext as f64 - 0.5;
            if src <= 0.0 {
                (0, 1.0, 0, 0.0)
            } else if src >= (in_ext - 1) as f64 {
                (in_ext - 1, 1.0, in_ext - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                let f = src - i0 as f64;
                (i0, 1.0 - f, (i0 + 1).min(in_ext - 1), f)
            }
        })
        .collect()
}

/// Resamples `axis` of a 4D tensor to `out_ext` with linear interpolation.
pub fn resample_axis_fwd<T: Scalar>(
    input: &[T],
    shape: [usize; 4],
    axis: usize,
    out_ext: usize,
) -> (Vec<T>, [usize; 4]) {
    let ext = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = linear_taps(ext, out_ext);
    let mut out_shape = shape;
    out_shape[axis] = out_ext;
    let mut out = vec![T::zero(); outer * out_ext * inner];
    parallel::for_each_chunk_mut(&mut out, out_ext * inner, |u, block| {
        let src = &input[u * ext * inner..][..ext * inner];
        for (o, &(a, wa, b, wb)) in taps.iter().enumerate() {
            let (wa, wb) = (T::from_f64(wa), T::from_f64(wb));
            let ra = &src[a * inner..][..inner];
            let rb = &src[b * inner..][..inner];
            let dst = &mut block[o * inner..][..inner];
            for ((d, &va), &vb) in dst.iter_mut().zip(ra).zip(rb) {
                *d = wa * va + wb * vb;
            }
        }
    });
    (out, out_shape)
}

/// Adjoint of [`resample_axis_fwd`]: `in_shape` is the shape being
/// resampled FROM (i.e. the gradient target), `out_ext` the resampled
/// extent of `dout`.
pub fn resample_axis_bwd<T: Scalar>(
    dout: &[T],
    in_shape: [usize; 4],
    axis: usize,
    out_ext: usize,
) -> Vec<T> {
    let ext = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let taps = linear_taps(ext, out_ext);
    // Contributor lists per input index, in output order.
    let mut back: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ext];
    for (o, &(a, wa, b, wb)) in taps.iter().enumerate() {
        back[a].push((o, wa));
        if wb != 0.0 {
            back[b].push((o, wb));
        }
    }
    let mut din = vec![T::zero(); outer * ext * inner];
    parallel::for_each_chunk_mut(&mut din, ext * inner, |u, block| {
        let src = &dout[u * out_ext * inner..][..out_ext * inner];
        for (e, ctb) in back.iter().enumerate() {
            let dst = &mut block[e * inner..][..inner];
            for &(o, wgt) in ctb {
                let wgt = T::from_f64(wgt);
                let g = &src[o * inner..][..inner];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d = *d + wgt * gv;
                }
            }
        }
    });
    din
}

// ---------------------------------------------------------------------------
// space-time pixel shuffle
// ---------------------------------------------------------------------------

/// (r*s*s*C, N, H, W) -> (C, r*N, s*H, s*W):
/// out[c, r*n+i, s*h+j, s*w+k] = x[((i*s+j)*s+k)*C + c, n, h, w]
pub fn shuffle_fwd<T: Scalar>(
    input: &[T],
    (cin, n, h, w): (usize, usize, usize, usize),
    r: usize,
    s: usize,
) -> (Vec<T>, [usize; 4]) {
    let c = cin / (r * s * s);
    let (tn, shh, sww) = (r * n, s * h, s * w);
    let mut out = vec![T::zero(); c * tn * shh * sww];
    parallel::for_each_chunk_mut(&mut out, shh * sww, |plane_idx, plane| {
        let tt = plane_idx % tn;
        let cc = plane_idx / tn;
        let (n0, i) = (tt / r, tt % r);
        for hh in 0..shh {
            let (h0, j) = (hh / s, hh % s);
            let row = &mut plane[hh * sww..][..sww];
            for (ww, rv) in row.iter_mut().enumerate() {
                let (w0, k) = (ww / s, ww % s);
                let src_c = ((i * s + j) * s + k) * c + cc;
                *rv = input[((src_c * n + n0) * h + h0) * w + w0];
            }
        }
    });
    (out, [c, tn, shh, sww])
}

/// Exact inverse of [`shuffle_fwd`]; also its adjoint (it is a permutation).
pub fn shuffle_inv<T: Scalar>(
    output: &[T],
    (cin, n, h, w): (usize, usize, usize, usize),
    r: usize,
    s: usize,
) -> Vec<T> {
    let c = cin / (r * s * s);
    let (tn, shh, sww) = (r * n, s * h, s * w);
    let mut din = vec![T::zero(); cin * n * h * w];
    parallel::for_each_chunk_mut(&mut din, h * w, |plane_idx, plane| {
        let n0 = plane_idx % n;
        let src_c = plane_idx / n;
        let cc = src_c % c;
        let m = src_c / c;
        let k = m % s;
        let j = (m / s) % s;
        let i = m / (s * s);
        for h0 in 0..h {
            let row = &mut plane[h0 * w..][..w];
            for (w0, rv) in row.iter_mut().enumerate() {
                *rv = output[((cc * tn + r * n0 + i) * shh + s * h0 + j) * sww + s * w0 + k];
            }
        }
    });
    din
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

/// One clamped axis of a bilinear stencil: low index, high index, fraction,
/// and whether the continuous coordinate was clamped (gradient w.r.t. the
/// coordinate is zero there).
#[inline]
fn axis_stencil(pos: f64, ext: usize) -> (usize, usize, f64, bool) {
    let max = (ext - 1) as f64;
    if pos <= 0.0 {
        (0, 0, 0.0, true)
    } else if pos >= max {
        (ext - 1, ext - 1, 0.0, true)
    } else {
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(ext - 1);
        (i0, i1, pos - i0 as f64, false)
    }
}

/// Bilinear sample of a (C,H,W) feature map at continuous position
/// (py,px), clamped to the frame. Returns per-channel values.
pub fn bilinear_value<T: Scalar>(
    feature: &[T],
    (c, h, w): (usize, usize, usize),
    py: f64,
    px: f64,
) -> Vec<T> {
    let (y0, y1, fy, _) = axis_stencil(py, h);
    let (x0, x1, fx, _) = axis_stencil(px, w);
    let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
    let one = T::one();
    (0..c)
        .map(|ci| {
            let plane = &feature[ci * h * w..][..h * w];
            let v00 = plane[y0 * w + x0];
            let v01 = plane[y0 * w + x1];
            let v10 = plane[y1 * w + x0];
            let v11 = plane[y1 * w + x1];
            (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
        })
        .collect()
}

/// Per-channel partial derivatives of the bilinear sample w.r.t. (py,px).
/// Zero where the coordinate is clamped.
pub fn bilinear_pos_grad<T: Scalar>(
    feature: &[T],
    (c, h, w): (usize, usize, usize),
    py: f64,
    px: f64,
) -> Vec<(T, T)> {
    let (y0, y1, fy, cy) = axis_stencil(py, h);
    let (x0, x1, fx, cx) = axis_stencil(px, w);
    let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
    let one = T::one();
    (0..c)
        .map(|ci| {
            let plane = &feature[ci * h * w..][..h * w];
            let v00 = plane[y0 * w + x0];
            let v01 = plane[y0 * w + x1];
            let v10 = plane[y1 * w + x0];
            let v11 = plane[y1 * w + x1];
            let dy = if cy {
                T::zero()
            } else {
                (one - fx) * (v10 - v00) + fx * (v11 - v01)
            };
            let dx = if cx {
                T::zero()
            } else {
                (one - fy) * (v01 - v00) + fy * (v11 - v10)
            };
            (dy, dx)
        })
        .collect()
}

/// Scatters `dval` through the bilinear stencil into `dfeature`.
pub fn bilinear_scatter<T: Scalar>(
    dfeature: &mut [T],
    (c, h, w): (usize, usize, usize),
    py: f64,
    px: f64,
    dval: &[T],
) {
    let (y0, y1, fy, _) = axis_stencil(py, h);
    let (x0, x1, fx, _) = axis_stencil(px, w);
    let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
    let one = T::one();
    for (ci, &g) in dval.iter().enumerate().take(c) {
        let plane = &mut dfeature[ci * h * w..][..h * w];
        plane[y0 * w + x0] = plane[y0 * w + x0] + g * (one - fy) * (one - fx);
        plane[y0 * w + x1] = plane[y0 * w + x1] + g * (one - fy) * fx;
        plane[y1 * w + x0] = plane[y1 * w + x0] + g * fy * (one - fx);
        plane[y1 * w + x1] = plane[y1 * w + x1] + g * fy * fx;
    }
}

// ---------------------------------------------------------------------------
// deformable 2D convolution (one offset pair per kernel tap, per pixel)
// ---------------------------------------------------------------------------

/// Forward deformable conv: feature (Ci,H,W), offsets (2*K*K,H,W) laid out
/// as (dy,dx) per tap, kernel (Co,Ci,K,K). Sampling positions are clamped,
/// which doubles as replicate padding.
pub fn deform_conv2d_fwd<T: Scalar>(
    feature: &[T],
    (ci, h, w): (usize, usize, usize),
    offsets: &[T],
    kernel: &[T],
    (co, k): (usize, usize),
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let taps = k * k;
    let plane = h * w;
    let mut out = vec![T::zero(); co * plane];
    let cols = parallel::map_indexed(plane, |p| {
        let (y, x) = (p / w, p % w);
        let mut sampled = vec![T::zero(); ci * taps];
        for m in 0..taps {
            let (ty, tx) = (m / k, m % k);
            let dy = offsets[(2 * m) * plane + p].to_f64();
            let dx = offsets[(2 * m + 1) * plane + p].to_f64();
            let py = y as f64 + ty as f64 - pad as f64 + dy;
            let px = x as f64 + tx as f64 - pad as f64 + dx;
            let vals = bilinear_value(feature, (ci, h, w), py, px);
            for (c, v) in vals.into_iter().enumerate() {
                sampled[c * taps + m] = v;
            }
        }
        let mut col = vec![T::zero(); co];
        for (o, cv) in col.iter_mut().enumerate() {
            let krow = &kernel[o * ci * taps..][..ci * taps];
            *cv = krow.iter().zip(&sampled).map(|(&kv, &sv)| kv * sv).sum();
        }
        col
    });
    for (p, col) in cols.iter().enumerate() {
        for (o, &v) in col.iter().enumerate() {
            out[o * plane + p] = v;
        }
    }
    out
}

/// Gradients of deformable conv w.r.t. feature, offsets and kernel.
/// Sequential: the feature scatter has data-dependent targets.
pub fn deform_conv2d_bwd<T: Scalar>(
    feature: &[T],
    (ci, h, w): (usize, usize, usize),
    offsets: &[T],
    kernel: &[T],
    (co, k): (usize, usize),
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pad = (k - 1) / 2;
    let taps = k * k;
    let plane = h * w;
    let mut dfeature = vec![T::zero(); ci * plane];
    let mut doffsets = vec![T::zero(); 2 * taps * plane];
    let mut dkernel = vec![T::zero(); co * ci * taps];
    for p in 0..plane {
        let (y, x) = (p / w, p % w);
        for m in 0..taps {
            let (ty, tx) = (m / k, m % k);
            let dy = offsets[(2 * m) * plane + p].to_f64();
            let dx = offsets[(2 * m + 1) * plane + p].to_f64();
            let py = y as f64 + ty as f64 - pad as f64 + dy;
            let px = x as f64 + tx as f64 - pad as f64 + dx;
            let vals = bilinear_value(feature, (ci, h, w), py, px);
            let pos_grads = bilinear_pos_grad(feature, (ci, h, w), py, px);
            // dsampled[c] = sum_o dout[o,p] * kernel[o,c,m]
            let mut dsampled = vec![T::zero(); ci];
            for o in 0..co {
                let g = dout[o * plane + p];
                for (c, ds) in dsampled.iter_mut().enumerate() {
                    *ds = *ds + g * kernel[(o * ci + c) * taps + m];
                    dkernel[(o * ci + c) * taps + m] =
                        dkernel[(o * ci + c) * taps + m] + g * vals[c];
                }
            }
            let mut gy = T::zero();
            let mut gx = T::zero();
            for (c, &ds) in dsampled.iter().enumerate() {
                let (py_g, px_g) = pos_grads[c];
                gy = gy + ds * py_g;
                gx = gx + ds * px_g;
            }
            doffsets[(2 * m) * plane + p] = gy;
            doffsets[(2 * m + 1) * plane + p] = gx;
            bilinear_scatter(&mut dfeature, (ci, h, w), py, px, &dsampled);
        }
    }
    (dfeature, doffsets, dkernel)
}

// ---------------------------------------------------------------------------
// softmax over the whole buffer
// ---------------------------------------------------------------------------

pub fn softmax_flat_fwd<T: Scalar>(input: &[T]) -> Vec<T> {
    let max = input.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = input.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_flat_bwd<T: Scalar>(output: &[T], dout: &[T]) -> Vec<T> {
    let dot: T = output.iter().zip(dout).map(|(&s, &g)| s * g).sum();
    output
        .iter()
        .zip(dout)
        .map(|(&s, &g)| s * (g - dot))
        .collect()
}

// ---------------------------------------------------------------------------
// quantization (round-half-away-from-zero after clamping)
// ---------------------------------------------------------------------------

pub fn quantize_fwd<T: Scalar>(input: &[T], lo: T, hi: T) -> Vec<T> {
    input.iter().map(|&v| v.max(lo).min(hi).round()).collect()
}

/// Surrogate derivative of the quantizer: the modified-clip factor
/// (2 on or outside the bounds, 1 strictly inside) times the round
/// override of 1.
pub fn quantize_surrogate_factor<T: Scalar>(x: T, lo: T, hi: T) -> T {
    if x <= lo || x >= hi {
        T::from_f64(2.0)
    } else {
        T::one()
    }
}
