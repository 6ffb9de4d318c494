//! Reconstruction quality metrics and the pixel-percentage storage law.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::VideoVolume;

/// 10*log10(peak^2 / MSE) over every element; +inf when MSE is 0.
pub fn psnr(a: &VideoVolume, b: &VideoVolume, peak: f64) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape(format!(
            "psnr shapes {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    let mse: f64 = a
        .data
        .data()
        .iter()
        .zip(b.data.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), computed per frame and channel over valid window
/// positions, averaged over everything.
pub fn ssim(a: &VideoVolume, b: &VideoVolume, peak: f64) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape(format!(
            "ssim shapes {:?} vs {:?}",
            a.data.shape(),
            b.data.shape()
        )));
    }
    let (c, t, h, w) = (a.channels(), a.frames(), a.height(), a.width());
    const WIN: usize = 11;
    if h < WIN || w < WIN {
        return Err(Error::Shape(format!("ssim needs frames >= 11x11, got {h}x{w}")));
    }
    let window = gaussian_window(WIN, 1.5);
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let mut total = 0.0;
    let mut count = 0usize;
    for ci in 0..c {
        for ti in 0..t {
            let off = (ci * t + ti) * h * w;
            let fa: Vec<f64> = a.data.data()[off..off + h * w].iter().map(|&v| v as f64).collect();
            let fb: Vec<f64> = b.data.data()[off..off + h * w].iter().map(|&v| v as f64).collect();
            let fa2: Vec<f64> = fa.iter().map(|&v| v * v).collect();
            let fb2: Vec<f64> = fb.iter().map(|&v| v * v).collect();
            let fab: Vec<f64> = fa.iter().zip(&fb).map(|(&x, &y)| x * y).collect();

            let mu_a = valid_filter(&fa, h, w, &window);
            let mu_b = valid_filter(&fb, h, w, &window);
            let m_a2 = valid_filter(&fa2, h, w, &window);
            let m_b2 = valid_filter(&fb2, h, w, &window);
            let m_ab = valid_filter(&fab, h, w, &window);

            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = m_a2[i] - ma * ma;
                let vb = m_b2[i] - mb * mb;
                let cov = m_ab[i] - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fraction of pixels kept when downsampling time by r and space by s:
/// 1/(r*s^2).
pub fn pixel_percentage(r: usize, s: usize) -> f64 {
    1.0 / (r as f64 * (s * s) as f64)
}

/// BT.601 luma conversion; identity for single-channel volumes.
pub fn to_luma(v: &VideoVolume) -> Result<VideoVolume> {
    if v.channels() == 1 {
        return Ok(v.clone());
    }
    let (t, h, w) = (v.frames(), v.height(), v.width());
    let d = v.data.data();
    let plane = t * h * w;
    let mut out = Vec::with_capacity(plane);
    for i in 0..plane {
        let y = 0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64;
        out.push(y as f32);
    }
    let mut vol = VideoVolume::new(Tensor::new(vec![1, t, h, w], out)?, v.fps)?;
    vol.value_range = v.value_range;
    Ok(vol)
}

fn gaussian_window(extent: usize, sigma: f64) -> Vec<f64> {
    let c = (extent / 2) as f64;
    let raw: Vec<f64> = (0..extent)
        .map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable valid-mode filtering with a symmetric 1D window.
fn valid_filter(data: &[f64], h: usize, w: usize, window: &[f64]) -> Vec<f64> {
    let k = window.len();
    let wv = w - k + 1;
    let hv = h - k + 1;
    // Rows first.
    let mut rows = vec![0.0; h * wv];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &wt) in window.iter().enumerate() {
                acc += wt * data[y * w + x + i];
            }
            rows[y * wv + x] = acc;
        }
    }
    let mut out = vec![0.0; hv * wv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &wt) in window.iter().enumerate() {
                acc += wt * rows[(y + i) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}
