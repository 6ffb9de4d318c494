//! Video volumes (C,T,H,W) and the synthetic moving-object scenes used
//! for desk-scale training and aliasing analysis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames-per-second as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArg(format!("fps {num}/{den}")));
        }
        Ok(Self { num, den })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// fps scaled by p/q, reduced.
    pub fn scaled(self, p: u32, q: u32) -> Result<Self> {
        let num = self.num as u64 * p as u64;
        let den = self.den as u64 * q as u64;
        let g = gcd(num, den);
        Fps::new((num / g) as u32, (den / g) as u32)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub const DEFAULT_FPS: Fps = Fps { num: 30, den: 1 };

/// A (C,T,H,W) volume with frame-rate and value-range metadata.
/// C must be 1 or 3.
#[derive(Debug, Clone)]
pub struct VideoVolume {
    pub data: Tensor<f32>,
    pub fps: Fps,
    pub value_range: [f32; 2],
}

impl VideoVolume {
    pub fn new(data: Tensor<f32>, fps: Fps) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "video volume must be (C,T,H,W), got {:?}",
                data.shape()
            )));
        }
        let c = data.shape()[0];
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("channel count must be 1 or 3, got {c}")));
        }
        Ok(Self { data, fps, value_range: [0.0, 255.0] })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Sprite texture for a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteKind {
    /// 2x2-px checker cells with two seeded colors.
    Checkerboard,
    /// Per-pixel seeded noise.
    RandomNoise,
    /// A full-height vertical strip with seeded per-column tones, so its
    /// xt profile carries streaks across the spatial spectrum.
    Bar,
}

/// A single object moving with uniform velocity over a constant background.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub sprite: SpriteKind,
    /// Sprite width in pixels (also its height, except for `Bar` which
    /// spans the full frame height).
    pub sprite_size: usize,
    /// (v_x, v_y) in pixels per frame.
    pub velocity: (f64, f64),
    pub background: f32,
    /// (T, H, W)
    pub extents: (usize, usize, usize),
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.extents;
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Scene(format!("empty extents {:?}", self.extents)));
        }
        if self.sprite_size == 0 {
            return Err(Error::Scene("zero sprite size".into()));
        }
        let (vx, vy) = self.velocity;
        if vx.abs() * t as f64 >= w as f64 || vy.abs() * t as f64 >= h as f64 {
            return Err(Error::Scene(format!(
                "velocity {:?} over {t} frames leaves the {w}x{h} frame",
                self.velocity
            )));
        }
        let (sw, sh) = self.sprite_dims();
        let span_x = sw as f64 + vx.abs() * (t - 1) as f64;
        let span_y = sh as f64 + vy.abs() * (t - 1) as f64;
        if span_x > w as f64 || span_y > h as f64 {
            return Err(Error::Scene(format!(
                "sprite {sw}x{sh} moving at {:?} does not fit in {w}x{h}",
                self.velocity
            )));
        }
        Ok(())
    }

    fn sprite_dims(&self) -> (usize, usize) {
        match self.sprite {
            SpriteKind::Bar => (self.sprite_size, self.extents.1),
            _ => (self.sprite_size, self.sprite_size),
        }
    }
}

/// Renders the scene: frame t holds the sprite translated by t*velocity
/// from its start position, sub-pixel placement via bilinear splatting.
/// Deterministic for a given seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<VideoVolume> {
    spec.validate()?;
    let (t_ext, h, w) = spec.extents;
    let (sw, sh) = spec.sprite_dims();
    let (vx, vy) = spec.velocity;
    let sprite = render_sprite(spec, sw, sh);

    // Start position centers the whole trajectory in the frame.
    let span_x = sw as f64 + vx.abs() * (t_ext - 1) as f64;
    let span_y = sh as f64 + vy.abs() * (t_ext - 1) as f64;
    let x0 = (w as f64 - span_x) / 2.0 - (vx * (t_ext - 1) as f64).min(0.0);
    let y0 = (h as f64 - span_y) / 2.0 - (vy * (t_ext - 1) as f64).min(0.0);

    let bg = spec.background;
    let mut data = vec![bg; 3 * t_ext * h * w];
    for t in 0..t_ext {
        let px = x0 + vx * t as f64;
        let py = y0 + vy * t as f64;
        let ix = px.floor();
        let iy = py.floor();
        let fx = px - ix;
        let fy = py - iy;
        for c in 0..3 {
            let frame = &mut data[(c * t_ext + t) * h * w..][..h * w];
            for sy in 0..sh {
                for sx in 0..sw {
                    let v = sprite[(c * sh + sy) * sw + sx] - bg;
                    // Four-corner splat of (sprite - background).
                    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                            let yy = iy as i64 + sy as i64 + dy;
                            let xx = ix as i64 + sx as i64 + dx;
                            let wgt = wy * wx;
                            if wgt == 0.0 {
                                continue;
                            }
                            if (0..h as i64).contains(&yy) && (0..w as i64).contains(&xx) {
                                frame[yy as usize * w + xx as usize] += (v as f64 * wgt) as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    VideoVolume::new(Tensor::new(vec![3, t_ext, h, w], data)?, DEFAULT_FPS)
}

fn render_sprite(spec: &SceneSpec, sw: usize, sh: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sprite = vec![0.0f32; 3 * sh * sw];
    match spec.sprite {
        SpriteKind::Checkerboard => {
            let a: [f32; 3] = std::array::from_fn(|_| rng.gen_range(160.0..240.0));
            let b: [f32; 3] = std::array::from_fn(|_| rng.gen_range(10.0..90.0));
            for c in 0..3 {
                for y in 0..sh {
                    for x in 0..sw {
                        let cell = ((y / 2) + (x / 2)) % 2 == 0;
                        sprite[(c * sh + y) * sw + x] = if cell { a[c] } else { b[c] };
                    }
                }
            }
        }
        SpriteKind::RandomNoise => {
            for v in sprite.iter_mut() {
                *v = rng.gen_range(0.0f32..256.0).floor().min(255.0);
            }
        }
        SpriteKind::Bar => {
            // Column stripes, constant along y: a dominant 3-px period
            // (spatial frequency 1/3, above the Nyquist limit of any 2x
            // subsampling) plus seeded jitter.
            for c in 0..3 {
                let phase: f64 = rng.gen_range(0.0..3.0);
                for x in 0..sw {
                    let carrier =
                        (2.0 * std::f64::consts::PI * (x as f64 + phase) / 3.0).cos();
                    let jitter: f64 = rng.gen_range(-30.0..30.0);
                    let tone = (128.0 + 90.0 * carrier + jitter).clamp(0.0, 255.0) as f32;
                    for y in 0..sh {
                        sprite[(c * sh + y) * sw + x] = tone;
                    }
                }
            }
        }
    }
    sprite
}

/// Which slice of the volume to extract: a fixed row gives the xt profile,
/// a fixed column the yt profile.
#[derive(Debug, Clone, Copy)]
pub enum ProfileAxis {
    Row(usize),
    Column(usize),
}

/// Extracts the (C, T, W) slice at a fixed row, or (C, T, H) at a fixed
/// column.
pub fn temporal_profile(v: &VideoVolume, axis: ProfileAxis) -> Result<Tensor<f32>> {
    let (c, t, h, w) = (v.channels(), v.frames(), v.height(), v.width());
    let data = v.data.data();
    match axis {
        ProfileAxis::Row(y) => {
            if y >= h {
                return Err(Error::InvalidArg(format!("row {y} out of height {h}")));
            }
            let mut out = Vec::with_capacity(c * t * w);
            for ci in 0..c {
                for ti in 0..t {
                    let row = &data[((ci * t + ti) * h + y) * w..][..w];
                    out.extend_from_slice(row);
                }
            }
            Tensor::new(vec![c, t, w], out)
        }
        ProfileAxis::Column(x) => {
            if x >= w {
                return Err(Error::InvalidArg(format!("column {x} out of width {w}")));
            }
            let mut out = Vec::with_capacity(c * t * h);
            for ci in 0..c {
                for ti in 0..t {
                    for yi in 0..h {
                        out.push(data[((ci * t + ti) * h + yi) * w + x]);
                    }
                }
            }
            Tensor::new(vec![c, t, h], out)
        }
    }
}
