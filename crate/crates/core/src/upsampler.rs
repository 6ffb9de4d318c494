//! Space-time reconstruction network: feature lifting, deformable
//! temporal modeling (DTM), a residual-dense 3D trunk, space-time
//! pixel-shuffle, and a global trilinear skip.
//!
//! The network output is `trilinear(input) + F(input)`, so a model whose
//! output stage is zero-initialized starts exactly at the trilinear
//! baseline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::VideoVolume;

/// Scale factors and architecture of the upsampler.
#[derive(Debug, Clone, PartialEq)]
pub struct UpscaleConfig {
    /// Temporal factor numerator (frames out per `r_den` frames in).
    pub r_num: usize,
    /// Temporal factor denominator; input length must divide by it.
    pub r_den: usize,
    /// Spatial factor.
    pub s: usize,
    /// Input/output color channels (1 or 3).
    pub channels: usize,
    /// Feature width.
    pub features: usize,
    pub rdb_count: usize,
    pub rdb_layers: usize,
    pub growth: usize,
    /// Residual scaling of each dense block's fusion output.
    pub beta: f64,
    /// Deformable temporal modeling on/off (off leaves only the trunk).
    pub use_dtm: bool,
    /// Deformable kernel size (one offset pair per tap).
    pub deform_kernel: usize,
}

impl UpscaleConfig {
    /// Desk-scale default: 16 features, 2 residual dense blocks of 3
    /// layers, growth 8, beta 0.2.
    pub fn toy(r_num: usize, r_den: usize, s: usize, channels: usize) -> Self {
        Self {
            r_num,
            r_den,
            s,
            channels,
            features: 16,
            rdb_count: 2,
            rdb_layers: 3,
            growth: 8,
            beta: 0.2,
            use_dtm: true,
            deform_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_num == 0 || self.r_den == 0 || self.s == 0 {
            return Err(Error::InvalidArg(format!(
                "scale factors {}/{} x{}",
                self.r_num, self.r_den, self.s
            )));
        }
        if gcd(self.r_num, self.r_den) != 1 {
            return Err(Error::InvalidArg(format!(
                "temporal ratio {}/{} must be in lowest terms",
                self.r_num, self.r_den
            )));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::InvalidArg(format!("channels {}", self.channels)));
        }
        if self.features == 0 || self.growth == 0 || self.deform_kernel % 2 == 0 {
            return Err(Error::InvalidArg("bad architecture parameters".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidArg(format!("beta {} outside (0,1]", self.beta)));
        }
        Ok(())
    }

    /// Channels the output conv must produce for the shuffle.
    pub fn shuffle_channels(&self) -> usize {
        self.r_num * self.s * self.s * self.channels
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Nominal full-scale pixel value; the network branch normalizes by it.
pub const VALUE_SCALE: f64 = 255.0;

/// Direction of a DTM propagation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Named parameter set of the upsampler. The map order is the checkpoint
/// order; `beta` is carried as a tensor but held fixed during training.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArg(format!("missing parameter {name:?}")))
    }

    /// Zeroes the output stage so the model reproduces the trilinear
    /// baseline exactly.
    pub fn zero_output_stage(&mut self) {
        for name in ["out_conv.w", "out_conv.b"] {
            if let Some(t) = self.tensors.get(name) {
                self.tensors.insert(name.into(), Tensor::zeros(t.shape()));
            }
        }
    }
}

/// Expected parameter shapes for a configuration, in name order.
pub fn parameter_shapes(cfg: &UpscaleConfig) -> Vec<(String, Vec<usize>)> {
    let f = cfg.features;
    let c = cfg.channels;
    let k = cfg.deform_kernel;
    let taps2 = 2 * k * k;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("beta".into(), vec![1]),
        ("in_conv.w".into(), vec![f, c, 3, 3, 3]),
        ("in_conv.b".into(), vec![f]),
        ("out_conv.w".into(), vec![cfg.shuffle_channels(), f, 3, 3, 3]),
        ("out_conv.b".into(), vec![cfg.shuffle_channels()]),
    ];
    if cfg.use_dtm {
        for dir in [Direction::Forward, Direction::Backward] {
            let d = dir.tag();
            out.push((format!("dtm.{d}.offset.w"), vec![taps2, 2 * f, 1, 3, 3]));
            out.push((format!("dtm.{d}.offset.b"), vec![taps2]));
            out.push((format!("dtm.{d}.deform.w"), vec![f, f, k, k]));
            out.push((format!("dtm.{d}.gates.w"), vec![4 * f, 3 * f, 1, 3, 3]));
            out.push((format!("dtm.{d}.gates.b"), vec![4 * f]));
        }
        out.push(("dtm.blend_f.w".into(), vec![f, f, 1, 1, 1]));
        out.push(("dtm.blend_b.w".into(), vec![f, f, 1, 1, 1]));
    }
    for b in 0..cfg.rdb_count {
        for l in 0..cfg.rdb_layers {
            out.push((
                format!("rdb{b}.conv{l}.w"),
                vec![cfg.growth, f + l * cfg.growth, 3, 3, 3],
            ));
            out.push((format!("rdb{b}.conv{l}.b"), vec![cfg.growth]));
        }
        out.push((
            format!("rdb{b}.fuse.w"),
            vec![f, f + cfg.rdb_layers * cfg.growth, 1, 1, 1],
        ));
        out.push((format!("rdb{b}.fuse.b"), vec![f]));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Seeded initialization: He-uniform conv weights, zero biases, identity
/// halves for the blend kernels, and a zero output stage (training starts
/// from the trilinear baseline).
pub fn init_params(cfg: &UpscaleConfig, seed: u64) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in parameter_shapes(cfg) {
        let tensor = if name == "beta" {
            Tensor::new(vec![1], vec![cfg.beta as f32])?
        } else if name.starts_with("out_conv") {
            Tensor::zeros(&shape)
        } else if name.starts_with("dtm.blend") {
            let f = cfg.features;
            let mut data = vec![0.0f32; f * f];
            for i in 0..f {
                data[i * f + i] = 0.5;
            }
            Tensor::new(shape.clone(), data)?
        } else if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.clone(), data)?
        };
        tensors.insert(name, tensor);
    }
    Ok(ModelParams { tensors })
}

/// Registers every parameter on the tape as a leaf (trainable) except
/// `beta`, which enters as a constant.
pub fn params_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> BTreeMap<String, NodeId> {
    params
        .tensors
        .iter()
        .map(|(name, tensor)| {
            let node = if trainable && name != "beta" {
                tape.leaf(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            (name.clone(), node)
        })
        .collect()
}

struct ParamNodes<'a, T: Scalar> {
    tape: std::marker::PhantomData<T>,
    nodes: &'a BTreeMap<String, NodeId>,
}

impl<'a, T: Scalar> ParamNodes<'a, T> {
    fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArg(format!("missing parameter node {name:?}")))
    }
}

/// One ConvLSTM step: gates from a 3x3 conv over [input, hidden], then
/// the usual cell update. `input` is (Ci,1,H,W), state tensors (F,1,H,W),
/// `gates_w` is (4F, Ci+F, 1, 3, 3).
pub fn build_convlstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    input: NodeId,
    hidden: NodeId,
    cell: NodeId,
    gates_w: NodeId,
    gates_b: NodeId,
) -> Result<(NodeId, NodeId)> {
    let f = tape.value(hidden).shape()[0];
    let stacked = tape.concat(&[input, hidden], 0)?;
    let pre = tape.conv3d(stacked, gates_w, (1, 1, 1))?;
    let pre = tape.add_channel_bias(pre, gates_b)?;
    let i_raw = tape.slice(pre, 0, 0, f)?;
    let f_raw = tape.slice(pre, 0, f, f)?;
    let o_raw = tape.slice(pre, 0, 2 * f, f)?;
    let g_raw = tape.slice(pre, 0, 3 * f, f)?;
    let i_g = tape.sigmoid(i_raw);
    let f_g = tape.sigmoid(f_raw);
    let o_g = tape.sigmoid(o_raw);
    let g_g = tape.tanh(g_raw);
    let keep = tape.mul(f_g, cell)?;
    let write = tape.mul(i_g, g_g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o_g, c_act)?;
    Ok((h_new, c_new))
}

/// One DTM propagation direction over per-frame features (each
/// (F,1,H,W)): offsets from the previous refined state and the current
/// frame, deformable alignment of the previous state, then a ConvLSTM
/// refinement. Returns the refined sequence in input order.
pub fn build_dtm_pass<T: Scalar>(
    tape: &mut Tape<T>,
    frames: &[NodeId],
    direction: Direction,
    nodes: &BTreeMap<String, NodeId>,
    cfg: &UpscaleConfig,
) -> Result<Vec<NodeId>> {
    if frames.is_empty() {
        return Err(Error::Shape("DTM needs a nonempty sequence".into()));
    }
    let p = ParamNodes::<T> { tape: std::marker::PhantomData, nodes };
    let d = direction.tag();
    let offset_w = p.get(&format!("dtm.{d}.offset.w"))?;
    let offset_b = p.get(&format!("dtm.{d}.offset.b"))?;
    let deform_w = p.get(&format!("dtm.{d}.deform.w"))?;
    let gates_w = p.get(&format!("dtm.{d}.gates.w"))?;
    let gates_b = p.get(&format!("dtm.{d}.gates.b"))?;

    let shape = tape.value(frames[0]).shape().to_vec();
    let (f, h, w) = (shape[0], shape[2], shape[3]);
    let mut h_prev = tape.constant(Tensor::zeros(&[f, 1, h, w]));
    let mut c_prev = tape.constant(Tensor::zeros(&[f, 1, h, w]));

    let order: Vec<usize> = match direction {
        Direction::Forward => (0..frames.len()).collect(),
        Direction::Backward => (0..frames.len()).rev().collect(),
    };
    let mut refined = vec![None; frames.len()];
    for idx in order {
        let x = frames[idx];
        if tape.value(x).shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "DTM frame {idx} has shape {:?}, expected {shape:?}",
                tape.value(x).shape()
            )));
        }
        // Offsets from (previous refined, current).
        let pair = tape.concat(&[h_prev, x], 0)?;
        let off = tape.conv3d(pair, offset_w, (1, 1, 1))?;
        let off = tape.add_channel_bias(off, offset_b)?;
        // Deformable alignment of the previous refined feature.
        let k = cfg.deform_kernel;
        let prev3 = tape.reshape(h_prev, vec![f, h, w])?;
        let off3 = tape.reshape(off, vec![2 * k * k, h, w])?;
        let aligned3 = tape.deform_conv2d(prev3, off3, deform_w)?;
        let aligned = tape.reshape(aligned3, vec![f, 1, h, w])?;
        // Refine with the ConvLSTM cell on (current, aligned).
        let cell_in = tape.concat(&[x, aligned], 0)?;
        let (h_new, c_new) =
            build_convlstm_cell(tape, cell_in, h_prev, c_prev, gates_w, gates_b)?;
        refined[idx] = Some(h_new);
        h_prev = h_new;
        c_prev = c_new;
    }
    Ok(refined.into_iter().map(|r| r.expect("all frames refined")).collect())
}

/// Bidirectional DTM: forward and backward passes blended per frame by
/// the learned 1x1 kernels.
pub fn build_dtm_bidirectional<T: Scalar>(
    tape: &mut Tape<T>,
    frames: &[NodeId],
    nodes: &BTreeMap<String, NodeId>,
    cfg: &UpscaleConfig,
) -> Result<Vec<NodeId>> {
    let p = ParamNodes::<T> { tape: std::marker::PhantomData, nodes };
    let blend_f = p.get("dtm.blend_f.w")?;
    let blend_b = p.get("dtm.blend_b.w")?;
    let fwd = build_dtm_pass(tape, frames, Direction::Forward, nodes, cfg)?;
    let bwd = build_dtm_pass(tape, frames, Direction::Backward, nodes, cfg)?;
    fwd.into_iter()
        .zip(bwd)
        .map(|(rf, rb)| {
            let a = tape.conv3d(rf, blend_f, (1, 1, 1))?;
            let b = tape.conv3d(rb, blend_b, (1, 1, 1))?;
            tape.add(a, b)
        })
        .collect()
}

/// Residual dense block: densely concatenated 3x3x3 convs with leaky-ReLU,
/// a 1x1x1 fusion, and a beta-scaled residual connection.
fn build_rdb<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    block: usize,
    nodes: &BTreeMap<String, NodeId>,
    cfg: &UpscaleConfig,
) -> Result<NodeId> {
    let p = ParamNodes::<T> { tape: std::marker::PhantomData, nodes };
    let slope = T::from_f64(0.1);
    let mut feats = vec![x];
    for l in 0..cfg.rdb_layers {
        let inp = if feats.len() == 1 { feats[0] } else { tape.concat(&feats, 0)? };
        let w = p.get(&format!("rdb{block}.conv{l}.w"))?;
        let b = p.get(&format!("rdb{block}.conv{l}.b"))?;
        let y = tape.conv3d(inp, w, (1, 1, 1))?;
        let y = tape.add_channel_bias(y, b)?;
        feats.push(tape.leaky_relu(y, slope));
    }
    let cat = tape.concat(&feats, 0)?;
    let w = p.get(&format!("rdb{block}.fuse.w"))?;
    let b = p.get(&format!("rdb{block}.fuse.b"))?;
    let fused = tape.conv3d(cat, w, (1, 1, 1))?;
    let fused = tape.add_channel_bias(fused, b)?;
    let beta = tape.value(p.get("beta")?).data()[0];
    let scaled = tape.scale(fused, beta);
    tape.add(x, scaled)
}

/// The residual-dense reconstruction trunk.
pub fn build_rdb_trunk<T: Scalar>(
    tape: &mut Tape<T>,
    mut x: NodeId,
    nodes: &BTreeMap<String, NodeId>,
    cfg: &UpscaleConfig,
) -> Result<NodeId> {
    for block in 0..cfg.rdb_count {
        x = build_rdb(tape, x, block, nodes, cfg)?;
    }
    Ok(x)
}

/// Full upsampler graph on a tape: input conv, optional bidirectional DTM,
/// RDB trunk, output conv (temporal stride `r_den` groups frames for
/// rational ratios), space-time shuffle, plus the trilinear skip.
pub fn build_upscale<T: Scalar>(
    tape: &mut Tape<T>,
    input: NodeId,
    nodes: &BTreeMap<String, NodeId>,
    cfg: &UpscaleConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let ishape = tape.value(input).shape().to_vec();
    if ishape.len() != 4 || ishape[0] != cfg.channels {
        return Err(Error::Shape(format!(
            "upscale input {ishape:?} does not match {} channels",
            cfg.channels
        )));
    }
    let n = ishape[1];
    if n % cfg.r_den != 0 {
        return Err(Error::Shape(format!(
            "sequence length {n} not divisible by temporal denominator {}",
            cfg.r_den
        )));
    }
    let p = ParamNodes::<T> { tape: std::marker::PhantomData, nodes };
    let (h, w) = (ishape[2], ishape[3]);
    let out_t = n * cfg.r_num / cfg.r_den;

    // The network branch works on unit-range values so the tanh-bounded
    // temporal features match the residual scale; the skip stays in raw
    // units, keeping the zero-network case exactly the trilinear baseline.
    let full = T::from_f64(VALUE_SCALE);
    let unit = tape.scale(input, T::one() / full);
    let mut feat = tape.conv3d(unit, p.get("in_conv.w")?, (1, 1, 1))?;
    feat = tape.add_channel_bias(feat, p.get("in_conv.b")?)?;

    if cfg.use_dtm {
        let frames: Vec<NodeId> = (0..n)
            .map(|i| tape.slice(feat, 1, i, 1))
            .collect::<Result<_>>()?;
        let refined = build_dtm_bidirectional(tape, &frames, nodes, cfg)?;
        feat = if refined.len() == 1 { refined[0] } else { tape.concat(&refined, 1)? };
    }

    let trunk = build_rdb_trunk(tape, feat, nodes, cfg)?;
    let mut out = tape.conv3d(trunk, p.get("out_conv.w")?, (cfg.r_den, 1, 1))?;
    out = tape.add_channel_bias(out, p.get("out_conv.b")?)?;
    let shuffled = tape.space_time_shuffle(out, cfg.r_num, cfg.s)?;
    let residue = tape.scale(shuffled, full);

    let skip = tape.resample_linear(input, [out_t, cfg.s * h, cfg.s * w])?;
    tape.add(residue, skip)
}

/// (r*s*s*C, N, H, W) -> (C, r*N, s*H, s*W), pure tensor form.
pub fn space_time_shuffle<T: Scalar>(x: &Tensor<T>, r: usize, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || r == 0 || s == 0 || sh[0] % (r * s * s) != 0 {
        return Err(Error::Shape(format!("shuffle of {sh:?} by r={r}, s={s}")));
    }
    let dims = (sh[0], sh[1], sh[2], sh[3]);
    let (data, oshape) = kernels::shuffle_fwd(x.data(), dims, r, s);
    Tensor::new(oshape.to_vec(), data)
}

/// Exact inverse of [`space_time_shuffle`].
pub fn space_time_unshuffle<T: Scalar>(y: &Tensor<T>, r: usize, s: usize) -> Result<Tensor<T>> {
    let sh = y.shape();
    if sh.len() != 4 || r == 0 || s == 0 || sh[1] % r != 0 || sh[2] % s != 0 || sh[3] % s != 0 {
        return Err(Error::Shape(format!("unshuffle of {sh:?} by r={r}, s={s}")));
    }
    let dims = (sh[0] * r * s * s, sh[1] / r, sh[2] / s, sh[3] / s);
    let data = kernels::shuffle_inv(y.data(), dims, r, s);
    Tensor::new(vec![dims.0, dims.1, dims.2, dims.3], data)
}

/// Align-corners-false linear interpolation of (C,T,H,W) to
/// (C, T*p/q, s*H, s*W).
pub fn trilinear_upscale<T: Scalar>(
    x: &Tensor<T>,
    (p, q): (usize, usize),
    s: usize,
) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || p == 0 || q == 0 || s == 0 {
        return Err(Error::Shape(format!("trilinear upscale of {sh:?} by {p}/{q} x{s}")));
    }
    if (sh[1] * p) % q != 0 {
        return Err(Error::Shape(format!(
            "sequence length {} not divisible for ratio {p}/{q}",
            sh[1]
        )));
    }
    let target = [sh[1] * p / q, s * sh[2], s * sh[3]];
    let shape4 = [sh[0], sh[1], sh[2], sh[3]];
    let (d1, s1) = kernels::resample_axis_fwd(x.data(), shape4, 1, target[0]);
    let (d2, s2) = kernels::resample_axis_fwd(&d1, s1, 2, target[1]);
    let (d3, s3) = kernels::resample_axis_fwd(&d2, s2, 3, target[2]);
    Tensor::new(s3.to_vec(), d3)
}

/// Runs the upsampler on a volume (inference path).
pub fn upscale(
    v_down: &VideoVolume,
    params: &ModelParams<f32>,
    cfg: &UpscaleConfig,
) -> Result<VideoVolume> {
    let mut tape: Tape<f32> = Tape::new();
    let input = tape.constant(v_down.data.clone());
    let nodes = params_on_tape(&mut tape, params, false);
    let out = build_upscale(&mut tape, input, &nodes, cfg)?;
    let fps = v_down.fps.scaled(cfg.r_num as u32, cfg.r_den as u32)?;
    let mut vol = VideoVolume::new(tape.value(out).clone(), fps)?;
    vol.value_range = v_down.value_range;
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DEFAULT_FPS;

    fn tiny_cfg() -> UpscaleConfig {
        UpscaleConfig {
            features: 4,
            rdb_count: 1,
            rdb_layers: 2,
            growth: 3,
            ..UpscaleConfig::toy(2, 1, 2, 1)
        }
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shuffle_round_trip_and_shape_law() {
        let x = random_tensor(&[12, 2, 3, 4], 1);
        let y = space_time_shuffle(&x, 3, 2).unwrap();
        assert_eq!(y.shape(), &[1, 6, 6, 8]);
        let back = space_time_unshuffle(&y, 3, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn trilinear_examples() {
        let c = Tensor::full(&[1, 2, 3, 3], 9.0f32);
        let up = trilinear_upscale(&c, (2, 1), 2).unwrap();
        assert_eq!(up.shape(), &[1, 4, 6, 6]);
        assert!(up.data().iter().all(|&v| v == 9.0));

        let x = random_tensor(&[3, 2, 4, 4], 2);
        let same = trilinear_upscale(&x, (1, 1), 1).unwrap();
        assert_eq!(same.data(), x.data());

        let seven = Tensor::full(&[1, 7, 2, 2], 1.0f32);
        assert!(trilinear_upscale(&seven, (6, 5), 1).is_err());
    }

    #[test]
    fn zero_output_stage_reproduces_trilinear_exactly() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3).unwrap(); // out stage zero by init
        let input = Tensor::new(
            vec![1, 4, 6, 6],
            (0..144).map(|i| (i % 97) as f32 * 2.5).collect(),
        )
        .unwrap();
        let vol = VideoVolume::new(input.clone(), DEFAULT_FPS).unwrap();
        let out = upscale(&vol, &params, &cfg).unwrap();
        let skip = trilinear_upscale(&input, (2, 1), 2).unwrap();
        let a: Vec<u32> = out.data.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = skip.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn integer_shape_law_and_fps() {
        let cfg = tiny_cfg(); // r=2, s=2
        let params = init_params(&cfg, 4).unwrap();
        let vol = VideoVolume::new(Tensor::full(&[1, 4, 6, 6], 1.0f32), DEFAULT_FPS).unwrap();
        let out = upscale(&vol, &params, &cfg).unwrap();
        assert_eq!(out.data.shape(), &[1, 8, 12, 12]);
        assert_eq!((out.fps.num, out.fps.den), (60, 1));
    }

    #[test]
    fn rational_ratio_six_fifths() {
        let mut cfg = UpscaleConfig::toy(6, 5, 1, 1);
        cfg.features = 4;
        cfg.rdb_count = 1;
        cfg.rdb_layers = 1;
        cfg.growth = 3;
        let params = init_params(&cfg, 5).unwrap();
        let mut vol = VideoVolume::new(Tensor::full(&[1, 5, 4, 4], 3.0f32), DEFAULT_FPS).unwrap();
        vol.fps = crate::volume::Fps::new(20, 1).unwrap();
        let out = upscale(&vol, &params, &cfg).unwrap();
        assert_eq!(out.data.shape(), &[1, 6, 4, 4]);
        assert_eq!((out.fps.num, out.fps.den), (24, 1));

        let bad = VideoVolume::new(Tensor::full(&[1, 7, 4, 4], 3.0f32), DEFAULT_FPS).unwrap();
        assert!(upscale(&bad, &params, &cfg).is_err());
    }

    #[test]
    fn dtm_zero_offsets_identity_kernel_aligns_previous_state() {
        // With zero offsets and an identity deformable kernel, the aligned
        // feature is exactly the previous refined feature.
        let f = 3;
        let mut tape: Tape<f32> = Tape::new();
        let prev = tape.constant(random_tensor(&[f, 5, 5], 7));
        let offsets = tape.constant(Tensor::zeros(&[18, 5, 5]));
        let mut kdata = vec![0.0f32; f * f * 9];
        for o in 0..f {
            kdata[(o * f + o) * 9 + 4] = 1.0; // center tap, matching channel
        }
        let kernel = tape.constant(Tensor::new(vec![f, f, 3, 3], kdata).unwrap());
        let aligned = tape.deform_conv2d(prev, offsets, kernel).unwrap();
        assert_eq!(tape.value(aligned).data(), tape.value(prev).data());
    }

    #[test]
    fn dtm_single_frame_and_shape_preservation() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 8).unwrap().cast::<f32>();
        let mut tape: Tape<f32> = Tape::new();
        let nodes = params_on_tape(&mut tape, &params, false);
        let one = tape.constant(random_tensor(&[4, 1, 5, 5], 9));
        let out = build_dtm_pass(&mut tape, &[one], Direction::Forward, &nodes, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out[0]).shape(), &[4, 1, 5, 5]);

        let frames: Vec<NodeId> = (0..3)
            .map(|i| tape.constant(random_tensor(&[4, 1, 5, 5], 20 + i)))
            .collect();
        let refined = build_dtm_bidirectional(&mut tape, &frames, &nodes, &cfg).unwrap();
        assert_eq!(refined.len(), 3);
        for r in &refined {
            assert_eq!(tape.value(*r).shape(), &[4, 1, 5, 5]);
        }
    }

    #[test]
    fn blend_identity_and_zero_selects_forward_pass() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, 10).unwrap();
        let f = cfg.features;
        let mut ident = vec![0.0f32; f * f];
        for i in 0..f {
            ident[i * f + i] = 1.0;
        }
        params
            .tensors
            .insert("dtm.blend_f.w".into(), Tensor::new(vec![f, f, 1, 1, 1], ident).unwrap());
        params
            .tensors
            .insert("dtm.blend_b.w".into(), Tensor::zeros(&[f, f, 1, 1, 1]));

        let mut tape: Tape<f32> = Tape::new();
        let nodes = params_on_tape(&mut tape, &params, false);
        let frames: Vec<NodeId> = (0..3)
            .map(|i| tape.constant(random_tensor(&[f, 1, 6, 6], 30 + i)))
            .collect();
        let fwd = build_dtm_pass(&mut tape, &frames, Direction::Forward, &nodes, &cfg).unwrap();
        let blended = build_dtm_bidirectional(&mut tape, &frames, &nodes, &cfg).unwrap();
        for (a, b) in fwd.iter().zip(&blended) {
            let x = tape.value(*a).data();
            let y = tape.value(*b).data();
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn time_reversal_mirrors_output_with_shared_parameters() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, 11).unwrap();
        // Share direction parameters and make the blend symmetric.
        for field in ["offset.w", "offset.b", "deform.w", "gates.w", "gates.b"] {
            let fwd = params.tensors[&format!("dtm.fwd.{field}")].clone();
            params.tensors.insert(format!("dtm.bwd.{field}"), fwd);
        }
        let wf = params.tensors["dtm.blend_f.w"].clone();
        params.tensors.insert("dtm.blend_b.w".into(), wf);

        let mut tape: Tape<f32> = Tape::new();
        let nodes = params_on_tape(&mut tape, &params, false);
        let frames: Vec<NodeId> = (0..4)
            .map(|i| tape.constant(random_tensor(&[4, 1, 5, 5], 40 + i)))
            .collect();
        let reversed: Vec<NodeId> = frames.iter().rev().copied().collect();
        let out = build_dtm_bidirectional(&mut tape, &frames, &nodes, &cfg).unwrap();
        let out_rev = build_dtm_bidirectional(&mut tape, &reversed, &nodes, &cfg).unwrap();
        for (i, r) in out_rev.iter().enumerate() {
            let mirrored = tape.value(out[out.len() - 1 - i]).data();
            let got = tape.value(*r).data();
            for (a, b) in mirrored.iter().zip(got) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b} at frame {i}");
            }
        }
    }

    #[test]
    fn rdb_zero_weights_and_zero_beta_are_identity() {
        let cfg = tiny_cfg();
        let x = random_tensor(&[4, 2, 5, 5], 50);

        // All conv weights zero -> fusion output zero -> identity.
        let mut params = init_params(&cfg, 12).unwrap();
        for (name, t) in params.tensors.clone() {
            if name.starts_with("rdb") {
                params.tensors.insert(name, Tensor::zeros(t.shape()));
            }
        }
        let mut tape: Tape<f32> = Tape::new();
        let nodes = params_on_tape(&mut tape, &params, false);
        let xn = tape.constant(x.clone());
        let y = build_rdb_trunk(&mut tape, xn, &nodes, &cfg).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        // beta = 0 -> identity regardless of weights. (Zero is outside the
        // valid config range, so drive the tensor directly.)
        let mut params2 = init_params(&cfg, 13).unwrap();
        params2.tensors.insert("beta".into(), Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut tape2: Tape<f32> = Tape::new();
        let nodes2 = params_on_tape(&mut tape2, &params2, false);
        let xn2 = tape2.constant(x.clone());
        let y2 = build_rdb_trunk(&mut tape2, xn2, &nodes2, &cfg).unwrap();
        assert_eq!(tape2.value(y2).data(), x.data());
    }

    #[test]
    fn rdb_matches_hand_unrolled_composition() {
        let mut cfg = tiny_cfg();
        cfg.rdb_count = 1;
        let params = init_params(&cfg, 14).unwrap();
        let x = random_tensor(&[4, 2, 5, 5], 51);

        let mut tape: Tape<f32> = Tape::new();
        let nodes = params_on_tape(&mut tape, &params, false);
        let xn = tape.constant(x.clone());
        let trunk = build_rdb_trunk(&mut tape, xn, &nodes, &cfg).unwrap();

        // Hand-unrolled: conv0 -> lrelu -> conv1(concat) -> lrelu -> fuse -> x + beta*f
        let mut t2: Tape<f32> = Tape::new();
        let n2 = params_on_tape(&mut t2, &params, false);
        let x2 = t2.constant(x);
        let w0 = n2["rdb0.conv0.w"];
        let b0 = n2["rdb0.conv0.b"];
        let y0 = t2.conv3d(x2, w0, (1, 1, 1)).unwrap();
        let y0 = t2.add_channel_bias(y0, b0).unwrap();
        let y0 = t2.leaky_relu(y0, 0.1);
        let cat1 = t2.concat(&[x2, y0], 0).unwrap();
        let y1 = t2.conv3d(cat1, n2["rdb0.conv1.w"], (1, 1, 1)).unwrap();
        let y1 = t2.add_channel_bias(y1, n2["rdb0.conv1.b"]).unwrap();
        let y1 = t2.leaky_relu(y1, 0.1);
        let cat2 = t2.concat(&[x2, y0, y1], 0).unwrap();
        let fused = t2.conv3d(cat2, n2["rdb0.fuse.w"], (1, 1, 1)).unwrap();
        let fused = t2.add_channel_bias(fused, n2["rdb0.fuse.b"]).unwrap();
        let scaled = t2.scale(fused, 0.2);
        let expect = t2.add(x2, scaled).unwrap();

        for (a, b) in tape.value(trunk).data().iter().zip(t2.value(expect).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(UpscaleConfig::toy(2, 1, 2, 3).validate().is_ok());
        assert!(UpscaleConfig::toy(6, 4, 1, 3).validate().is_err()); // not coprime
        let mut bad = UpscaleConfig::toy(2, 1, 2, 3);
        bad.beta = 0.0;
        assert!(bad.validate().is_err());
        bad.beta = 1.5;
        assert!(bad.validate().is_err());
    }

    use crate::autodiff::NodeId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}
