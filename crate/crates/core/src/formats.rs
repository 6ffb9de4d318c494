//! On-disk interchange: P6 frame directories and the raw .stv container.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::ByteReader;
use crate::volume::{Fps, VideoVolume, DEFAULT_FPS};

const STV_MAGIC: &[u8; 4] = b"STV1";

/// Element type of an .stv payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StvDtype {
    U8,
    F32,
}

impl StvDtype {
    fn code(self) -> u32 {
        match self {
            StvDtype::U8 => 0,
            StvDtype::F32 => 1,
        }
    }
}

fn round_clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Writes the volume: magic "STV1", u32 dtype code (0=u8, 1=f32), u32
/// C,T,H,W, u32 fps num/den, then the raw row-major payload. u8 payloads
/// are rounded and clamped to [0,255].
pub fn write_stv(v: &VideoVolume, path: &Path, dtype: StvDtype) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(STV_MAGIC);
    buf.extend_from_slice(&dtype.code().to_le_bytes());
    for &e in v.data.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.extend_from_slice(&v.fps.num.to_le_bytes());
    buf.extend_from_slice(&v.fps.den.to_le_bytes());
    match dtype {
        StvDtype::U8 => buf.extend(v.data.data().iter().map(|&x| round_clamp_u8(x))),
        StvDtype::F32 => {
            for &x in v.data.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_stv(path: &Path) -> Result<VideoVolume> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4)? != STV_MAGIC.as_slice() {
        return Err(Error::Format("bad .stv magic".into()));
    }
    let dtype = match r.u32()? {
        0 => StvDtype::U8,
        1 => StvDtype::F32,
        other => return Err(Error::Format(format!("unknown .stv dtype code {other}"))),
    };
    let shape: Vec<usize> = (0..4).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?
        .into_iter()
        .map(|e| e as usize)
        .collect();
    let fps = Fps::new(r.u32()?, r.u32()?)?;
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = match dtype {
        StvDtype::U8 => r.take(numel)?.iter().map(|&b| b as f32).collect(),
        StvDtype::F32 => r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after .stv payload".into()));
    }
    VideoVolume::new(Tensor::new(shape, data)?, fps)
}

/// Writes one binary P6 file per frame, named 0000.ppm, 0001.ppm, ...
/// Values are rounded and clamped to [0,255]; single-channel volumes are
/// replicated to gray RGB.
pub fn save_frames(v: &VideoVolume, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (c, t, h, w) = (v.channels(), v.frames(), v.height(), v.width());
    let data = v.data.data();
    for ti in 0..t {
        let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
        buf.reserve(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let ci = if c == 3 { ch } else { 0 };
                    buf.push(round_clamp_u8(data[((ci * t + ti) * h + y) * w + x]));
                }
            }
        }
        std::fs::write(dir.join(format!("{ti:04}.ppm")), &buf)?;
    }
    Ok(())
}

/// Loads a directory of numerically named P6 files into a (3,T,H,W) volume,
/// ascending numeric order.
pub fn load_frames(dir: &Path) -> Result<VideoVolume> {
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("unreadable file name {path:?}")))?;
        let index: u64 = stem
            .parse()
            .map_err(|_| Error::Format(format!("frame name {stem:?} is not numeric")))?;
        entries.push((index, path));
    }
    if entries.is_empty() {
        return Err(Error::Format(format!("no frames in {dir:?}")));
    }
    entries.sort_by_key(|(i, _)| *i);

    let mut dims: Option<(usize, usize)> = None;
    let mut frames: Vec<Vec<u8>> = Vec::with_capacity(entries.len());
    for (_, path) in &entries {
        let bytes = std::fs::read(path)?;
        let (w, h, pixels) = parse_p6(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Format(format!(
                    "frame {} is {w}x{h}, expected {}x{}",
                    path.display(),
                    d.0,
                    d.1
                )))
            }
            _ => {}
        }
        frames.push(pixels);
    }
    let (w, h) = dims.expect("at least one frame");
    let t = frames.len();
    let mut data = vec![0.0f32; 3 * t * h * w];
    for (ti, pixels) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[((c * t + ti) * h + y) * w + x] = pixels[(y * w + x) * 3 + c] as f32;
                }
            }
        }
    }
    VideoVolume::new(Tensor::new(vec![3, t, h, w], data)?, DEFAULT_FPS)
}

/// Parses a binary P6 header (whitespace and '#' comments allowed) with
/// maxval 255, returning (width, height, interleaved RGB bytes).
fn parse_p6(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut at = 0;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        // Skip whitespace and comments.
        loop {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < bytes.len() && bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
            } else {
                break;
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err("truncated header".into());
        }
        String::from_utf8(bytes[start..at].to_vec()).map_err(|_| "non-ASCII header".into())
    };

    if token(bytes)? != "P6" {
        return Err("not a P6 file".into());
    }
    let w: usize = token(bytes)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // Exactly one whitespace byte separates header from payload.
    at += 1;
    let need = 3 * w * h;
    if bytes.len() < at + need {
        return Err("truncated pixel data".into());
    }
    Ok((w, h, bytes[at..at + need].to_vec()))
}
