//! Sliding-window frame extraction.
//!
//! Frame `t` covers columns `[t * shift, t * shift + window)` of the line.
//! Each frame yields the raw gray patch (input of the neural classifier) and
//! an 8x8 mean-pooled vector (D = 64) used by the Gaussian models and the
//! tying statistics.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{GrayImage, TextLineSample};
use crate::error::{Error, Result};

/// Pooling grid side; the feature dimension is its square.
pub const POOL_GRID: usize = 8;
pub const FEATURE_DIM: usize = POOL_GRID * POOL_GRID;
const FEATURES_MAGIC: &[u8; 4] = b"PHF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub window: usize,
    pub shift: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 20,
            shift: 4,
        }
    }
}

/// Low-dimensional frame vectors of one line, `len() x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVectors {
    pub line_id: u32,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FrameVectors {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Raw gray windows, each `height x width` row-major with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.data.len() / (self.height * self.width).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub vectors: FrameVectors,
    pub patches: Patches,
    pub window: usize,
    pub frame_shift: usize,
}

impl FrameSequence {
    pub fn line_id(&self) -> u32 {
        self.vectors.line_id
    }

    /// Number of frames, `T + 1`.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn bin_edges(len: usize) -> [usize; POOL_GRID + 1] {
    let mut e = [0; POOL_GRID + 1];
    for (i, v) in e.iter_mut().enumerate() {
        *v = i * len / POOL_GRID;
    }
    e
}

/// Extracts the frame sequence of an image.
pub fn extract_frames(image: &GrayImage, line_id: u32, cfg: &FeatureConfig) -> Result<FrameSequence> {
    if cfg.shift == 0 {
        return Err(Error::Config("frame shift must be positive".into()));
    }
    if cfg.window < POOL_GRID || image.height < POOL_GRID {
        return Err(Error::Config(format!(
            "window {}x{} is smaller than the {POOL_GRID}x{POOL_GRID} pooling grid",
            image.height, cfg.window
        )));
    }
    if image.width < cfg.window {
        return Err(Error::ImageTooNarrow {
            width: image.width,
            window: cfg.window,
        });
    }
    let n = (image.width - cfg.window) / cfg.shift + 1;
    let (h, w) = (image.height, cfg.window);
    let rows = bin_edges(h);
    let cols = bin_edges(w);
    let mut patches = Vec::with_capacity(n * h * w);
    let mut vectors = Vec::with_capacity(n * FEATURE_DIM);
    for t in 0..n {
        let c0 = t * cfg.shift;
        for r in 0..h {
            let row = &image.pixels[r * image.width + c0..r * image.width + c0 + w];
            patches.extend(row.iter().map(|&p| p as f32 / 255.0));
        }
        let patch = &patches[t * h * w..];
        for br in 0..POOL_GRID {
            for bc in 0..POOL_GRID {
                let mut sum = 0.0f32;
                for r in rows[br]..rows[br + 1] {
                    for c in cols[bc]..cols[bc + 1] {
                        sum += patch[r * w + c];
                    }
                }
                let count = (rows[br + 1] - rows[br]) * (cols[bc + 1] - cols[bc]);
                vectors.push(sum / count as f32);
            }
        }
    }
    Ok(FrameSequence {
        vectors: FrameVectors {
            line_id,
            dim: FEATURE_DIM,
            data: vectors,
        },
        patches: Patches {
            height: h,
            width: w,
            data: patches,
        },
        window: cfg.window,
        frame_shift: cfg.shift,
    })
}

/// Frames of a corpus line; lines narrower than the window are right-padded.
pub fn extract_line(line: &TextLineSample, cfg: &FeatureConfig) -> Result<FrameSequence> {
    if line.image.width < cfg.window {
        extract_frames(&line.image.padded_to(cfg.window), line.line_id, cfg)
    } else {
        extract_frames(&line.image, line.line_id, cfg)
    }
}

/// `features.bin`: magic `PHF1`, u32 D, u32 line count; per line u32
/// line_id, u32 frame count, then `frames x D` little-endian f32.
pub fn write_features(w: &mut impl Write, lines: &[FrameVectors]) -> Result<()> {
    let dim = lines.first().map_or(FEATURE_DIM, |l| l.dim);
    w.write_all(FEATURES_MAGIC)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u32::<LittleEndian>(lines.len() as u32)?;
    for l in lines {
        if l.dim != dim {
            return Err(Error::Dimension(format!("line {} has D={} not {dim}", l.line_id, l.dim)));
        }
        w.write_u32::<LittleEndian>(l.line_id)?;
        w.write_u32::<LittleEndian>(l.len() as u32)?;
        for &v in &l.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<Vec<FrameVectors>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::Format("features.bin: bad magic".into()));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let line_id = r.read_u32::<LittleEndian>()?;
        let frames = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0f32; frames * dim];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push(FrameVectors { line_id, dim, data });
    }
    Ok(out)
}
