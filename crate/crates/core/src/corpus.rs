//! Deterministic synthetic handwriting.
//!
//! Glyphs are built from a small inventory of straight-stroke radicals placed
//! in a left and a right box. Classes `2k` and `2k + 1` share their left
//! radical, and neighbouring classes `2k - 1`, `2k` share their right radical,
//! so position-dependent sub-structure is shared across the alphabet. Each
//! writer applies one style transform (scale, shear, stroke width, noise) to
//! every glyph they write.
//!
//! Transcripts come from a sparse first-order "language" over the alphabet so
//! that character language models have something to learn.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;

/// Side of the square glyph grid and the fixed line height, in pixels.
pub const GLYPH_SIZE: usize = 40;
/// Line image height.
pub const LINE_HEIGHT: usize = GLYPH_SIZE;
/// Stroke width used by the identity style.
pub const IDENTITY_STROKE_WIDTH: f64 = 2.5;
/// Largest inter-character gap, in pixels.
pub const MAX_GAP: usize = 4;
const MARGIN: usize = 2;
const MIN_GLYPH_WIDTH: usize = 8;
const LINES_MAGIC: &[u8; 4] = b"PHC1";
const LINES_VERSION: u32 = 1;

/// Unit-square box `(x0, y0, x1, y1)`.
pub type PlacementBox = [f64; 4];

pub const LEFT_BOX: PlacementBox = [0.0, 0.0, 0.5, 1.0];
pub const RIGHT_BOX: PlacementBox = [0.5, 0.0, 1.0, 1.0];

/// A straight stroke in radical-local unit coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Radical {
    pub id: u32,
    pub strokes: Vec<Stroke>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedRadical {
    pub radical: u32,
    pub placement: PlacementBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub class_id: u32,
    pub radicals: Vec<PlacedRadical>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    pub writer_id: u32,
    /// Horizontal shear in radians.
    pub shear: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    /// Stroke width in pixels.
    pub stroke_width: f64,
    /// Standard deviation of additive pixel noise (gray level in [0, 1]).
    pub noise_sigma: f64,
}

impl WriterStyle {
    pub fn identity() -> Self {
        Self {
            writer_id: u32::MAX,
            shear: 0.0,
            scale_x: 1.0,
            scale_y: 1.0,
            stroke_width: IDENTITY_STROKE_WIDTH,
            noise_sigma: 0.0,
        }
    }

    fn glyph_width(&self) -> usize {
        ((GLYPH_SIZE as f64 * self.scale_x).round() as usize).max(MIN_GLYPH_WIDTH)
    }
}

/// Row-major 8-bit gray image; 0 is background, 255 is full ink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    /// Copy of the image right-padded with background to at least `width`.
    pub fn padded_to(&self, width: usize) -> GrayImage {
        if self.width >= width {
            return self.clone();
        }
        let mut out = GrayImage::new(width, self.height);
        for r in 0..self.height {
            out.pixels[r * width..r * width + self.width]
                .copy_from_slice(&self.pixels[r * self.width..(r + 1) * self.width]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextLineSample {
    pub line_id: u32,
    pub writer_id: u32,
    pub transcript: Vec<u32>,
    pub image: GrayImage,
    /// Half-open column range `[start, end)` of each character cell.
    pub char_boundaries: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Adapt,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Adapt, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Adapt => "adapt",
            Partition::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub alphabet_size: usize,
    pub radical_inventory: usize,
    pub train_writers: usize,
    /// Unseen writers; they own both the adapt and the test partitions.
    pub test_writers: usize,
    pub train_lines_per_writer: usize,
    /// Extra unlabeled lines per unseen writer for unsupervised adaptation.
    pub adapt_lines_per_writer: usize,
    pub test_lines_per_writer: usize,
    pub min_line_len: usize,
    pub max_line_len: usize,
    pub min_occurrences: usize,
    /// Probability that the next character is drawn uniformly instead of
    /// from the current character's preferred successors.
    pub language_uniform_mix: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            alphabet_size: 20,
            radical_inventory: 16,
            train_writers: 20,
            test_writers: 10,
            train_lines_per_writer: 10,
            adapt_lines_per_writer: 0,
            test_lines_per_writer: 15,
            min_line_len: 4,
            max_line_len: 8,
            min_occurrences: 5,
            language_uniform_mix: 0.3,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0 {
            return Err(Error::Config("alphabet size must be positive".into()));
        }
        if self.radical_inventory < 2 {
            return Err(Error::Config("need at least 2 radicals".into()));
        }
        if self.train_writers == 0 {
            return Err(Error::Config("zero training writers".into()));
        }
        if self.min_line_len == 0 || self.max_line_len < self.min_line_len {
            return Err(Error::Config(format!(
                "bad line length range {}..={}",
                self.min_line_len, self.max_line_len
            )));
        }
        if !(0.0..=1.0).contains(&self.language_uniform_mix) {
            return Err(Error::Config("language_uniform_mix must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Alphabet, radicals and writer styles: everything but the line samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    pub radicals: Vec<Radical>,
    pub glyphs: Vec<GlyphSpec>,
    /// Preferred successors of each class, with weights.
    pub successors: Vec<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub alphabet: Alphabet,
    pub styles: Vec<WriterStyle>,
    pub train: Vec<TextLineSample>,
    pub adapt: Vec<TextLineSample>,
    pub test: Vec<TextLineSample>,
}

impl Corpus {
    pub fn partition(&self, p: Partition) -> &[TextLineSample] {
        match p {
            Partition::Train => &self.train,
            Partition::Adapt => &self.adapt,
            Partition::Test => &self.test,
        }
    }

    pub fn style(&self, writer_id: u32) -> Option<&WriterStyle> {
        self.styles.iter().find(|s| s.writer_id == writer_id)
    }

    /// Pairs of classes sharing a radical at the same placement, with the
    /// placement box they share.
    pub fn sharing_pairs(&self) -> Vec<(u32, u32, PlacementBox)> {
        sharing_pairs(&self.alphabet.glyphs)
    }

    /// Serializes the corpus directory (see [`write_partition`]).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = CorpusMeta {
            config: self.config.clone(),
            seed: self.seed,
            styles: self.styles.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join("corpus.json"), json)?;
        for p in Partition::ALL {
            let sub = dir.join(p.name());
            fs::create_dir_all(&sub)?;
            let files = serialize_partition(self.partition(p));
            fs::write(sub.join("lines.bin"), &files.lines_bin)?;
            fs::write(sub.join("transcripts.tsv"), &files.transcripts_tsv)?;
            fs::write(sub.join("boundaries.tsv"), &files.boundaries_tsv)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Corpus> {
        let meta: CorpusMeta = serde_json::from_slice(&fs::read(dir.join("corpus.json"))?)
            .map_err(|e| Error::Format(format!("corpus.json: {e}")))?;
        let alphabet = build_alphabet(&meta.config, meta.seed)?;
        let mut parts = Vec::new();
        for p in Partition::ALL {
            parts.push(read_partition(&dir.join(p.name()))?);
        }
        let test = parts.pop().unwrap();
        let adapt = parts.pop().unwrap();
        let train = parts.pop().unwrap();
        Ok(Corpus {
            config: meta.config,
            seed: meta.seed,
            alphabet,
            styles: meta.styles,
            train,
            adapt,
            test,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    config: CorpusConfig,
    seed: u64,
    styles: Vec<WriterStyle>,
}

/// The three files of one serialized partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionFiles {
    pub lines_bin: Vec<u8>,
    pub transcripts_tsv: String,
    pub boundaries_tsv: String,
}

/// `lines.bin` layout (little-endian): magic `PHC1`, u32 version, u32 line
/// count, u32 line height; then per line u32 line_id, u32 writer_id, u32
/// width, u32 character count, followed by `height * width` row-major pixels.
pub fn serialize_partition(lines: &[TextLineSample]) -> PartitionFiles {
    let mut bin = Vec::new();
    bin.extend_from_slice(LINES_MAGIC);
    bin.write_u32::<LittleEndian>(LINES_VERSION).unwrap();
    bin.write_u32::<LittleEndian>(lines.len() as u32).unwrap();
    bin.write_u32::<LittleEndian>(LINE_HEIGHT as u32).unwrap();
    let mut transcripts = String::new();
    let mut boundaries = String::new();
    for l in lines {
        bin.write_u32::<LittleEndian>(l.line_id).unwrap();
        bin.write_u32::<LittleEndian>(l.writer_id).unwrap();
        bin.write_u32::<LittleEndian>(l.image.width as u32).unwrap();
        bin.write_u32::<LittleEndian>(l.transcript.len() as u32).unwrap();
        bin.extend_from_slice(&l.image.pixels);
        transcripts.push_str(&format!(
            "{}\t{}\t{}\n",
            l.line_id,
            l.writer_id,
            join_ids(&l.transcript)
        ));
        for (i, (s, e)) in l.char_boundaries.iter().enumerate() {
            boundaries.push_str(&format!("{}\t{}\t{}\t{}\n", l.line_id, i, s, e));
        }
    }
    PartitionFiles {
        lines_bin: bin,
        transcripts_tsv: transcripts,
        boundaries_tsv: boundaries,
    }
}

pub(crate) fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::Format(format!("bad class id {t:?}")))
        })
        .collect()
}

fn read_partition(dir: &Path) -> Result<Vec<TextLineSample>> {
    let mut r = BufReader::new(fs::File::open(dir.join("lines.bin"))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != LINES_MAGIC {
        return Err(Error::Format("lines.bin: bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != LINES_VERSION {
        return Err(Error::Format(format!("lines.bin: unsupported version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let mut lines = Vec::with_capacity(n);
    for _ in 0..n {
        let line_id = r.read_u32::<LittleEndian>()?;
        let writer_id = r.read_u32::<LittleEndian>()?;
        let width = r.read_u32::<LittleEndian>()? as usize;
        let _chars = r.read_u32::<LittleEndian>()?;
        let mut pixels = vec![0u8; width * height];
        r.read_exact(&mut pixels)?;
        lines.push(TextLineSample {
            line_id,
            writer_id,
            transcript: Vec::new(),
            image: GrayImage {
                width,
                height,
                pixels,
            },
            char_boundaries: Vec::new(),
        });
    }
    let index: std::collections::HashMap<u32, usize> =
        lines.iter().enumerate().map(|(i, l)| (l.line_id, i)).collect();
    let lookup = |id: u32| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown line id {id}")))
    };
    for row in BufReader::new(fs::File::open(dir.join("transcripts.tsv"))?).lines() {
        let row = row?;
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("transcripts.tsv: bad row {row:?}")));
        }
        let id = f[0].parse().map_err(|_| Error::Format(format!("bad line id {:?}", f[0])))?;
        lines[lookup(id)?].transcript = parse_ids(f[2])?;
    }
    for row in BufReader::new(fs::File::open(dir.join("boundaries.tsv"))?).lines() {
        let row = row?;
        let f: Vec<u32> = row
            .split('\t')
            .map(|t| t.parse().map_err(|_| Error::Format(format!("boundaries.tsv: {row:?}"))))
            .collect::<Result<_>>()?;
        if f.len() != 4 {
            return Err(Error::Format(format!("boundaries.tsv: bad row {row:?}")));
        }
        lines[lookup(f[0])?].char_boundaries.push((f[2], f[3]));
    }
    Ok(lines)
}

/// Radical inventory, glyph compositions and successor language for a
/// `(config, seed)` pair.
pub fn build_alphabet(config: &CorpusConfig, seed: u64) -> Result<Alphabet> {
    config.validate()?;
    let r = config.radical_inventory;
    let mut glyphs = Vec::with_capacity(config.alphabet_size);
    for c in 0..config.alphabet_size {
        let left = (c / 2) % r;
        let slot = (c / (2 * r)) * 2 + c % 2;
        if slot + 1 >= r {
            return Err(Error::Config(format!(
                "alphabet of {} classes is larger than {} radicals can express",
                config.alphabet_size, r
            )));
        }
        let right = (left + 1 + slot) % r;
        glyphs.push(GlyphSpec {
            class_id: c as u32,
            radicals: vec![
                PlacedRadical {
                    radical: left as u32,
                    placement: LEFT_BOX,
                },
                PlacedRadical {
                    radical: right as u32,
                    placement: RIGHT_BOX,
                },
            ],
        });
    }
    let radicals = build_radicals(r, seed);

    let mut rng = sub_rng(seed, "language", 0);
    let v = config.alphabet_size;
    let successors = (0..v)
        .map(|_| {
            let mut picks: Vec<u32> = Vec::new();
            while picks.len() < 3.min(v) {
                let c = rng.gen_range(0..v) as u32;
                if !picks.contains(&c) {
                    picks.push(c);
                }
            }
            let weights = [0.6, 0.3, 0.1];
            let total: f64 = weights[..picks.len()].iter().sum();
            picks
                .into_iter()
                .zip(weights)
                .map(|(c, w)| (c, w / total))
                .collect()
        })
        .collect();
    Ok(Alphabet {
        radicals,
        glyphs,
        successors,
    })
}

fn build_radicals(count: usize, seed: u64) -> Vec<Radical> {
    const LATTICE: [f64; 5] = [0.15, 0.325, 0.5, 0.675, 0.85];
    let mut rng = sub_rng(seed, "radicals", 0);
    let mut seen: HashSet<Vec<[u8; 4]>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n_strokes = rng.gen_range(2..=3);
        let mut key = Vec::new();
        for _ in 0..n_strokes {
            let kind = rng.gen_range(0..3);
            let a = rng.gen_range(0..5u8);
            let (mut b0, mut b1) = (rng.gen_range(0..5u8), rng.gen_range(0..5u8));
            while b0 == b1 {
                b1 = rng.gen_range(0..5u8);
            }
            if b0 > b1 {
                std::mem::swap(&mut b0, &mut b1);
            }
            key.push(match kind {
                0 => [b0, a, b1, a], // horizontal
                1 => [a, b0, a, b1], // vertical
                _ => {
                    let mut c = rng.gen_range(0..5u8);
                    while c == a {
                        c = rng.gen_range(0..5u8);
                    }
                    [b0, a, b1, c]
                }
            });
        }
        key.sort();
        key.dedup();
        if key.len() < 2 || !seen.insert(key.clone()) {
            continue;
        }
        let strokes = key
            .iter()
            .map(|k| Stroke {
                from: (LATTICE[k[0] as usize], LATTICE[k[1] as usize]),
                to: (LATTICE[k[2] as usize], LATTICE[k[3] as usize]),
            })
            .collect();
        out.push(Radical {
            id: out.len() as u32,
            strokes,
        });
    }
    out
}

fn sharing_pairs(glyphs: &[GlyphSpec]) -> Vec<(u32, u32, PlacementBox)> {
    let mut out = Vec::new();
    for (i, a) in glyphs.iter().enumerate() {
        for b in &glyphs[i + 1..] {
            for ra in &a.radicals {
                if b.radicals.iter().any(|rb| rb == ra) {
                    out.push((a.class_id, b.class_id, ra.placement));
                }
            }
        }
    }
    out
}

/// Style of a writer: a pure function of `(writer_id, seed)`.
pub fn writer_style(writer_id: u32, seed: u64) -> WriterStyle {
    let mut rng = sub_rng(seed, "style", writer_id as u64);
    WriterStyle {
        writer_id,
        shear: rng.gen_range(-0.25..=0.25),
        scale_x: rng.gen_range(0.8..=1.2),
        scale_y: rng.gen_range(0.8..=1.0),
        stroke_width: rng.gen_range(1.5..=3.5),
        noise_sigma: rng.gen_range(0.0..=0.08),
    }
}

fn point_segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Rasterizes an anti-aliased segment into `canvas` (ink in [0, 1], max-blended).
fn draw_segment(
    canvas: &mut [f32],
    width: usize,
    height: usize,
    a: (f64, f64),
    b: (f64, f64),
    stroke_width: f64,
) {
    let reach = stroke_width / 2.0 + 1.0;
    let x_lo = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x_hi = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(width);
    let y_lo = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y_hi = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(height);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let d = point_segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
            let cover = (stroke_width / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32;
            let px = &mut canvas[y * width + x];
            if cover > *px {
                *px = cover;
            }
        }
    }
}

/// Draws one glyph with its cell starting at column `x0` of `canvas`.
///
/// Transform order: scale about the cell centre, then shear, then strokes are
/// drawn at the style's width. Noise is applied per line, not here.
fn draw_glyph(
    canvas: &mut [f32],
    canvas_width: usize,
    x0: usize,
    glyph: &GlyphSpec,
    radicals: &[Radical],
    style: &WriterStyle,
) {
    let g = GLYPH_SIZE as f64;
    let half = g / 2.0;
    let cell = style.glyph_width() as f64;
    let map = |u: f64, v: f64| -> (f64, f64) {
        let x = (u * g - half) * style.scale_x + cell / 2.0;
        let y = (v * g - half) * style.scale_y + half;
        let x = x + style.shear.tan() * (y - half);
        (x + x0 as f64, y)
    };
    for placed in &glyph.radicals {
        let [bx0, by0, bx1, by1] = placed.placement;
        let to_glyph = |p: (f64, f64)| (bx0 + p.0 * (bx1 - bx0), by0 + p.1 * (by1 - by0));
        for s in &radicals[placed.radical as usize].strokes {
            let (u0, v0) = to_glyph(s.from);
            let (u1, v1) = to_glyph(s.to);
            draw_segment(
                canvas,
                canvas_width,
                LINE_HEIGHT,
                map(u0, v0),
                map(u1, v1),
                style.stroke_width,
            );
        }
    }
}

/// Renders a single glyph into a `GLYPH_SIZE`-high canvas of its cell width.
pub fn render_glyph(glyph: &GlyphSpec, radicals: &[Radical], style: &WriterStyle) -> Vec<f32> {
    let w = style.glyph_width();
    let mut canvas = vec![0.0f32; w * LINE_HEIGHT];
    draw_glyph(&mut canvas, w, 0, glyph, radicals, style);
    canvas
}

fn sample_transcript(alphabet: &Alphabet, config: &CorpusConfig, seed: u64, line_id: u32) -> Vec<u32> {
    let mut rng = sub_rng(seed, "text", line_id as u64);
    let v = config.alphabet_size;
    let len = rng.gen_range(config.min_line_len..=config.max_line_len);
    let mut out = Vec::with_capacity(len);
    let mut cur = rng.gen_range(0..v) as u32;
    out.push(cur);
    while out.len() < len {
        let u: f64 = rng.gen();
        cur = if u < config.language_uniform_mix {
            rng.gen_range(0..v) as u32
        } else {
            let mut x: f64 = rng.gen();
            let succ = &alphabet.successors[cur as usize];
            let mut pick = succ[succ.len() - 1].0;
            for &(c, w) in succ {
                if x < w {
                    pick = c;
                    break;
                }
                x -= w;
            }
            pick
        };
        out.push(cur);
    }
    out
}

fn render_line(
    alphabet: &Alphabet,
    style: &WriterStyle,
    seed: u64,
    line_id: u32,
    writer_id: u32,
    transcript: Vec<u32>,
) -> TextLineSample {
    let mut rng = sub_rng(seed, "render", line_id as u64);
    let cell = style.glyph_width();
    let gaps: Vec<usize> = (1..transcript.len())
        .map(|_| rng.gen_range(0..=MAX_GAP))
        .collect();
    let width = 2 * MARGIN + cell * transcript.len() + gaps.iter().sum::<usize>();
    let mut canvas = vec![0.0f32; width * LINE_HEIGHT];
    let mut boundaries = Vec::with_capacity(transcript.len());
    let mut x = MARGIN;
    for (i, &c) in transcript.iter().enumerate() {
        draw_glyph(
            &mut canvas,
            width,
            x,
            &alphabet.glyphs[c as usize],
            &alphabet.radicals,
            style,
        );
        boundaries.push((x as u32, (x + cell) as u32));
        x += cell + gaps.get(i).copied().unwrap_or(0);
    }
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).unwrap();
    let mut image = GrayImage::new(width, LINE_HEIGHT);
    for (px, &ink) in image.pixels.iter_mut().zip(&canvas) {
        let v = if style.noise_sigma > 0.0 {
            ink as f64 + noise.sample(&mut rng)
        } else {
            ink as f64
        };
        *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    TextLineSample {
        line_id,
        writer_id,
        transcript,
        image,
        char_boundaries: boundaries,
    }
}

/// Raises every class to at least `min_occurrences` in the training
/// transcripts by substituting occurrences of the most frequent class.
fn enforce_min_occurrences(transcripts: &mut [Vec<u32>], v: usize, min: usize) -> Result<()> {
    let total: usize = transcripts.iter().map(Vec::len).sum();
    if total < v * min {
        return Err(Error::Config(format!(
            "training partition has {total} characters; {v} classes x {min} occurrences do not fit"
        )));
    }
    let mut counts = vec![0usize; v];
    for t in transcripts.iter() {
        for &c in t {
            counts[c as usize] += 1;
        }
    }
    for c in 0..v {
        while counts[c] < min {
            let donor = (0..v)
                .filter(|&d| counts[d] > min)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("total >= v * min guarantees a donor");
            let slot = transcripts
                .iter_mut()
                .flat_map(|t| t.iter_mut())
                .find(|x| **x == donor as u32)
                .unwrap();
            *slot = c as u32;
            counts[donor] -= 1;
            counts[c] += 1;
        }
    }
    Ok(())
}

/// Generates the train/adapt/test partitions for `(config, seed)`.
///
/// Training writers have ids `0..train_writers`; unseen writers follow. Line
/// ids are unique across partitions. Every line draws its randomness from its
/// own sub-stream, so the result does not depend on evaluation order.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    let alphabet = build_alphabet(config, seed)?;
    let n_writers = config.train_writers + config.test_writers;
    let styles: Vec<WriterStyle> = (0..n_writers as u32).map(|w| writer_style(w, seed)).collect();

    // (partition, writer, line_id)
    let mut slots: Vec<(Partition, u32, u32)> = Vec::new();
    let mut next_id = 0u32;
    for w in 0..config.train_writers as u32 {
        for _ in 0..config.train_lines_per_writer {
            slots.push((Partition::Train, w, next_id));
            next_id += 1;
        }
    }
    for (p, per_writer) in [
        (Partition::Adapt, config.adapt_lines_per_writer),
        (Partition::Test, config.test_lines_per_writer),
    ] {
        for w in config.train_writers as u32..n_writers as u32 {
            for _ in 0..per_writer {
                slots.push((p, w, next_id));
                next_id += 1;
            }
        }
    }

    let mut transcripts: Vec<Vec<u32>> = slots
        .par_iter()
        .map(|&(_, _, id)| sample_transcript(&alphabet, config, seed, id))
        .collect();
    let n_train = config.train_writers * config.train_lines_per_writer;
    enforce_min_occurrences(
        &mut transcripts[..n_train],
        config.alphabet_size,
        config.min_occurrences,
    )?;

    let lines: Vec<(Partition, TextLineSample)> = slots
        .par_iter()
        .zip(transcripts.into_par_iter())
        .map(|(&(p, w, id), t)| (p, render_line(&alphabet, &styles[w as usize], seed, id, w, t)))
        .collect();
    let mut corpus = Corpus {
        config: config.clone(),
        seed,
        alphabet,
        styles,
        train: Vec::new(),
        adapt: Vec::new(),
        test: Vec::new(),
    };
    for (p, l) in lines {
        match p {
            Partition::Train => corpus.train.push(l),
            Partition::Adapt => corpus.adapt.push(l),
            Partition::Test => corpus.test.push(l),
        }
    }
    Ok(corpus)
}

/// Writes `bytes` for one partition; exposed for digesting without touching disk.
pub fn write_partition_to(w: &mut impl Write, lines: &[TextLineSample]) -> Result<()> {
    let f = serialize_partition(lines);
    w.write_all(&f.lines_bin)?;
    w.write_all(f.transcripts_tsv.as_bytes())?;
    w.write_all(f.boundaries_tsv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            alphabet_size: 1,
            train_writers: 1,
            test_writers: 0,
            train_lines_per_writer: 1,
            test_lines_per_writer: 0,
            min_line_len: 1,
            max_line_len: 1,
            min_occurrences: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn degenerate_corpus() {
        let c = generate_corpus(&tiny(), 7).unwrap();
        assert_eq!(c.train.len(), 1);
        assert_eq!(c.train[0].transcript, vec![0]);
        assert_eq!(c.train[0].char_boundaries.len(), 1);
        assert!(c.test.is_empty() && c.adapt.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = CorpusConfig {
            train_writers: 3,
            test_writers: 2,
            train_lines_per_writer: 4,
            test_lines_per_writer: 2,
            adapt_lines_per_writer: 1,
            min_occurrences: 1,
            ..CorpusConfig::default()
        };
        let a = generate_corpus(&cfg, 7).unwrap();
        let b = generate_corpus(&cfg, 7).unwrap();
        for p in Partition::ALL {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            write_partition_to(&mut x, a.partition(p)).unwrap();
            write_partition_to(&mut y, b.partition(p)).unwrap();
            assert_eq!(x, y);
        }
        let c = generate_corpus(&cfg, 8).unwrap();
        assert_ne!(serialize_partition(&a.train), serialize_partition(&c.train));
    }

    #[test]
    fn shared_left_radical_renders_identically() {
        let cfg = CorpusConfig {
            alphabet_size: 20,
            ..CorpusConfig::default()
        };
        let alpha = build_alphabet(&cfg, 3).unwrap();
        let (g0, g1) = (&alpha.glyphs[0], &alpha.glyphs[1]);
        assert_eq!(g0.radicals[0], g1.radicals[0]);
        assert_ne!(g0.radicals[1], g1.radicals[1]);
        let id = WriterStyle::identity();
        let a = render_glyph(g0, &alpha.radicals, &id);
        let b = render_glyph(g1, &alpha.radicals, &id);
        // Left box is columns [0, 20) of the 40x40 identity cell.
        let mut any_ink = false;
        for r in 0..GLYPH_SIZE {
            for c in 0..GLYPH_SIZE / 2 {
                assert_eq!(a[r * GLYPH_SIZE + c], b[r * GLYPH_SIZE + c], "pixel ({r},{c})");
                any_ink |= a[r * GLYPH_SIZE + c] > 0.0;
            }
        }
        assert!(any_ink);
        // The right boxes differ somewhere.
        assert!((0..GLYPH_SIZE * GLYPH_SIZE).any(|i| a[i] != b[i]));
    }

    #[test]
    fn glyph_specs_are_distinct_and_in_unit_square() {
        let cfg = CorpusConfig {
            alphabet_size: 60,
            radical_inventory: 16,
            ..CorpusConfig::default()
        };
        let alpha = build_alphabet(&cfg, 1).unwrap();
        let mut seen = HashSet::new();
        for g in &alpha.glyphs {
            assert!(!g.radicals.is_empty());
            let key: Vec<(u32, u64)> = g
                .radicals
                .iter()
                .map(|r| (r.radical, r.placement[0].to_bits()))
                .collect();
            assert!(seen.insert(key));
            for r in &g.radicals {
                assert!(r.placement.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn configuration_errors() {
        let too_many = CorpusConfig {
            alphabet_size: 500,
            radical_inventory: 4,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_corpus(&too_many, 1), Err(Error::Config(_))));
        let no_writers = CorpusConfig {
            train_writers: 0,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_corpus(&no_writers, 1), Err(Error::Config(_))));
    }

    #[test]
    fn partition_shapes_and_coverage() {
        let cfg = CorpusConfig {
            train_writers: 4,
            test_writers: 3,
            train_lines_per_writer: 6,
            test_lines_per_writer: 2,
            adapt_lines_per_writer: 1,
            min_occurrences: 3,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(&cfg, 11).unwrap();
        let mut counts = vec![0usize; cfg.alphabet_size];
        for l in &c.train {
            for &x in &l.transcript {
                counts[x as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&n| n >= 3), "{counts:?}");
        for w in 0..4u32 {
            assert_eq!(c.train.iter().filter(|l| l.writer_id == w).count(), 6);
        }
        for w in 4..7u32 {
            assert_eq!(c.test.iter().filter(|l| l.writer_id == w).count(), 2);
            assert_eq!(c.adapt.iter().filter(|l| l.writer_id == w).count(), 1);
        }
        let train_writers: HashSet<u32> = c.train.iter().map(|l| l.writer_id).collect();
        assert!(c.test.iter().all(|l| !train_writers.contains(&l.writer_id)));
        for l in c.train.iter().chain(&c.test) {
            assert_eq!(l.image.height, LINE_HEIGHT);
            assert!(l.image.width >= l.transcript.len() * MIN_GLYPH_WIDTH);
            for w in l.char_boundaries.windows(2) {
                assert!(w[0].1 <= w[1].0);
            }
            // One style per writer.
            let s = c.style(l.writer_id).unwrap();
            assert_eq!(*s, writer_style(l.writer_id, 11));
            assert!((0.5..=2.0).contains(&s.scale_x) && (0.5..=2.0).contains(&s.scale_y));
        }
    }

    #[test]
    fn directory_round_trip() {
        let cfg = CorpusConfig {
            train_writers: 2,
            test_writers: 1,
            train_lines_per_writer: 3,
            test_lines_per_writer: 2,
            min_occurrences: 0,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path()).unwrap();
        let back = Corpus::read_dir(dir.path()).unwrap();
        assert_eq!(back, c);
    }
}
