//! Procedural image sources standing in for real pre-training datasets.
//!
//! Every sample is a pure function of `(generator spec, source seed, index)`
//! and uses only exactly-rounded arithmetic, so the bytes are identical on
//! every IEEE-754 machine.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::mix64;
use crate::nn::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
/// Number of distinct procedural shapes.
pub const SHAPE_KINDS: usize = 6;
/// Number of distinct texture families.
pub const TEXTURE_KINDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Classify the single dominant shape.
    #[serde(rename = "shape-class")]
    ShapeClass,
    /// Classify the texture family.
    #[serde(rename = "texture-class")]
    TextureClass,
    /// Per-pixel shape labels over background (class 0).
    #[serde(rename = "shape-seg")]
    ShapeSeg,
}

impl GeneratorKind {
    pub fn is_dense(self) -> bool {
        self == GeneratorKind::ShapeSeg
    }

    fn max_classes(self) -> usize {
        match self {
            GeneratorKind::ShapeClass => SHAPE_KINDS,
            GeneratorKind::TextureClass => TEXTURE_KINDS,
            GeneratorKind::ShapeSeg => SHAPE_KINDS + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGeneratorSpec {
    pub kind: GeneratorKind,
    pub num_classes: usize,
    /// (height, width)
    pub image_size: [usize; 2],
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub palette_seed: u64,
}

impl SyntheticGeneratorSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_classes < 2 || self.num_classes > self.kind.max_classes() {
            out.push(format!(
                "num_classes {} outside 2..={} for {:?}",
                self.num_classes,
                self.kind.max_classes(),
                self.kind
            ));
        }
        if self.image_size.contains(&0) {
            out.push("image_size must be positive".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            out.push("noise_level must be non-negative".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Mask(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// CHW, roughly zero-centred.
    pub image: Vec<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// Sample-major flattened masks.
    Masks(Vec<usize>),
}

impl Labels {
    pub fn as_slice(&self) -> &[usize] {
        match self {
            Labels::Classes(v) | Labels::Masks(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source_id: String,
    pub images: Tensor,
    pub labels: Labels,
}

struct Palette {
    background: [[f64; 3]; 2],
    foreground: [[f64; 3]; 6],
}

impl Palette {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5a5a_0f0f));
        let mut col = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let background = [col(0.0, 0.45), col(0.0, 0.45)];
        let foreground = [col(0.45, 1.0), col(0.45, 1.0), col(0.45, 1.0), col(0.45, 1.0), col(0.45, 1.0), col(0.45, 1.0)];
        Self { background, foreground }
    }
}

/// A deterministic, indexable synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub source_id: String,
    pub spec: SyntheticGeneratorSpec,
    pub size: usize,
    pub seed: u64,
}

pub fn make_synthetic_source(source_id: &str, spec: &SyntheticGeneratorSpec, size: usize, seed: u64) -> Source {
    Source { source_id: source_id.to_string(), spec: spec.clone(), size, seed }
}

/// Is `(dx, dy)` (relative to the centre) inside a shape of radius `r`?
fn inside(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= 0.8 * r && ay <= 0.8 * r,
        2 => dy >= -r && dy <= 0.7 * r && ax <= (dy + r) / 1.7,
        3 => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        _ => ax + ay <= r,
    }
}

impl Source {
    pub fn image_shape(&self) -> [usize; 3] {
        [IMAGE_CHANNELS, self.spec.image_size[0], self.spec.image_size[1]]
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix64(mix64(self.seed) ^ index as u64))
    }

    /// Class of sample `index`: classes cycle, so any prefix is balanced to ±1.
    pub fn class_of(&self, index: usize) -> usize {
        match self.spec.kind {
            GeneratorKind::ShapeSeg => 1 + index % (self.spec.num_classes - 1),
            _ => index % self.spec.num_classes,
        }
    }

    pub fn sample(&self, index: usize) -> Sample {
        let [h, w] = self.spec.image_size;
        let palette = Palette::new(self.spec.palette_seed);
        let mut rng = self.rng(index);
        let mut img = vec![0.0; IMAGE_CHANNELS * h * w];
        let bg = palette.background[rng.random_range(0..2)];
        let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        for y in 0..h {
            for x in 0..w {
                let ramp = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
                for c in 0..IMAGE_CHANNELS {
                    img[(c * h + y) * w + x] = bg[c] + ramp;
                }
            }
        }
        let size = h.min(w) as f64;
        let label = match self.spec.kind {
            GeneratorKind::ShapeClass => {
                let class = self.class_of(index);
                let r = rng.random_range(0.22..0.38) * size;
                let cx = rng.random_range(r..w as f64 - r);
                let cy = rng.random_range(r..h as f64 - r);
                let col = palette.foreground[rng.random_range(0..6)];
                paint(&mut img, h, w, |x, y| inside(class, x - cx, y - cy, r), col);
                Label::Class(class)
            }
            GeneratorKind::TextureClass => {
                let class = self.class_of(index);
                let period = rng.random_range(4..9usize);
                let phase = rng.random_range(0..period);
                let col = palette.foreground[rng.random_range(0..6)];
                let half = period / 2;
                paint(
                    &mut img,
                    h,
                    w,
                    |x, y| {
                        let (x, y) = (x as usize + phase, y as usize + phase);
                        match class {
                            0 => y % period < half,
                            1 => x % period < half,
                            2 => (x + y) % period < half,
                            3 => (x + period * h - y) % period < half,
                            4 => (x / half.max(1) + y / half.max(1)) % 2 == 0,
                            _ => x % period < half.max(2) - 1 && y % period < half.max(2) - 1,
                        }
                    },
                    col,
                );
                Label::Class(class)
            }
            GeneratorKind::ShapeSeg => {
                let kinds = self.spec.num_classes - 1;
                let mut mask = vec![0usize; h * w];
                let extra = rng.random_range(0..2usize);
                for s in 0..=extra {
                    let kind = if s == 0 { self.class_of(index) - 1 } else { rng.random_range(0..kinds) };
                    let r = if s == 0 { rng.random_range(0.22..0.36) } else { rng.random_range(0.12..0.2) } * size;
                    let cx = rng.random_range(r..w as f64 - r);
                    let cy = rng.random_range(r..h as f64 - r);
                    let col = palette.foreground[rng.random_range(0..6)];
                    for y in 0..h {
                        for x in 0..w {
                            if inside(kind, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                                mask[y * w + x] = kind + 1;
                                for c in 0..IMAGE_CHANNELS {
                                    img[(c * h + y) * w + x] = col[c];
                                }
                            }
                        }
                    }
                }
                Label::Mask(mask)
            }
        };
        // uniform noise with standard deviation `noise_level`
        let amp = self.spec.noise_level * 3f64.sqrt();
        for v in img.iter_mut() {
            let n = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            *v = *v + n - 0.5;
        }
        Sample { image: img, label }
    }

    /// Stacks the given sample indices into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut classes = Vec::new();
        let mut masks = Vec::new();
        for &i in indices {
            let s = self.sample(i);
            data.extend_from_slice(&s.image);
            match s.label {
                Label::Class(k) => classes.push(k),
                Label::Mask(m) => masks.extend(m),
            }
        }
        let labels = if self.spec.kind.is_dense() { Labels::Masks(masks) } else { Labels::Classes(classes) };
        Batch {
            source_id: self.source_id.clone(),
            images: Tensor::from_vec(&[indices.len(), c, h, w], data).expect("consistent sample size"),
            labels,
        }
    }
}

fn paint(img: &mut [f64], h: usize, w: usize, mut pred: impl FnMut(f64, f64) -> bool, col: [f64; 3]) {
    for y in 0..h {
        for x in 0..w {
            if pred(x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..IMAGE_CHANNELS {
                    img[(c * h + y) * w + x] = col[c];
                }
            }
        }
    }
}

/// Draws one batch for a task: a source is picked with probability
/// proportional to its size, then `batch_size` indices uniformly from it.
pub fn sample_task_batch(sources: &[&Source], batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if let Some(empty) = sources.iter().find(|s| s.size == 0) {
        return Err(Error::EmptySource(empty.source_id.clone()));
    }
    if sources.is_empty() {
        return Err(Error::EmptySource("<none>".into()));
    }
    let pick = pick_source(sources, rng)?;
    let src = sources[pick];
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..src.size)).collect();
    Ok(src.batch(&indices))
}

/// Index of the source chosen for one draw.
pub fn pick_source(sources: &[&Source], rng: &mut impl Rng) -> Result<usize> {
    let weights: Vec<usize> = sources.iter().map(|s| s.size).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(format!("source weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Generator for the draws of (seed, step, stream).
pub fn step_rng(seed: u64, step: usize, stream: &str) -> ChaCha8Rng {
    let key = mix64(mix64(seed) ^ mix64(step as u64 ^ 0xa076_1d64_78bd_642f)) ^ crate::nn::params::fnv1a(stream.as_bytes());
    ChaCha8Rng::seed_from_u64(mix64(key))
}

const CACHE_MAGIC: &[u8; 4] = b"XLDS";
const CACHE_VERSION: u32 = 1;

/// Writes samples `0..count` of a source to a flat indexed container:
/// header (magic, version, count, C, H, W, dense flag) followed by
/// fixed-size records of little-endian f64 pixels and u32 labels.
pub fn write_sample_cache(source: &Source, count: usize, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let [c, h, w] = source.image_shape();
    let mut header = Vec::new();
    header.extend_from_slice(CACHE_MAGIC);
    header.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for v in [count as u64, c as u64, h as u64, w as u64] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header.push(source.spec.kind.is_dense() as u8);
    out.write_all(&header).map_err(|e| Error::io(path, e))?;
    for i in 0..count {
        let s = source.sample(i);
        let mut rec = Vec::with_capacity(s.image.len() * 8);
        for v in &s.image {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        match s.label {
            Label::Class(k) => rec.extend_from_slice(&(k as u32).to_le_bytes()),
            Label::Mask(m) => m.iter().for_each(|k| rec.extend_from_slice(&(*k as u32).to_le_bytes())),
        }
        out.write_all(&rec).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Random-access reader for [`write_sample_cache`] files.
pub struct SampleCache {
    reader: BufReader<File>,
    pub count: usize,
    shape: [usize; 3],
    dense: bool,
    path: std::path::PathBuf,
}

const CACHE_HEADER: usize = 4 + 4 + 32 + 1;

impl SampleCache {
    pub fn open(path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint { path: path.to_path_buf(), message: m.to_string() };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut head = [0u8; CACHE_HEADER];
        reader.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != CACHE_MAGIC {
            return Err(bad("not a sample cache"));
        }
        if u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) != CACHE_VERSION {
            return Err(bad("unsupported sample cache version"));
        }
        let word = |i: usize| u64::from_le_bytes(head[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
        Ok(Self {
            reader,
            count: word(0),
            shape: [word(1), word(2), word(3)],
            dense: head[40] != 0,
            path: path.to_path_buf(),
        })
    }

    fn record_len(&self) -> usize {
        let [c, h, w] = self.shape;
        c * h * w * 8 + if self.dense { h * w * 4 } else { 4 }
    }

    pub fn get(&mut self, index: usize) -> Result<Sample> {
        if index >= self.count {
            return Err(Error::Invalid(format!("sample {index} beyond cache of {}", self.count)));
        }
        let len = self.record_len();
        let mut buf = vec![0u8; len];
        let path = self.path.clone();
        self.reader
            .seek(SeekFrom::Start((CACHE_HEADER + index * len) as u64))
            .map_err(|e| Error::io(&path, e))?;
        self.reader.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        let [c, h, w] = self.shape;
        let npx = c * h * w;
        let image = buf[..npx * 8].chunks(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let labels: Vec<usize> = buf[npx * 8..]
            .chunks(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        let label = if self.dense { Label::Mask(labels) } else { Label::Class(labels[0]) };
        Ok(Sample { image, label })
    }
}
