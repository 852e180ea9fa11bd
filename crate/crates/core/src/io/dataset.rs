//! Synthetic shape images and the raw binary dataset format.
//!
//! Raw layout (little-endian): `"AKDS"`, u32 count, u32 channels, u32 height,
//! u32 width, then per sample one label byte followed by `C·H·W` pixel bytes
//! in channel-major order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"AKDS";
pub const NUM_SHAPES: usize = 8;
pub const SHAPE_NAMES: [&str; NUM_SHAPES] = [
    "horizontal_bar",
    "vertical_bar",
    "cross",
    "disk",
    "ring",
    "checker",
    "diagonal_cross",
    "frame",
];

/// Images held as bytes; [`Dataset::image`] maps them to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `C×H×W` tensor, optionally mirrored left-right.
    pub fn image_flipped(&self, i: usize, flip: bool) -> Tensor {
        let (h, w) = (self.height, self.width);
        let raw = self.raw(i);
        let mut data = Vec::with_capacity(raw.len());
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    data.push(raw[(c * h + y) * w + sx] as f64 / 127.5 - 1.0);
                }
            }
        }
        Tensor::new([self.channels, h, w], data).expect("non-empty image")
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.image_flipped(i, false)
    }

    /// Samples `indices` in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels: indices.iter().flat_map(|&i| self.raw(i).iter().copied()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.len() * (1 + self.sample_len()));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), self.channels, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.raw(i));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Dataset("missing dataset header".into()));
        }
        let field = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
        let (count, channels, height, width) = (field(0), field(1), field(2), field(3));
        let per = channels * height * width;
        if per == 0 {
            return Err(Error::Dataset(format!("empty image shape {channels}x{height}x{width}")));
        }
        let expected = 20 + count * (per + 1);
        if bytes.len() != expected {
            return Err(Error::Dataset(format!(
                "{count} samples of {channels}x{height}x{width} need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * per);
        for rec in bytes[20..].chunks_exact(per + 1) {
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Dataset {
            channels,
            height,
            width,
            labels,
            pixels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Generator settings for the shape dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub size: usize,
    pub classes: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec {
            size: 32,
            classes: NUM_SHAPES,
        }
    }
}

fn inside(class: usize, dx: f64, dy: f64, s: f64, t: f64) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match class {
        0 => dy.abs() <= t && dx.abs() <= s,
        1 => dx.abs() <= t && dy.abs() <= s,
        2 => (dy.abs() <= t && dx.abs() <= s) || (dx.abs() <= t && dy.abs() <= s),
        3 => r <= s * 0.8,
        4 => r <= s && r >= s - 1.6 * t,
        5 => {
            dx.abs() <= s
                && dy.abs() <= s
                && (((dx + s) / (0.5 * s)).floor() as i64 + ((dy + s) / (0.5 * s)).floor() as i64) % 2 == 0
        }
        6 => (dx - dy).abs() <= t * 1.2 && dx.abs() <= s || (dx + dy).abs() <= t * 1.2 && dx.abs() <= s,
        7 => {
            let m = dx.abs().max(dy.abs());
            m <= s && m >= s - 1.6 * t
        }
        _ => unreachable!("class index checked by caller"),
    }
}

/// One `3×size×size` image of `class`: a bright shape of random colour,
/// position, scale and stroke over dark noise.
fn render(class: usize, size: usize, rng: &mut impl Rng) -> Vec<u8> {
    let sz = size as f64;
    let s = rng.gen_range(0.2 * sz..0.33 * sz);
    let t = rng.gen_range(0.045 * sz..0.075 * sz);
    let margin = s + 1.0;
    let cx = rng.gen_range(margin.min(sz / 2.0)..(sz - margin).max(sz / 2.0 + 1e-9));
    let cy = rng.gen_range(margin.min(sz / 2.0)..(sz - margin).max(sz / 2.0 + 1e-9));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(150.0..255.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..70.0));
    let mut out = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let on = inside(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s, t);
            for c in 0..3 {
                let base = if on { fg[c] } else { bg[c] };
                let v = base + rng.gen_range(-25.0..25.0);
                out[(c * size + y) * size + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// `count` images with labels cycling through the classes (balanced to
/// within one sample), each rendered from its own seeded stream so the
/// result does not depend on the thread count.
pub fn generate(seed: u64, count: usize, spec: ShapeSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > NUM_SHAPES {
        return Err(Error::config(format!("classes must be in 1..={NUM_SHAPES}")));
    }
    if spec.size < 8 {
        return Err(Error::config("image size must be at least 8"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..count).map(|i| (i % spec.classes) as u8).collect();
    use rand::seq::SliceRandom;
    labels.shuffle(&mut order_rng);
    let images: Vec<Vec<u8>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            render(l as usize, spec.size, &mut rng)
        })
        .collect();
    Ok(Dataset {
        channels: 3,
        height: spec.size,
        width: spec.size,
        labels,
        pixels: images.concat(),
    })
}

/// Train and validation splits from disjoint seed streams.
pub fn generate_splits(seed: u64, train: usize, val: usize, spec: ShapeSpec) -> Result<(Dataset, Dataset)> {
    let train_set = generate(seed, train, spec)?;
    let val_set = generate(seed ^ 0x9e37_79b9_7f4a_7c15, val, spec)?;
    Ok((train_set, val_set))
}
