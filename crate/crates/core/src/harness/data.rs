use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use spach_tensor::{Element, Rng, Tensor};

use crate::error::{Result, SpachError};

pub const DATASET_MAGIC: &[u8; 4] = b"SPD1";

/// Labeled RGB images stored as bytes; pixels map to `[0, 1]` when batched.
///
/// File layout (little-endian): magic `SPD1`, `u32` count, `u32` classes,
/// `u32` height, `u32` width, then `count * 3 * h * w` bytes of CHW images,
/// then `count` `u16` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u16>,
    classes: usize,
    resolution: (usize, usize),
    pub split: String,
}

fn format_err(msg: impl Into<String>) -> SpachError {
    SpachError::Format(msg.into())
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<u16>,
        classes: usize,
        resolution: (usize, usize),
        split: impl Into<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(format_err("dataset is empty"));
        }
        if classes == 0 || classes > u16::MAX as usize + 1 {
            return Err(format_err(format!("invalid class count {classes}")));
        }
        let (h, w) = resolution;
        if h == 0 || w == 0 || pixels.len() != n * 3 * h * w {
            return Err(format_err(format!(
                "{} pixel bytes do not hold {n} images of 3x{h}x{w}",
                pixels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(format_err(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            pixels,
            labels,
            classes,
            resolution,
            split: split.into(),
        })
    }

    /// Uniform random pixels with uniform random labels.
    pub fn synthetic(
        n: usize,
        classes: usize,
        resolution: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(format_err("dataset is empty"));
        }
        if classes == 0 {
            return Err(format_err("invalid class count 0"));
        }
        let mut rng = Rng::seed(seed);
        let size = 3 * resolution.0 * resolution.1;
        let pixels = (0..n * size).map(|_| rng.below(256) as u8).collect();
        let labels = (0..n).map(|_| rng.below(classes) as u16).collect();
        Dataset::new(pixels, labels, classes, resolution, "synthetic")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    fn image_size(&self) -> usize {
        3 * self.resolution.0 * self.resolution.1
    }

    /// Images `[indices.len(), 3, H, W]` scaled to `[0, 1]`, and their labels.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let size = self.image_size();
        let scale = 1.0 / 255.0;
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend(
                self.pixels[i * size..(i + 1) * size]
                    .iter()
                    .map(|&p| T::from_f64_lossy(p as f64 * scale)),
            );
        }
        let (h, w) = self.resolution;
        let images = Tensor::from_vec([indices.len(), 3, h, w], data)?;
        Ok((
            images,
            indices.iter().map(|&i| self.labels[i] as usize).collect(),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.pixels.len() + 2 * self.len());
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            self.len(),
            self.classes,
            self.resolution.0,
            self.resolution.1,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], split: impl Into<String>) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != DATASET_MAGIC {
            return Err(format_err("not an SPD1 dataset"));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (n, classes, h, w) = (word(0), word(1), word(2), word(3));
        let pixel_bytes = n
            .checked_mul(3 * h * w)
            .ok_or_else(|| format_err("dataset header overflows"))?;
        let expected = 20 + pixel_bytes + 2 * n;
        if bytes.len() != expected {
            return Err(format_err(format!(
                "dataset body is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let pixels = bytes[20..20 + pixel_bytes].to_vec();
        let labels = bytes[20 + pixel_bytes..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Dataset::new(pixels, labels, classes, (h, w), split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::from_bytes(&bytes, split)
    }
}
