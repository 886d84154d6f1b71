//! Labelled image datasets, the bundled synthetic texture corpus and
//! on-disk loaders.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `[N, C, H, W]` with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn per_image(&self) -> usize {
        let [c, h, w] = self.image_shape();
        c * h * w
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Self {
        let per = self.per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        Self {
            images: Tensor::new(vec![idx.len(), c, h, w], data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// `[N, C, H, W]` batch of the given samples and their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.subset(idx, self.split);
        (s.images, s.labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Splits every class by `fractions` (in order), so class proportions
    /// carry over to each part. The last part takes the remainder.
    pub fn stratified_split(&self, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
        let mut r = rng(seed);
        let mut parts = vec![Vec::new(); fractions.len()];
        for class in 0..self.classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            let order = permutation(&mut r, members.len());
            let mut start = 0;
            for (pi, f) in fractions.iter().enumerate() {
                let take = if pi + 1 == fractions.len() {
                    members.len() - start
                } else {
                    ((members.len() as f64) * f).round() as usize
                };
                let end = (start + take).min(members.len());
                parts[pi].extend(order[start..end].iter().map(|&o| members[o]));
                start = end;
            }
        }
        for p in parts.iter_mut() {
            p.sort_unstable();
        }
        parts
    }

    /// Train/val/test datasets under a 70/10/20 stratified split.
    pub fn split_70_10_20(&self, seed: u64) -> (Self, Self, Self) {
        let p = self.stratified_split(&[0.7, 0.1, 0.2], seed);
        (
            self.subset(&p[0], Split::Train),
            self.subset(&p[1], Split::Val),
            self.subset(&p[2], Split::Test),
        )
    }
}

/// Texture family of the bundled synthetic corpus. Both domains label an
/// image by the dominant orientation of its stripes (near-horizontal = 0,
/// near-vertical = 1); the shifted domain changes palette, frequency band,
/// contrast and noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Shifted,
}

pub const DESK_IMAGE_SIZE: usize = 8;

struct TextureParams {
    freq: (f64, f64),
    spread_deg: f64,
    amplitude: f64,
    noise: f64,
}

impl Domain {
    fn params(self) -> TextureParams {
        match self {
            Domain::Source => TextureParams {
                freq: (0.10, 0.30),
                spread_deg: 55.0,
                amplitude: 0.25,
                noise: 0.24,
            },
            Domain::Shifted => TextureParams {
                freq: (0.18, 0.40),
                spread_deg: 55.0,
                amplitude: 0.20,
                noise: 0.28,
            },
        }
    }
}

/// `n` balanced two-class texture images of size 3×8×8 in `[0, 1]`.
pub fn synthetic_textures(n: usize, domain: Domain, seed: u64) -> LabeledDataset {
    let size = DESK_IMAGE_SIZE;
    let p = domain.params();
    let mut r = rng(seed);
    let labels_sorted: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2 + n % 2)).collect();
    let order = permutation(&mut r, n);
    let labels: Vec<usize> = order.iter().map(|&o| labels_sorted[o]).collect();
    let mut data = Vec::with_capacity(n * 3 * size * size);
    for &label in &labels {
        let base = if label == 0 { 0.0 } else { PI / 2.0 };
        let theta = base + r.random_range(-1.0..1.0) * p.spread_deg.to_radians();
        let freq = r.random_range(p.freq.0..p.freq.1);
        let phase = r.random_range(0.0..2.0 * PI);
        let colour: [f64; 3] = match domain {
            Domain::Source => [
                r.random_range(0.3..1.0),
                r.random_range(0.3..1.0),
                r.random_range(0.3..1.0),
            ],
            Domain::Shifted => {
                // stain-like palette between pink and purple
                let t: f64 = r.random_range(0.0..1.0);
                [0.9 - 0.4 * t, 0.45 - 0.15 * t, 0.7 + 0.1 * t]
            }
        };
        let offset = match domain {
            Domain::Source => 0.5,
            Domain::Shifted => 0.6,
        };
        // orientation θ is the stripe direction; intensity varies across it
        let (dx, dy) = (-theta.sin(), theta.cos());
        for c in colour {
            for y in 0..size {
                for x in 0..size {
                    let s = (2.0 * PI * freq * (x as f64 * dx + y as f64 * dy) + phase).sin();
                    let z: f64 = StandardNormal.sample(&mut r);
                    let v = offset + p.amplitude * c * s + p.noise * z;
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    LabeledDataset {
        images: Tensor::new(vec![n, 3, size, size], data),
        labels,
        classes: 2,
        split: Split::Train,
    }
}

#[derive(Serialize, Deserialize)]
struct TensorSidecar {
    shape: Vec<usize>,
    classes: usize,
    labels: Vec<usize>,
}

fn sidecar_path(bin: &Path) -> std::path::PathBuf {
    bin.with_extension("json")
}

/// Writes `images` as little-endian f32 to `bin` and shape/labels to a
/// JSON sidecar next to it (same stem, `.json`).
pub fn save_tensor_file(ds: &LabeledDataset, bin: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.images.len() * 4);
    for v in ds.images.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(bin, bytes)?;
    let side = TensorSidecar {
        shape: ds.images.shape().to_vec(),
        classes: ds.classes,
        labels: ds.labels.clone(),
    };
    std::fs::write(sidecar_path(bin), serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

pub fn load_tensor_file(bin: &Path, split: Split) -> Result<LabeledDataset> {
    let side: TensorSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(bin))?)?;
    let bytes = std::fs::read(bin)?;
    let n: usize = side.shape.iter().product();
    if side.shape.len() != 4 || bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, sidecar shape {:?} needs {}",
            bin.display(),
            bytes.len(),
            side.shape,
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LabeledDataset::new(Tensor::new(side.shape, data), side.labels, side.classes, split)
}

/// One sub-directory per class (sorted by name), each holding images of a
/// common size. Pixels are scaled to `[0, 1]`, RGB.
#[cfg(feature = "image-loader")]
pub fn load_image_dir(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let mut classes: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::Format(format!(
            "{} needs at least two class sub-directories",
            dir.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<(u32, u32)> = None;
    for (label, cdir) in classes.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(cdir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let d = img.dimensions();
            if *dims.get_or_insert(d) != d {
                return Err(Error::Format(format!(
                    "{} is {}x{}, expected {:?}",
                    f.display(),
                    d.0,
                    d.1,
                    dims
                )));
            }
            for c in 0..3 {
                for y in 0..d.1 {
                    for x in 0..d.0 {
                        data.push(img.get_pixel(x, y)[c] as f32 / 255.0);
                    }
                }
            }
            labels.push(label);
        }
    }
    let (w, h) = dims.ok_or_else(|| Error::Format(format!("{} holds no images", dir.display())))?;
    let n = labels.len();
    LabeledDataset::new(
        Tensor::new(vec![n, 3, h as usize, w as usize], data),
        labels,
        classes.len(),
        split,
    )
}
