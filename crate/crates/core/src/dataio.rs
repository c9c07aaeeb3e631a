//! Datasets: MNIST IDX files, block-mean downscaling, synthetic Gaussian
//! blobs and training-time augmentation.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng::{stream, Purpose, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// Images `[N, C, H, W]` in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            class_count,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.ndim() != 4 {
            return Err(Error::InvalidShape(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                self.images.shape()
            )));
        }
        if self.images.batch() != self.labels.len() {
            return Err(Error::CountMismatch {
                images: self.images.batch(),
                labels: self.labels.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside 0..{}",
                self.class_count
            )));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Batch at the requested precision.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (
            self.images.select(indices).cast(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX file, returning its dimension fields and payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Loads an MNIST-format image/label pair. Pixels are divided by 255.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;
    let (idims, pixels) = parse_idx(images_path, &img_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, labels) = parse_idx(labels_path, &lbl_bytes, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let images = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), MNIST_CLASSES)
}

/// Loads `{prefix}-images-idx3-ubyte` / `{prefix}-labels-idx1-ubyte` from a directory.
pub fn load_mnist_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Writes a dataset in IDX format, quantizing pixels to bytes.
pub fn write_mnist_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = ds.image_dims();
    if c != 1 {
        return Err(Error::InvalidShape(format!("IDX images are single-channel, got {c} channels")));
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, n, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lbl = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, n] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images_path, img), (labels_path, lbl)] {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Block-mean pooling of every image by `factor`.
pub fn downscale(ds: &Dataset, factor: usize) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::InvalidConfig("downscale factor must be positive".into()));
    }
    let (c, h, w) = ds.image_dims();
    for size in [h, w] {
        if size % factor != 0 {
            return Err(Error::IndivisibleShape { size, factor });
        }
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let src = ds.images.data();
    let images = Tensor::from_fn(&[ds.len(), c, oh, ow], |idx| {
        let plane = idx / (oh * ow);
        let (r, s) = ((idx % (oh * ow)) / ow, idx % ow);
        let mut acc = 0.0;
        for dr in 0..factor {
            let row = plane * h * w + (r * factor + dr) * w + s * factor;
            acc += src[row..row + factor].iter().sum::<f64>();
        }
        (acc / norm).clamp(0.0, 1.0)
    });
    Dataset::new(images, ds.labels.clone(), ds.class_count)
}

pub const BLOB_SIDE: usize = 8;
const BLOB_CENTER_SEED: u64 = 0x0b10b;

/// Gaussian clusters around fixed per-class centers on `side × side` planes,
/// clipped to [0, 1]. Samples are interleaved by class.
pub fn synthetic_blobs_sized(n_per_class: usize, classes: usize, spread: f64, seed: u64, side: usize) -> Result<Dataset> {
    if classes == 0 || side == 0 || !(spread >= 0.0) {
        return Err(Error::InvalidConfig("blobs need classes > 0, side > 0 and spread >= 0".into()));
    }
    let plane = side * side;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut rng = stream(BLOB_CENTER_SEED, Purpose::Synthetic, c as u64);
            (0..plane).map(|_| rng.gen_range(0.2..0.8)).collect()
        })
        .collect();
    let mut rng = stream(seed, Purpose::Synthetic, u64::MAX);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n_per_class * classes * plane);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for (c, center) in centers.iter().enumerate() {
            data.extend(center.iter().map(|&m| {
                let v = m + spread * normal.sample(&mut rng);
                v.clamp(0.0, 1.0)
            }));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), 1, side, side], data)?, labels, classes)
}

pub fn synthetic_blobs(n_per_class: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    synthetic_blobs_sized(n_per_class, classes, spread, seed, BLOB_SIDE)
}

/// Random circular shift plus small rotation, applied per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    pub enabled: bool,
    pub max_shift: usize,
    pub max_rotation_deg: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            max_shift: 2,
            max_rotation_deg: 10.0,
        }
    }
}

impl Augmentation {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>, rng: &mut Rng) -> Tensor<T> {
        if !self.enabled {
            return x.clone();
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let s = self.max_shift as i64;
        let mut out = x.clone();
        for i in 0..b {
            let dy = rng.gen_range(-s..=s);
            let dx = rng.gen_range(-s..=s);
            let angle = rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg).to_radians();
            let shifted = shift_circular(x.sample(i), c, h, w, dy, dx);
            out.sample_mut(i).copy_from_slice(&rotate(&shifted, c, h, w, angle));
        }
        out
    }
}

/// `out[r][s] = src[(r - dy) mod h][(s - dx) mod w]`
pub fn shift_circular<T: Real>(src: &[T], c: usize, h: usize, w: usize, dy: i64, dx: i64) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for r in 0..h {
            let sr = (r as i64 - dy).rem_euclid(h as i64) as usize;
            for s in 0..w {
                let ss = (s as i64 - dx).rem_euclid(w as i64) as usize;
                out[(ch * h + r) * w + s] = src[(ch * h + sr) * w + ss];
            }
        }
    }
    out
}

/// Bilinear rotation about the image center, zero outside.
pub fn rotate<T: Real>(src: &[T], c: usize, h: usize, w: usize, angle: f64) -> Vec<T> {
    if angle == 0.0 {
        return src.to_vec();
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![T::zero(); src.len()];
    for r in 0..h {
        for s in 0..w {
            let (y, x) = (r as f64 - cy, s as f64 - cx);
            // Inverse map: rotate the output coordinate back into the source.
            let sy = cos * y - sin * x + cy;
            let sx = sin * y + cos * x + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for ch in 0..c {
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        src[(ch * h + yy as usize) * w + xx as usize].to_f64()
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
                out[(ch * h + r) * w + s] = T::lit(v);
            }
        }
    }
    out
}
