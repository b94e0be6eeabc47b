//! Image datasets: CIFAR-10 binary ingestion, synthetic blobs, holdout
//! splitting, augmentation and batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// `N` images of shape `(C, H, W)` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<usize>,
    shape: [usize; 3],
    classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, shape: [usize; 3], classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || classes == 0 {
            return Err(Error::InvalidArgument("image shape and class count must be positive".into()));
        }
        if images.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                per * labels.len(),
                images.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= class count {classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// All images as one `[N, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let [c, h, w] = self.shape;
        Tensor::new(&[self.len(), c, h, w], self.images.clone())
    }
}

/// Per-channel `(x - mean) / std` applied after scaling bytes to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    /// CIFAR-10 training-set statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Range of normalized values for channel `c`.
    pub fn range(&self, c: usize) -> (f64, f64) {
        (-self.mean[c] / self.std[c], (1.0 - self.mean[c]) / self.std[c])
    }
}

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Decodes CIFAR-10 binary records (1 label byte + R, G, B planes of 32x32).
pub fn parse_cifar_records(bytes: &[u8], norm: &Normalization) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    if norm.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidArgument("normalization std must be positive".into()));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {r}: label {label} >= {CIFAR_CLASSES}")));
        }
        labels.push(label);
        for (i, &b) in rec[1..].iter().enumerate() {
            let c = i / plane;
            images.push((b as f64 / 255.0 - norm.mean[c]) / norm.std[c]);
        }
    }
    Dataset::new(images, labels, [3, CIFAR_SIDE, CIFAR_SIDE], CIFAR_CLASSES)
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], norm: &Normalization) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = std::fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                p.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar_records(&bytes, norm)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar_dir(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_cifar_binary(&train, norm)?;
    let test = load_cifar_binary(&[dir.join("test_batch.bin")], norm)?;
    Ok((train, test))
}

/// Parameters of a synthetic classification set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    /// Standard deviation of the per-pixel noise around a class prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 8,
            per_class: 100,
            shape: [3, 16, 16],
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Class prototypes drawn from `N(0, 1)` per pixel, samples at
/// `prototype + noise * N(0, 1)`. Ordered class-major.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let per: usize = spec.shape.iter().product();
    let mut proto_rng = stream(spec.seed, 0);
    let prototypes: Vec<f64> = (0..spec.classes * per)
        .map(|_| StandardNormal.sample(&mut proto_rng))
        .collect();
    synth_from_prototypes(spec, &prototypes, 1)
}

/// Fresh samples around the same prototypes as [`synth_blobs`] (e.g. a test
/// set), using noise stream `draw` (> 1).
pub fn synth_blobs_draw(spec: &BlobSpec, draw: u64) -> Result<Dataset> {
    let per: usize = spec.shape.iter().product();
    let mut proto_rng = stream(spec.seed, 0);
    let prototypes: Vec<f64> = (0..spec.classes * per)
        .map(|_| StandardNormal.sample(&mut proto_rng))
        .collect();
    synth_from_prototypes(spec, &prototypes, draw + 1)
}

fn synth_from_prototypes(spec: &BlobSpec, prototypes: &[f64], draw: u64) -> Result<Dataset> {
    let per: usize = spec.shape.iter().product();
    let mut rng = stream(spec.seed, draw);
    let mut images = Vec::with_capacity(spec.classes * spec.per_class * per);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        let proto = &prototypes[c * per..(c + 1) * per];
        for _ in 0..spec.per_class {
            images.extend(proto.iter().map(|&p| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p + spec.noise * z
            }));
            labels.push(c);
        }
    }
    Dataset::new(images, labels, spec.shape, spec.classes)
}

/// Moves `per_class` seeded-random images of every class into a held-out
/// split. Both splits keep the original relative order.
pub fn split_holdout(ds: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = stream(seed, 0x5917);
    let mut held = vec![false; ds.len()];
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} images, fewer than the holdout of {per_class}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..per_class] {
            held[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| held[i]);
    Ok((ds.subset(&train), ds.subset(&val)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    /// Random horizontal flip with probability 1/2.
    Flip,
    /// Zero-pad by 4 and take a random crop of the original size.
    #[serde(rename = "pad4crop")]
    Pad4Crop,
}

/// Mirrors a `(C, H, W)` image left-right in place.
pub fn hflip(image: &mut [f64], shape: [usize; 3]) {
    let w = shape[2];
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

/// Zero-pads by 4 on each side and crops at offset `(dy, dx)` in `0..=8`.
pub fn pad4_crop(image: &[f64], shape: [usize; 3], dy: usize, dx: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - 4;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - 4;
                if sx >= 0 && (sx as usize) < w {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Seeded shuffled mini-batches; each epoch uses its own permutation.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    augment: Augment,
    seed: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(ds: &'a Dataset, batch_size: usize, augment: Augment, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(BatchStream {
            ds,
            batch_size,
            augment,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len().div_ceil(self.batch_size)
    }

    /// The batches of epoch `epoch`; the last one may be short.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let mut rng = stream(self.seed, 0xe90c_0000 + epoch);
        let mut order: Vec<usize> = (0..self.ds.len()).collect();
        order.shuffle(&mut rng);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| self.make_batch(&idx, &mut rng))
    }

    fn make_batch<R: Rng>(&self, idx: &[usize], rng: &mut R) -> Batch {
        let shape = self.ds.shape;
        let mut pixels = Vec::with_capacity(idx.len() * self.ds.image_len());
        for &i in idx {
            let img = self.ds.image(i);
            match self.augment {
                Augment::None => pixels.extend_from_slice(img),
                Augment::Flip => {
                    let mut v = img.to_vec();
                    if rng.random_bool(0.5) {
                        hflip(&mut v, shape);
                    }
                    pixels.extend(v);
                }
                Augment::Pad4Crop => {
                    let (dy, dx) = (rng.random_range(0..=8), rng.random_range(0..=8));
                    pixels.extend(pad4_crop(img, shape, dy, dx));
                }
            }
        }
        let [c, h, w] = shape;
        Batch {
            images: Tensor::from_parts(vec![idx.len(), c, h, w], pixels),
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
        }
    }
}
