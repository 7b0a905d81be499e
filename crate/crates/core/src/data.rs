//! Dataset ingestion (IDX, CIFAR-10 binary, procedural), normalization,
//! augmentation, low-resolution derivation and batch iteration.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{avg_pool2x, nearest_upsample2x};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
/// Reflect padding used by the random-crop augmentation.
pub const AUGMENT_PAD: usize = 4;
/// Batches buffered by the prefetching producer thread.
pub const PREFETCH_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    /// Procedural oriented gratings, 10 classes, 3×32×32; needs no files.
    Synthetic,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cifar10" => Some(DatasetKind::Cifar10),
            "mnist" => Some(DatasetKind::Mnist),
            "synthetic" => Some(DatasetKind::Synthetic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    /// `(channels, native resolution, classes)`.
    pub fn geometry(self) -> (usize, usize, usize) {
        match self {
            DatasetKind::Cifar10 | DatasetKind::Synthetic => (3, 32, 10),
            DatasetKind::Mnist => (1, 28, 10),
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Statistics of `images` (`[N, C, H, W]`), accumulated in f64.
    pub fn compute(images: &Tensor) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        let plane = h * w;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for &v in &images.data()[off..off + plane] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let count = (n * plane) as f64;
            let m = s / count;
            let var = (s2 / count - m * m).max(0.0);
            mean.push(m as f32);
            std.push(var.sqrt().max(1e-6) as f32);
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                left: x.shape().to_vec(),
                right: vec![self.mean.len()],
            });
        }
        let plane = h * w;
        let data = x.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                let off = (b * c + ch) * plane;
                for v in &mut data[off..off + plane] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }
}

/// Images in `[0, 1]` with labels; immutable after loading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` shared by all images.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// First `n` samples (all of them if `n` is larger).
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        if n < self.len() {
            self.images = self.images.slice_batch(0, n)?;
            self.labels.truncate(n);
        }
        Ok(self)
    }

    /// Nearest-neighbour ×2 upscaling of every image.
    pub fn upscale2x(mut self) -> Result<Self> {
        self.images = nearest_upsample2x(&self.images)?;
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

/// Reads an IDX image/label file pair (big-endian headers, u8 payloads).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    for (bytes, path, magic) in [
        (&img, images_path, IDX_IMAGES_MAGIC),
        (&lab, labels_path, IDX_LABELS_MAGIC),
    ] {
        let found = be_u32(bytes, 0, path)?;
        if found != magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: magic,
                found,
            });
        }
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = n * rows * cols;
    let body = img.get(16..16 + pixels).ok_or_else(|| Error::Truncated {
        path: images_path.to_path_buf(),
        detail: format!("expected {pixels} pixel bytes, found {}", img.len().saturating_sub(16)),
    })?;
    let labels = lab.get(8..8 + n).ok_or_else(|| Error::Truncated {
        path: labels_path.to_path_buf(),
        detail: format!("expected {n} label bytes, found {}", lab.len().saturating_sub(8)),
    })?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::EmptyDataset);
    }
    let images = Tensor::new(
        vec![n, 1, rows, cols],
        body.iter().map(|&b| b as f32 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes, split)
}

/// Reads CIFAR-10 binary batch files: per record one label byte, then the
/// red, green and blue 32×32 planes.
pub fn load_cifar_binary(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::CifarLength {
                path: path.clone(),
                len: bytes.len() as u64,
            });
        }
        pixels.reserve(bytes.len());
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, 10, split)
}

fn first_existing(dir: &Path, candidates: &[&str]) -> Option<PathBuf> {
    candidates.iter().map(|c| dir.join(c)).find(|p| p.is_file())
}

/// Loads one split of `kind` from `dir` (ignored for synthetic data).
/// CIFAR-10 files may sit in `dir` or `dir/cifar-10-batches-bin`.
pub fn load_split(kind: DatasetKind, dir: Option<&Path>, split: Split, seed: u64) -> Result<Dataset> {
    if kind == DatasetKind::Synthetic {
        let n = match split {
            Split::Train => 2000,
            Split::Eval => 500,
        };
        let salt = if split == Split::Train { 0 } else { 0x5eed };
        return Ok(synthetic_gratings(n, 32, seed ^ salt, split));
    }
    let dir = dir.ok_or_else(|| {
        Error::DataMissing(format!(
            "{} needs a data directory (--data-dir or HFRES_DATA_DIR)",
            kind.name()
        ))
    })?;
    match kind {
        DatasetKind::Cifar10 => {
            let names: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Eval => vec!["test_batch.bin".into()],
            };
            let mut paths = Vec::new();
            for name in &names {
                let found = [dir.to_path_buf(), dir.join("cifar-10-batches-bin")]
                    .iter()
                    .map(|d| d.join(name))
                    .find(|p| p.is_file())
                    .ok_or_else(|| {
                        Error::DataMissing(format!("CIFAR-10 file {name} not found under {}", dir.display()))
                    })?;
                paths.push(found);
            }
            load_cifar_binary(&paths, split)
        }
        DatasetKind::Mnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Eval => "t10k",
            };
            let img = format!("{prefix}-images-idx3-ubyte");
            let lab = format!("{prefix}-labels-idx1-ubyte");
            let img_alt = format!("{prefix}-images.idx3-ubyte");
            let lab_alt = format!("{prefix}-labels.idx1-ubyte");
            let find = |a: &str, b: &str| {
                first_existing(dir, &[a, b]).ok_or_else(|| {
                    Error::DataMissing(format!("MNIST file {a} not found under {}", dir.display()))
                })
            };
            load_idx(&find(&img, &img_alt)?, &find(&lab, &lab_alt)?, split)
        }
        DatasetKind::Synthetic => unreachable!(),
    }
}

/// Ten classes of noisy oriented sinusoidal gratings on 3×`res`×`res`
/// images. Class `k` fixes the orientation (`k·18°`), the spatial frequency
/// (3, 6 or 11 cycles per image; the last is beyond the Nyquist limit of the
/// half-resolution input) and a colour tint.
pub fn synthetic_gratings(n: usize, res: usize, seed: u64, split: Split) -> Dataset {
    const CLASSES: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.12).unwrap();
    let plane = res * res;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % CLASSES;
        labels.push(k);
        let theta = k as f64 * std::f64::consts::PI / CLASSES as f64;
        let freq = [3.0, 6.0, 11.0][k % 3];
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = 0.25 + 0.15 * rng.random::<f64>();
        let tint = [
            0.4 + 0.2 * ((k * 7) % 3) as f64 / 2.0,
            0.4 + 0.2 * ((k * 5) % 4) as f64 / 3.0,
            0.4 + 0.2 * ((k * 3) % 5) as f64 / 4.0,
        ];
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..res {
            for x in 0..res {
                let u = (x as f64 * c + y as f64 * s) / res as f64;
                let wave = (std::f64::consts::TAU * freq * u + phase).sin();
                for ch in 0..3 {
                    let v = tint[ch] + amp * wave + noise.sample(&mut rng);
                    data[(i * 3 + ch) * plane + y * res + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let images = Tensor::new(vec![n, 3, res, res], data).expect("consistent shape");
    Dataset::new(images, labels, CLASSES, split).expect("labels in range")
}

/// Two classes separable by mean intensity: dark (label 0) and bright
/// (label 1) noisy images.
pub fn synthetic_intensity(n: usize, channels: usize, res: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = channels * res * res;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let base = if label == 0 { 0.25 } else { 0.75 };
        data.extend((0..plane).map(|_| (base + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0)));
        labels.push(label);
    }
    let images = Tensor::new(vec![n, channels, res, res], data).expect("consistent shape");
    Dataset::new(images, labels, 2, Split::Train).expect("labels in range")
}

/// 2×2 average pooling of a high-resolution batch.
pub fn derive_low(x_high: &Tensor) -> Result<Tensor> {
    avg_pool2x(x_high)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Random crop of the reflect-padded image plus a 50% horizontal flip,
/// written in place into `img` (`C·H·W` values).
pub fn augment_image(img: &mut [f32], c: usize, h: usize, w: usize, rng: &mut impl Rng) {
    let pad = AUGMENT_PAD as isize;
    let dy = rng.random_range(0..=2 * AUGMENT_PAD) as isize - pad;
    let dx = rng.random_range(0..=2 * AUGMENT_PAD) as isize - pad;
    let flip = rng.random_bool(0.5);
    let src = img.to_vec();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + dy, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + dx, w);
                img[ch * h * w + y * w + x] = plane[sy * w + sx];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x_high: Tensor,
    pub x_low: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// `None` keeps dataset order.
    pub shuffle_seed: Option<u64>,
    pub augment: bool,
    pub norm: Option<NormStats>,
}

/// Iterator over `(x_high, x_low, labels)` batches; the last batch may be
/// short. Shuffling and augmentation draw from one seeded stream.
pub struct BatchIter {
    data: Arc<Dataset>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    opts: BatchOptions,
}

pub fn batches(data: Arc<Dataset>, opts: BatchOptions) -> Result<BatchIter> {
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed.unwrap_or(0));
    if opts.shuffle_seed.is_some() {
        order.shuffle(&mut rng);
    }
    Ok(BatchIter {
        data,
        order,
        pos: 0,
        rng,
        opts,
    })
}

impl BatchIter {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }

    fn make(&mut self, idx: Vec<usize>) -> Result<Batch> {
        let mut x = self.data.images.select_batch(&idx)?;
        if self.opts.augment {
            let (_, c, h, w) = x.dims4()?;
            for img in x.data_mut().chunks_mut(c * h * w) {
                augment_image(img, c, h, w, &mut self.rng);
            }
        }
        finish_batch(&self.data, x, idx, self.opts.norm.as_ref())
    }
}

fn finish_batch(data: &Dataset, mut x: Tensor, idx: Vec<usize>, norm: Option<&NormStats>) -> Result<Batch> {
    if let Some(norm) = norm {
        norm.apply(&mut x)?;
    }
    let x_low = derive_low(&x)?;
    Ok(Batch {
        x_high: x,
        x_low,
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
        indices: idx,
    })
}

/// Unshuffled, unaugmented batch of samples `range`.
pub fn eval_batch(data: &Dataset, range: Range<usize>, norm: Option<&NormStats>) -> Result<Batch> {
    let x = data.images.slice_batch(range.start, range.end)?;
    finish_batch(data, x, range.collect(), norm)
}

impl Iterator for BatchIter {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.make(idx))
    }
}

/// Runs a batch iterator on a producer thread behind a bounded queue.
pub struct Prefetch {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetch {
    pub fn spawn(iter: BatchIter) -> Self {
        let (tx, rx) = sync_channel(PREFETCH_DEPTH);
        let handle = std::thread::spawn(move || {
            for b in iter {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        Prefetch {
            rx,
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetch {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetch {
    fn drop(&mut self) {
        // Unblock a producer waiting on a full queue before joining it.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Arc<Dataset> {
        Arc::new(synthetic_intensity(n, 1, 4, 3))
    }

    fn opts(batch_size: usize, seed: Option<u64>) -> BatchOptions {
        BatchOptions {
            batch_size,
            shuffle_seed: seed,
            augment: false,
            norm: None,
        }
    }

    #[test]
    fn partition_sizes() {
        let sizes: Vec<usize> = batches(ds(10), opts(3, Some(1)))
            .unwrap()
            .map(|b| b.unwrap().labels.len())
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let order = |seed| {
            batches(ds(50), opts(7, Some(seed)))
                .unwrap()
                .flat_map(|b| b.unwrap().indices)
                .collect::<Vec<_>>()
        };
        let a = order(9);
        assert_eq!(a, order(9));
        assert_ne!(a, order(10));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn unaugmented_batches_pass_through() {
        let d = ds(6);
        let b = batches(d.clone(), opts(6, None)).unwrap().next().unwrap().unwrap();
        assert_eq!(b.x_high.data(), d.images.data());
    }

    #[test]
    fn derive_low_mean() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(derive_low(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(8, 5), 0);
    }

    #[test]
    fn augmentation_keeps_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut img: Vec<f32> = (0..2 * 8 * 8).map(|v| v as f32).collect();
        let orig = img.clone();
        augment_image(&mut img, 2, 8, 8, &mut rng);
        // Every output value comes from the same channel of the source.
        for (i, v) in img.iter().enumerate() {
            let ch = i / 64;
            assert!(orig[ch * 64..(ch + 1) * 64].contains(v));
        }
    }

    #[test]
    fn prefetch_matches_direct() {
        let d = ds(20);
        let direct: Vec<_> = batches(d.clone(), opts(4, Some(5)))
            .unwrap()
            .map(|b| b.unwrap().indices)
            .collect();
        let pre: Vec<_> = Prefetch::spawn(batches(d, opts(4, Some(5))).unwrap())
            .map(|b| b.unwrap().indices)
            .collect();
        assert_eq!(direct, pre);
    }
}
