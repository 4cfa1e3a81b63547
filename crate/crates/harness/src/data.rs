//! Datasets: the synthetic grating task, the `PGPD1` image / `PGPL1` label
//! files, and per-channel normalization.
//!
//! Synthetic samples are oriented cosine gratings with a random phase and
//! colour, buried in unit Gaussian noise. Every wave vector is a multiple of a
//! quarter cycle per pixel in both axes, so on the grid left by two stride-2
//! stages each class pattern aliases to a constant. Recognising the class from
//! one subsampling phase therefore depends on what the first layers extract
//! before downsampling.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use pgp_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub const IMAGES_MAGIC: &[u8; 6] = b"PGPD1\n";
pub const LABELS_MAGIC: &[u8; 6] = b"PGPL1\n";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";

/// Wave vectors in quarter cycles per pixel, one per class.
const WAVES: [(i32, i32); 9] = [
    (1, 0),
    (0, 1),
    (1, 1),
    (1, -1),
    (2, 0),
    (0, 2),
    (2, 1),
    (1, 2),
    (2, 2),
];

/// Pixel value = 127.5 + PIXEL_SCALE · signal, clamped to u8.
const PIXEL_SCALE: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Unnormalized images as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// `(n, c, h, w)` row-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.len(), self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Grating amplitude relative to the unit noise.
    pub amplitude: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, h: usize, w: usize, train: usize, test: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            h,
            w,
            train,
            test,
            seed,
            amplitude: 0.5,
        }
    }

    pub fn descriptor(&self) -> String {
        format!(
            "synthetic:gratings classes={} size={}x{} train={} test={} seed={} amplitude={}",
            self.classes, self.h, self.w, self.train, self.test, self.seed, self.amplitude
        )
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::new(4, 16, 16, 2000, 500, 0)
    }
}

pub fn max_synthetic_classes() -> usize {
    WAVES.len()
}

/// Both splits of the synthetic task; the split streams are independent.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(RawDataset, RawDataset)> {
    ensure!(spec.classes >= 1, "need at least one class");
    ensure!(
        spec.classes <= WAVES.len(),
        "the grating generator supports at most {} classes, got {}",
        WAVES.len(),
        spec.classes
    );
    ensure!(
        spec.h > 0 && spec.w > 0 && spec.h % 4 == 0 && spec.w % 4 == 0,
        "image size {}x{} must be positive and divisible by 4",
        spec.h,
        spec.w
    );
    for (n, split) in [(spec.train, "train"), (spec.test, "test")] {
        ensure!(
            n >= spec.classes,
            "{split} split has {n} samples, fewer than the {} classes",
            spec.classes
        );
    }
    Ok((gen_split(spec, spec.train, 0), gen_split(spec, spec.test, 1)))
}

fn gen_split(spec: &SyntheticSpec, n: usize, stream: u64) -> RawDataset {
    let (h, w) = (spec.h, spec.w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let (ky, kx) = WAVES[class];
        let (ky, kx) = (ky as f64 / 4.0, kx as f64 / 4.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let colour: [f64; 3] = std::array::from_fn(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(0.5..1.0)
        });
        for &col in &colour {
            for y in 0..h {
                for x in 0..w {
                    let g = (2.0 * PI * (ky * y as f64 + kx * x as f64) + phase).cos();
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = 127.5 + PIXEL_SCALE * (noise + spec.amplitude * col * g);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(class as u16);
    }
    RawDataset {
        c: 3,
        h,
        w,
        pixels,
        labels,
    }
}

/// Writes `images.bin` and `labels.bin` into `dir`, creating it.
pub fn write_split(dir: &Path, data: &RawDataset) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut img = IMAGES_MAGIC.to_vec();
    for d in [data.len(), data.c, data.h, data.w] {
        img.extend_from_slice(&(d as u32).to_le_bytes());
    }
    img.extend_from_slice(&data.pixels);
    std::fs::write(dir.join(IMAGES_FILE), img)?;

    let mut lab = LABELS_MAGIC.to_vec();
    lab.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for &l in &data.labels {
        lab.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(dir.join(LABELS_FILE), lab)?;
    Ok(())
}

fn header(bytes: &[u8], magic: &[u8; 6], fields: usize, file: &Path) -> Result<Vec<usize>> {
    let need = magic.len() + 4 * fields;
    ensure!(
        bytes.len() >= need,
        "{}: truncated header, expected at least {need} bytes, found {}",
        file.display(),
        bytes.len()
    );
    ensure!(&bytes[..magic.len()] == magic, "{}: bad magic", file.display());
    Ok(bytes[magic.len()..need]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect())
}

/// Reads and validates one split directory. Labels must lie in `[0, classes)`.
pub fn read_split(dir: &Path, classes: usize) -> Result<RawDataset> {
    let img_path = dir.join(IMAGES_FILE);
    let lab_path = dir.join(LABELS_FILE);
    let img = std::fs::read(&img_path).with_context(|| format!("reading {}", img_path.display()))?;
    let lab = std::fs::read(&lab_path).with_context(|| format!("reading {}", lab_path.display()))?;

    let dims = header(&img, IMAGES_MAGIC, 4, &img_path)?;
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let expected = 22 + n * c * h * w;
    ensure!(
        img.len() == expected,
        "{}: expected {expected} bytes for {n}x{c}x{h}x{w} pixels, found {}",
        img_path.display(),
        img.len()
    );

    let ln = header(&lab, LABELS_MAGIC, 1, &lab_path)?[0];
    ensure!(
        ln == n,
        "{}: {ln} labels for {n} images",
        lab_path.display()
    );
    let expected = 10 + 2 * n;
    ensure!(
        lab.len() == expected,
        "{}: expected {expected} bytes for {n} labels, found {}",
        lab_path.display(),
        lab.len()
    );
    let labels: Vec<u16> = lab[10..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
        bail!("{}: label {l} of sample {i} is not below the class count {classes}", lab_path.display());
    }
    Ok(RawDataset {
        c,
        h,
        w,
        pixels: img[22..].to_vec(),
        labels,
    })
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(data: &RawDataset) -> Normalization {
        let plane = data.h * data.w;
        let mut sum = vec![0.0f64; data.c];
        let mut sq = vec![0.0f64; data.c];
        for (k, block) in data.pixels.chunks(plane).enumerate() {
            let ch = k % data.c;
            for &p in block {
                let v = p as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let count = (data.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Normalization { mean, std }
    }

    /// Normalized value of a `[0, 1]` pixel in channel `c`.
    pub fn apply(&self, c: usize, v: f64) -> f32 {
        ((v - self.mean[c]) / self.std[c]) as f32
    }
}

/// A split ready for training: normalized images and class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: String,
    /// Statistics used for `images`, always from the train split.
    pub norm: Normalization,
}

impl Dataset {
    pub fn new(raw: &RawDataset, norm: &Normalization, classes: usize, split: Split, provenance: String) -> Result<Self> {
        ensure!(norm.mean.len() == raw.c, "normalization has {} channels, data {}", norm.mean.len(), raw.c);
        let plane = raw.h * raw.w;
        let mut data = Vec::with_capacity(raw.pixels.len());
        for (k, block) in raw.pixels.chunks(plane).enumerate() {
            let ch = k % raw.c;
            data.extend(block.iter().map(|&p| norm.apply(ch, p as f64 / 255.0)));
        }
        Ok(Dataset {
            images: Tensor::new(raw.shape(), data)?,
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
            classes,
            split,
            provenance,
            norm: norm.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels of the given samples, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape();
        let per = s.c * s.plane();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let x = Tensor::new(s.with_batch(idx.len()), data).expect("consistent shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Train and test splits normalized with train statistics.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn from_raw(train: &RawDataset, test: &RawDataset, classes: usize, provenance: &str) -> Result<Self> {
        ensure!(
            (train.c, train.h, train.w) == (test.c, test.h, test.w),
            "train images are {}x{}x{} but test images are {}x{}x{}",
            train.c,
            train.h,
            train.w,
            test.c,
            test.h,
            test.w
        );
        let norm = Normalization::fit(train);
        Ok(Splits {
            train: Dataset::new(train, &norm, classes, Split::Train, provenance.to_string())?,
            test: Dataset::new(test, &norm, classes, Split::Test, provenance.to_string())?,
        })
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        let (train, test) = gen_synthetic(spec)?;
        Splits::from_raw(&train, &test, spec.classes, &spec.descriptor())
    }
}

/// Writes `train/` and `test/` split directories under `dir`.
pub fn export(dir: &Path, train: &RawDataset, test: &RawDataset) -> Result<()> {
    write_split(&dir.join(Split::Train.as_str()), train)?;
    write_split(&dir.join(Split::Test.as_str()), test)
}

/// Loads a directory written by [`export`].
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Splits> {
    let train = read_split(&dir.join(Split::Train.as_str()), classes)?;
    let test = read_split(&dir.join(Split::Test.as_str()), classes)?;
    Splits::from_raw(&train, &test, classes, &dir.display().to_string())
}
