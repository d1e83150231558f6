//! Datasets: MNIST IDX files and seeded synthetic Gaussian-blob images.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, C, H, W]` with values in `[0, 1]` plus one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::dim(format!("images must be [N, C, H, W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!("label {bad} is outside 0..{class_count}")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers the given samples into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape is consistent");
        (images, labels)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            class_count: self.class_count,
            split: self.split,
        }
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_idx(path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = read_u32_be(&bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let extents: Vec<usize> = (0..dims).map(|d| read_u32_be(&bytes, 4 + 4 * d) as usize).collect();
    let expected = header as u64 + extents.iter().map(|&e| e as u64).product::<u64>();
    if bytes.len() as u64 != expected {
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        return Err(Error::InvalidInput(format!(
            "{}: {} trailing bytes after the IDX payload",
            path.display(),
            bytes.len() as u64 - expected
        )));
    }
    Ok((extents, bytes[header..].to_vec()))
}

/// Parses an IDX image file (magic `0x803`, `N x H x W` bytes) and its label
/// file (magic `0x801`). Pixels are divided by 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if n != ldims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput(format!("{}: no images", images_path.display())));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::from_vec(&[n, 1, h, w], data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(images, labels, class_count, Split::Train)
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    let mut d = load_idx(&images, &labels)?;
    d.split = split;
    Ok(d)
}

/// Parameters of a synthetic dataset. Both splits of one seed share the
/// class prototypes and differ only in the sampled instances.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Gaussian blobs per class prototype.
    pub blobs: usize,
    /// Standard deviation, in pixels, of the per-sample blob jitter.
    pub jitter: f64,
    /// Half-range of the uniform per-pixel noise.
    pub noise: f64,
    pub split: Split,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            n_per_class: 100,
            seed: 0,
            channels: 1,
            height: 28,
            width: 28,
            blobs: 3,
            jitter: 1.0,
            noise: 0.05,
            split: Split::Train,
        }
    }
}

impl SynthSpec {
    /// Parses `key=value` pairs separated by commas, e.g. `classes=4,n=50,seed=3,split=test`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for pair in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("synthetic spec entry {pair:?} is not key=value")))?;
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("{key}: {value:?} is not an integer")))
            };
            let real = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("{key}: {value:?} is not a number")))
            };
            match key {
                "classes" => spec.classes = int()?,
                "n" | "n_per_class" => spec.n_per_class = int()?,
                "seed" => spec.seed = int()? as u64,
                "channels" => spec.channels = int()?,
                "size" => {
                    spec.height = int()?;
                    spec.width = spec.height;
                }
                "height" => spec.height = int()?,
                "width" => spec.width = int()?,
                "blobs" => spec.blobs = int()?,
                "jitter" => spec.jitter = real()?,
                "noise" => spec.noise = real()?,
                "split" => {
                    spec.split = match value {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        _ => return Err(Error::InvalidInput(format!("unknown split {value:?}"))),
                    }
                }
                _ => return Err(Error::InvalidInput(format!("unknown synthetic spec key {key:?}"))),
            }
        }
        Ok(spec)
    }
}

/// `classes * n_per_class` images on the default 1x28x28 canvas.
pub fn synthetic_dataset(classes: usize, n_per_class: usize, seed: u64) -> Result<Dataset> {
    synthetic_dataset_with(&SynthSpec {
        classes,
        n_per_class,
        seed,
        ..SynthSpec::default()
    })
}

/// Renders seeded class prototypes (a few Gaussian blobs per class and
/// channel) with per-sample blob jitter and pixel noise. Labels cycle
/// through the classes so every prefix is nearly balanced.
pub fn synthetic_dataset_with(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::InvalidInput("synthetic data needs at least two classes".into()));
    }
    if spec.n_per_class == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0 || spec.blobs == 0 {
        return Err(Error::InvalidInput("synthetic dataset extents must be positive".into()));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // (cx, cy, radius, amplitude) per class, channel and blob
    let prototypes: Vec<Vec<(f64, f64, f64, f64)>> = (0..spec.classes * c)
        .map(|_| {
            (0..spec.blobs)
                .map(|_| {
                    (
                        proto_rng.gen_range(0.15..0.85) * w as f64,
                        proto_rng.gen_range(0.15..0.85) * h as f64,
                        proto_rng.gen_range(0.06..0.14) * h.min(w) as f64,
                        proto_rng.gen_range(0.6..1.0),
                    )
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match spec.split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.classes;
        labels.push(label);
        for ch in 0..c {
            let blobs: Vec<(f64, f64, f64, f64)> = prototypes[label * c + ch]
                .iter()
                .map(|&(x, y, r, a)| (x + jitter.sample(&mut rng), y + jitter.sample(&mut rng), r, a))
                .collect();
            for py in 0..h {
                for px in 0..w {
                    let mut v: f64 = blobs
                        .iter()
                        .map(|&(x, y, r, a)| {
                            let d2 = (px as f64 + 0.5 - x).powi(2) + (py as f64 + 0.5 - y).powi(2);
                            a * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    if spec.noise > 0.0 {
                        v += rng.gen_range(-spec.noise..=spec.noise);
                    }
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let images = Tensor::from_vec(&[n, c, h, w], data)?;
    Dataset::new(images, labels, spec.classes, spec.split)
}
