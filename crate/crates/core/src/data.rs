//! CIFAR-10 ingestion, standardization, augmentation, batching and a
//! synthetic stand-in dataset.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_LEN: usize = CHANNELS * PLANE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_LEN: usize = 1 + IMAGE_LEN;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const CIFAR_CLASSES: usize = 10;
/// Zero padding added on each side before the random crop.
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images `[M, 3, 32, 32]` with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [CHANNELS, SIDE, SIDE] || shape[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                reason: format!("images {shape:?} with {} labels", labels.len()),
            });
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// The records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Dataset {
            images: Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], data).unwrap(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// The first `n` records (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers a normalized batch `[B, 3, 32, 32]`, augmenting each image
    /// first when `augment_rng` is given.
    pub fn batch(
        &self,
        indices: &[usize],
        stats: &ChannelStats,
        mut augment_rng: Option<&mut ChaCha8Rng>,
    ) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * IMAGE_LEN);
        for &i in indices {
            let start = data.len();
            match augment_rng.as_deref_mut() {
                Some(rng) => data.extend_from_slice(augment(self.image(i), rng).data()),
                None => data.extend_from_slice(self.image(i)),
            }
            stats.apply(&mut data[start..]);
        }
        Tensor::new(&[indices.len(), CHANNELS, SIDE, SIDE], data).unwrap()
    }
}

/// Per-channel mean and standard deviation of the training images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    /// Leaves values unchanged.
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        let count = (dataset.len() * PLANE) as f64;
        for c in 0..CHANNELS {
            let planes = || {
                (0..dataset.len())
                    .flat_map(move |i| dataset.image(i)[c * PLANE..(c + 1) * PLANE].iter())
            };
            let m = planes().map(|&v| v as f64).sum::<f64>() / count;
            let var = planes().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            if var.is_nan() || var <= 0.0 {
                return Err(Error::ZeroStd { channel: c });
            }
            mean[c] = m as f32;
            std[c] = var.sqrt() as f32;
        }
        Ok(ChannelStats { mean, std })
    }

    /// Standardizes one `[3, 32, 32]` image in place.
    pub fn apply(&self, image: &mut [f32]) {
        for (c, plane) in image.chunks_mut(image.len() / CHANNELS).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// `(x - mean_c) / std_c` for `[N, 3, H, W]` or `[3, H, W]` tensors.
pub fn normalize(x: &Tensor<f32>, stats: &ChannelStats) -> Result<Tensor<f32>> {
    if let Some(c) = stats.std.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroStd { channel: c });
    }
    let shape = x.shape();
    let channel_axis = shape.len().checked_sub(3);
    if channel_axis.is_none_or(|a| shape[a] != CHANNELS) {
        return Err(Error::InvalidShape {
            op: "normalize",
            reason: format!("expected [.., 3, H, W], got {shape:?}"),
        });
    }
    let per_image = CHANNELS * shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut out = x.clone();
    for image in out.data_mut().chunks_mut(per_image) {
        stats.apply(image);
    }
    Ok(out)
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected: (bytes.len() / RECORD_LEN * RECORD_LEN) as u64,
            found: bytes.len() as u64,
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for (record, chunk) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = chunk[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::BadLabel {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label as usize);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_batch_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let expected = (RECORDS_PER_FILE * RECORD_LEN) as u64;
    let found = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if found != expected {
        return Err(Error::FileSize {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path)
}

/// Loads the five training files and the test file from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train_pixels = Vec::new();
    let mut train_labels = Vec::new();
    for name in TRAIN_FILES {
        let (p, l) = read_batch_file(&dir.join(name))?;
        train_pixels.extend(p);
        train_labels.extend(l);
    }
    let (test_pixels, test_labels) = read_batch_file(&dir.join(TEST_FILE))?;
    let images =
        |pixels: Vec<f32>, n: usize| Tensor::new(&[n, CHANNELS, SIDE, SIDE], pixels).unwrap();
    let train = Dataset::new(
        images(train_pixels, train_labels.len()),
        train_labels,
        Split::Train,
    )?;
    let test = Dataset::new(
        images(test_pixels, test_labels.len()),
        test_labels,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Zero-pads by [`CROP_PAD`], takes the 32x32 window at `(top, left)` of the
/// padded image and optionally mirrors it horizontally.
pub fn crop_flip(image: &[f32], top: usize, left: usize, flip: bool) -> Tensor<f32> {
    assert!(
        top <= 2 * CROP_PAD && left <= 2 * CROP_PAD,
        "crop offset out of range"
    );
    let mut out = Tensor::zeros(&[CHANNELS, SIDE, SIDE]);
    let dst = out.data_mut();
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            let Some(sy) = (y + top).checked_sub(CROP_PAD).filter(|&s| s < SIDE) else {
                continue;
            };
            for x in 0..SIDE {
                let px = if flip { SIDE - 1 - x } else { x };
                if let Some(sx) = (px + left).checked_sub(CROP_PAD).filter(|&s| s < SIDE) {
                    dst[(c * SIDE + y) * SIDE + x] = image[(c * SIDE + sy) * SIDE + sx];
                }
            }
        }
    }
    out
}

/// Random pad-and-crop plus a horizontal flip with probability 1/2.
pub fn augment(image: &[f32], rng: &mut impl Rng) -> Tensor<f32> {
    let top = rng.random_range(0..=2 * CROP_PAD);
    let left = rng.random_range(0..=2 * CROP_PAD);
    let flip = rng.random_bool(0.5);
    crop_flip(image, top, left, flip)
}

/// Order of records for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
    pub drop_last: bool,
}

impl BatchPlan {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * self.epoch as u64 + stream);
        rng
    }

    /// Permutation of `0..len`, fixed by `(seed, epoch)`.
    pub fn permutation(&self, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.rng(0));
        order
    }

    pub fn batches(&self, len: usize) -> Vec<Vec<usize>> {
        self.permutation(len)
            .chunks(self.batch_size.max(1))
            .filter(|b| !self.drop_last || b.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Random source for this epoch's augmentation.
    pub fn augment_rng(&self) -> ChaCha8Rng {
        self.rng(1)
    }
}

/// Gaussian-blob images: each class has its own blob position, width,
/// colour and background; samples jitter the blob and add pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Standard deviation, in pixels, of the blob centre jitter.
    pub jitter: f32,
}

impl SyntheticConfig {
    pub fn new(classes: usize, per_class: usize, seed: u64) -> Self {
        SyntheticConfig {
            classes,
            per_class,
            seed,
            noise: 0.05,
            jitter: 1.5,
        }
    }

    /// Samples a split. Both splits share the class prototypes of `seed` but
    /// draw different samples. Labels cycle `0, 1, .., classes-1`.
    pub fn generate(&self, split: Split) -> Dataset {
        struct Prototype {
            cy: f32,
            cx: f32,
            sigma: f32,
            color: [f32; 3],
            background: [f32; 3],
        }
        let mut proto_rng = ChaCha8Rng::seed_from_u64(self.seed);
        let prototypes: Vec<Prototype> = (0..self.classes)
            .map(|_| Prototype {
                cy: proto_rng.random_range(8.0..24.0),
                cx: proto_rng.random_range(8.0..24.0),
                sigma: proto_rng.random_range(3.0..6.0),
                color: std::array::from_fn(|_| proto_rng.random_range(0.2..1.0)),
                background: std::array::from_fn(|_| proto_rng.random_range(0.0..0.3)),
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 1,
            Split::Test => 2,
        });
        let noise = Normal::new(0.0f32, self.noise).expect("finite noise");
        let jitter = Normal::new(0.0f32, self.jitter).expect("finite jitter");
        let m = self.classes * self.per_class;
        let mut data = Vec::with_capacity(m * IMAGE_LEN);
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let label = i % self.classes;
            let p = &prototypes[label];
            let cy = p.cy + jitter.sample(&mut rng);
            let cx = p.cx + jitter.sample(&mut rng);
            let inv = 1.0 / (2.0 * p.sigma * p.sigma);
            for c in 0..CHANNELS {
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        let v = p.background[c]
                            + p.color[c] * (-d2 * inv).exp()
                            + noise.sample(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(
            Tensor::new(&[m, CHANNELS, SIDE, SIDE], data).unwrap(),
            labels,
            split,
        )
        .unwrap()
    }
}

/// Training split of the default synthetic configuration.
pub fn synthetic_dataset(classes: usize, per_class: usize, seed: u64) -> Dataset {
    SyntheticConfig::new(classes, per_class, seed).generate(Split::Train)
}
