//! Long-tailed class profiles, class priors, head/tail grouping and the
//! synthetic texture dataset generator.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-class sample counts and their normalized priors `π_k = n_k / Σ n_j`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassPrior {
    counts: Vec<usize>,
    priors: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            bail!(Contract, "no classes");
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::DegenerateClass {
                class: k,
                reason: "class has no samples".into(),
            });
        }
        let total: usize = counts.iter().sum();
        let priors = counts.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(Self {
            counts: counts.to_vec(),
            priors,
        })
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        Self::from_counts(&vec![1; num_classes])
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// `ln π_k` for every class.
    pub fn log_priors(&self) -> Vec<f64> {
        self.priors.iter().map(|&p| math::ln(p)).collect()
    }
}

/// Geometric long-tail profile: `C` classes from `n_max` down to `n_max / IF`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LongTailProfile {
    pub num_classes: usize,
    pub n_max: usize,
    pub imbalance_factor: f64,
}

impl LongTailProfile {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if !(self.imbalance_factor >= 1.0) {
            bail!(Config, "imbalance factor must be >= 1, got {}", self.imbalance_factor);
        }
        if (self.n_max as f64) < self.imbalance_factor {
            bail!(
                Config,
                "n_max {} is below the imbalance factor {}",
                self.n_max,
                self.imbalance_factor
            );
        }
        Ok(())
    }
}

/// `n_k = round(n_max · IF^(−k/(C−1)))`, nonincreasing, `n_0 = n_max`.
pub fn make_exponential_counts(profile: &LongTailProfile) -> Result<Vec<usize>> {
    profile.validate()?;
    let c = profile.num_classes;
    Ok((0..c)
        .map(|k| {
            let decay = math::pow(profile.imbalance_factor, -(k as f64) / (c - 1) as f64);
            (math::round(profile.n_max as f64 * decay) as usize).max(1)
        })
        .collect())
}

/// `max(counts) / min(counts)`.
pub fn imbalance_factor(counts: &[usize]) -> Result<f64> {
    let (Some(&max), Some(&min)) = (counts.iter().max(), counts.iter().min()) else {
        bail!(Contract, "imbalance factor of no classes");
    };
    if min == 0 {
        bail!(Contract, "class with zero samples");
    }
    Ok(max as f64 / min as f64)
}

/// Frequency group of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Many iff `n_k > t_many`, Few iff `n_k < t_few`, otherwise Medium.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupAssignment {
    pub tags: Vec<Group>,
    pub t_many: usize,
    pub t_few: usize,
}

pub const DEFAULT_T_MANY: usize = 100;
pub const DEFAULT_T_FEW: usize = 20;

pub fn group_split(counts: &[usize], t_many: usize, t_few: usize) -> Result<GroupAssignment> {
    if t_few < 1 || t_many <= t_few {
        bail!(Config, "need t_many > t_few >= 1, got {t_many} and {t_few}");
    }
    let tags = counts
        .iter()
        .map(|&n| {
            if n > t_many {
                Group::Many
            } else if n < t_few {
                Group::Few
            } else {
                Group::Medium
            }
        })
        .collect();
    Ok(GroupAssignment {
        tags,
        t_many,
        t_few,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Images `[n, H, W, channels]` with values in `[0, 1]` and their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 {
            bail!(Dimension, "images must be [n, H, W, channels], got {:?}", images.shape());
        }
        if images.shape()[0] != labels.len() {
            bail!(Dimension, "{} images but {} labels", images.shape()[0], labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            bail!(Contract, "label {bad} out of range for {num_classes} classes");
        }
        Ok(Self {
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

    /// `[H, W, channels]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Images and labels of the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::new(vec![idx.len(), h, w, c], data).expect("batch shape");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Counts and normalized priors of a labeled dataset; every class must occur.
pub fn class_priors(ds: &LabeledDataset) -> Result<ClassPrior> {
    ClassPrior::from_counts(&ds.class_counts())
}

/// Knobs of the synthetic texture generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthParams {
    pub image_size: usize,
    pub channels: usize,
    /// Gaussian blur width (pixels) applied to white noise to form textures.
    pub smoothness: f64,
    /// Amplitude of the class-specific texture.
    pub separation: f64,
    /// Amplitude of the texture shared by all classes.
    pub shared: f64,
    /// Per-sample contrast jitter: class texture scaled by `U(1 - j, 1 + j)`.
    pub contrast_jitter: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub noise: f64,
    /// Validation and test sizes as fractions of each class's train count.
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Give every class the head class's test count instead of mirroring the train skew.
    pub balanced_test: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            smoothness: 1.5,
            separation: 0.25,
            shared: 0.15,
            contrast_jitter: 0.3,
            noise: 0.2,
            val_ratio: 0.2,
            test_ratio: 0.5,
            balanced_test: false,
        }
    }
}

/// Train, validation and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl SplitSet {
    pub fn get(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn eval_counts(train: &[usize], ratio: f64) -> Vec<usize> {
    train
        .iter()
        .map(|&n| (math::round(n as f64 * ratio) as usize).max(1))
        .collect()
}

/// Cyclic separable Gaussian blur of an `[h, w, c]` field, then standardized.
fn texture(size: usize, channels: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let n = size * size * channels;
    let mut field: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| math::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let idx = |y: usize, x: usize, c: usize| (y * size + x) * channels + c;
    let wrap = |v: isize| v.rem_euclid(size as isize) as usize;
    if sigma > 0.0 {
        for axis in 0..2 {
            let mut out = vec![0.0; n];
            for y in 0..size {
                for x in 0..size {
                    for c in 0..channels {
                        let mut s = 0.0;
                        for (k, &kv) in kernel.iter().enumerate() {
                            let d = k as isize - radius;
                            let (yy, xx) = if axis == 0 {
                                (wrap(y as isize + d), x)
                            } else {
                                (y, wrap(x as isize + d))
                            };
                            s += kv * field[idx(yy, xx, c)];
                        }
                        out[idx(y, x, c)] = s;
                    }
                }
            }
            field = out;
        }
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    let std = math::sqrt(field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64);
    field.iter().map(|v| (v - mean) / std.max(1e-12)).collect()
}

const SHARED_STREAM: u64 = u64::MAX;

/// Render long-tailed train/val/test splits of per-class texture images.
///
/// Train counts follow [`make_exponential_counts`]; validation and test
/// counts are `max(1, round(n_k · ratio))`, so they mirror the training
/// imbalance unless `balanced_test` is set. Every sample of class `k` in a
/// split is drawn from a stream keyed by `(seed, split, k)`, and pixels are
/// rounded to `f32` so the data round-trips through 32-bit storage exactly.
pub fn synth_longtail(profile: &LongTailProfile, params: &SynthParams, rng: &Rng) -> Result<SplitSet> {
    let counts = make_exponential_counts(profile)?;
    if params.image_size == 0 || params.channels == 0 {
        bail!(Config, "image size and channels must be positive");
    }
    for (name, r) in [("val", params.val_ratio), ("test", params.test_ratio)] {
        if !(r > 0.0) || math::round(profile.n_max as f64 * r) < 1.0 {
            bail!(
                Config,
                "n_max {} too small for a {name} split at ratio {r}",
                profile.n_max
            );
        }
    }
    let c = profile.num_classes;
    let size = params.image_size;
    let protos: Vec<Vec<f64>> = (0..c)
        .map(|k| texture(size, params.channels, params.smoothness, &mut rng.derive(k as u64)))
        .collect();
    let shared = texture(size, params.channels, params.smoothness, &mut rng.derive(SHARED_STREAM));

    let val_counts = eval_counts(&counts, params.val_ratio);
    let mut test_counts = eval_counts(&counts, params.test_ratio);
    if params.balanced_test {
        let head = test_counts[0];
        test_counts.iter_mut().for_each(|n| *n = head);
    }

    let render = |split: Split, split_counts: &[usize]| -> Result<LabeledDataset> {
        let per = size * size * params.channels;
        let total: usize = split_counts.iter().sum();
        let mut data = Vec::with_capacity(total * per);
        let mut labels = Vec::with_capacity(total);
        for (k, &n) in split_counts.iter().enumerate() {
            let mut r = rng.derive(((split as u64 + 1) << 32) | k as u64);
            for _ in 0..n {
                let contrast = 1.0 + params.contrast_jitter * r.uniform_range(-1.0, 1.0);
                for p in 0..per {
                    let v = 0.5
                        + params.separation * contrast * protos[k][p]
                        + params.shared * shared[p]
                        + params.noise * r.normal();
                    data.push(v.clamp(0.0, 1.0) as f32 as f64);
                }
                labels.push(k);
            }
        }
        let images = Tensor::new(vec![total, size, size, params.channels], data)?;
        LabeledDataset::new(images, labels, c, split)
    };

    Ok(SplitSet {
        train: render(Split::Train, &counts)?,
        val: render(Split::Val, &val_counts)?,
        test: render(Split::Test, &test_counts)?,
    })
}
