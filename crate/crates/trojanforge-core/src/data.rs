//! Dataset ingestion, trigger embedding, and dataset poisoning.
//!
//! Covers the IDX binary image format, a seeded synthetic blob generator
//! for fast property checks, patch-trigger embedding, selection of the
//! poisoned subset at a given ratio, and Gaussian probe inputs for the
//! detector game.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::LabelDist;
use crate::scalar::Scalar;

/// IDX magic number for unsigned-byte rank-3 image files.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic number for unsigned-byte rank-1 label files.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset of flat feature vectors with entries in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<Vec<T>>,
    labels: Vec<usize>,
    num_classes: usize,
    image_side: Option<usize>,
}

/// One training example: input features plus a target distribution.
#[derive(Debug, Clone)]
pub struct TrainPair<T> {
    pub input: Vec<T>,
    pub target: LabelDist<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        samples: Vec<Vec<T>>,
        labels: Vec<usize>,
        num_classes: usize,
        image_side: Option<usize>,
    ) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        let dim = samples.first().map(Vec::len).unwrap_or(0);
        for (i, s) in samples.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::invalid(format!(
                    "sample {i} has length {}, expected {dim}",
                    s.len()
                )));
            }
            if s.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::invalid(format!("sample {i} has features outside [0,1]")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(side) = image_side {
            if side * side != dim {
                return Err(Error::invalid(format!(
                    "image side {side} does not square to feature dim {dim}"
                )));
            }
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            image_side,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map(Vec::len).unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_side(&self) -> Option<usize> {
        self.image_side
    }

    pub fn sample(&self, i: usize) -> &[T] {
        &self.samples[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn samples(&self) -> &[Vec<T>] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples as a new dataset (or all of them if `n` exceeds the
    /// length). Used to carve desk-scale subsets out of larger files.
    pub fn head(&self, n: usize) -> Dataset<T> {
        let n = n.min(self.len());
        Dataset {
            samples: self.samples[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            image_side: self.image_side,
        }
    }

    /// Training pairs with one-hot true labels.
    pub fn pairs(&self) -> Vec<TrainPair<T>> {
        self.samples
            .iter()
            .zip(&self.labels)
            .map(|(x, &l)| TrainPair {
                input: x.clone(),
                target: LabelDist::one_hot(self.num_classes, l).expect("label in range"),
            })
            .collect()
    }

    /// Global mean and standard deviation over every feature of every
    /// sample. Default probe statistics come from here.
    pub fn feature_stats(&self) -> (T, T) {
        let mut count = 0usize;
        let mut mean = T::zero();
        for s in &self.samples {
            for &v in s {
                mean += v;
                count += 1;
            }
        }
        if count == 0 {
            return (T::zero(), T::zero());
        }
        mean = mean / T::of_usize(count);
        let mut var = T::zero();
        for s in &self.samples {
            for &v in s {
                let d = v - mean;
                var += d * d;
            }
        }
        var = var / T::of_usize(count);
        (mean, var.sqrt())
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("file truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

pub(crate) fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0, "image magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "image file truncated: expected {expected} bytes for {n} images of {rows}x{cols}"
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!("{} trailing bytes after image data", bytes.len() - expected),
        });
    }
    Ok((n, rows, cols, &bytes[16..]))
}

pub(crate) fn parse_idx_labels(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let magic = read_u32_be(bytes, 0, "label magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(bytes, 4, "label count")? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("label file truncated: expected {expected} bytes for {n} labels"),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: format!("{} trailing bytes after label data", bytes.len() - expected),
        });
    }
    Ok((n, &bytes[8..]))
}

/// Loads an IDX image/label file pair, scaling pixel bytes to `[0,1]`.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (n_images, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let (n_labels, raw_labels) = parse_idx_labels(&label_bytes)?;
    if n_images != n_labels {
        return Err(Error::Format {
            offset: 4,
            message: format!("image count {n_images} does not match label count {n_labels}"),
        });
    }
    let dim = rows * cols;
    let scale = T::one() / T::of(255.0);
    let samples: Vec<Vec<T>> = (0..n_images)
        .map(|i| {
            pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&b| T::of_usize(b as usize) * scale)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let image_side = (rows == cols).then_some(rows);
    Dataset::new(samples, labels, num_classes, image_side)
}

/// Generates `k` Gaussian blobs with means placed `separation` apart on a
/// circle in the first two feature dimensions, features clipped to `[0,1]`.
/// Sample order is shuffled (seeded) so downstream splits stay balanced.
pub fn gen_synthetic<T: Scalar>(
    k: usize,
    n_per_class: usize,
    dim: usize,
    separation: T,
    seed: u64,
) -> Result<Dataset<T>> {
    if k < 2 {
        return Err(Error::invalid(format!("need k >= 2 classes, got {k}")));
    }
    if dim < 4 {
        return Err(Error::invalid(format!("need dim >= 4 features, got {dim}")));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    if !(separation > T::zero()) {
        return Err(Error::invalid("separation must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_sigma = separation / T::of(8.0);
    let radius = separation / T::of(2.0);
    let half = T::of(0.5);
    let mut samples = Vec::with_capacity(k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        let angle = T::of(2.0 * std::f64::consts::PI) * T::of_usize(class) / T::of_usize(k)
            + T::of(std::f64::consts::FRAC_PI_4);
        let mean0 = half + radius * angle.cos();
        let mean1 = half + radius * angle.sin();
        for _ in 0..n_per_class {
            let mut x = vec![half; dim];
            x[0] = mean0;
            x[1] = mean1;
            for v in &mut x {
                let draw = T::sample_standard_normal(&mut rng) * noise_sigma;
                *v = (*v + draw).max(T::zero()).min(T::one());
            }
            samples.push(x);
            labels.push(class);
        }
    }
    // Fisher-Yates with the same seeded stream.
    for i in (1..samples.len()).rev() {
        let j = rng.gen_range(0..=i);
        samples.swap(i, j);
        labels.swap(i, j);
    }
    Dataset::new(samples, labels, k, None)
}

/// A backdoor trigger: binary mask, patch values, and the target class.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec<T> {
    mask: Vec<T>,
    patch: Vec<T>,
    target_class: usize,
}

impl<T: Scalar> TriggerSpec<T> {
    pub fn new(mask: Vec<T>, patch: Vec<T>, target_class: usize) -> Result<Self> {
        if mask.len() != patch.len() {
            return Err(Error::invalid(format!(
                "mask length {} does not match patch length {}",
                mask.len(),
                patch.len()
            )));
        }
        if mask.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::invalid("mask entries must be exactly 0 or 1"));
        }
        if patch.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("patch entries must lie in [0,1]"));
        }
        Ok(Self {
            mask,
            patch,
            target_class,
        })
    }

    /// A `size`x`size` square of constant `value` with its top-left corner
    /// at (`row`, `col`) on a `side`x`side` image.
    pub fn square(
        side: usize,
        size: usize,
        row: usize,
        col: usize,
        value: T,
        target_class: usize,
    ) -> Result<Self> {
        if size == 0 || row + size > side || col + size > side {
            return Err(Error::invalid(format!(
                "{size}x{size} trigger at ({row},{col}) does not fit a {side}x{side} image"
            )));
        }
        let mut mask = vec![T::zero(); side * side];
        let mut patch = vec![T::zero(); side * side];
        for r in row..row + size {
            for c in col..col + size {
                mask[r * side + c] = T::one();
                patch[r * side + c] = value;
            }
        }
        Self::new(mask, patch, target_class)
    }

    /// A trigger over the first `len` features of a flat `dim`-vector; used
    /// for non-image data.
    pub fn prefix(dim: usize, len: usize, value: T, target_class: usize) -> Result<Self> {
        if len == 0 || len > dim {
            return Err(Error::invalid(format!(
                "prefix trigger of length {len} does not fit dim {dim}"
            )));
        }
        let mut mask = vec![T::zero(); dim];
        let mut patch = vec![T::zero(); dim];
        for i in 0..len {
            mask[i] = T::one();
            patch[i] = value;
        }
        Self::new(mask, patch, target_class)
    }

    pub fn mask(&self) -> &[T] {
        &self.mask
    }

    pub fn patch(&self) -> &[T] {
        &self.patch
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// Embeds the trigger: `x' = x * (1 - mask) + patch * mask`, elementwise.
    pub fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.mask.len() {
            return Err(Error::invalid(format!(
                "input length {} does not match trigger dim {}",
                x.len(),
                self.mask.len()
            )));
        }
        Ok(x.iter()
            .zip(&self.mask)
            .zip(&self.patch)
            .map(|((&xi, &m), &p)| xi * (T::one() - m) + p * m)
            .collect())
    }
}

/// Embeds a trigger into one sample (free-function form of
/// [`TriggerSpec::embed`]).
pub fn embed_trigger<T: Scalar>(x: &[T], trigger: &TriggerSpec<T>) -> Result<Vec<T>> {
    trigger.embed(x)
}

/// A clean dataset plus the seeded choice of which samples carry the trigger.
#[derive(Debug, Clone)]
pub struct PoisonedDataset<T> {
    clean: Dataset<T>,
    trojan_indices: Vec<usize>,
    trigger: TriggerSpec<T>,
    alpha: T,
}

/// Which classification pairs the generator's training term runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairScope {
    /// Triggered pairs plus all clean pairs (the combined poisoned set).
    #[default]
    Combined,
    /// Triggered pairs only.
    TrojanOnly,
}

impl<T: Scalar> PoisonedDataset<T> {
    pub fn clean(&self) -> &Dataset<T> {
        &self.clean
    }

    pub fn trigger(&self) -> &TriggerSpec<T> {
        &self.trigger
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn trojan_indices(&self) -> &[usize] {
        &self.trojan_indices
    }

    pub fn trojan_count(&self) -> usize {
        self.trojan_indices.len()
    }

    /// Triggered copies of the selected samples, labeled with the target
    /// class.
    pub fn trojan_pairs(&self) -> Vec<TrainPair<T>> {
        let k = self.clean.num_classes();
        let target = LabelDist::one_hot(k, self.trigger.target_class()).expect("target in range");
        self.trojan_indices
            .iter()
            .map(|&i| TrainPair {
                input: self.trigger.embed(self.clean.sample(i)).expect("shapes match"),
                target: target.clone(),
            })
            .collect()
    }

    /// Clean samples *not* selected for poisoning, with true labels. Together
    /// with [`Self::trojan_pairs`] this is the split view used for the
    /// two-term loss.
    pub fn clean_complement_pairs(&self) -> Vec<TrainPair<T>> {
        let selected: std::collections::HashSet<usize> =
            self.trojan_indices.iter().copied().collect();
        let k = self.clean.num_classes();
        (0..self.clean.len())
            .filter(|i| !selected.contains(i))
            .map(|i| TrainPair {
                input: self.clean.sample(i).to_vec(),
                target: LabelDist::one_hot(k, self.clean.label(i)).expect("label in range"),
            })
            .collect()
    }

    /// The combined training set: every clean sample with its true label
    /// plus the triggered copies with the target label.
    pub fn combined_pairs(&self) -> Vec<TrainPair<T>> {
        let mut pairs = self.clean.pairs();
        pairs.extend(self.trojan_pairs());
        pairs
    }

    pub fn pairs_for(&self, scope: PairScope) -> Vec<TrainPair<T>> {
        match scope {
            PairScope::Combined => self.combined_pairs(),
            PairScope::TrojanOnly => self.trojan_pairs(),
        }
    }
}

/// Selects `floor(alpha * N)` samples uniformly at random (without
/// replacement, seeded) to carry the trigger. The clean dataset is kept
/// unmodified; triggered copies are materialized on demand.
pub fn poison_dataset<T: Scalar>(
    clean: &Dataset<T>,
    alpha: T,
    trigger: &TriggerSpec<T>,
    seed: u64,
) -> Result<PoisonedDataset<T>> {
    if !(alpha > T::zero() && alpha < T::one()) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0,1)")));
    }
    if trigger.dim() != clean.feature_dim() {
        return Err(Error::invalid(format!(
            "trigger dim {} does not match dataset dim {}",
            trigger.dim(),
            clean.feature_dim()
        )));
    }
    let n = clean.len();
    let count = (alpha * T::of_usize(n))
        .floor()
        .to_usize()
        .ok_or_else(|| Error::invalid("alpha * N not representable"))?;
    if count == 0 {
        return Err(Error::DegenerateAlpha(format!(
            "floor({alpha} * {n}) = 0 samples selected"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index_sample(&mut rng, n, count).into_vec();
    indices.sort_unstable();
    Ok(PoisonedDataset {
        clean: clean.clone(),
        trojan_indices: indices,
        trigger: trigger.clone(),
        alpha,
    })
}

/// Random probe inputs drawn i.i.d. per feature from a clipped Gaussian.
#[derive(Debug, Clone)]
pub struct ProbeSet<T> {
    inputs: Vec<Vec<T>>,
    mu: T,
    sigma: T,
}

impl<T: Scalar> ProbeSet<T> {
    pub fn inputs(&self) -> &[Vec<T>] {
        &self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }
}

/// Draws `count` probe vectors of dimension `dim` from `N(mu, sigma)` per
/// feature, clipped to `[0,1]`; deterministic in `seed`.
pub fn sample_probes<T: Scalar>(
    count: usize,
    dim: usize,
    mu: T,
    sigma: T,
    seed: u64,
) -> Result<ProbeSet<T>> {
    if !(sigma > T::zero()) {
        return Err(Error::invalid(format!("sigma {sigma} must be positive")));
    }
    if dim == 0 {
        return Err(Error::invalid("probe dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let draw = mu + T::sample_standard_normal(&mut rng) * sigma;
                    draw.max(T::zero()).min(T::one())
                })
                .collect()
        })
        .collect();
    Ok(ProbeSet { inputs, mu, sigma })
}
