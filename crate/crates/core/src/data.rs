//! Labeled image batches, the synthetic benchmark generator and the CIFAR-10
//! binary loader.

use std::fs;
use std::path::{Path, PathBuf};

use armor_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ArmorError, Result};

/// `N×C×H×W` pixels in `[0, 1]` with labels in `[0, K)`.
///
/// The provenance flags record whether defensive noise or augmentation has
/// touched the pixels; evaluation refuses flagged data.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub noised: bool,
    pub augmented: bool,
}

/// A whole split is just a large batch.
pub type Dataset = ImageBatch;

impl ImageBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(ArmorError::Contract(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if classes == 0 {
            return Err(ArmorError::Contract("class count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(ArmorError::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ArmorError::Contract(format!(
                "pixel {} at flat index {i} outside [0, 1]",
                images.data()[i]
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            noised: false,
            augmented: false,
        })
    }

    /// Replaces the pixels of an already-validated batch, keeping labels
    /// and flags. Values are clamped into `[0, 1]`.
    pub(crate) fn with_images(&self, mut images: Tensor) -> Self {
        debug_assert_eq!(images.shape(), self.images.shape());
        for v in images.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            images,
            labels: self.labels.clone(),
            classes: self.classes,
            noised: self.noised,
            augmented: self.augmented,
        }
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.gather_outer(indices)?;
        Ok(Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            noised: self.noised,
            augmented: self.augmented,
        })
    }

    /// Indices of every sample labeled `class`, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Consecutive batches of at most `batch_size` following `order`.
    pub fn batches(&self, order: &[usize], batch_size: usize) -> Result<Vec<Self>> {
        if batch_size == 0 {
            return Err(ArmorError::Config("batch size must be positive".into()));
        }
        order.chunks(batch_size).map(|c| self.select(c)).collect()
    }
}

/// Parameters of the synthetic separable benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub per_class: usize,
    /// Peak-to-peak template amplitude, in `(0, 1]`.
    pub contrast: f32,
    /// Half-width of the uniform per-pixel jitter.
    pub jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 3,
            height: 16,
            width: 16,
            per_class: 100,
            contrast: 0.3,
            jitter: 0.1,
            seed: 0,
        }
    }
}

const BLOCK: usize = 4;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ArmorError::Config(m));
        if self.classes < 2 || self.channels == 0 || self.per_class < 5 {
            return err(format!(
                "synthetic spec needs >= 2 classes, >= 1 channel and >= 5 samples per class: {self:?}"
            ));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return err(format!("template contrast {} outside (0, 1]", self.contrast));
        }
        if !(self.jitter >= 0.0 && self.jitter < self.contrast / 2.0) {
            return err(format!(
                "jitter {} must be in [0, contrast/2 = {})",
                self.jitter,
                self.contrast / 2.0
            ));
        }
        let (gh, gw) = (self.height / BLOCK, self.width / BLOCK);
        if self.height % BLOCK != 0
            || self.width % BLOCK != 0
            || !gh.is_power_of_two()
            || !gw.is_power_of_two()
        {
            return err(format!(
                "image size {}x{} must be a power-of-two multiple of {BLOCK}",
                self.height, self.width
            ));
        }
        if self.classes > gh * gw - 1 {
            return err(format!(
                "{} classes need more than the {} non-constant block patterns of a {}x{} image",
                self.classes,
                gh * gw - 1,
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// Per-class `C×H×W` template: `0.5 ± contrast/2` following a 2-D Walsh
    /// sign pattern over 4×4 blocks, sign-flipped on odd channels.
    pub fn templates(&self) -> Result<Vec<Vec<f32>>> {
        self.validate()?;
        let (gh, gw) = (self.height / BLOCK, self.width / BLOCK);
        // Walsh functions indexed by (row frequency, column frequency),
        // lowest sequency first, excluding the constant one.
        let mut freqs: Vec<(usize, usize)> = (0..gh)
            .flat_map(|a| (0..gw).map(move |b| (a, b)))
            .filter(|&f| f != (0, 0))
            .collect();
        let changes = |f: usize, n: usize| {
            (1..n)
                .filter(|&i| (f & i).count_ones() % 2 != (f & (i - 1)).count_ones() % 2)
                .count()
        };
        freqs.sort_by_key(|&(a, b)| (changes(a, gh) + changes(b, gw), a, b));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e3a_11d5);
        let mut chosen: Vec<(usize, usize)> = freqs[..self.classes].to_vec();
        // seeded class ↔ pattern assignment
        for i in (1..chosen.len()).rev() {
            chosen.swap(i, rng.gen_range(0..=i));
        }
        let amp = self.contrast / 2.0;
        Ok(chosen
            .into_iter()
            .map(|(a, b)| {
                let mut t = Vec::with_capacity(self.channels * self.height * self.width);
                for c in 0..self.channels {
                    let flip = if c % 2 == 1 { -1.0 } else { 1.0 };
                    for y in 0..self.height {
                        for x in 0..self.width {
                            let (by, bx) = (y / BLOCK, x / BLOCK);
                            let parity = (a & by).count_ones() + (b & bx).count_ones();
                            let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
                            t.push(0.5 + amp * sign * flip);
                        }
                    }
                }
                t
            })
            .collect())
    }
}

/// Templates plus uniform jitter; the first 80% of each class's samples go
/// to the training split, the rest to the test split. Samples are
/// interleaved by class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let templates = spec.templates()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_train = spec.per_class * 4 / 5;
    let len = spec.channels * spec.height * spec.width;
    let shape = |n| vec![n, spec.channels, spec.height, spec.width];
    let (mut train_px, mut test_px) = (Vec::new(), Vec::new());
    let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
    for i in 0..spec.per_class {
        for (k, template) in templates.iter().enumerate() {
            let (px, ys) = if i < n_train {
                (&mut train_px, &mut train_y)
            } else {
                (&mut test_px, &mut test_y)
            };
            for &t in template {
                let j = if spec.jitter > 0.0 {
                    rng.gen_range(-spec.jitter..=spec.jitter)
                } else {
                    0.0
                };
                px.push((t + j).clamp(0.0, 1.0));
            }
            ys.push(k);
            debug_assert_eq!(px.len() % len, 0);
        }
    }
    let train = ImageBatch::new(Tensor::new(shape(train_y.len()), train_px)?, train_y, spec.classes)?;
    let test = ImageBatch::new(Tensor::new(shape(test_y.len()), test_px)?, test_y, spec.classes)?;
    Ok((train, test))
}

pub const CIFAR_CLASSES: usize = 10;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parses CIFAR-10 binary records (1 label byte, then 1024 R, 1024 G and
/// 1024 B bytes, row-major).
pub fn parse_cifar_records(bytes: &[u8], name: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    let full = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(ArmorError::Format(format!(
            "{name}: truncated record at byte offset {} ({} trailing bytes, records are {CIFAR_RECORD})",
            full * CIFAR_RECORD,
            bytes.len() % CIFAR_RECORD
        )));
    }
    if full == 0 {
        return Err(ArmorError::Format(format!("{name}: no records at byte offset 0")));
    }
    let mut pixels = Vec::with_capacity(full * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(full);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(ArmorError::Format(format!(
                "{name}: label {label} at byte offset {} is not a CIFAR-10 class",
                r * CIFAR_RECORD
            )));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_cifar_files(dir: &Path, files: &[&str]) -> Result<(Vec<f32>, Vec<usize>)> {
    let (mut px, mut ys) = (Vec::new(), Vec::new());
    for f in files {
        let path: PathBuf = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| ArmorError::io(&path, e))?;
        let (p, y) = parse_cifar_records(&bytes, &path.display().to_string())?;
        px.extend(p);
        ys.extend(y);
    }
    Ok((px, ys))
}

/// Keeps the first `per_class` samples of each class, in record order.
pub fn first_per_class(data: &Dataset, per_class: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(ArmorError::Config("subset size must be positive".into()));
    }
    let mut seen = vec![0usize; data.classes()];
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let y = data.labels()[i];
            seen[y] += 1;
            seen[y] <= per_class
        })
        .collect();
    data.select(&keep)
}

/// Loads the CIFAR-10 binary distribution from `dir` (or its
/// `cifar-10-batches-bin` child). With `subset = Some(n)` only the first `n`
/// training samples of each class are kept.
pub fn load_cifar10(dir: &Path, subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    if subset == Some(0) {
        return Err(ArmorError::Config("subset size must be positive".into()));
    }
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested.as_path() } else { dir };
    let build = |(px, ys): (Vec<f32>, Vec<usize>)| -> Result<Dataset> {
        let n = ys.len();
        ImageBatch::new(
            Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], px)?,
            ys,
            CIFAR_CLASSES,
        )
    };
    let mut train = build(read_cifar_files(dir, &CIFAR_TRAIN_FILES)?)?;
    let test = build(read_cifar_files(dir, &[CIFAR_TEST_FILE])?)?;
    if let Some(n) = subset {
        train = first_per_class(&train, n)?;
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jitter_gives_identical_class_samples() {
        let spec = SyntheticSpec {
            jitter: 0.0,
            ..Default::default()
        };
        let (train, _) = gen_synthetic(&spec).unwrap();
        for k in 0..spec.classes {
            let idx = train.class_indices(k);
            assert!(idx.windows(2).all(|w| train.image(w[0]) == train.image(w[1])));
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_split() {
        let spec = SyntheticSpec::default();
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 320);
        assert_eq!(a.1.len(), 80);
        assert_eq!(a.0.image_dims(), (3, 16, 16));
    }

    #[test]
    fn templates_are_orthogonal_around_mid_gray() {
        let t = SyntheticSpec::default().templates().unwrap();
        for i in 0..t.len() {
            for j in 0..t.len() {
                let dot: f32 = t[i].iter().zip(&t[j]).map(|(a, b)| (a - 0.5) * (b - 0.5)).sum();
                if i == j {
                    assert!(dot > 0.0);
                } else {
                    assert!(dot.abs() < 1e-4, "{i} {j} {dot}");
                }
            }
        }
    }

    #[test]
    fn rejects_inseparable_spec() {
        let spec = SyntheticSpec {
            contrast: 0.2,
            jitter: 0.1,
            ..Default::default()
        };
        assert!(matches!(gen_synthetic(&spec), Err(ArmorError::Config(_))));
    }

    #[test]
    fn subset_zero_is_config_error() {
        let (train, _) = gen_synthetic(&SyntheticSpec::default()).unwrap();
        assert!(matches!(first_per_class(&train, 0), Err(ArmorError::Config(_))));
        assert!(matches!(
            load_cifar10(Path::new("/nonexistent"), Some(0)),
            Err(ArmorError::Config(_))
        ));
        assert_eq!(first_per_class(&train, 3).unwrap().len(), 12);
    }

    #[test]
    fn truncated_cifar_reports_offset() {
        let bytes = vec![1u8; CIFAR_RECORD * 2 + 10];
        let err = parse_cifar_records(&bytes, "x").unwrap_err().to_string();
        assert!(err.contains("byte offset 6146"), "{err}");
    }
}
