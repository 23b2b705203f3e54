//! Dataset ingestion and assembly: MNIST IDX files, synthetic blobs,
//! seeded splitting and subsampling, and mixed multi-strength dataset
//! construction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

/// Provenance of a dataset's examples.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetTag {
    Clean,
    Adversarial { epsilon: f64, crafter: String },
}

/// Examples in `[0,1]` with integer labels and a provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub examples: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub tag: DatasetTag,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        examples: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        tag: DatasetTag,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            name: name.into(),
            examples,
            labels,
            class_count,
            tag,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.examples.rows() != self.labels.len() {
            return Err(Error::Dataset(format!(
                "{} examples but {} labels",
                self.examples.rows(),
                self.labels.len()
            )));
        }
        if let Some(&v) = self
            .examples
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Dataset(format!("value {v} outside [0,1]")));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.class_count {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: l,
                    classes: self.class_count,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape (batch dimension excluded).
    pub fn example_shape(&self) -> &[usize] {
        &self.examples.shape()[1..]
    }

    /// New dataset keeping `indices` in the given order.
    pub fn take(&self, indices: &[usize], name: impl Into<String>) -> Result<LabeledDataset> {
        let w = self.examples.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of bounds")));
            }
            data.extend_from_slice(self.examples.row(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        LabeledDataset::new(name, Tensor::new(shape, data)?, labels, self.class_count, self.tag.clone())
    }

    /// First `n` examples.
    pub fn head(&self, n: usize, name: impl Into<String>) -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.take(&idx, name)
    }

    /// Seeded uniform subsample of `n` examples without replacement.
    pub fn subsample(&self, n: usize, seed: u64, name: impl Into<String>) -> Result<LabeledDataset> {
        if n > self.len() {
            return Err(Error::Dataset(format!(
                "cannot subsample {n} from {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        self.take(&idx, name)
    }

    /// Reinterpret each example under a new shape of equal size, e.g.
    /// flat 784 pixels as (1, 28, 28) channel planes for a conv net.
    pub fn with_example_shape(&self, example_shape: &[usize]) -> Result<LabeledDataset> {
        let new_len: usize = example_shape.iter().product();
        if new_len != self.examples.row_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values per example", self.examples.row_len()),
                actual: format!("{example_shape:?}"),
            });
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(example_shape);
        LabeledDataset::new(
            self.name.clone(),
            Tensor::new(shape, self.examples.data().to_vec())?,
            self.labels.clone(),
            self.class_count,
            self.tag.clone(),
        )
    }

    /// Seeded in-place-style shuffle (returns a new dataset).
    pub fn shuffled(&self, seed: u64) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        self.take(&idx, self.name.clone())
    }
}

/// Concatenate datasets sharing shape and class count. The result keeps
/// the first dataset's tag only when all tags agree, otherwise `Clean`
/// semantics do not apply and the caller supplies the tag.
pub fn concat(parts: &[&LabeledDataset], name: impl Into<String>, tag: DatasetTag) -> Result<LabeledDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dataset("concat of zero datasets".into()))?;
    let shape = first.example_shape();
    let classes = first.class_count;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.example_shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                actual: format!("{:?}", p.example_shape()),
            });
        }
        if p.class_count != classes {
            return Err(Error::Dataset("class_count mismatch in concat".into()));
        }
        data.extend_from_slice(p.examples.data());
        labels.extend_from_slice(&p.labels);
    }
    let mut full_shape = vec![labels.len()];
    full_shape.extend_from_slice(shape);
    LabeledDataset::new(name, Tensor::new(full_shape, data)?, labels, classes, tag)
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an MNIST-style IDX image/label file pair. Pixels are scaled by
/// 1/255 into `[0,1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut imgf =
        std::io::BufReader::new(std::fs::File::open(images_path).map_err(|e| Error::io(images_path, e))?);
    let magic = read_u32_be(&mut imgf, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: wrong magic {magic}, expected {IDX_IMAGE_MAGIC} (image file)",
            images_path.display()
        )));
    }
    let count = read_u32_be(&mut imgf, images_path)? as usize;
    let rows = read_u32_be(&mut imgf, images_path)? as usize;
    let cols = read_u32_be(&mut imgf, images_path)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    imgf.read_exact(&mut pixels).map_err(|e| {
        Error::Dataset(format!(
            "{}: truncated payload ({e})",
            images_path.display()
        ))
    })?;

    let mut lblf =
        std::io::BufReader::new(std::fs::File::open(labels_path).map_err(|e| Error::io(labels_path, e))?);
    let magic = read_u32_be(&mut lblf, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Dataset(format!(
            "{}: wrong magic {magic}, expected {IDX_LABEL_MAGIC} (label file)",
            labels_path.display()
        )));
    }
    let label_count = read_u32_be(&mut lblf, labels_path)? as usize;
    if label_count != count {
        return Err(Error::Dataset(format!(
            "count mismatch: {count} images vs {label_count} labels"
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    lblf.read_exact(&mut raw_labels).map_err(|e| {
        Error::Dataset(format!(
            "{}: truncated payload ({e})",
            labels_path.display()
        ))
    })?;

    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    LabeledDataset::new(
        images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "mnist".into()),
        Tensor::new(vec![count, rows * cols], data)?,
        labels,
        10,
        DatasetTag::Clean,
    )
}

/// Write a dataset back out as an IDX image/label pair (pixels rounded
/// to the nearest byte). Inverse-ish of [`load_mnist_idx`].
pub fn save_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != ds.examples.row_len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{rows}x{cols} pixels"),
            actual: format!("{} values per example", ds.examples.row_len()),
        });
    }
    let mut img = Vec::with_capacity(16 + ds.examples.len());
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend(ds.examples.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::File::create(images_path)
        .and_then(|mut f| f.write_all(&img))
        .map_err(|e| Error::io(images_path, e))?;
    std::fs::File::create(labels_path)
        .and_then(|mut f| f.write_all(&lbl))
        .map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Deterministic three-way split. Sizes are floor-rounded from the
/// fractions with the remainder assigned to train.
pub fn split_dataset(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(Error::InvalidArg("split fractions must be positive".into()));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArg(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = ds.len();
    if n < 3 {
        return Err(Error::Dataset(format!(
            "dataset of {n} examples is too small to split"
        )));
    }
    let nv = (fv * n as f64).floor() as usize;
    let ns = (fs * n as f64).floor() as usize;
    let nt = n - nv - ns;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let train = ds.take(&idx[..nt], format!("{}/train", ds.name))?;
    let val = ds.take(&idx[nt..nt + nv], format!("{}/val", ds.name))?;
    let test = ds.take(&idx[nt + nv..], format!("{}/test", ds.name))?;
    Ok((train, val, test))
}

/// Full keeps every part whole; reduced subsamples each part to
/// `fraction` of the clean set's size before concatenation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeMode {
    Full,
    Reduced { fraction: f64 },
}

/// Settings for assembling a mixed multi-strength training set.
#[derive(Debug, Clone)]
pub struct MixedBuildConfig {
    pub strengths: Vec<f64>,
    pub size_mode: SizeMode,
    pub seed: u64,
}

impl MixedBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strengths.is_empty() {
            return Err(Error::InvalidArg(
                "mixed build requires S >= 1 strengths".into(),
            ));
        }
        for w in self.strengths.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidArg(
                    "strengths must be distinct and ascending".into(),
                ));
            }
        }
        if self.strengths[0] <= 0.0 {
            return Err(Error::InvalidArg("strengths must be positive".into()));
        }
        if let SizeMode::Reduced { fraction } = self.size_mode {
            if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
                return Err(Error::InvalidArg(format!(
                    "reduced fraction must be in (0,1], got {fraction}"
                )));
            }
        }
        Ok(())
    }
}

/// Concatenate clean data with one adversarial set per strength and
/// shuffle by seed. Full mode yields `N = N_C + S * N_A` examples.
pub fn build_mixed_dataset(
    clean: &LabeledDataset,
    adv_sets: &[LabeledDataset],
    cfg: &MixedBuildConfig,
) -> Result<LabeledDataset> {
    cfg.validate()?;
    if adv_sets.len() != cfg.strengths.len() {
        return Err(Error::InvalidArg(format!(
            "expected {} adversarial sets, got {}",
            cfg.strengths.len(),
            adv_sets.len()
        )));
    }
    for (ds, &eps) in adv_sets.iter().zip(&cfg.strengths) {
        match &ds.tag {
            DatasetTag::Adversarial { epsilon, .. } if *epsilon == eps => {}
            DatasetTag::Adversarial { epsilon, .. } => {
                return Err(Error::InvalidArg(format!(
                    "adversarial set crafted at {epsilon} does not match configured strength {eps}"
                )))
            }
            DatasetTag::Clean => {
                return Err(Error::InvalidArg(format!(
                    "set for strength {eps} is not tagged adversarial"
                )))
            }
        }
    }
    let mixed = match cfg.size_mode {
        SizeMode::Full => {
            let mut parts: Vec<&LabeledDataset> = vec![clean];
            parts.extend(adv_sets.iter());
            concat(&parts, "mixed/full", DatasetTag::Clean)?
        }
        SizeMode::Reduced { fraction } => {
            let per_part = ((fraction * clean.len() as f64).floor() as usize).max(1);
            let mut reduced = Vec::with_capacity(adv_sets.len() + 1);
            reduced.push(clean.subsample(per_part.min(clean.len()), cfg.seed, "mixed/clean-part")?);
            for (k, ds) in adv_sets.iter().enumerate() {
                reduced.push(ds.subsample(
                    per_part.min(ds.len()),
                    cfg.seed + 1 + k as u64,
                    format!("mixed/adv-part-{k}"),
                )?);
            }
            let refs: Vec<&LabeledDataset> = reduced.iter().collect();
            concat(&refs, "mixed/reduced", DatasetTag::Clean)?
        }
    };
    mixed.shuffled(cfg.seed)
}

/// Gaussian class blobs squashed affinely into `[0,1]`; a fast substrate
/// for property tests and CLI smoke runs.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || per_class == 0 || dims == 0 {
        return Err(Error::InvalidArg("all blob counts must be positive".into()));
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = class_count * per_class;
    let mut raw = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    // class means on a coarse grid separated by `separation`
    for c in 0..class_count {
        for _ in 0..per_class {
            for d in 0..dims {
                let mean = if d % class_count == c { separation } else { 0.0 };
                // Box-Muller
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                raw.push(mean + z);
            }
            labels.push(c);
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut raw {
        *v = (*v - lo) / span;
    }
    LabeledDataset::new(
        format!("blobs-{class_count}x{per_class}"),
        Tensor::new(vec![n, dims], raw)?,
        labels,
        class_count,
        DatasetTag::Clean,
    )
}
