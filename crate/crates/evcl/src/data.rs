//! Datasets, on-disk formats and benchmark task streams.
//!
//! Inputs are dense `[n, features]` tensors scaled to `[0, 1]`; labels are
//! class indices. A [`TaskStream`] is an ordered list of tasks, each with its
//! own train/test split, output head and label remapping, which is all the
//! continual loop needs to know about a benchmark.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::grad::Tensor;
use crate::seeding::{self, tag};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x}")]
    BadMagic { found: u32 },
    #[error("unsupported idx layout {found:#010x} (only u8 labels and u8 image stacks)")]
    UnsupportedType { found: u32 },
    #[error("truncated input: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("byte length {len} is not a multiple of the {record}-byte record size")]
    BadRecordLength { len: usize, record: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error("image decode failed for {path}: {message}")]
    Image { path: PathBuf, message: String },
}

// ─── datasets ───

/// Validated classification dataset: finite `[n, d]` inputs, one label per
/// row, every label below `n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self, DataError> {
        let (n, _) = inputs
            .dims2("dataset")
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        if n == 0 {
            return Err(DataError::Empty);
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::LabelOutOfRange {
                label: bad,
                classes: n_classes,
            });
        }
        if !inputs.all_finite() {
            return Err(DataError::Invalid("inputs contain NaN or infinity".into()));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        if indices.is_empty() {
            return Err(DataError::Empty);
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Invalid(format!(
                    "index {i} out of range for {} rows",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            inputs: Tensor::new(vec![indices.len(), d], data).expect("consistent shape"),
            labels,
            n_classes: self.n_classes,
        })
    }

    /// First `n` rows (everything if `n` is zero or exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).collect();
        self.gather(&idx).expect("prefix is valid")
    }

    /// One row as a `[1, d]` tensor plus its label.
    pub fn row(&self, i: usize) -> (Tensor, usize) {
        let d = self.dim();
        let t = Tensor::matrix(1, d, self.inputs.data()[i * d..(i + 1) * d].to_vec())
            .expect("consistent shape");
        (t, self.labels[i])
    }
}

// ─── idx format ───

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Decoded idx payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Idx {
    /// `[n, rows, cols]`, pixel values scaled by 1/255.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn be_u32(bytes: &[u8], at: usize, total: usize) -> Result<u32, DataError> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            expected: total.max(end),
            actual: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Parses an idx byte buffer (label vectors and image stacks, u8 payloads).
pub fn parse_idx(bytes: &[u8]) -> Result<Idx, DataError> {
    let magic = be_u32(bytes, 0, 4)?;
    match magic {
        IDX_MAGIC_LABELS => {
            let n = be_u32(bytes, 4, 8)? as usize;
            let expected = 8 + n;
            if bytes.len() != expected {
                return Err(DataError::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            Ok(Idx::Labels(bytes[8..].iter().map(|&b| b as usize).collect()))
        }
        IDX_MAGIC_IMAGES => {
            let n = be_u32(bytes, 4, 16)? as usize;
            let rows = be_u32(bytes, 8, 16)? as usize;
            let cols = be_u32(bytes, 12, 16)? as usize;
            let expected = 16 + n * rows * cols;
            if bytes.len() != expected {
                return Err(DataError::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(Idx::Images(
                Tensor::new(vec![n, rows, cols], data).expect("validated length"),
            ))
        }
        m if m >> 16 == 0 => Err(DataError::UnsupportedType { found: m }),
        m => Err(DataError::BadMagic { found: m }),
    }
}

/// Encodes images (values in `[0, 1]`, rank 3) as idx bytes. Values that came
/// from [`parse_idx`] round-trip exactly.
pub fn write_idx_images(images: &Tensor) -> Result<Vec<u8>, DataError> {
    if images.rank() != 3 {
        return Err(DataError::Invalid(format!(
            "images must be rank 3, got {:?}",
            images.shape()
        )));
    }
    let (n, r, c) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
    );
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(r as u32).to_be_bytes());
    out.extend_from_slice(&(c as u32).to_be_bytes());
    for &v in images.data() {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        if l > 255 {
            return Err(DataError::LabelOutOfRange {
                label: l,
                classes: 256,
            });
        }
        out.push(l as u8);
    }
    Ok(out)
}

// ─── cifar-10 binary format ───

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Parses CIFAR-10 binary batches: 3073-byte records of one label byte plus
/// 32x32x3 pixels.
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<(Tensor, Vec<usize>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadRecordLength {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: 10,
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((
        Tensor::new(vec![n, CIFAR_PIXELS], data).expect("validated length"),
        labels,
    ))
}

pub fn write_cifar10_bin(images: &Tensor, labels: &[usize]) -> Result<Vec<u8>, DataError> {
    let (n, d) = images
        .dims2("cifar10")
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    if d != CIFAR_PIXELS || labels.len() != n {
        return Err(DataError::Invalid(format!(
            "expected [n, {CIFAR_PIXELS}] images and matching labels, got {:?} and {}",
            images.shape(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for i in 0..n {
        if labels[i] > 9 {
            return Err(DataError::LabelOutOfRange {
                label: labels[i],
                classes: 10,
            });
        }
        out.push(labels[i] as u8);
        for j in 0..CIFAR_PIXELS {
            out.push((images.get2(i, j) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

// ─── file loading ───

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let wrap = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(wrap)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(wrap)?;
        return Ok(out);
    }
    Ok(raw)
}

/// Reads `name` from `dir`, transparently accepting a `.gz` variant.
fn read_named(dir: &Path, name: &str) -> Result<Vec<u8>, DataError> {
    let plain = dir.join(name);
    if plain.exists() {
        return read_file(&plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return read_file(&gz);
    }
    Err(DataError::Io {
        path: plain,
        source: std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("neither {name} nor {name}.gz found"),
        ),
    })
}

fn idx_pair_to_dataset(images: Idx, labels: Idx, n_classes: usize) -> Result<Dataset, DataError> {
    let (imgs, labs) = match (images, labels) {
        (Idx::Images(i), Idx::Labels(l)) => (i, l),
        _ => {
            return Err(DataError::Invalid(
                "expected an image file and a label file".into(),
            ))
        }
    };
    let n = imgs.shape()[0];
    let d = imgs.shape()[1] * imgs.shape()[2];
    let flat = Tensor::new(vec![n, d], imgs.data().to_vec()).expect("same length");
    Dataset::new(flat, labs, n_classes)
}

/// Loads an MNIST-layout directory: the standard four idx files, flattening
/// images to `[n, rows*cols]`. Fashion uses identical file names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = idx_pair_to_dataset(
        parse_idx(&read_named(dir, "train-images-idx3-ubyte")?)?,
        parse_idx(&read_named(dir, "train-labels-idx1-ubyte")?)?,
        10,
    )?;
    let test = idx_pair_to_dataset(
        parse_idx(&read_named(dir, "t10k-images-idx3-ubyte")?)?,
        parse_idx(&read_named(dir, "t10k-labels-idx1-ubyte")?)?,
        10,
    )?;
    if train.dim() != test.dim() {
        return Err(DataError::Invalid(
            "train and test image sizes differ".into(),
        ));
    }
    Ok((train, test))
}

/// Loads the CIFAR-10 binary directory: `data_batch_{1..5}.bin` for training
/// and `test_batch.bin` for testing.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let mut all = Vec::new();
    let mut all_labels = Vec::new();
    let mut dim = 0;
    for i in 1..=5 {
        let (imgs, labels) = parse_cifar10_bin(&read_named(dir, &format!("data_batch_{i}.bin"))?)?;
        dim = imgs.shape()[1];
        all.extend_from_slice(imgs.data());
        all_labels.extend(labels);
    }
    let n = all_labels.len();
    let train = Dataset::new(Tensor::new(vec![n, dim], all).expect("consistent"), all_labels, 10)?;
    let (timgs, tlabels) = parse_cifar10_bin(&read_named(dir, "test_batch.bin")?)?;
    let test = Dataset::new(timgs, tlabels, 10)?;
    Ok((train, test))
}

/// Loads a class-per-subdirectory image folder (e.g. notMNIST's A/ .. J/),
/// producing a deterministic seeded train/test split. Files that fail to
/// decode are skipped and counted in the returned tally.
pub fn load_image_folder(
    dir: &Path,
    seed: u64,
    test_fraction: f64,
) -> Result<(Dataset, Dataset, usize), DataError> {
    let wrap = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(wrap)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::Empty);
    }
    let n_classes = class_dirs.len();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut skipped = 0usize;
    let mut dim = 0usize;
    for (class, cdir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(cdir)
            .map_err(wrap)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = match image::open(&f) {
                Ok(i) => i.to_luma8(),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let px: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            if dim == 0 {
                dim = px.len();
            }
            if px.len() != dim {
                skipped += 1;
                continue;
            }
            rows.push((px, class));
        }
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = seeding::rng_for(&[seed, tag::SPLIT]);
    shuffle(&mut order, &mut rng);
    let n_test = ((rows.len() as f64 * test_fraction).round() as usize)
        .clamp(1, rows.len() - 1);
    let build = |idx: &[usize]| {
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&rows[i].0);
            labels.push(rows[i].1);
        }
        Dataset::new(
            Tensor::new(vec![idx.len(), dim], data).expect("consistent"),
            labels,
            n_classes,
        )
    };
    let test = build(&order[..n_test])?;
    let train = build(&order[n_test..])?;
    Ok((train, test, skipped))
}

// ─── task streams ───

/// One task in a stream. `label_map` records original class -> task-local
/// class for split benchmarks; identity for domain-incremental ones.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    pub head: usize,
    pub label_map: Vec<(usize, usize)>,
}

/// Ordered tasks plus the head/output layout they expect.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub n_heads: usize,
    pub input_dim: usize,
    pub classes_per_task: usize,
}

impl TaskStream {
    fn validate(self) -> Result<Self, DataError> {
        if self.tasks.is_empty() {
            return Err(DataError::Empty);
        }
        for t in &self.tasks {
            if t.train.dim() != self.input_dim || t.test.dim() != self.input_dim {
                return Err(DataError::Invalid(format!(
                    "task {} input width differs from stream width {}",
                    t.name, self.input_dim
                )));
            }
            if t.head >= self.n_heads {
                return Err(DataError::Invalid(format!(
                    "task {} head {} out of range",
                    t.name, t.head
                )));
            }
            if t.train.n_classes() != self.classes_per_task
                || t.test.n_classes() != self.classes_per_task
            {
                return Err(DataError::Invalid(format!(
                    "task {} class count differs from stream",
                    t.name
                )));
            }
        }
        Ok(self)
    }

    /// Per-task prefix truncation; zero means no limit.
    pub fn limit(&self, train_limit: usize, test_limit: usize) -> TaskStream {
        TaskStream {
            tasks: self
                .tasks
                .iter()
                .map(|t| Task {
                    name: t.name.clone(),
                    train: t.train.take(train_limit),
                    test: t.test.take(test_limit),
                    head: t.head,
                    label_map: t.label_map.clone(),
                })
                .collect(),
            ..self.clone()
        }
    }
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn permute_columns(d: &Dataset, perm: &[usize]) -> Dataset {
    let (n, dim) = (d.len(), d.dim());
    let src = d.inputs().data();
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let row = &src[i * dim..(i + 1) * dim];
        let dst = &mut out[i * dim..(i + 1) * dim];
        for (j, &p) in perm.iter().enumerate() {
            dst[j] = row[p];
        }
    }
    Dataset::new(
        Tensor::new(vec![n, dim], out).expect("consistent"),
        d.labels().to_vec(),
        d.n_classes(),
    )
    .expect("permutation preserves validity")
}

/// Domain-incremental stream: task 0 is the identity view, later tasks apply
/// fixed seeded pixel permutations to both splits. Single head.
pub fn build_permuted_stream(
    train: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    seed: u64,
) -> Result<TaskStream, DataError> {
    if n_tasks == 0 {
        return Err(DataError::Empty);
    }
    if train.dim() != test.dim() || train.n_classes() != test.n_classes() {
        return Err(DataError::Invalid("train/test layouts differ".into()));
    }
    let dim = train.dim();
    let identity_map: Vec<(usize, usize)> =
        (0..train.n_classes()).map(|c| (c, c)).collect();
    let mut tasks = Vec::with_capacity(n_tasks);
    for k in 0..n_tasks {
        let (tr, te) = if k == 0 {
            (train.clone(), test.clone())
        } else {
            let mut perm: Vec<usize> = (0..dim).collect();
            let mut rng = seeding::rng_for(&[seed, tag::STREAM, k as u64]);
            shuffle(&mut perm, &mut rng);
            (permute_columns(train, &perm), permute_columns(test, &perm))
        };
        tasks.push(Task {
            name: format!("permutation-{k}"),
            train: tr,
            test: te,
            head: 0,
            label_map: identity_map.clone(),
        });
    }
    TaskStream {
        tasks,
        n_heads: 1,
        input_dim: dim,
        classes_per_task: train.n_classes(),
    }
    .validate()
}

fn filter_pair(d: &Dataset, pair: (usize, usize)) -> Result<Dataset, DataError> {
    let dim = d.dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..d.len() {
        let l = d.labels()[i];
        let mapped = if l == pair.0 {
            0
        } else if l == pair.1 {
            1
        } else {
            continue;
        };
        data.extend_from_slice(&d.inputs().data()[i * dim..(i + 1) * dim]);
        labels.push(mapped);
    }
    if labels.is_empty() {
        return Err(DataError::Invalid(format!(
            "no examples with labels {} or {}",
            pair.0, pair.1
        )));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, dim], data).expect("consistent"), labels, 2)
}

/// Task-incremental stream: one binary task per class pair, each with its own
/// head and labels remapped to {0, 1}. Pairs must be disjoint.
pub fn build_split_stream(
    train: &Dataset,
    test: &Dataset,
    pairs: &[(usize, usize)],
) -> Result<TaskStream, DataError> {
    if pairs.is_empty() {
        return Err(DataError::Empty);
    }
    let mut seen = BTreeMap::new();
    for (k, &(a, b)) in pairs.iter().enumerate() {
        for c in [a, b] {
            if c >= train.n_classes() {
                return Err(DataError::LabelOutOfRange {
                    label: c,
                    classes: train.n_classes(),
                });
            }
            if let Some(prev) = seen.insert(c, k) {
                return Err(DataError::Invalid(format!(
                    "class {c} appears in tasks {prev} and {k}"
                )));
            }
        }
        if a == b {
            return Err(DataError::Invalid(format!("task {k} pairs class {a} with itself")));
        }
    }
    let mut tasks = Vec::with_capacity(pairs.len());
    for (k, &pair) in pairs.iter().enumerate() {
        tasks.push(Task {
            name: format!("{}-vs-{}", pair.0, pair.1),
            train: filter_pair(train, pair)?,
            test: filter_pair(test, pair)?,
            head: k,
            label_map: vec![(pair.0, 0), (pair.1, 1)],
        });
    }
    TaskStream {
        tasks,
        n_heads: pairs.len(),
        input_dim: train.dim(),
        classes_per_task: 2,
    }
    .validate()
}

/// The canonical digit pairing (0,1), (2,3), (4,5), (6,7), (8,9).
pub fn consecutive_pairs(n_classes: usize) -> Vec<(usize, usize)> {
    (0..n_classes / 2).map(|k| (2 * k, 2 * k + 1)).collect()
}

/// Synthetic two-class stream of Gaussian blobs. Task `t` separates classes
/// along a direction rotated by `t / (T-1) * 90` degrees in the first two
/// input dimensions, so later tasks conflict with earlier ones and forgetting
/// is measurable. Labels alternate, keeping counts balanced within one.
pub fn synth_blobs(
    n_tasks: usize,
    n_train: usize,
    n_test: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskStream, DataError> {
    if n_tasks == 0 || n_train == 0 || n_test == 0 {
        return Err(DataError::Empty);
    }
    if dim < 2 {
        return Err(DataError::Invalid(
            "synthetic blobs need at least 2 input dimensions".into(),
        ));
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let angle = if n_tasks == 1 {
            0.0
        } else {
            (t as f64) / ((n_tasks - 1) as f64) * std::f64::consts::FRAC_PI_2
        };
        let (ux, uy) = (angle.cos(), angle.sin());
        let make = |n: usize, which: u64| {
            let mut rng = seeding::rng_for(&[seed, tag::STREAM, t as u64, which]);
            let mut data = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % 2;
                let sign = if label == 0 { -1.0 } else { 1.0 };
                for j in 0..dim {
                    let center = match j {
                        0 => sign * separation / 2.0 * ux,
                        1 => sign * separation / 2.0 * uy,
                        _ => 0.0,
                    };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push(center + noise);
                }
                labels.push(label);
            }
            Dataset::new(Tensor::new(vec![n, dim], data).expect("consistent"), labels, 2)
        };
        tasks.push(Task {
            name: format!("blobs-{t}"),
            train: make(n_train, 0)?,
            test: make(n_test, 1)?,
            head: 0,
            label_map: vec![(0, 0), (1, 1)],
        });
    }
    TaskStream {
        tasks,
        n_heads: 1,
        input_dim: dim,
        classes_per_task: 2,
    }
    .validate()
}
