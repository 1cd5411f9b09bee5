//! MNIST ingestion, permuted task families, the synthetic fallback and
//! seeded minibatching.
//!
//! A [`TaskDataset`] does not own a permuted copy of its images. All tasks of
//! a family share one base split behind an [`Arc`] and apply their pixel
//! permutation when rows are gathered, so ten full-size tasks cost one copy
//! of MNIST instead of ten.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, Matrix, RandomStream};

pub const IMAGE_PIXELS: usize = 784;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// The four MNIST files, in the order `(train images, train labels, test
/// images, test labels)`, with their uncompressed sizes in bytes.
pub const MNIST_FILES: [(&str, usize); 4] = [
    ("train-images-idx3-ubyte", 16 + 60_000 * IMAGE_PIXELS),
    ("train-labels-idx1-ubyte", 8 + 60_000),
    ("t10k-images-idx3-ubyte", 16 + 10_000 * IMAGE_PIXELS),
    ("t10k-labels-idx1-ubyte", 8 + 10_000),
];

/// Images (one per row) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Matrix, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// A seeded subset of `n` rows (all rows when `n >= len`), kept in the
    /// original row order.
    pub fn subset(&self, n: usize, stream: &mut RandomStream) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = stream.permutation(self.len());
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

/// One task of a permuted family.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    base: Arc<TaskSplits>,
    permutation: Vec<usize>,
}

impl TaskDataset {
    /// Wraps unpermuted splits as task 0 with the identity permutation.
    pub fn unpermuted(splits: TaskSplits) -> Result<Self> {
        let width = check_split_widths(&splits)?;
        Ok(Self {
            task_id: 0,
            base: Arc::new(splits),
            permutation: (0..width).collect(),
        })
    }

    pub fn with_permutation(task_id: usize, base: Arc<TaskSplits>, permutation: Vec<usize>) -> Result<Self> {
        let width = check_split_widths(&base)?;
        if permutation.len() != width || !is_bijection(&permutation) {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} is not a bijection on 0..{width}",
                permutation.len()
            )));
        }
        Ok(Self {
            task_id,
            base,
            permutation,
        })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn width(&self) -> usize {
        self.permutation.len()
    }

    pub fn train_len(&self) -> usize {
        self.base.train.len()
    }

    pub fn test_len(&self) -> usize {
        self.base.test.len()
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.base.train.labels
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.base.test.labels
    }

    /// Permuted training rows at `indices`, with their labels.
    pub fn train_rows(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        gather(&self.base.train, &self.permutation, indices)
    }

    pub fn test_rows(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        gather(&self.base.test, &self.permutation, indices)
    }

    pub fn train_images(&self) -> Matrix {
        self.train_rows(&(0..self.train_len()).collect::<Vec<_>>()).0
    }

    pub fn test_images(&self) -> Matrix {
        self.test_rows(&(0..self.test_len()).collect::<Vec<_>>()).0
    }
}

fn check_split_widths(splits: &TaskSplits) -> Result<usize> {
    let width = splits.train.width();
    if splits.test.width() != width && !splits.test.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "task splits",
            left: splits.train.images.shape(),
            right: splits.test.images.shape(),
        });
    }
    Ok(width)
}

fn gather(split: &LabeledImages, permutation: &[usize], indices: &[usize]) -> (Matrix, Vec<usize>) {
    let width = permutation.len();
    let mut out = Matrix::zeros(indices.len(), width);
    for (r, &i) in indices.iter().enumerate() {
        apply_permutation_into(split.images.row(i), permutation, out.row_mut(r));
    }
    let labels = indices.iter().map(|&i| split.labels[i]).collect();
    (out, labels)
}

/// `out[j] = pixels[permutation[j]]`.
pub fn apply_permutation(pixels: &[f64], permutation: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; permutation.len()];
    apply_permutation_into(pixels, permutation, &mut out);
    out
}

fn apply_permutation_into(pixels: &[f64], permutation: &[usize], out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(permutation) {
        *o = pixels[p];
    }
}

pub fn invert_permutation(permutation: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; permutation.len()];
    for (j, &p) in permutation.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

pub fn is_bijection(permutation: &[usize]) -> bool {
    let mut seen = vec![false; permutation.len()];
    permutation.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

/// Builds `num_tasks` permuted MNIST tasks. Task `t` draws its permutation
/// from stream `PERMUTATION_BASE + t` of `seed`; task 0 keeps the identity
/// unless `permute_first` is set.
pub fn make_permuted_tasks(
    train: LabeledImages,
    test: LabeledImages,
    num_tasks: usize,
    seed: u64,
    permute_first: bool,
) -> Result<Vec<TaskDataset>> {
    for split in [&train, &test] {
        if split.width() != IMAGE_PIXELS {
            return Err(Error::InvalidArgument(format!(
                "permuted MNIST needs {IMAGE_PIXELS}-pixel images, got width {}",
                split.width()
            )));
        }
    }
    permuted_family(TaskSplits { train, test }, num_tasks, seed, permute_first)
}

/// Width-agnostic variant of [`make_permuted_tasks`], used for synthetic
/// families whose dimensionality is configurable.
pub fn permuted_family(
    splits: TaskSplits,
    num_tasks: usize,
    seed: u64,
    permute_first: bool,
) -> Result<Vec<TaskDataset>> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("num_tasks must be at least 1".into()));
    }
    let width = check_split_widths(&splits)?;
    let base = Arc::new(splits);
    (0..num_tasks)
        .map(|t| {
            let permutation = if t == 0 && !permute_first {
                (0..width).collect()
            } else {
                RandomStream::new(seed, streams::PERMUTATION_BASE + t as u64).permutation(width)
            };
            TaskDataset::with_permutation(t, Arc::clone(&base), permutation)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dims: IMAGE_PIXELS,
            samples_per_class: 500,
            cluster_spread: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dims == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "synthetic classes, dims and samples_per_class must all be at least 1".into(),
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "synthetic cluster_spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        Ok(())
    }
}

/// Gaussian class clusters clipped to `[0, 1]`.
///
/// Each class center is drawn uniformly from `[0, 1]^dims`; each sample adds
/// `cluster_spread * N(0, 1)` noise per coordinate and clips. Within each class
/// the first `samples_per_class - samples_per_class / 5` samples go to train
/// and the rest to test, so both splits are class-balanced. Rows of each split
/// are then shuffled.
pub fn synth_splits(spec: &SyntheticSpec) -> Result<TaskSplits> {
    spec.validate()?;
    let mut rng = RandomStream::new(spec.seed, streams::SYNTHETIC);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dims).map(|_| rng.next_uniform(0.0, 1.0)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let n_test = spec.samples_per_class / 5;
    let n_train = spec.samples_per_class - n_test;
    let mut train = Vec::with_capacity(spec.classes * n_train);
    let mut test = Vec::with_capacity(spec.classes * n_test);
    for (class, center) in centers.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&c| (c + spec.cluster_spread * rng.next_normal()).clamp(0.0, 1.0))
                .collect();
            if s < n_train {
                train.push((x, class));
            } else {
                test.push((x, class));
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    let pack = |rows: Vec<(Vec<f64>, usize)>| -> Result<LabeledImages> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * spec.dims);
        let mut labels = Vec::with_capacity(n);
        for (x, y) in rows {
            data.extend(x);
            labels.push(y);
        }
        LabeledImages::new(Matrix::from_vec(n, spec.dims, data)?, labels)
    };
    Ok(TaskSplits {
        train: pack(train)?,
        test: pack(test)?,
    })
}

pub fn synth_dataset(spec: &SyntheticSpec) -> Result<TaskDataset> {
    TaskDataset::unpermuted(synth_splits(spec)?)
}

/// One epoch of minibatches: a seeded shuffle of all training rows, sliced
/// into `batch_size` chunks with the short final chunk kept.
pub struct Batches<'a> {
    dataset: &'a TaskDataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batches<'a>(dataset: &'a TaskDataset, batch_size: usize, stream: &mut RandomStream) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if dataset.train_len() == 0 {
        return Err(Error::EmptyDataset("batches"));
    }
    Ok(Batches {
        dataset,
        order: stream.permutation(dataset.train_len()),
        batch_size,
        cursor: 0,
    })
}

impl Batches<'_> {
    /// The training-row indices of the whole epoch, in batch order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let rows = self.dataset.train_rows(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(rows)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::WrongMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected: header_len,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file (uncompressed or `.gz`). Pixels are divided
/// by 255.
pub fn load_idx_images(path: &Path) -> Result<Matrix> {
    let bytes = read_maybe_gz(path)?;
    check_header(path, &bytes, IDX_IMAGES_MAGIC, 16)?;
    let count = be_u32(&bytes, 4) as usize;
    let width = be_u32(&bytes, 8) as usize * be_u32(&bytes, 12) as usize;
    let expected = 16 + count * width;
    if bytes.len() < expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::from_vec(count, width, data)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    check_header(path, &bytes, IDX_LABELS_MAGIC, 8)?;
    let count = be_u32(&bytes, 4) as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes: 10,
        });
    }
    Ok((images, labels))
}

/// Checks a downloaded MNIST file (plain or gzip) against its expected
/// uncompressed length and IDX magic. `name` is used in error messages.
pub fn verify_mnist_bytes(name: &Path, stem: &str, bytes: &[u8]) -> Result<()> {
    let &(_, expected) = MNIST_FILES
        .iter()
        .find(|(s, _)| *s == stem)
        .ok_or_else(|| Error::InvalidArgument(format!("{stem} is not an MNIST file")))?;
    let plain;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::with_capacity(expected);
        GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| Error::io(name, e))?;
        plain = out;
        plain.as_slice()
    } else {
        bytes
    };
    let (magic, header) = if stem.contains("images") {
        (IDX_IMAGES_MAGIC, 16)
    } else {
        (IDX_LABELS_MAGIC, 8)
    };
    check_header(name, bytes, magic, header)?;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            path: name.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Locates an MNIST file in `dir`, accepting the plain or `.gz` name.
pub fn find_mnist_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

pub fn mnist_available(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|(stem, _)| find_mnist_file(dir, stem).is_some())
}

/// Loads the standard MNIST train and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<TaskSplits> {
    let path = |i: usize| {
        let stem = MNIST_FILES[i].0;
        find_mnist_file(dir, stem).ok_or_else(|| {
            Error::io(
                dir.join(stem),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            )
        })
    };
    let (train_images, train_labels) = load_idx(&path(0)?, &path(1)?)?;
    let (test_images, test_labels) = load_idx(&path(2)?, &path(3)?)?;
    Ok(TaskSplits {
        train: LabeledImages::new(train_images, train_labels)?,
        test: LabeledImages::new(test_images, test_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &idx_images(2, 1, 2, &[0, 255, 51, 102]));
        let lab = write(dir.path(), "l", &idx_labels(&[3, 9]));
        let (m, l) = load_idx(&img, &lab).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(l, vec![3, 9]);
    }

    #[test]
    fn idx_gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_labels(&[1, 2, 3])).unwrap();
        let p = write(dir.path(), "l.gz", &enc.finish().unwrap());
        assert_eq!(load_idx_labels(&p).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn idx_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "l", &idx_images(1, 1, 1, &[0]));
        match load_idx_labels(&p).unwrap_err() {
            Error::WrongMagic { expected, found, .. } => {
                assert_eq!(expected, 0x801);
                assert_eq!(found, 0x803);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i", &idx_images(3, 2, 2, &[0; 10]));
        assert!(matches!(
            load_idx_images(&p).unwrap_err(),
            Error::LengthMismatch { expected: 28, found: 26, .. }
        ));
        let p = write(dir.path(), "short", &[0, 0]);
        assert!(matches!(load_idx_labels(&p).unwrap_err(), Error::LengthMismatch { .. }));
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &idx_images(2, 1, 1, &[0, 0]));
        let lab = write(dir.path(), "l", &idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_idx(&img, &lab).unwrap_err(),
            Error::CountMismatch { images: 2, labels: 3 }
        ));
    }

    fn tiny_mnist(n: usize) -> (LabeledImages, LabeledImages) {
        let mut s = RandomStream::new(5, 0);
        let mk = |s: &mut RandomStream, n: usize| {
            let data = (0..n * IMAGE_PIXELS)
                .map(|_| (s.next_u64() % 256) as f64 / 255.0)
                .collect();
            LabeledImages::new(
                Matrix::from_vec(n, IMAGE_PIXELS, data).unwrap(),
                (0..n).map(|i| i % 10).collect(),
            )
            .unwrap()
        };
        (mk(&mut s, n), mk(&mut s, n / 2))
    }

    #[test]
    fn permuted_tasks_are_deterministic_bijections() {
        let (train, test) = tiny_mnist(6);
        let a = make_permuted_tasks(train.clone(), test.clone(), 10, 1234, false).unwrap();
        let b = make_permuted_tasks(train, test, 10, 1234, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.permutation(), y.permutation());
            let mut sorted = x.permutation().to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..IMAGE_PIXELS).collect::<Vec<_>>());
        }
        assert_eq!(a[0].permutation(), (0..IMAGE_PIXELS).collect::<Vec<_>>().as_slice());
        assert_ne!(a[1].permutation(), a[2].permutation());
    }

    #[test]
    fn permute_first_flag_permutes_task_zero() {
        let (train, test) = tiny_mnist(2);
        let tasks = make_permuted_tasks(train, test, 1, 7, true).unwrap();
        assert_ne!(tasks[0].permutation(), (0..IMAGE_PIXELS).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn permuted_tasks_reject_wrong_width() {
        let split = LabeledImages::new(Matrix::zeros(2, 10), vec![0, 1]).unwrap();
        assert!(make_permuted_tasks(split.clone(), split, 2, 0, false).is_err());
    }

    #[test]
    fn task_rows_apply_the_permutation() {
        let (train, test) = tiny_mnist(4);
        let tasks = make_permuted_tasks(train.clone(), test, 3, 9, false).unwrap();
        let (rows, labels) = tasks[2].train_rows(&[3, 1]);
        assert_eq!(labels, vec![train.labels[3], train.labels[1]]);
        assert_eq!(rows.row(0), apply_permutation(train.images.row(3), tasks[2].permutation()));
    }

    #[test]
    fn synthetic_zero_spread_limit_hits_centers() {
        let spec = SyntheticSpec {
            classes: 3,
            dims: 5,
            samples_per_class: 10,
            cluster_spread: 1e-300,
            seed: 4,
        };
        let ds = synth_dataset(&spec).unwrap();
        let train = ds.train_images();
        for class in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.train_len())
                .filter(|&i| ds.train_labels()[i] == class)
                .map(|i| train.row(i))
                .collect();
            assert_eq!(rows.len(), 8);
            assert!(rows.iter().all(|r| *r == rows[0]));
        }
        assert_eq!(ds.test_len(), 6);
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let spec = SyntheticSpec {
            dims: 20,
            samples_per_class: 15,
            seed: 11,
            ..Default::default()
        };
        let a = synth_splits(&spec).unwrap();
        assert_eq!(a, synth_splits(&spec).unwrap());
        assert!(a.train.images.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.train.labels.iter().chain(&a.test.labels).all(|&l| l < 10));
    }

    #[test]
    fn synthetic_validation() {
        let bad = SyntheticSpec {
            cluster_spread: 0.0,
            ..Default::default()
        };
        assert!(synth_splits(&bad).is_err());
        let bad = SyntheticSpec {
            classes: 0,
            ..Default::default()
        };
        assert!(synth_splits(&bad).is_err());
    }

    /// Perceptron oracle: a 2-class, 2-dim instance with spread 0.01 must be
    /// linearly separable, so the perceptron converges to zero training
    /// errors.
    #[test]
    fn synthetic_two_class_is_linearly_separable() {
        let spec = SyntheticSpec {
            classes: 2,
            dims: 2,
            samples_per_class: 50,
            cluster_spread: 0.01,
            seed: 3,
        };
        let splits = synth_splits(&spec).unwrap();
        let all: Vec<(&[f64], usize)> = splits
            .train
            .images
            .row_iter()
            .zip(splits.train.labels.iter().copied())
            .chain(splits.test.images.row_iter().zip(splits.test.labels.iter().copied()))
            .collect();
        let mut w = [0.0f64; 3];
        let mut converged = false;
        for _ in 0..10_000 {
            let mut errors = 0;
            for (x, y) in &all {
                let target = if *y == 1 { 1.0 } else { -1.0 };
                let act = w[0] * x[0] + w[1] * x[1] + w[2];
                if act * target <= 0.0 {
                    errors += 1;
                    w[0] += target * x[0];
                    w[1] += target * x[1];
                    w[2] += target;
                }
            }
            if errors == 0 {
                converged = true;
                break;
            }
        }
        assert!(converged);
    }

    fn toy_task(n: usize) -> TaskDataset {
        let images = Matrix::from_vec(n, 2, (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let split = LabeledImages::new(images, (0..n).map(|i| i % 10).collect()).unwrap();
        TaskDataset::unpermuted(TaskSplits {
            train: split.clone(),
            test: split,
        })
        .unwrap()
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let ds = toy_task(250);
        let sizes: Vec<usize> = batches(&ds, 100, &mut RandomStream::new(0, 0))
            .unwrap()
            .map(|(m, l)| {
                assert_eq!(m.rows(), l.len());
                l.len()
            })
            .collect();
        assert_eq!(sizes, vec![100, 100, 50]);
    }

    #[test]
    fn batch_order_is_seeded() {
        let ds = toy_task(40);
        let a = batches(&ds, 7, &mut RandomStream::new(3, 2)).unwrap().order().to_vec();
        let b = batches(&ds, 7, &mut RandomStream::new(3, 2)).unwrap().order().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_errors() {
        let ds = toy_task(3);
        assert!(batches(&ds, 0, &mut RandomStream::new(0, 0)).is_err());
        let empty = toy_task(0);
        assert!(matches!(
            batches(&empty, 4, &mut RandomStream::new(0, 0)).err().unwrap(),
            Error::EmptyDataset(_)
        ));
    }

    proptest! {
        #[test]
        fn epoch_partitions_the_train_set(n in 1usize..300, batch in 1usize..64, seed in any::<u64>()) {
            let ds = toy_task(n);
            let mut seen: Vec<usize> = Vec::new();
            for (m, _) in batches(&ds, batch, &mut RandomStream::new(seed, 0)).unwrap() {
                prop_assert!(m.rows() <= batch);
                // first column encodes the row index as 2*i
                seen.extend(m.row_iter().map(|r| r[0] as usize / 2));
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn permutation_inverts_and_preserves_multiset(seed in any::<u64>()) {
            let mut s = RandomStream::new(seed, 1);
            let pixels: Vec<f64> = (0..IMAGE_PIXELS).map(|_| (s.next_u64() % 256) as f64 / 255.0).collect();
            let perm = s.permutation(IMAGE_PIXELS);
            prop_assert!(is_bijection(&perm));
            let permuted = apply_permutation(&pixels, &perm);
            prop_assert_eq!(&apply_permutation(&permuted, &invert_permutation(&perm)), &pixels);
            let mut a = pixels.clone();
            let mut b = permuted;
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn verify_mnist_bytes_checks_length_and_magic() {
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0xea, 0x60];
        labels.resize(60_008, 3);
        let name = Path::new("train-labels-idx1-ubyte");
        verify_mnist_bytes(name, "train-labels-idx1-ubyte", &labels).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        std::io::Write::write_all(&mut gz, &labels).unwrap();
        verify_mnist_bytes(name, "train-labels-idx1-ubyte", &gz.finish().unwrap()).unwrap();
        assert!(matches!(
            verify_mnist_bytes(name, "train-labels-idx1-ubyte", &labels[..100]),
            Err(Error::LengthMismatch { expected: 60_008, found: 100, .. })
        ));
        assert!(matches!(
            verify_mnist_bytes(name, "train-images-idx3-ubyte", &labels),
            Err(Error::WrongMagic { .. })
        ));
        assert!(verify_mnist_bytes(name, "readme", &labels).is_err());
    }

}
