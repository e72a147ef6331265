//! MNIST loading, deterministic subset selection and mini-batching.
//!
//! Images arrive in the IDX format (big-endian headers: magic, count, then
//! rows × cols for images).  Pixels map to `[0, 1]` as `v / 255`, labels
//! must lie in `[0, 10)`, and every structural problem — wrong magic,
//! truncated payload, image/label count mismatch — is reported as its own
//! error with the offending path.
//!
//! Subsets and shuffles draw from counter-based streams, so the examples a
//! run sees are a pure function of `(seed, fraction)` and `(seed, epoch)`.

use crate::rng::{Purpose, RngStream};
use crate::tensor::{Shape, Tensor};
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const SIDE: usize = 28;
const CLASSES: usize = 10;

/// Errors from dataset loading and subsetting.
#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: io::Error },
    /// File does not start with the expected IDX magic.
    BadMagic { path: PathBuf, expected: u32, got: u32 },
    /// File is shorter than its header promises.
    Truncated { path: PathBuf, expected_bytes: usize, got_bytes: usize },
    /// Images are not 28×28.
    BadImageDims { path: PathBuf, rows: usize, cols: usize },
    /// Image and label files disagree on the example count.
    CountMismatch { images: usize, labels: usize },
    /// A label is outside `[0, 10)`.
    BadLabel { index: usize, label: u8 },
    /// A fraction must have positive terms and value at most 1.
    BadFraction { text: String },
    /// Rounding `n · fraction` produced an empty subset.
    EmptySubset { n: usize, fraction: Fraction },
    /// Mini-batches need a positive batch size.
    ZeroBatchSize,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::BadMagic { path, expected, got } => write!(
                f,
                "{}: bad IDX magic {got:#010x} (expected {expected:#010x})",
                path.display()
            ),
            DataError::Truncated { path, expected_bytes, got_bytes } => write!(
                f,
                "{}: truncated ({got_bytes} bytes, header promises {expected_bytes})",
                path.display()
            ),
            DataError::BadImageDims { path, rows, cols } => {
                write!(f, "{}: images are {rows}x{cols}, expected 28x28", path.display())
            }
            DataError::CountMismatch { images, labels } => {
                write!(f, "{images} images but {labels} labels")
            }
            DataError::BadLabel { index, label } => {
                write!(f, "label {label} at example {index} outside [0, 10)")
            }
            DataError::BadFraction { text } => {
                write!(f, "invalid fraction {text:?} (want e.g. \"1\", \"1/4\", \"1/32\")")
            }
            DataError::EmptySubset { n, fraction } => {
                write!(f, "fraction {fraction} of {n} examples rounds to an empty subset")
            }
            DataError::ZeroBatchSize => write!(f, "batch size must be >= 1"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// A dataset fraction such as `1`, `1/4` or `1/32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    num: u32,
    den: u32,
}

impl Fraction {
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };
    pub const QUARTER: Fraction = Fraction { num: 1, den: 4 };
    pub const THIRTY_SECOND: Fraction = Fraction { num: 1, den: 32 };

    pub fn new(num: u32, den: u32) -> Result<Self, DataError> {
        if num == 0 || den == 0 || num > den {
            return Err(DataError::BadFraction { text: format!("{num}/{den}") });
        }
        Ok(Fraction { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Subset size: `round(n · fraction)`.
    pub fn of(self, n: usize) -> usize {
        (n as f64 * self.value()).round() as usize
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fraction {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::BadFraction { text: s.to_string() };
        match s.split_once('/') {
            None => {
                let num: u32 = s.trim().parse().map_err(|_| bad())?;
                Fraction::new(num, 1).map_err(|_| bad())
            }
            Some((a, b)) => {
                let num: u32 = a.trim().parse().map_err(|_| bad())?;
                let den: u32 = b.trim().parse().map_err(|_| bad())?;
                Fraction::new(num, den).map_err(|_| bad())
            }
        }
    }
}

/// An in-memory labelled image set: images `[N, 28, 28, 1]` with pixels in
/// `[0, 1]`, labels in `[0, 10)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<u8>,
}

impl Dataset {
    /// Wraps already-built tensors, validating counts and label range.
    /// Intended for synthetic data in tests; file loading goes through
    /// [`load_mnist`].
    pub fn from_parts(images: Tensor, labels: Vec<u8>) -> Result<Self, DataError> {
        let n = images.dims()[0];
        if labels.len() != n {
            return Err(DataError::CountMismatch { images: n, labels: labels.len() });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label as usize >= CLASSES {
                return Err(DataError::BadLabel { index, label });
            }
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        CLASSES
    }

    /// Per-example image shape.
    pub fn image_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// One image as its own tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let per = self.images.elem_count() / self.len();
        let data = self.images.data()[i * per..(i + 1) * per].to_vec();
        Tensor::from_vec(self.image_dims(), data).expect("slice of a valid tensor")
    }

    /// Stacks the given examples into `[B, …dims]` plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let per = self.images.elem_count() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.image_dims());
        (
            Tensor::from_vec(&dims, data).expect("slices of a valid tensor"),
            labels,
        )
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn be_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

fn check_len(path: &Path, buf: &[u8], expected: usize) -> Result<(), DataError> {
    if buf.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes: expected,
            got_bytes: buf.len(),
        });
    }
    Ok(())
}

/// Loads an MNIST image/label file pair.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    check_len(images_path, &img, 16)?;
    let magic = be_u32(&img, 0);
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(&img, 4) as usize;
    let rows = be_u32(&img, 8) as usize;
    let cols = be_u32(&img, 12) as usize;
    if rows != SIDE || cols != SIDE {
        return Err(DataError::BadImageDims { path: images_path.to_path_buf(), rows, cols });
    }
    check_len(images_path, &img, 16 + n * rows * cols)?;

    let lab = read_file(labels_path)?;
    check_len(labels_path, &lab, 8)?;
    let magic = be_u32(&lab, 0);
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n_labels = be_u32(&lab, 4) as usize;
    check_len(labels_path, &lab, 8 + n_labels)?;
    if n != n_labels {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }

    let pixels: Vec<f64> = img[16..16 + n * rows * cols]
        .iter()
        .map(|&v| v as f64 / 255.0)
        .collect();
    let images = Tensor::new(
        Shape::new(&[n, SIDE, SIDE, 1]).expect("valid dims"),
        pixels,
    )
    .expect("pixel data is finite and sized by construction");
    Dataset::from_parts(images, lab[8..8 + n_labels].to_vec())
}

/// Indices of a `fraction`-sized subset of `0..n`, drawn without
/// replacement by a partial Fisher–Yates walk on the `(seed, Split)`
/// stream.  The order is the selection order.
pub fn subset_indices(n: usize, fraction: Fraction, seed: u64) -> Result<Vec<usize>, DataError> {
    let k = fraction.of(n);
    if k == 0 {
        return Err(DataError::EmptySubset { n, fraction });
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut stream = RngStream::for_purpose(seed, 0, Purpose::Split, 0);
    for i in 0..k {
        let j = i + stream
            .uniform_int((n - i) as u64)
            .expect("non-empty range") as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

/// Materialises a seeded subset of a dataset (same examples as
/// [`subset_indices`], in selection order).
pub fn subset(ds: &Dataset, fraction: Fraction, seed: u64) -> Result<Dataset, DataError> {
    let indices = subset_indices(ds.len(), fraction, seed)?;
    let (images, labels) = ds.gather(&indices);
    Dataset::from_parts(images, labels)
}

/// One mini-batch: stacked images and their labels, plus the position of
/// the batch's first example in the epoch's shuffled order (used to assign
/// mask pass indices).
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub start: usize,
}

/// Iterator over one epoch in a freshly shuffled order; the final batch may
/// be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

/// Splits an epoch into mini-batches after a full Fisher–Yates shuffle on
/// the `(seed, Shuffle, epoch)` stream.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Batches<'_>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = RngStream::for_purpose(seed, 0, Purpose::Shuffle, epoch);
    for i in 0..n.saturating_sub(1) {
        let j = i + stream.uniform_int((n - i) as u64).expect("non-empty range") as usize;
        order.swap(i, j);
    }
    Ok(Batches { ds, order, batch_size, at: 0 })
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.batch_size).min(self.order.len());
        let (images, labels) = self.ds.gather(&self.order[self.at..end]);
        let batch = Batch { images, labels, start: self.at };
        self.at = end;
        Some(batch)
    }
}
