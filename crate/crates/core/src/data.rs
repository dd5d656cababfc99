//! Dataset containers, loaders and the mini-batch plan.
//!
//! Two on-disk formats are understood:
//!
//! * IDX image tensors: big-endian magic `00 00 08 03`, then three
//!   big-endian `u32` dimensions `(count, rows, cols)`, then `count·rows·cols`
//!   unsigned bytes. Pixels are scaled to `[0, 1]` by dividing by 255.
//! * bitmatrix text: one sample per line, values `0`/`1` separated by
//!   single spaces.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::layers::{Matrix, Vector};
use crate::numerics::{Phase, RandomStream};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Rows of `D`-dimensional samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Matrix,
    binary: bool,
    pub split: Split,
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    /// Wraps a sample matrix, checking whether every entry is a bit.
    pub fn new(samples: Matrix, split: Split, image_shape: Option<(usize, usize)>) -> Result<Self> {
        if let Some((r, c)) = image_shape {
            if r * c != samples.ncols() {
                return Err(Error::Shape(format!(
                    "image shape {r}x{c} does not match sample dimension {}",
                    samples.ncols()
                )));
            }
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        let binary = samples.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self { samples, binary, split, image_shape })
    }

    pub fn from_rows(rows: &[Vector], split: Split, image_shape: Option<(usize, usize)>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows of differing length".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let m = Array2::from_shape_vec((rows.len(), dim), flat).expect("consistent shape");
        Self::new(m, split, image_shape)
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// The rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(Axis(0), indices),
            binary: self.binary,
            split: self.split,
            image_shape: self.image_shape,
        }
    }

    /// Errors unless every entry is 0 or 1.
    pub fn require_binary(&self) -> Result<()> {
        if self.binary {
            Ok(())
        } else {
            Err(Error::Format(format!("{} data must be binary; binarize it first", self.split)))
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an in-memory IDX image tensor.
pub fn parse_idx(bytes: &[u8]) -> Result<Dataset> {
    let magic = read_u32(bytes, 0).ok_or_else(|| Error::Corruption("IDX file shorter than its magic number".into()))?;
    match magic {
        IDX_IMAGES => {}
        IDX_LABELS => return Err(Error::Format("IDX label file holds no samples".into())),
        other => return Err(Error::Format(format!("unsupported IDX magic {other:#010x}"))),
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Corruption("IDX header truncated".into()))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let d = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Corruption("IDX dimensions overflow".into()))?;
    let body = &bytes[16..];
    let want = n.checked_mul(d).ok_or_else(|| Error::Corruption("IDX dimensions overflow".into()))?;
    if body.len() != want {
        return Err(Error::Corruption(format!("IDX payload has {} bytes, header promises {want}", body.len())));
    }
    let m = Array2::from_shape_vec((n, d), body.iter().map(|&b| b as f64 / 255.0).collect())
        .expect("consistent shape");
    Dataset::new(m, Split::Train, Some((rows, cols)))
}

pub fn load_idx(path: &Path) -> Result<Dataset> {
    parse_idx(&fs::read(path)?)
}

/// Serializes image data as an IDX tensor, rounding pixels to `k/255`.
pub fn encode_idx(ds: &Dataset) -> Result<Vec<u8>> {
    let (rows, cols) = ds
        .image_shape
        .ok_or_else(|| Error::Capability("IDX output needs an image shape".into()))?;
    let mut out = Vec::with_capacity(16 + ds.len() * ds.dim());
    for v in [IDX_IMAGES, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for &v in ds.samples.iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_idx(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_idx(ds)?)?;
    Ok(())
}

pub enum Binarization<'a> {
    ThresholdHalf,
    Stochastic(&'a mut RandomStream),
}

/// Maps `[0, 1]` intensities to bits.
pub fn binarize(ds: &Dataset, mode: Binarization<'_>) -> Result<Dataset> {
    if let Some(v) = ds.samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("value {v} outside [0, 1]")));
    }
    let samples = match mode {
        Binarization::ThresholdHalf => ds.samples.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        Binarization::Stochastic(stream) => ds.samples.mapv(|v| stream.bit(v)),
    };
    Ok(Dataset { samples, binary: true, split: ds.split, image_shape: ds.image_shape })
}

/// Parses bitmatrix text. Blank lines are skipped.
pub fn parse_bitmatrix(text: &str) -> Result<Dataset> {
    let mut rows: Vec<Vector> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| match tok {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(Error::Format(format!("line {}: {other:?} is not a bit", lineno + 1))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "line {}: {} values, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(Vector::from(row));
    }
    Dataset::from_rows(&rows, Split::Train, None)
}

pub fn load_bitmatrix(path: &Path) -> Result<Dataset> {
    parse_bitmatrix(&fs::read_to_string(path)?)
}

pub fn encode_bitmatrix(ds: &Dataset) -> Result<String> {
    ds.require_binary()?;
    let mut out = String::with_capacity(ds.len() * ds.dim() * 2);
    for row in ds.samples.rows() {
        let line: Vec<&str> = row.iter().map(|&v| if v == 1.0 { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_bitmatrix(path: &Path, ds: &Dataset) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(encode_bitmatrix(ds)?.as_bytes())?;
    Ok(())
}

/// Loads a dataset by extension: `.idx`/`-ubyte` files as IDX, everything
/// else as bitmatrix text.
pub fn load_any(path: &Path) -> Result<Dataset> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".idx") || name.contains("-ubyte") {
        load_idx(path)
    } else {
        load_bitmatrix(path)
    }
}

/// A random partition of `0..N` into consecutive slices of `size`, the last
/// one possibly shorter. The permutation depends only on `(seed, epoch)`.
pub fn minibatches(ds: &Dataset, size: usize, epoch: u64, seed: u64) -> Result<Vec<Vec<usize>>> {
    batch_plan(ds.len(), size, epoch, seed)
}

pub fn batch_plan(n: usize, size: usize, epoch: u64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if size == 0 {
        return Err(Error::Domain("mini-batch size must be at least 1".into()));
    }
    let mut stream = RandomStream::with_path(seed, vec![Phase::Shuffle as u64, epoch]);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.index(i + 1);
        perm.swap(i, j);
    }
    Ok(perm.chunks(size).map(<[usize]>::to_vec).collect())
}

/// Marks the upper `⌊rows/2⌋` rows as observed and zeroes the rest.
pub fn hollow_lower_half(x: ArrayView1<f64>, shape: (usize, usize)) -> Result<(Vec<bool>, Vector)> {
    let (rows, cols) = shape;
    if rows * cols != x.len() {
        return Err(Error::Shape(format!("image shape {rows}x{cols} does not match {} pixels", x.len())));
    }
    let observed_pixels = (rows / 2) * cols;
    let mask: Vec<bool> = (0..x.len()).map(|i| i < observed_pixels).collect();
    let hollowed = Vector::from_iter(x.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }));
    Ok((mask, hollowed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn idx_header_arithmetic() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend(0u8..8);
        let ds = parse_idx(&bytes).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        assert_eq!(ds.image_shape, Some((2, 2)));
        for k in 0..8 {
            assert_eq!(ds.row(k / 4)[k % 4], k as f64 / 255.0);
        }
        assert_eq!(encode_idx(&ds).unwrap(), bytes);
    }

    #[test]
    fn idx_rejects_bad_input() {
        let mut bytes = vec![0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7];
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
        bytes[3] = 1;
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
        bytes[3] = 3;
        assert!(parse_idx(&bytes).is_ok());
        assert!(matches!(parse_idx(&bytes[..16]), Err(Error::Corruption(_))));
        assert!(matches!(parse_idx(&bytes[..10]), Err(Error::Corruption(_))));
        assert!(matches!(parse_idx(&bytes[..2]), Err(Error::Corruption(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(parse_idx(&long), Err(Error::Corruption(_))));
    }

    #[test]
    fn idx_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = RandomStream::new(5);
        let m = Array2::from_shape_fn((7, 12), |_| s.index(256) as f64 / 255.0);
        let ds = Dataset::new(m, Split::Train, Some((3, 4))).unwrap();
        let p = dir.path().join("x.idx");
        write_idx(&p, &ds).unwrap();
        assert_eq!(load_idx(&p).unwrap(), ds);
    }

    #[test]
    fn threshold_and_stochastic_binarization() {
        let ds = Dataset::from_rows(&[Vector::from(vec![0.2, 0.5, 0.9])], Split::Train, None).unwrap();
        let b = binarize(&ds, Binarization::ThresholdHalf).unwrap();
        assert_eq!(b.row(0).to_vec(), vec![0.0, 1.0, 1.0]);
        assert_eq!(binarize(&b, Binarization::ThresholdHalf).unwrap(), b);

        let zeros = Dataset::new(Array2::zeros((3, 5)), Split::Train, None).unwrap();
        let mut s = RandomStream::new(1);
        assert_eq!(binarize(&zeros, Binarization::Stochastic(&mut s)).unwrap().samples.sum(), 0.0);
        assert_eq!(binarize(&zeros, Binarization::ThresholdHalf).unwrap().samples.sum(), 0.0);

        let n = 100_000;
        let ds = Dataset::new(Array2::from_elem((n, 1), 0.3), Split::Train, None).unwrap();
        let b = binarize(&ds, Binarization::Stochastic(&mut s)).unwrap();
        let mean = b.samples.sum() / n as f64;
        let sd = (0.3 * 0.7 / n as f64).sqrt();
        assert!((mean - 0.3).abs() < 3.0 * sd);

        let bad = Dataset::from_rows(&[Vector::from(vec![1.5])], Split::Train, None).unwrap();
        assert!(matches!(binarize(&bad, Binarization::ThresholdHalf), Err(Error::Domain(_))));
    }

    #[test]
    fn bitmatrix_parsing() {
        let ds = parse_bitmatrix("0 1 1 0\n").unwrap();
        assert_eq!((ds.len(), ds.dim()), (1, 4));
        assert_eq!(ds.row(0).to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
        assert!(ds.is_binary());
        assert!(matches!(parse_bitmatrix("0 1\n1\n"), Err(Error::Format(_))));
        assert!(matches!(parse_bitmatrix("0 2\n"), Err(Error::Format(_))));
        assert!(matches!(parse_bitmatrix("0 0.5\n"), Err(Error::Format(_))));
        assert!(parse_bitmatrix("").unwrap().is_empty());
    }

    #[test]
    fn bitmatrix_round_trip() {
        let mut s = RandomStream::new(2);
        let m = Array2::from_shape_fn((9, 13), |_| s.bit(0.4));
        let ds = Dataset::new(m, Split::Train, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_bitmatrix(&p, &ds).unwrap();
        assert_eq!(load_bitmatrix(&p).unwrap(), ds);
    }

    #[test]
    fn minibatch_examples() {
        let plan = batch_plan(5, 2, 0, 1).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all: Vec<usize> = plan.concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_plan(5, 2, 0, 1).unwrap(), plan);
        assert!(batch_plan(5, 0, 0, 1).is_err());

        let perms: HashSet<Vec<usize>> = (0..100).map(|e| batch_plan(1000, 1000, e, 3).unwrap().concat()).collect();
        assert_eq!(perms.len(), 100);
    }

    #[test]
    fn hollowing() {
        let x = Vector::from(vec![0.1, 0.2, 0.3, 0.4]);
        let (mask, h) = hollow_lower_half(x.view(), (2, 2)).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
        assert_eq!(h.to_vec(), vec![0.1, 0.2, 0.0, 0.0]);
        let (_, again) = hollow_lower_half(h.view(), (2, 2)).unwrap();
        assert_eq!(again, h);
        let (mask, _) = hollow_lower_half(Vector::zeros(28 * 28).view(), (28, 28)).unwrap();
        assert_eq!(mask.iter().filter(|m| **m).count(), 28 * 28 / 2);
        assert!(matches!(hollow_lower_half(x.view(), (3, 2)), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn plans_are_partitions(n in 0usize..300, size in 1usize..50, epoch in 0u64..20, seed in any::<u64>()) {
            let plan = batch_plan(n, size, epoch, seed).unwrap();
            prop_assert_eq!(plan.len(), n.div_ceil(size));
            let mut all = plan.concat();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
