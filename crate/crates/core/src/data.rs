//! IDX (MNIST-family) files, synthetic toy sets, subsetting and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::{Dataset, Example};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| format_err(bytes.len(), format!("header truncated, needed 4 bytes at offset {offset}")))?;
    Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(format_err(0, format!("magic {magic:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, dims: &[usize]) -> Result<&'a [u8]> {
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, format!("dimensions {dims:?} overflow")))?;
    let end = start.checked_add(len).ok_or_else(|| format_err(4, "payload size overflows"))?;
    if bytes.len() < end {
        return Err(format_err(
            bytes.len(),
            format!(
                "payload truncated: expected {len} bytes from offset {start}, file ends at {}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > end {
        return Err(format_err(end, format!("{} trailing bytes after payload", bytes.len() - end)));
    }
    Ok(&bytes[start..end])
}

/// Parses an IDX image file into `[count, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let dims: Vec<usize> = (0..3)
        .map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let raw = payload(bytes, 16, &dims)?;
    Tensor::new(dims, raw.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, &[count])?.iter().map(|&b| b as usize).collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_idx_images(&fs::read(path)?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_idx_labels(&fs::read(path)?)
}

/// Encodes raw 8-bit pixels as an IDX image file.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::dim(
            "idx images",
            format!("{} pixels for {count}x{rows}x{cols}", pixels.len()),
        ));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        let d = u32::try_from(d).map_err(|_| Error::usage("IDX dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Result<Vec<u8>> {
    let count = u32::try_from(labels.len()).map_err(|_| Error::usage("too many labels for IDX"))?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&count.to_be_bytes());
    out.extend_from_slice(labels);
    Ok(out)
}

/// Image/label file pair as a dataset of flattened images.
pub fn load_idx_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, class_count: usize) -> Result<Dataset> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    let (count, pixels) = (images.shape()[0], images.shape()[1] * images.shape()[2]);
    if count != labels.len() {
        return Err(Error::dim("idx dataset", format!("{count} images vs {} labels", labels.len())));
    }
    let inputs = images
        .data()
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|c| Tensor::vector(c.to_vec()))
        .collect();
    Dataset::from_parts(inputs, labels, class_count)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    /// Two isotropic blobs centred at (−1, −1) and (1, 1).
    TwoGaussians,
    /// Four blobs at (±1, ±1); the label is the XOR of the coordinate signs.
    Xor,
}

/// Deterministic 2-D binary classification set with balanced labels.
pub fn make_toy_dataset(kind: ToyKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::usage(format!("toy dataset needs at least 4 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let (center, label, std) = match kind {
            ToyKind::TwoGaussians => {
                let label = i % 2;
                let c = if label == 0 { -1.0 } else { 1.0 };
                ([c, c], label, 0.5)
            }
            ToyKind::Xor => {
                let cluster = i % 4;
                let (sx, sy) = (cluster & 1, cluster >> 1);
                let c = [if sx == 1 { 1.0 } else { -1.0 }, if sy == 1 { 1.0 } else { -1.0 }];
                (c, sx ^ sy, 0.3)
            }
        };
        let noise: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        examples.push(Example {
            input: Tensor::vector(vec![center[0] + std * noise[0], center[1] + std * noise[1]]),
            label,
        });
    }
    examples.shuffle(&mut rng);
    Dataset::new(examples, 2)
}

/// `n` examples drawn uniformly without replacement.
pub fn subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(Error::usage(format!("subset of {n} from {} examples", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, data.len(), n);
    let examples = picked.iter().map(|i| data.examples()[i].clone()).collect();
    Dataset::new(examples, data.class_count())
}

/// The first `n` examples, in order.
pub fn head(data: &Dataset, n: usize) -> Result<Dataset> {
    if n > data.len() {
        return Err(Error::usage(format!("head of {n} from {} examples", data.len())));
    }
    Dataset::new(data.examples()[..n].to_vec(), data.class_count())
}

/// A random permutation of `0..n` cut into batches of `m` (the last may be shorter).
pub fn batches(n: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::usage("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(m).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_fixture() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1];
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 2, 1]);
    }

    #[test]
    fn images_fixture() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64];
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        let want = [0.0, 1.0, 0.50196, 0.25098];
        for (g, w) in t.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn format_errors_name_offsets() {
        let truncated = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2];
        match parse_idx_labels(&truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
        let wrong_magic = [0, 0, 8, 3, 0, 0, 0, 0];
        assert!(matches!(parse_idx_labels(&wrong_magic), Err(Error::Format { offset: 0, .. })));
        let huge = [0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255];
        assert!(matches!(parse_idx_images(&huge), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|v| (v * 11) as u8).collect();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        fs::write(&img, encode_idx_images(2, 3, 4, &pixels).unwrap()).unwrap();
        fs::write(&lab, encode_idx_labels(&[4, 9]).unwrap()).unwrap();
        let t = load_idx_images(&img).unwrap();
        let back: Vec<u8> = t.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
        let ds = load_idx_dataset(&img, &lab, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), vec![4, 9]);
        assert_eq!(ds.input_dim(), 12);
        assert!(ds.examples().iter().all(|e| e.input.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(load_idx_dataset(&img, &lab, 5).is_err());
    }

    #[test]
    fn toy_sets_are_deterministic_and_balanced() {
        for kind in [ToyKind::TwoGaussians, ToyKind::Xor] {
            let a = make_toy_dataset(kind, 4, 7).unwrap();
            assert_eq!(a, make_toy_dataset(kind, 4, 7).unwrap());
            for n in [4, 5, 101] {
                let d = make_toy_dataset(kind, n, 3).unwrap();
                let ones = d.labels().iter().filter(|&&l| l == 1).count() as i64;
                assert!((n as i64 - 2 * ones).abs() <= 1);
            }
        }
        assert!(make_toy_dataset(ToyKind::Xor, 3, 0).is_err());
    }

    #[test]
    fn xor_means_defeat_linear_separators() {
        let means = [([-1.0, -1.0], 0), ([1.0, -1.0], 1), ([-1.0, 1.0], 1), ([1.0, 1.0], 0)];
        let mut best = 0;
        let grid: Vec<f64> = (-20..=20).map(|k| k as f64 / 10.0).collect();
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let hits = means
                        .iter()
                        .filter(|(p, l)| usize::from(a * p[0] + b * p[1] + c > 0.0) == *l)
                        .count();
                    best = best.max(hits);
                }
            }
        }
        assert_eq!(best, 3);
    }

    #[test]
    fn subset_and_batches() {
        let d = make_toy_dataset(ToyKind::TwoGaussians, 50, 1).unwrap();
        let full = subset(&d, 50, 9).unwrap();
        let mut a: Vec<String> = full.examples().iter().map(|e| format!("{:?}", e.input.data())).collect();
        let mut b: Vec<String> = d.examples().iter().map(|e| format!("{:?}", e.input.data())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(subset(&d, 10, 4).unwrap(), subset(&d, 10, 4).unwrap());
        assert!(subset(&d, 51, 0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bs = batches(10, 4, &mut rng).unwrap();
        assert_eq!(bs.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = bs.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batches(10, 0, &mut rng).is_err());
    }
}
