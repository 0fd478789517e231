//! Dataset files.
//!
//! CIFAR-10 binary batches hold records of one label byte followed by
//! 3072 pixel bytes (R, G, B planes of 32×32). Raw tensors are `"RTEN"`,
//! a u32 rank, u32 extents and a little-endian f32 payload; raw labels
//! are a bare little-endian u32 array.

use std::path::Path;

use repapq_core::dataset::{self, Dataset, Normalization};
use repapq_core::Tensor;

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const RTEN_MAGIC: &[u8; 4] = b"RTEN";

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits one batch file into labels and planar pixels.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<u32>, Vec<u8>)> {
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len());
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec.len() != CIFAR_RECORD {
            return Err(Error::TruncatedRecord {
                path: path.to_path_buf(),
                record: i,
                got: rec.len(),
                want: CIFAR_RECORD,
            });
        }
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::malformed(path, format!("record {i}: label {} out of range", rec[0])));
        }
        labels.push(rec[0] as u32);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn ingest_cifar10(files: &[impl AsRef<Path>], norm: &Normalization) -> Result<Dataset> {
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    for f in files {
        let f = f.as_ref();
        let (l, p) = parse_cifar10(&read(f)?, f)?;
        labels.extend(l);
        pixels.extend(p);
    }
    if labels.is_empty() {
        return Err(Error::Core(repapq_core::Error::Empty("CIFAR-10 input")));
    }
    Ok(dataset::from_bytes(&pixels, labels, CIFAR_SIDE, norm, "cifar10", CIFAR_CLASSES)?)
}

pub fn write_cifar10(path: &Path, labels: &[u32], pixels: &[u8]) -> Result<()> {
    let per = CIFAR_RECORD - 1;
    if pixels.len() != labels.len() * per || labels.iter().any(|&l| l as usize >= CIFAR_CLASSES) {
        return Err(Error::Config("pixels and labels do not form CIFAR-10 records".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, img) in labels.iter().zip(pixels.chunks(per)) {
        out.push(*l as u8);
        out.extend_from_slice(img);
    }
    write(path, &out)
}

pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(RTEN_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32s(bytes: &[u8]) -> impl Iterator<Item = u32> + '_ {
    bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..4] != RTEN_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "RTEN",
            found,
        });
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let head = 8 + 4 * rank;
    if bytes.len() < head {
        return Err(Error::malformed(path, "header shorter than its rank"));
    }
    let shape: Vec<usize> = u32s(&bytes[8..head]).map(|d| d as usize).collect();
    let numel: usize = shape.iter().product();
    if bytes.len() - head != 4 * numel {
        return Err(Error::malformed(
            path,
            format!("payload holds {} bytes, shape {shape:?} needs {}", bytes.len() - head, 4 * numel),
        ));
    }
    let data = u32s(&bytes[head..]).map(f32::from_bits).collect();
    Tensor::new(&shape, data).map_err(|e| Error::malformed(path, e.to_string()))
}

pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &encode_raw(t))
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    decode_raw(&read(path)?, path)
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::malformed(path, "label file length is not a multiple of 4"));
    }
    Ok(u32s(&bytes).collect())
}

/// Already-normalized images with labels; the class count is the
/// largest label plus one unless given.
pub fn ingest_raw(tensor: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let images = read_raw(tensor)?;
    let labels = read_labels(labels)?;
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m as usize + 1));
    Ok(Dataset::new(images, labels, "raw", classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handcrafted_white_record() {
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let (labels, pixels) = parse_cifar10(&rec, Path::new("r")).unwrap();
        assert_eq!(labels, vec![3]);
        let n = Normalization::CIFAR10;
        let d = dataset::from_bytes(&pixels, labels, 32, &n, "cifar10", 10).unwrap();
        assert_eq!(d.images.shape(), &[1, 3, 32, 32]);
        for c in 0..3 {
            let want = (1.0 - n.mean[c]) / n.std[c];
            assert!(d.images.data()[c * 1024..(c + 1) * 1024].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn truncated_record_index() {
        let bytes = vec![1u8; CIFAR_RECORD * 2 + 10];
        match parse_cifar10(&bytes, Path::new("r")) {
            Err(Error::TruncatedRecord { record, got, .. }) => assert_eq!((record, got), (2, 10)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn raw_layout() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let b = encode_raw(&t);
        assert_eq!(&b[..4], b"RTEN");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.5f32.to_le_bytes());
        assert_eq!(decode_raw(&b, Path::new("r")).unwrap(), t);
        assert!(matches!(decode_raw(&b[..18], Path::new("r")), Err(Error::Malformed { .. })));
        assert!(matches!(decode_raw(b"XTEN0000", Path::new("r")), Err(Error::BadMagic { .. })));
    }
}
