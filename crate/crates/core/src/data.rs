//! IDX-format dataset ingestion and normalization.
//!
//! IDX is the big-endian binary tensor container the MNIST distribution
//! uses: a 4-byte magic (`0x00000803` for u8 image tensors, `0x00000801` for
//! label vectors), one big-endian u32 per dimension, then the raw payload.
//! Gzip-compressed files are detected by magic bytes and decompressed
//! transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw parse result: declared dimensions plus the byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an IDX byte buffer of unsigned-byte element type.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: "truncated magic".into(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic prefix {:02x}{:02x}", bytes[0], bytes[1]),
        });
    }
    if bytes[2] != 0x08 {
        return Err(Error::Parse {
            offset: 2,
            msg: format!("unsupported element type 0x{:02x} (expected u8)", bytes[2]),
        });
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::Parse {
            offset: 3,
            msg: "zero-dimensional tensor".into(),
        });
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated header, need {header_len} bytes"),
        });
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        total = total.checked_mul(v).ok_or(Error::Parse {
            offset: off,
            msg: "dimension product overflows".into(),
        })?;
        dims.push(v);
    }
    let payload = &bytes[header_len..];
    if payload.len() != total {
        return Err(Error::Parse {
            offset: header_len + payload.len().min(total),
            msg: format!("payload is {} bytes, dimensions require {total}", payload.len()),
        });
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

/// Scale a byte pixel into `[0, 1]` exactly as `value / 255`.
pub fn normalize_pixel(p: u8) -> f64 {
    p as f64 / 255.0
}

/// Inverse of [`normalize_pixel`] on the 256 representable values.
pub fn denormalize_pixel(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

/// Which half of the dataset a file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_prefix(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    /// Record count of the canonical MNIST distribution.
    pub fn canonical_len(&self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

/// Loaded image set: one row per sample with pixels in `[0, 1]`, plus labels
/// in `0..=9`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    /// Load one split from a directory holding the standard MNIST file
    /// names (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ...),
    /// plain or `.gz`.
    pub fn load_dir(dir: &Path, split: Split) -> Result<Dataset> {
        let prefix = split.file_prefix();
        let images = read_idx_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
        let labels = read_idx_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
        Dataset::from_tensors(images, labels, split)
    }

    /// Assemble and validate a dataset from parsed tensors.
    pub fn from_tensors(images: IdxTensor, labels: IdxTensor, split: Split) -> Result<Dataset> {
        let magic_ok = images.dims.len() == 3;
        if !magic_ok {
            return Err(Error::data(format!(
                "image tensor must be 3-dimensional, got {:?}",
                images.dims
            )));
        }
        let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
        if h * w != 784 {
            return Err(Error::data(format!(
                "expected 28x28 images, got {h}x{w}"
            )));
        }
        if labels.dims.len() != 1 || labels.dims[0] != n {
            return Err(Error::data(format!(
                "label count {:?} does not match {n} images",
                labels.dims
            )));
        }
        if let Some(bad) = labels.data.iter().find(|&&l| l > 9) {
            return Err(Error::data(format!("label {bad} outside 0..=9")));
        }
        let pixels: Vec<f64> = images.data.iter().map(|&p| normalize_pixel(p)).collect();
        Ok(Dataset {
            images: Matrix::from_vec(n, 784, pixels)?,
            labels: labels.data,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Enforce the canonical MNIST record counts (60,000 / 10,000) and that
    /// every class is present.
    pub fn validate_canonical(&self) -> Result<()> {
        let expect = self.split.canonical_len();
        if self.len() != expect {
            return Err(Error::data(format!(
                "{:?} split has {} records, the canonical distribution has {expect}",
                self.split,
                self.len()
            )));
        }
        let mut hist = [0usize; 10];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        if let Some(missing) = hist.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("class {missing} absent from labels")));
        }
        Ok(())
    }

    /// First `n` records (for desk-scale runs).
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let data = self.images.data()[..n * 784].to_vec();
        Dataset {
            images: Matrix::from_vec(n, 784, data).expect("subset of valid data"),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Column-major input batch (784 x batch) for the selected sample rows.
    pub fn batch_inputs(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(784, indices.len());
        for (col, &idx) in indices.iter().enumerate() {
            let row = self.images.row(idx);
            for (pix, &v) in row.iter().enumerate() {
                m.set(pix, col, v);
            }
        }
        m
    }

    /// One-hot target batch (10 x batch) for the selected sample rows.
    pub fn batch_targets(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(10, indices.len());
        for (col, &idx) in indices.iter().enumerate() {
            m.set(self.labels[idx] as usize, col, 1.0);
        }
        m
    }
}

/// Read `<dir>/<name>` or `<dir>/<name>.gz`, decompressing when the content
/// is gzip, and parse it as IDX with the magic appropriate to the name.
fn read_idx_file(dir: &Path, name: &str) -> Result<IdxTensor> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    let path = if plain.exists() {
        plain
    } else if gz.exists() {
        gz
    } else {
        return Err(Error::data(format!(
            "missing dataset file '{name}[.gz]' in {}; download the four MNIST files \
             (train/t10k images and labels, IDX format) into that directory",
            dir.display()
        )));
    };
    let raw = fs::read(&path)?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::data(format!("bad gzip stream {}: {e}", path.display())))?;
        out
    } else {
        raw
    };
    let tensor = parse_idx(&bytes)?;
    let magic = match tensor.dims.len() {
        3 => IMAGE_MAGIC,
        1 => LABEL_MAGIC,
        _ => 0,
    };
    let declared = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if declared != magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("magic 0x{declared:08x} does not match tensor rank"),
        });
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_file(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 1];
        for &d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    fn image_file(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 3];
        for &d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn label_header_declares_ten_thousand() {
        // header bytes [0,0,8,1, 0,0,39,16] declare 10,000 labels
        let header = [0u8, 0, 8, 1, 0, 0, 39, 16];
        let mut bytes = header.to_vec();
        bytes.extend(std::iter::repeat(3u8).take(10_000));
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![10_000]);
        assert_eq!(t.data.len(), 10_000);
    }

    #[test]
    fn truncated_payload_is_rejected_with_offset() {
        let bytes = image_file(&[60_000, 28, 28], &[0u8; 100]);
        match parse_idx(&bytes) {
            Err(Error::Parse { offset, msg }) => {
                assert!(offset >= 16, "offset {offset}");
                assert!(msg.contains("payload"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_image_round_trips() {
        let payload: Vec<u8> = (0..8).collect();
        let bytes = image_file(&[2, 2, 2], &payload);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 2, 2]);
        assert_eq!(t.data, payload);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0]).is_err());
    }

    #[test]
    fn pixel_normalization_endpoints_and_interior() {
        assert_eq!(normalize_pixel(0), 0.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(51), 0.2);
    }

    #[test]
    fn pixel_round_trip_exhaustive() {
        for p in 0..=255u8 {
            assert_eq!(denormalize_pixel(normalize_pixel(p)), p);
        }
    }

    #[test]
    fn dataset_from_tensors_validates_labels() {
        let images = parse_idx(&image_file(&[1, 28, 28], &[0u8; 784])).unwrap();
        let labels = parse_idx(&label_file(&[1], &[11])).unwrap();
        assert!(Dataset::from_tensors(images, labels, Split::Train).is_err());
    }

    #[test]
    fn dataset_batch_builders() {
        let mut pixels = vec![0u8; 2 * 784];
        pixels[0] = 255; // sample 0, pixel 0
        pixels[784 + 1] = 51; // sample 1, pixel 1
        let images = parse_idx(&image_file(&[2, 28, 28], &pixels)).unwrap();
        let labels = parse_idx(&label_file(&[2], &[7, 3])).unwrap();
        let ds = Dataset::from_tensors(images, labels, Split::Train).unwrap();

        let x = ds.batch_inputs(&[1, 0]);
        assert_eq!(x.rows(), 784);
        assert_eq!(x.cols(), 2);
        assert_eq!(x.at(1, 0), 0.2);
        assert_eq!(x.at(0, 1), 1.0);

        let t = ds.batch_targets(&[1, 0]);
        assert_eq!(t.at(3, 0), 1.0);
        assert_eq!(t.at(7, 1), 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn missing_files_give_remediation_hint() {
        let dir = std::env::temp_dir().join("scsim-missing-data");
        let err = Dataset::load_dir(&dir, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train-images-idx3-ubyte"), "{msg}");
        assert!(msg.contains("download"), "{msg}");
    }
}
