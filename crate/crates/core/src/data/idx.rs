//! The IDX container used by MNIST: a big-endian magic word whose low
//! byte is the dimension count, one u32 size per dimension, then payload.
//! Gzip-compressed files are detected and inflated transparently.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;

use super::{DataError, Dataset};
use crate::arch::Shape;

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX buffer.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile, DataError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| DataError::Truncated { offset: 0, needed: 4 - bytes.len() as u64 })?;
    if magic >> 8 != 0x08 || !(1..=3).contains(&(magic & 0xff)) {
        return Err(DataError::BadMagic { offset: 0, found: magic, expected: "0x00000801..0x00000803".into() });
    }
    let mut dims = Vec::new();
    for _ in 0..magic & 0xff {
        let at = cur.position();
        let d = cur.read_u32::<BigEndian>().map_err(|_| DataError::Truncated { offset: at, needed: 4 })?;
        dims.push(d as usize);
    }
    let len: usize = dims.iter().product();
    let start = cur.position() as usize;
    let have = bytes.len() - start;
    if have < len {
        return Err(DataError::Truncated { offset: bytes.len() as u64, needed: (len - have) as u64 });
    }
    Ok(IdxFile { magic, dims, payload: bytes[start..start + len].to_vec() })
}

pub fn load_idx(path: &Path) -> Result<IdxFile, DataError> {
    parse_idx(&read_bytes(path)?)
}

fn expect_magic(f: &IdxFile, want: u32) -> Result<(), DataError> {
    if f.magic != want {
        return Err(DataError::BadMagic { offset: 0, found: f.magic, expected: format!("{want:#010x}") });
    }
    Ok(())
}

/// Pairs an image file and a label file into a dataset with pixels scaled to `[0, 1]`.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img = load_idx(images)?;
    expect_magic(&img, IDX_IMAGES)?;
    let lab = load_idx(labels)?;
    expect_magic(&lab, IDX_LABELS)?;
    if img.dims[0] != lab.dims[0] {
        return Err(DataError::Mismatch(format!("{} images but {} labels", img.dims[0], lab.dims[0])));
    }
    let shape = Shape::new(1, img.dims[1], img.dims[2]);
    let inputs = img.payload.iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lab.payload.iter().map(|&b| b as u32).collect();
    Dataset::new(shape, 10, inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn parses_images_and_labels() {
        let f = parse_idx(&idx_bytes(IDX_IMAGES, &[2, 2, 3], &[0; 12])).unwrap();
        assert_eq!(f.dims, vec![2, 2, 3]);
        let f = parse_idx(&idx_bytes(IDX_LABELS, &[4], &[1, 2, 3, 9])).unwrap();
        assert_eq!(f.payload, vec![1, 2, 3, 9]);
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let err = parse_idx(&idx_bytes(0x1234_0803, &[1], &[0])).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { offset: 0, .. }));
        assert!(err.to_string().contains("offset 0"));
    }

    #[test]
    fn truncation_detected() {
        let err = parse_idx(&idx_bytes(IDX_LABELS, &[5], &[1, 2])).unwrap_err();
        assert!(matches!(err, DataError::Truncated { offset: 10, needed: 3 }));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(DataError::Truncated { offset: 0, .. })));
    }

    #[test]
    fn gzip_and_plain_files_load_alike() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx_bytes(IDX_IMAGES, &[2, 1, 2], &[0, 255, 51, 102]);
        let lab = idx_bytes(IDX_LABELS, &[2], &[7, 3]);
        std::fs::write(dir.path().join("i"), &img).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&lab).unwrap();
        std::fs::write(dir.path().join("l.gz"), gz.finish().unwrap()).unwrap();
        let d = load_mnist(&dir.path().join("i"), &dir.path().join("l.gz")).unwrap();
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.inputs, vec![0.0, 1.0, 0.2, 0.4]);
        assert!(load_mnist(&dir.path().join("l.gz"), &dir.path().join("i")).is_err());
    }
}
