//! IDX binary format: a big-endian magic word whose low byte is the number
//! of dimensions, one big-endian u32 per dimension, then unsigned bytes.

use std::path::Path;

use ndarray::Array2;

use super::LabeledDataset;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw images exactly as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Length { expected: need, found: bytes.len() });
    }
    let word = |k: usize| u32::from_be_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4-byte slice"));
    let found = word(0);
    if found != magic {
        return Err(Error::Format(format!("magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    Ok((1..=dims).map(|k| word(k) as usize).collect())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let d = header(bytes, IMAGE_MAGIC, 3)?;
    let (count, rows, cols) = (d[0], d[1], d[2]);
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Length { expected, found: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..expected].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let count = header(bytes, LABEL_MAGIC, 1)?[0];
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Length { expected, found: bytes.len() });
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

pub fn encode_idx_images(images: &IdxImages) -> Result<Vec<u8>> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Length { expected: images.count * images.rows * images.cols, found: images.pixels.len() });
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for w in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    std::fs::write(path, encode_idx_images(images)?)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_idx_labels(labels))?;
    Ok(())
}

/// Loads an image/label file pair with pixels scaled to [0, 1].
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!("{} images but {} labels", images.count, labels.len())));
    }
    let inputs = Array2::from_shape_vec(
        (images.count, images.rows * images.cols),
        images.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    LabeledDataset::new(inputs, labels.iter().map(|&l| l as usize).collect(), n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> (IdxImages, Vec<u8>) {
        let pixels: Vec<u8> = (0..3 * 28 * 28).map(|k| (k * 37 % 256) as u8).collect();
        (IdxImages { count: 3, rows: 28, cols: 28, pixels }, vec![7, 0, 9])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (images, labels) = synthetic();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&ip, &images).unwrap();
        write_idx_labels(&lp, &labels).unwrap();
        assert_eq!(read_idx_images(&ip).unwrap(), images);
        assert_eq!(read_idx_labels(&lp).unwrap(), labels);
        let raw = std::fs::read(&ip).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(encode_idx_images(&read_idx_images(&ip).unwrap()).unwrap(), raw);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.inputs[[0, 1]], 37.0 / 255.0);
    }

    #[test]
    fn bad_magic_truncation_and_mismatch() {
        let (images, labels) = synthetic();
        let mut raw = encode_idx_images(&images).unwrap();
        assert!(matches!(parse_idx_images(&raw[..100]), Err(Error::Length { .. })));
        raw[2] = 0;
        raw[3] = 0;
        assert!(matches!(parse_idx_images(&raw), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8, 1, 0, 0]), Err(Error::Length { .. })));
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&ip, &images).unwrap();
        write_idx_labels(&lp, &labels[..2]).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Consistency(_))));
    }
}
