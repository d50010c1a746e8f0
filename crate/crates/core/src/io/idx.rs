//! IDX (MNIST-style) image and label files.
//!
//! Images: magic `0x00000803`, then three big-endian u32 dims `n, rows,
//! cols`, then `n * rows * cols` unsigned bytes. Labels: magic `0x00000801`,
//! one u32 count, then one byte per label.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images as `(count, rows, cols, pixels in [0, 1])`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return Err(Error::format(
            path,
            format!("expected {need} pixel bytes for {n}x{rows}x{cols}, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads a single-channel square image set.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(&read_file(images)?, images)?;
    if rows != cols {
        return Err(Error::format(images, format!("images must be square, got {rows}x{cols}")));
    }
    let ys = parse_labels(&read_file(labels)?, labels)?;
    if ys.len() != n {
        return Err(Error::format(
            labels,
            format!("{} labels for {n} images in {}", ys.len(), images.display()),
        ));
    }
    if let Some(bad) = ys.iter().find(|&&y| y >= num_classes) {
        return Err(Error::format(labels, format!("label {bad} outside {num_classes} classes")));
    }
    Dataset::new(pixels, ys, 1, rows, num_classes)
}

/// Encodes an image set in IDX form; `pixels` are raw bytes.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels: Vec<u8> = (0..10 * 28 * 28).map(|i| (i % 251) as u8).collect();
        pixels[0] = 0xFF;
        let labels: Vec<u8> = (0..10).collect();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        std::fs::write(&ip, encode_images(10, 28, 28, &pixels)).unwrap();
        std::fs::write(&lp, encode_labels(&labels)).unwrap();
        let ds = load_idx(&ip, &lp, 10).unwrap();
        assert_eq!((ds.len(), ds.channels, ds.size, ds.size), (10, 1, 28, 28));
        assert_eq!(ds.images[0], 1.0);
        assert_eq!(ds.labels[9], 9);
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("weird.idx");
        let lp = dir.path().join("lab.idx");
        let mut bytes = encode_images(1, 2, 2, &[0; 4]);
        bytes[3] = 0x01;
        std::fs::write(&ip, &bytes).unwrap();
        std::fs::write(&lp, encode_labels(&[0])).unwrap();
        let err = load_idx(&ip, &lp, 2).unwrap_err().to_string();
        assert!(err.contains("weird.idx") && err.contains("magic"), "{err}");

        std::fs::write(&ip, encode_images(2, 2, 2, &[0; 7])).unwrap();
        assert!(load_idx(&ip, &lp, 2).unwrap_err().to_string().contains("weird.idx"));

        std::fs::write(&ip, encode_images(2, 2, 2, &[0; 8])).unwrap();
        let err = load_idx(&ip, &lp, 2).unwrap_err().to_string();
        assert!(err.contains("lab.idx"), "{err}");
    }
}
