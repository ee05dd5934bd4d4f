//! MNIST IDX reader (big-endian headers, `u8` payloads).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images scaled to `[0, 1]`, stored image after image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }

    /// Appends another set of the same image size.
    pub fn extend(&mut self, other: RawImages) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                "RawImages::extend",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let slice = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: (at + 4) as u64,
        available: bytes.len() as u64,
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("four bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: (offset + len) as u64,
            available: bytes.len() as u64,
        })
}

/// Reads an `idx3-ubyte` image file and its `idx1-ubyte` label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawImages> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let image_bytes = fs::read(images_path)?;
    check_magic(&image_bytes, IMAGES_MAGIC, images_path)?;
    let n_images = read_u32(&image_bytes, 4, images_path)? as usize;
    let rows = read_u32(&image_bytes, 8, images_path)? as usize;
    let cols = read_u32(&image_bytes, 12, images_path)? as usize;

    let label_bytes = fs::read(labels_path)?;
    check_magic(&label_bytes, LABELS_MAGIC, labels_path)?;
    let n_labels = read_u32(&label_bytes, 4, labels_path)? as usize;

    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let pixels = payload(&image_bytes, 16, n_images * rows * cols, images_path)?
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels = payload(&label_bytes, 8, n_labels, labels_path)?.to_vec();
    Ok(RawImages {
        rows,
        cols,
        pixels,
        labels,
    })
}
