//! Reader for the IDX format used by the MNIST distribution.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for rank-3 unsigned-byte
//! image sets, `0x00000801` for rank-1 label sets), one big-endian `u32` per
//! dimension, then the unsigned-byte payload in row-major order.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images with pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<f64>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.count, self.rows, self.cols)
    }

    /// Image `i` as a `rows × cols` matrix.
    pub fn image(&self, i: usize) -> Tensor {
        let size = self.rows * self.cols;
        Tensor::from_vec(self.rows, self.cols, self.pixels[i * size..(i + 1) * size].to_vec())
            .expect("sized")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.offset + 4;
        let chunk = self.bytes.get(self.offset..end).ok_or_else(|| Error::Format {
            offset: self.offset as u64,
            detail: format!("truncated header: missing {what}"),
        })?;
        self.offset = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32("magic number")?;
        if magic != expected {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                detail: format!("truncated payload: expected {len} bytes, found {available}"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader { bytes, offset: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r
        .payload(count * rows * cols)?
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, offset: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    Ok(r.payload(count)?.to_vec())
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes)
}

/// Encodes raw unsigned-byte images as an IDX image file.
pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        debug_assert_eq!(img.len(), rows * cols);
        out.extend_from_slice(img);
    }
    out
}
