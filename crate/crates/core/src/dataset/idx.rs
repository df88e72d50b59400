//! Reader for the big-endian IDX archives of the standard digit dataset.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const RAW_SIDE: usize = 28;

/// Source digit images (`[1, rows, cols]`, values in [0, 1]) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDigits {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl RawDigits {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of every image with label `digit`, in file order.
    pub fn indices_of(&self, digit: u8) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == digit)
            .collect()
    }

    pub fn read_files(images: &Path, labels: &Path) -> Result<Self> {
        let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
        let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
        parse_idx(&img, &lab)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let expected = self.pos + len;
        if self.bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: self.bytes.len(),
            });
        }
        Ok(&self.bytes[self.pos..expected])
    }
}

fn expect_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an image file (magic `0x00000803`) and a label file (magic
/// `0x00000801`). Pixel bytes are mapped to [0, 1].
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawDigits> {
    let mut img = Reader {
        bytes: image_bytes,
        pos: 0,
    };
    expect_magic(img.u32()?, IMAGE_MAGIC)?;
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.payload(count * rows * cols)?;

    let mut lab = Reader {
        bytes: label_bytes,
        pos: 0,
    };
    expect_magic(lab.u32()?, LABEL_MAGIC)?;
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Dataset(format!(
            "image file holds {count} images but label file holds {label_count} labels"
        )));
    }
    let labels = lab.payload(count)?.to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Dataset(format!("label {bad} outside 0-9")));
    }

    let side = rows * cols;
    let images = pixels
        .chunks_exact(side.max(1))
        .take(count)
        .map(|chunk| {
            Tensor::new(
                vec![1, rows, cols],
                chunk.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawDigits { images, labels })
}
