//! IDX image and label files.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{QnnError, Result};
use crate::fixedpoint::QFormat;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(QnnError::TruncatedFile {
                path: self.path.to_string(),
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(QnnError::BadMagic {
                path: self.path.to_string(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_images(path: &str, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let (n, rows, cols) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if rows == 0 || cols == 0 {
        return Err(QnnError::CorruptHeader {
            path: path.to_string(),
            reason: format!("image dimensions {rows}x{cols}"),
        });
    }
    let total = n
        .checked_mul(rows * cols)
        .ok_or_else(|| QnnError::CorruptHeader {
            path: path.to_string(),
            reason: format!("{n} images of {rows}x{cols} overflow"),
        })?;
    let px = r.take(total)?.to_vec();
    if r.pos != bytes.len() {
        return Err(QnnError::CorruptHeader {
            path: path.to_string(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((n, rows, cols, px))
}

/// Parses an IDX1 label file.
pub fn parse_labels(path: &str, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let n = r.u32()? as usize;
    let labels = r.take(n)?.to_vec();
    if r.pos != bytes.len() {
        return Err(QnnError::CorruptHeader {
            path: path.to_string(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(labels)
}

/// Raw input value of a pixel byte: identity for formats of at least 8
/// bits, otherwise the top bits of the byte.
pub fn pixel_to_raw(byte: u8, format: QFormat) -> i64 {
    let k = format.bits();
    if k >= 8 {
        byte as i64
    } else {
        (byte >> (8 - k)) as i64
    }
}

/// Loads an image/label file pair as a dataset of `[1, rows, cols]` inputs.
pub fn load_idx(images: &Path, labels: &Path, input_format: QFormat) -> Result<Dataset> {
    if input_format.signed {
        return Err(QnnError::InvalidFormat("pixel input format must be unsigned".into()));
    }
    let ip = images.display().to_string();
    let lp = labels.display().to_string();
    let (n, rows, cols, px) = parse_images(&ip, &super::read_file(images)?)?;
    let lab = parse_labels(&lp, &super::read_file(labels)?)?;
    if n != lab.len() {
        return Err(QnnError::CountMismatch {
            images: n,
            labels: lab.len(),
        });
    }
    let classes = lab.iter().map(|l| *l as usize + 1).max().unwrap_or(0).max(10);
    Dataset::new(
        vec![1, rows, cols],
        input_format,
        px.iter().map(|b| pixel_to_raw(*b, input_format)).collect(),
        lab.iter().map(|l| *l as usize).collect(),
        classes,
    )
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len().checked_div(rows * cols).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a dataset whose raws fit in a byte as an IDX pair.
pub fn save_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (rows, cols) = match data.input_shape.as_slice() {
        [1, r, c] | [r, c] => (*r, *c),
        [n] => (1, *n),
        s => return Err(QnnError::shape(format!("cannot store shape {s:?} as IDX images"))),
    };
    let px = data
        .raw
        .iter()
        .map(|r| u8::try_from(*r).map_err(|_| QnnError::InvalidValue(*r as f64)))
        .collect::<Result<Vec<u8>>>()?;
    let lab = data
        .labels
        .iter()
        .map(|l| u8::try_from(*l).map_err(|_| QnnError::InvalidValue(*l as f64)))
        .collect::<Result<Vec<u8>>>()?;
    super::write_file(images, &encode_images(rows, cols, &px))?;
    super::write_file(labels, &encode_labels(&lab))
}
