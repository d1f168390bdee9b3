//! IDX files (big-endian header, raw `u8` payload), optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{L2dError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw grayscale images as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Read a file, transparently inflating it if it starts with the gzip signature.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| L2dError::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| L2dError::format(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| L2dError::format(path, format!("truncated header at byte {at}")))
}

fn check_magic(found: u32, want: u32, path: &Path) -> Result<()> {
    if found != want {
        return Err(L2dError::format(path, format!("bad magic 0x{found:08x}, expected 0x{want:08x}")));
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<RawImages> {
    check_magic(be_u32(bytes, 0, path)?, IMAGE_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != want {
        return Err(L2dError::format(
            path,
            format!("{count} images of {rows}x{cols} need {want} bytes, found {}", payload.len()),
        ));
    }
    Ok(RawImages { count, rows, cols, pixels: payload.to_vec() })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(be_u32(bytes, 0, path)?, LABEL_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(L2dError::format(path, format!("{count} labels declared, {} bytes present", payload.len())));
    }
    Ok(payload.to_vec())
}

/// Read a matching image/label file pair.
pub fn read_idx_pair(image_path: &Path, label_path: &Path) -> Result<(RawImages, Vec<u8>)> {
    let images = parse_images(&read_maybe_gzip(image_path)?, image_path)?;
    let labels = parse_labels(&read_maybe_gzip(label_path)?, label_path)?;
    if images.count != labels.len() {
        return Err(L2dError::format(
            label_path,
            format!("{} labels for {} images in {}", labels.len(), images.count, image_path.display()),
        ));
    }
    Ok((images, labels))
}

/// Uncompressed IDX image file bytes.
pub fn encode_images(images: &RawImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

/// Uncompressed IDX label file bytes.
pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
