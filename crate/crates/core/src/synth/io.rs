//! Mask PNG, depth PFM and manifest files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ConditionImages, Mask};
use crate::error::{from_json_str, Error, Result};

/// Background depth is written as this value, since PFM has no infinity convention.
pub const PFM_INF_SENTINEL: f32 = 3.4e38;

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// 8-bit grayscale, 255 for foreground and 0 elsewhere.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_fn(mask.width, mask.height, |x, y| {
        Luma([if mask.get(x, y) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Any nonzero gray level (or any nonzero channel) counts as foreground.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    Ok(Mask {
        width: img.width(),
        height: img.height(),
        data: img.pixels().map(|p| p.0[0] > 0).collect(),
    })
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_rgb8())
}

pub fn write_rgb_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    img.save(path).map_err(|e| image_err(path, e))
}

/// Single-channel little-endian PFM; rows are stored bottom to top.
pub fn write_depth_pfm(path: impl AsRef<Path>, images: &ConditionImages) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (images.width as usize, images.height as usize);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for d in &images.depth[y * w..(y + 1) * w] {
            let v = if d.is_finite() { *d } else { PFM_INF_SENTINEL };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<ConditionImages> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Image {
        path: path.to_path_buf(),
        message: m.into(),
    };
    // Three whitespace-terminated header tokens after the magic.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(bad("only single-channel PFM (Pf) is supported"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad PFM width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f32 = tokens[3].parse().map_err(|_| bad("bad PFM scale"))?;
    let little = scale < 0.0;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 4 {
        return Err(bad(&format!(
            "expected {} bytes of PFM data, found {}",
            w * h * 4,
            body.len()
        )));
    }
    let mut depth = vec![0.0f32; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (h - 1 - i / w, i % w);
        depth[row * w + col] = if v >= PFM_INF_SENTINEL {
            f32::INFINITY
        } else {
            v
        };
    }
    Ok(ConditionImages {
        width: w as u32,
        height: h as u32,
        depth,
    })
}

/// One manifest line: an annotation record and the dataset it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub record: String,
    pub source: String,
}

/// Reads a JSONL manifest. Blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            from_json_str(l).map_err(|e| match e {
                Error::Parse { field, message } => Error::Parse {
                    field: format!("line {}: {field}", i + 1),
                    message,
                },
                other => other,
            })
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a path stored in a manifest or record relative to the file that mentions it.
pub fn resolve(base_file: &Path, stored: &str) -> PathBuf {
    let p = Path::new(stored);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new("")).join(p)
    }
}
