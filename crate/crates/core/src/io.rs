//! On-disk formats: NGV case records and binary PGM previews.
//!
//! An NGV file is
//!
//! ```text
//! "NGV1" | u32 LE header length | UTF-8 JSON header | payload
//! ```
//!
//! The payload holds one little-endian `f32` tensor per entry of the
//! header's `tensors` list, in order. Case records carry two tensors,
//! `image` and `labels`; label ids are stored as floats like every other
//! tensor.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CaseRecord, Class, DomainTag, Grid2D, GridError, LabelMap, Spacing};

pub const NGV_MAGIC: &[u8; 4] = b"NGV1";
const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Error)]
pub enum NgvError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an NGV file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor shapes disagree: image {image:?}, labels {labels:?}")]
    ShapeMismatch {
        image: [usize; 2],
        labels: [usize; 2],
    },
    #[error("payload length {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("invalid record: {0}")]
    Validation(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    /// `[height, width]`
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgvHeader {
    pub version: u32,
    pub dtype: String,
    pub spacing: [f64; 2],
    pub subject_id: String,
    pub domain_tag: DomainTag,
    pub label_palette: BTreeMap<u8, String>,
    pub tensors: Vec<TensorHeader>,
}

fn palette() -> BTreeMap<u8, String> {
    Class::ALL
        .iter()
        .map(|c| (c.id(), c.name().to_string()))
        .collect()
}

pub fn encode_ngv(record: &CaseRecord) -> Vec<u8> {
    let (w, h) = record.image.shape();
    let sp = record.image.spacing();
    let header = NgvHeader {
        version: 1,
        dtype: DTYPE_F32LE.into(),
        spacing: [sp.sx, sp.sy],
        subject_id: record.subject_id.clone(),
        domain_tag: record.domain_tag,
        label_palette: palette(),
        tensors: vec![
            TensorHeader {
                name: "image".into(),
                shape: [h, w],
            },
            TensorHeader {
                name: "labels".into(),
                shape: [h, w],
            },
        ],
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * w * h);
    out.extend_from_slice(NGV_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in record.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in record.labels.data() {
        out.extend_from_slice(&(l as f32).to_le_bytes());
    }
    out
}

/// Parse an NGV byte buffer. Never panics on malformed input.
pub fn decode_ngv(bytes: &[u8]) -> Result<CaseRecord, NgvError> {
    if bytes.len() < 8 || &bytes[..4] != NGV_MAGIC {
        return Err(NgvError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if hlen > body.len() {
        return Err(NgvError::Header(format!(
            "header length {hlen} exceeds file size"
        )));
    }
    let header: NgvHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| NgvError::Header(e.to_string()))?;
    if header.version != 1 {
        return Err(NgvError::Header(format!("unsupported version {}", header.version)));
    }
    if header.dtype != DTYPE_F32LE {
        return Err(NgvError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let [image_t, label_t] = match header.tensors.as_slice() {
        [a, b] if a.name == "image" && b.name == "labels" => [a, b],
        _ => {
            return Err(NgvError::Header(
                "expected tensors [image, labels]".into(),
            ))
        }
    };
    if image_t.shape != label_t.shape {
        return Err(NgvError::ShapeMismatch {
            image: image_t.shape,
            labels: label_t.shape,
        });
    }
    let spacing = Spacing::new(header.spacing[0], header.spacing[1])?;
    let [h, w] = image_t.shape;
    let count = h
        .checked_mul(w)
        .filter(|&c| c > 0)
        .ok_or(GridError::EmptyShape {
            width: w,
            height: h,
        })?;
    let payload = &body[hlen..];
    let expected = count
        .checked_mul(8)
        .ok_or_else(|| NgvError::Header("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(NgvError::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (img, lab) = floats.split_at(count);
    let mut labels = Vec::with_capacity(count);
    for (index, &v) in lab.iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(GridError::BadLabel { index, value: 255 }.into());
        }
        labels.push(v as u8);
    }
    let image = Grid2D::from_vec(w, h, spacing, img.to_vec())?;
    let labels = LabelMap::from_vec(w, h, spacing, labels)?;
    Ok(CaseRecord::new(
        image,
        labels,
        header.subject_id,
        header.domain_tag,
    )?)
}

pub fn save_ngv(record: &CaseRecord, path: &Path) -> Result<(), NgvError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_ngv(record))?;
    Ok(())
}

pub fn load_ngv(path: &Path) -> Result<CaseRecord, NgvError> {
    decode_ngv(&std::fs::read(path)?)
}

/// Binary PGM (P5) bytes after min–max scaling to `[0, 255]`. A constant
/// grid maps to all zeros.
pub fn encode_pgm(img: &Grid2D) -> Vec<u8> {
    let (w, h) = img.shape();
    let (lo, hi) = img.min_max();
    let (lo, hi) = (lo as f64, hi as f64);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| {
        if hi > lo {
            ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn export_pgm(img: &Grid2D, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, encode_pgm(img))
}

/// Tile equally sized grids into one image, `cols` per row, with a one
/// pixel gap. Each tile is min–max scaled on its own so the mosaic is
/// comparable tile by tile.
pub fn mosaic(tiles: &[Grid2D], cols: usize) -> Option<Grid2D> {
    let first = tiles.first()?;
    let (w, h) = first.shape();
    if tiles.iter().any(|t| t.shape() != (w, h)) || cols == 0 {
        return None;
    }
    let rows = tiles.len().div_ceil(cols);
    let (mw, mh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut data = vec![0.0f32; mw * mh];
    for (k, t) in tiles.iter().enumerate() {
        let (ox, oy) = ((k % cols) * (w + 1), (k / cols) * (h + 1));
        let (lo, hi) = t.min_max();
        for y in 0..h {
            for x in 0..w {
                let v = t.get(x, y);
                data[(oy + y) * mw + ox + x] = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            }
        }
    }
    Grid2D::from_vec(mw, mh, first.spacing(), data).ok()
}
