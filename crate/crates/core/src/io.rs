//! Bit-exact readers and writers for flow fields, images, RLE mask files,
//! and analysis reports.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FlowField, Image};
use crate::masks::{grid_stats, RawMaskSet};

/// Sentinel float at the head of a Middlebury flow file ("PIEH").
const FLO_SENTINEL: f32 = 202021.25;
/// KITTI flow PNG stores (value - 2^15) / 64 per component.
const KITTI_OFFSET: f64 = 32768.0;
const KITTI_SCALE: f64 = 64.0;

/// Errors from file I/O and format validation.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad format: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: truncated: expected {expected} bytes of payload, got {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{path}: inconsistent record {index}: {reason}")]
    Consistency {
        path: String,
        index: usize,
        reason: String,
    },
    #[error("report contains non-finite value for '{0}'")]
    NonFinite(String),
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads a Middlebury `.flo` file: sentinel, little-endian i32 width and
/// height, then row-major interleaved float32 (u, v).
pub fn read_flo(path: &Path) -> Result<FlowField, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(path, "shorter than the 12-byte header"));
    }
    let sentinel = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sentinel != FLO_SENTINEL {
        return Err(format_err(path, format!("bad sentinel {sentinel}")));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(format_err(path, format!("bad dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = w * h * 8;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(IoError::Truncated {
            path: path.display().to_string(),
            expected,
            got: payload.len(),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[0..4].try_into().unwrap()) as f64);
        v.push(f32::from_le_bytes(pair[4..8].try_into().unwrap()) as f64);
    }
    FlowField::new(w, h, u, v, None).map_err(|e| format_err(path, e.to_string()))
}

/// Writes a Middlebury `.flo` file. Round-trips bit-exactly for fields whose
/// components are f32 values.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut buf = Vec::with_capacity(12 + flow.width() * flow.height() * 8);
    buf.extend_from_slice(&FLO_SENTINEL.to_le_bytes());
    buf.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&(*u as f32).to_le_bytes());
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads a KITTI 16-bit 3-channel flow PNG: u = (ch1 - 2^15) / 64,
/// v = (ch2 - 2^15) / 64, valid where ch3 > 0.
pub fn read_kitti_flow_png(path: &Path) -> Result<FlowField, IoError> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb16(buf) => buf,
        other => {
            return Err(format_err(
                path,
                format!("expected 16-bit RGB, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for px in rgb.pixels() {
        u.push((px.0[0] as f64 - KITTI_OFFSET) / KITTI_SCALE);
        v.push((px.0[1] as f64 - KITTI_OFFSET) / KITTI_SCALE);
        valid.push(px.0[2] > 0);
    }
    FlowField::new(w, h, u, v, Some(valid)).map_err(|e| format_err(path, e.to_string()))
}

/// Writes a KITTI 16-bit flow PNG; components clamp to the representable
/// range and quantize to 1/64 px.
pub fn write_kitti_flow_png(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    let (w, h) = (flow.width(), flow.height());
    let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let q = |x: f64| (x * KITTI_SCALE + KITTI_OFFSET).round().clamp(0.0, 65535.0) as u16;
        let valid = flow.is_valid(i);
        px.0 = [q(flow.u()[i]), q(flow.v()[i]), valid as u16];
    }
    buf.save(path).map_err(|e| format_err(path, e.to_string()))
}

/// One serialized mask record: column-major uncompressed run-length counts
/// starting with the run of zeros, plus redundant area and bbox fields that
/// are verified on read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskFileRecord {
    /// [height, width]
    pub size: [usize; 2],
    pub counts: Vec<usize>,
    pub area: usize,
    /// [x, y, w, h]
    pub bbox: [usize; 4],
}

/// Decodes column-major RLE counts into a row-major boolean grid.
pub fn decode_rle(counts: &[usize], height: usize, width: usize) -> Option<Vec<bool>> {
    if counts.iter().sum::<usize>() != height * width {
        return None;
    }
    let mut grid = vec![false; height * width];
    let mut pos = 0usize;
    let mut value = false;
    for &run in counts {
        for _ in 0..run {
            if value {
                let (col, row) = (pos / height, pos % height);
                grid[row * width + col] = true;
            }
            pos += 1;
        }
        value = !value;
    }
    Some(grid)
}

/// Encodes a row-major boolean grid as canonical column-major RLE counts
/// (first count is the leading-zero run and may be 0; no interior zero runs).
pub fn encode_rle(grid: &[bool], height: usize, width: usize) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut value = false;
    let mut run = 0usize;
    for col in 0..width {
        for row in 0..height {
            let bit = grid[row * width + col];
            if bit == value {
                run += 1;
            } else {
                counts.push(run);
                value = bit;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

/// Reads a JSON list of [`MaskFileRecord`] into a verified [`RawMaskSet`].
///
/// Every record is decoded and its area and bbox recomputed; mismatches and
/// empty masks are rejected.
pub fn read_masks(path: &Path) -> Result<RawMaskSet, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let records: Vec<MaskFileRecord> =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    records_to_mask_set(path, &records)
}

fn records_to_mask_set(path: &Path, records: &[MaskFileRecord]) -> Result<RawMaskSet, IoError> {
    let consistency = |index: usize, reason: String| IoError::Consistency {
        path: path.display().to_string(),
        index,
        reason,
    };
    if records.is_empty() {
        return RawMaskSet::from_grids(0, 0, vec![]).map_err(|e| format_err(path, e.to_string()));
    }
    let [height, width] = records[0].size;
    let mut grids = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        if rec.size != [height, width] {
            return Err(consistency(
                index,
                format!("size {:?} differs from first record", rec.size),
            ));
        }
        let grid = decode_rle(&rec.counts, height, width)
            .ok_or_else(|| format_err(path, format!("record {index}: counts do not sum to H*W")))?;
        let (area, bbox) = grid_stats(&grid, width, height)
            .ok_or_else(|| consistency(index, "decoded mask is empty".into()))?;
        if area != rec.area {
            return Err(consistency(
                index,
                format!("stored area {} != decoded {}", rec.area, area),
            ));
        }
        if [bbox.x, bbox.y, bbox.w, bbox.h] != rec.bbox {
            return Err(consistency(
                index,
                format!(
                    "stored bbox {:?} != decoded {:?}",
                    rec.bbox,
                    [bbox.x, bbox.y, bbox.w, bbox.h]
                ),
            ));
        }
        grids.push(grid);
    }
    RawMaskSet::from_grids(width, height, grids).map_err(|e| format_err(path, e.to_string()))
}

/// Serializes a mask set to a JSON list of [`MaskFileRecord`].
pub fn write_masks(path: &Path, set: &RawMaskSet) -> Result<(), IoError> {
    let records: Vec<MaskFileRecord> = set
        .masks()
        .iter()
        .map(|m| MaskFileRecord {
            size: [set.height(), set.width()],
            counts: encode_rle(m.grid(), set.height(), set.width()),
            area: m.area(),
            bbox: [m.bbox().x, m.bbox().y, m.bbox().w, m.bbox().h],
        })
        .collect();
    let json = serde_json::to_string(&records).map_err(|e| format_err(path, e.to_string()))?;
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

/// Formats a float with 9 significant digits, decimal where readable and
/// scientific otherwise. Deterministic for identical inputs.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exponent) = sci.split_once('e').expect("exponent in {:e} format");
    let exp: i32 = exponent.parse().expect("numeric exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{mantissa}e{exp}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let fixed = format!("{v:.decimals$}");
    if fixed.contains('.') {
        fixed
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        fixed
    }
}

/// Writes named scalars as a two-column CSV (`name,value`) in the given
/// order. An empty list produces a header-only file.
pub fn write_report_csv(path: &Path, fields: &[(&str, f64)]) -> Result<(), IoError> {
    let mut text = String::from("name,value\n");
    for (name, value) in fields {
        if !value.is_finite() {
            return Err(IoError::NonFinite(name.to_string()));
        }
        text.push_str(name);
        text.push(',');
        text.push_str(&format_sig9(*value));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes named scalars as a JSON object with the same keys and ordering as
/// the CSV form.
pub fn write_report_json(path: &Path, fields: &[(&str, f64)]) -> Result<(), IoError> {
    let mut text = String::from("{");
    for (i, (name, value)) in fields.iter().enumerate() {
        if !value.is_finite() {
            return Err(IoError::NonFinite(name.to_string()));
        }
        if i > 0 {
            text.push(',');
        }
        text.push_str(&format!("\"{name}\":{}", format_sig9(*value)));
    }
    text.push_str("}\n");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Reads an 8- or 16-bit PNG (gray or RGB) into a [0, 1]-normalized image.
pub fn read_image_png(path: &Path) -> Result<Image, IoError> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        image::DynamicImage::ImageLuma8(b) => {
            (1, b.into_raw().iter().map(|&x| x as f64 / 255.0).collect())
        }
        image::DynamicImage::ImageLuma16(b) => (
            1,
            b.into_raw().iter().map(|&x| x as f64 / 65535.0).collect(),
        ),
        image::DynamicImage::ImageRgb8(b) => {
            (3, b.into_raw().iter().map(|&x| x as f64 / 255.0).collect())
        }
        image::DynamicImage::ImageRgb16(b) => (
            3,
            b.into_raw().iter().map(|&x| x as f64 / 65535.0).collect(),
        ),
        other => {
            let b = other.into_rgb8();
            (3, b.into_raw().iter().map(|&x| x as f64 / 255.0).collect())
        }
    };
    Image::new(w, h, channels, data).map_err(|e| format_err(path, e.to_string()))
}

/// Writes an image as an 8-bit PNG (gray or RGB by channel count).
pub fn write_image_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let quantize = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let bytes: Vec<u8> = img.data().iter().copied().map(quantize).collect();
    let result = if img.channels() == 1 {
        image::GrayImage::from_raw(w, h, bytes)
            .expect("sized buffer")
            .save(path)
    } else {
        image::RgbImage::from_raw(w, h, bytes)
            .expect("sized buffer")
            .save(path)
    };
    result.map_err(|e| format_err(path, e.to_string()))
}

/// Writes a boolean mask as an 8-bit PNG with values 0/255.
pub fn write_bool_png(
    path: &Path,
    mask: &[bool],
    width: usize,
    height: usize,
) -> Result<(), IoError> {
    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| format_err(path, "mask length disagrees with dimensions"))?
        .save(path)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Reads an 8-bit gray PNG as a boolean mask (nonzero = true).
pub fn read_bool_png(path: &Path) -> Result<(Vec<bool>, usize, usize), IoError> {
    let img = image::open(path)
        .map_err(|e| format_err(path, e.to_string()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().iter().map(|&x| x > 0).collect(), w, h))
}

/// Writes segment IDs as a 16-bit gray PNG.
pub fn write_id_png(path: &Path, ids: &[u32], width: usize, height: usize) -> Result<(), IoError> {
    let mut data = Vec::with_capacity(ids.len());
    for &id in ids {
        if id > u16::MAX as u32 {
            return Err(format_err(
                path,
                format!("segment ID {id} exceeds 16-bit range"),
            ));
        }
        data.push(id as u16);
    }
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| format_err(path, "ID buffer disagrees with dimensions"))?
        .save(path)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Reads a 16-bit gray PNG of segment IDs.
pub fn read_id_png(path: &Path) -> Result<(Vec<u32>, usize, usize), IoError> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma16(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            Ok((b.into_raw().iter().map(|&x| x as u32).collect(), w, h))
        }
        other => Err(format_err(
            path,
            format!("expected 16-bit gray, got {:?}", other.color()),
        )),
    }
}
