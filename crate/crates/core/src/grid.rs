//! Dense-grid primitives: images, flow fields, sampling, warping, and
//! resolution changes.
//!
//! Coordinate convention: x grows rightward, y downward, pixel centers at
//! integer coordinates, flow measured in destination-frame pixels.

use thiserror::Error;

use crate::masks::Segmentation;

/// Errors from grid operations.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid image data: {0}")]
    InvalidData(String),
    #[error("downsample factor must be nonzero")]
    ZeroFactor,
}

/// A real-valued image with 1 or 3 channels, intensities in [0, 1].
///
/// Data is row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, validating dimensions and the [0, 1] value range.
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if channels != 1 && channels != 3 {
            return Err(GridError::InvalidData(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(GridError::InvalidData(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if !data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(GridError::InvalidData(
                "values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("constant in [0, 1]")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value of channel `c` at integer pixel (x, y).
    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-averaged grayscale copy; identity for single-channel images.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(self.channels) {
            data.push(px.iter().sum::<f64>() / self.channels as f64);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Bilinear resize to `new_width` x `new_height`.
    ///
    /// Output pixel centers map linearly onto the source domain so that the
    /// image corners stay fixed.
    pub fn resize(&self, new_width: usize, new_height: usize) -> Image {
        assert!(new_width > 0 && new_height > 0, "resize to empty image");
        let sx = if new_width > 1 {
            (self.width - 1) as f64 / (new_width - 1) as f64
        } else {
            0.0
        };
        let sy = if new_height > 1 {
            (self.height - 1) as f64 / (new_height - 1) as f64
        } else {
            0.0
        };
        let mut data = Vec::with_capacity(new_width * new_height * self.channels);
        for y in 0..new_height {
            for x in 0..new_width {
                let pt = Grid2::new(x as f64 * sx, y as f64 * sy);
                for c in 0..self.channels {
                    data.push(sample_channel(self, c, pt.x, pt.y));
                }
            }
        }
        Image {
            width: new_width,
            height: new_height,
            channels: self.channels,
            data,
        }
    }
}

/// A dense per-pixel 2-vector displacement field, with an optional per-pixel
/// validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    valid: Option<Vec<bool>>,
}

impl FlowField {
    /// Builds a flow field, validating finiteness and buffer lengths.
    pub fn new(
        width: usize,
        height: usize,
        u: Vec<f64>,
        v: Vec<f64>,
        valid: Option<Vec<bool>>,
    ) -> Result<Self, GridError> {
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(GridError::InvalidData(format!(
                "component length {}/{} != {}",
                u.len(),
                v.len(),
                n
            )));
        }
        if let Some(m) = &valid {
            if m.len() != n {
                return Err(GridError::InvalidData("valid mask length mismatch".into()));
            }
        }
        if !u.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(GridError::InvalidData(
                "flow components must be finite".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            u,
            v,
            valid,
        })
    }

    /// All-zero flow without a validity mask.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            valid: None,
        }
    }

    /// Constant flow (u, v) everywhere.
    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self::new(
            width,
            height,
            vec![u; width * height],
            vec![v; width * height],
            None,
        )
        .expect("finite constant")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn valid(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn set_valid(&mut self, valid: Option<Vec<bool>>) {
        if let Some(m) = &valid {
            assert_eq!(m.len(), self.width * self.height);
        }
        self.valid = valid;
    }

    /// True at pixel index `i` unless a validity mask says otherwise.
    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid.as_ref().is_none_or(|m| m[i])
    }

    /// Bilinear resize with displacement components rescaled by the size
    /// ratio, so vectors keep pointing at corresponding content.
    pub fn resize(&self, new_width: usize, new_height: usize) -> FlowField {
        assert!(new_width > 0 && new_height > 0, "resize to empty field");
        let sx = if new_width > 1 {
            (self.width - 1) as f64 / (new_width - 1) as f64
        } else {
            0.0
        };
        let sy = if new_height > 1 {
            (self.height - 1) as f64 / (new_height - 1) as f64
        } else {
            0.0
        };
        let scale_u = new_width as f64 / self.width as f64;
        let scale_v = new_height as f64 / self.height as f64;
        let img_u = Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.u.clone(),
        };
        let img_v = Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.v.clone(),
        };
        let mut u = Vec::with_capacity(new_width * new_height);
        let mut v = Vec::with_capacity(new_width * new_height);
        let mut valid = self
            .valid
            .as_ref()
            .map(|_| Vec::with_capacity(new_width * new_height));
        for y in 0..new_height {
            for x in 0..new_width {
                let (px, py) = (x as f64 * sx, y as f64 * sy);
                u.push(sample_channel(&img_u, 0, px, py) * scale_u);
                v.push(sample_channel(&img_v, 0, px, py) * scale_v);
                if let (Some(valid), Some(m)) = (valid.as_mut(), self.valid.as_ref()) {
                    valid.push(m[py.round() as usize * self.width + px.round() as usize]);
                }
            }
        }
        FlowField {
            width: new_width,
            height: new_height,
            u,
            v,
            valid,
        }
    }
}

/// A real-valued sample coordinate in pixel units, origin at the center of
/// pixel (0, 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2 {
    pub x: f64,
    pub y: f64,
}

impl Grid2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

// Bilinear lookup of one channel with border clamping. Exact at integer
// coordinates: the fractional weights vanish so only the base pixel
// contributes.
#[inline]
fn sample_channel(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let v00 = img.at(x0, y0, c);
    if fx == 0.0 && fy == 0.0 {
        return v00;
    }
    let v10 = img.at(x1, y0, c);
    let v01 = img.at(x0, y1, c);
    let v11 = img.at(x1, y1, c);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

#[inline]
fn is_out_of_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x < 0.0 || y < 0.0 || x > (width - 1) as f64 || y > (height - 1) as f64
}

/// Bilinear interpolation of the 4 neighbors of `pt`, per channel.
///
/// Coordinates outside [0, W-1] x [0, H-1] clamp to the border; the returned
/// flag is true in that case.
pub fn bilinear_sample(img: &Image, pt: Grid2) -> (Vec<f64>, bool) {
    let oob = is_out_of_bounds(pt.x, pt.y, img.width, img.height);
    let values = (0..img.channels)
        .map(|c| sample_channel(img, c, pt.x, pt.y))
        .collect();
    (values, oob)
}

/// Warps `src` by looking up `src` at p + flow(p) for every output pixel p.
///
/// The out-of-bounds mask is true where p + flow(p) leaves the frame; those
/// samples are border-clamped rather than zero-filled so downstream losses
/// can exclude them explicitly.
pub fn backward_warp(src: &Image, flow: &FlowField) -> Result<(Image, Vec<bool>), GridError> {
    if src.width != flow.width || src.height != flow.height {
        return Err(GridError::DimensionMismatch(
            src.width,
            src.height,
            flow.width,
            flow.height,
        ));
    }
    let (w, h, c) = (src.width, src.height, src.channels);
    let mut data = Vec::with_capacity(w * h * c);
    let mut oob = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow.u[i];
            let sy = y as f64 + flow.v[i];
            oob[i] = is_out_of_bounds(sx, sy, w, h);
            for ch in 0..c {
                data.push(sample_channel(src, ch, sx, sy));
            }
        }
    }
    Ok((
        Image {
            width: w,
            height: h,
            channels: c,
            data,
        },
        oob,
    ))
}

/// Warps a flow field by another flow field: output(p) = src(p + flow(p)),
/// bilinearly interpolated per component.
pub fn backward_warp_flow(
    src: &FlowField,
    flow: &FlowField,
) -> Result<(FlowField, Vec<bool>), GridError> {
    if src.width != flow.width || src.height != flow.height {
        return Err(GridError::DimensionMismatch(
            src.width,
            src.height,
            flow.width,
            flow.height,
        ));
    }
    let (w, h) = (src.width, src.height);
    // Reuse the image sampler on each component.
    let img_u = Image {
        width: w,
        height: h,
        channels: 1,
        data: src.u.clone(),
    };
    let img_v = Image {
        width: w,
        height: h,
        channels: 1,
        data: src.v.clone(),
    };
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    let mut oob = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow.u[i];
            let sy = y as f64 + flow.v[i];
            oob[i] = is_out_of_bounds(sx, sy, w, h);
            u.push(sample_channel(&img_u, 0, sx, sy));
            v.push(sample_channel(&img_v, 0, sx, sy));
        }
    }
    Ok((
        FlowField {
            width: w,
            height: h,
            u,
            v,
            valid: None,
        },
        oob,
    ))
}

/// Nearest-neighbor subsampling of a segmentation: output pixel (i, j) takes
/// the ID of input pixel (i * factor, j * factor).
///
/// Output IDs are a subset of the input IDs; the segment table is carried
/// over unchanged, so IDs keep their meaning at the smaller resolution.
pub fn downsample_segmentation(
    seg: &Segmentation,
    factor: usize,
) -> Result<Segmentation, GridError> {
    if factor == 0 {
        return Err(GridError::ZeroFactor);
    }
    if factor == 1 {
        return Ok(seg.clone());
    }
    let new_w = seg.width().div_ceil(factor);
    let new_h = seg.height().div_ceil(factor);
    let mut ids = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        for x in 0..new_w {
            ids.push(seg.id_at(x * factor, y * factor));
        }
    }
    Ok(seg.with_ids(new_w, new_h, ids))
}
