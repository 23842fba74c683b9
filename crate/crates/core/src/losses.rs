//! Occlusion estimation, photometric loss, smoothness losses, the combined
//! training loss, and analytic gradients of every loss term with respect to
//! the flow field.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{backward_warp, backward_warp_flow, FlowField, Image};
use crate::masks::Segmentation;

/// Errors from loss computation.
#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

/// Per-pixel boolean occlusion estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    pub occluded: Vec<bool>,
}

impl OcclusionMap {
    pub fn none(width: usize, height: usize) -> Self {
        Self {
            occluded: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.occluded.iter().filter(|&&o| o).count()
    }
}

/// Default forward-backward consistency thresholds.
pub const FB_A1: f64 = 0.01;
pub const FB_A2: f64 = 0.5;

/// Forward-backward consistency occlusion check.
///
/// A pixel is occluded when its forward flow and the backward flow sampled
/// at the warp target fail to cancel: ||f + b_w||^2 > a1 (||f||^2 +
/// ||b_w||^2) + a2. Pixels whose warp target leaves the frame are occluded.
pub fn occlusion_fb(
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    a1: f64,
    a2: f64,
) -> Result<OcclusionMap, LossError> {
    if (flow_fwd.width(), flow_fwd.height()) != (flow_bwd.width(), flow_bwd.height()) {
        return Err(LossError::DimensionMismatch(
            flow_fwd.width(),
            flow_fwd.height(),
            flow_bwd.width(),
            flow_bwd.height(),
        ));
    }
    let (bwd_warped, oob) = backward_warp_flow(flow_bwd, flow_fwd).expect("dims checked");
    let n = flow_fwd.u().len();
    let mut occluded = vec![false; n];
    for i in 0..n {
        if oob[i] {
            occluded[i] = true;
            continue;
        }
        let (fu, fv) = (flow_fwd.u()[i], flow_fwd.v()[i]);
        let (bu, bv) = (bwd_warped.u()[i], bwd_warped.v()[i]);
        let sq_sum = (fu + bu).powi(2) + (fv + bv).powi(2);
        let sq_mag = fu * fu + fv * fv + bu * bu + bv * bv;
        occluded[i] = sq_sum > a1 * sq_mag + a2;
    }
    Ok(OcclusionMap { occluded })
}

/// A masked mean: `value` is 0 with `pixels` = 0 when nothing was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValue {
    pub value: f64,
    pub pixels: usize,
}

impl LossValue {
    pub fn empty() -> Self {
        Self {
            value: 0.0,
            pixels: 0,
        }
    }
}

/// Census window radius (7x7 window, 48 neighbor bits).
const CENSUS_RADIUS: usize = 3;
/// Saturation constant of the per-bit soft Hamming distance.
const CENSUS_SOFT: f64 = 0.1;

// Binary 7x7 census descriptor per interior pixel: each neighbor compared
// against the center. Comparisons survive any global additive brightness
// shift, which makes the census term exactly invariant to it.
fn census_bits(gray: &Image) -> Vec<u64> {
    let (w, h) = (gray.width(), gray.height());
    let r = CENSUS_RADIUS as isize;
    let mut bits = vec![0u64; w * h];
    for y in CENSUS_RADIUS..h - CENSUS_RADIUS {
        for x in CENSUS_RADIUS..w - CENSUS_RADIUS {
            let center = gray.at(x, y, 0);
            let mut b = 0u64;
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = (x as isize + dx) as usize;
                    let ny = (y as isize + dy) as usize;
                    if gray.at(nx, ny, 0) > center {
                        b |= 1 << k;
                    }
                    k += 1;
                }
            }
            bits[y * w + x] = b;
        }
    }
    bits
}

// Soft Hamming distance between two 48-bit census descriptors: per bit
// d^2 / (0.1 + d^2) with d in {0, 1}, summed over the window.
fn census_distance(a: u64, b: u64) -> f64 {
    let differing = (a ^ b).count_ones() as f64;
    differing * (1.0 / (CENSUS_SOFT + 1.0))
}

/// Census loss between an image and a warped image: soft Hamming distance of
/// 7x7 binary census descriptors, averaged over masked pixels. The 3-pixel
/// border is excluded. Returns a flagged zero when the mask is empty.
pub fn census_loss(i1: &Image, i2w: &Image, mask: Option<&[bool]>) -> Result<LossValue, LossError> {
    if (i1.width(), i1.height()) != (i2w.width(), i2w.height()) {
        return Err(LossError::DimensionMismatch(
            i1.width(),
            i1.height(),
            i2w.width(),
            i2w.height(),
        ));
    }
    let g1 = i1.to_gray();
    let g2 = i2w.to_gray();
    let (w, h) = (g1.width(), g1.height());
    if w <= 2 * CENSUS_RADIUS || h <= 2 * CENSUS_RADIUS {
        return Ok(LossValue::empty());
    }
    let b1 = census_bits(&g1);
    let b2 = census_bits(&g2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in CENSUS_RADIUS..h - CENSUS_RADIUS {
        for x in CENSUS_RADIUS..w - CENSUS_RADIUS {
            let i = y * w + x;
            if mask.is_none_or(|m| m[i]) {
                total += census_distance(b1[i], b2[i]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(LossValue::empty());
    }
    Ok(LossValue {
        value: total / count as f64,
        pixels: count,
    })
}

// Per-pixel SSIM over 3x3 uniform windows, channel-averaged; the 1-pixel
// border carries the nearest interior value's validity only through the
// caller's interior mask.
fn ssim_map(i1: &Image, i2: &Image) -> Vec<f64> {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (w, h, ch) = (i1.width(), i1.height(), i1.channels());
    let mut out = vec![1.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for c in 0..ch {
                let (mut m1, mut m2) = (0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        m1 += i1.at(x + dx - 1, y + dy - 1, c);
                        m2 += i2.at(x + dx - 1, y + dy - 1, c);
                    }
                }
                m1 /= 9.0;
                m2 /= 9.0;
                let (mut v1, mut v2, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let a = i1.at(x + dx - 1, y + dy - 1, c) - m1;
                        let b = i2.at(x + dx - 1, y + dy - 1, c) - m2;
                        v1 += a * a;
                        v2 += b * b;
                        cov += a * b;
                    }
                }
                v1 /= 9.0;
                v2 /= 9.0;
                cov /= 9.0;
                acc += ((2.0 * m1 * m2 + C1) * (2.0 * cov + C2))
                    / ((m1 * m1 + m2 * m2 + C1) * (v1 + v2 + C2));
            }
            out[y * w + x] = acc / ch as f64;
        }
    }
    out
}

/// Weights of the L1 / SSIM / census mixture and the occlusion thresholds.
#[derive(Debug, Clone, Copy)]
pub struct PhotometricConfig {
    pub c_l1: f64,
    pub c_ssim: f64,
    pub c_census: f64,
    pub fb_a1: f64,
    pub fb_a2: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            c_l1: 0.15,
            c_ssim: 0.85,
            c_census: 1.0,
            fb_a1: FB_A1,
            fb_a2: FB_A2,
        }
    }
}

// Out-of-bounds warped pixels carry fabricated (clamped) values, so every
// census window touching one is untrustworthy and excluded from the mean.
fn dilate_chebyshev(mask: &[bool], w: usize, h: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0
                        && ny >= 0
                        && nx < w as isize
                        && ny < h as isize
                        && mask[ny as usize * w + nx as usize]
                    {
                        out[y as usize * w + x as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn photometric_one_direction(
    i_ref: &Image,
    i_other: &Image,
    flow: &FlowField,
    occ: &OcclusionMap,
    cfg: &PhotometricConfig,
) -> LossValue {
    let (w, h) = (i_ref.width(), i_ref.height());
    let (warped, oob) = backward_warp(i_other, flow).expect("dims checked");
    let ssim = ssim_map(i_ref, &warped);
    let census_ref = census_bits(&i_ref.to_gray());
    let census_w = census_bits(&warped.to_gray());
    if w <= 2 * CENSUS_RADIUS || h <= 2 * CENSUS_RADIUS {
        return LossValue::empty();
    }
    let oob_footprint = dilate_chebyshev(&oob, w, h, CENSUS_RADIUS);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in CENSUS_RADIUS..h - CENSUS_RADIUS {
        for x in CENSUS_RADIUS..w - CENSUS_RADIUS {
            let i = y * w + x;
            if occ.occluded[i] || oob_footprint[i] {
                continue;
            }
            let mut l1 = 0.0;
            for c in 0..i_ref.channels() {
                l1 += (i_ref.at(x, y, c) - warped.at(x, y, c)).abs();
            }
            l1 /= i_ref.channels() as f64;
            let term = cfg.c_l1 * l1
                + cfg.c_ssim * (1.0 - ssim[i]) / 2.0
                + cfg.c_census * census_distance(census_ref[i], census_w[i]);
            total += term;
            count += 1;
        }
    }
    if count == 0 {
        return LossValue::empty();
    }
    LossValue {
        value: total / count as f64,
        pixels: count,
    }
}

/// Bidirectional photometric loss: occlusion-masked mean of the L1 + SSIM +
/// census mixture over both warp directions. Pixels whose census window
/// touches an out-of-bounds warp sample are excluded along with the border.
pub fn photometric_loss(
    i1: &Image,
    i2: &Image,
    flow_fwd: &FlowField,
    flow_bwd: &FlowField,
    cfg: &PhotometricConfig,
) -> Result<LossValue, LossError> {
    if (i1.width(), i1.height()) != (i2.width(), i2.height())
        || (i1.width(), i1.height()) != (flow_fwd.width(), flow_fwd.height())
    {
        return Err(LossError::DimensionMismatch(
            i1.width(),
            i1.height(),
            i2.width(),
            i2.height(),
        ));
    }
    let occ_fwd = occlusion_fb(flow_fwd, flow_bwd, cfg.fb_a1, cfg.fb_a2)?;
    let occ_bwd = occlusion_fb(flow_bwd, flow_fwd, cfg.fb_a1, cfg.fb_a2)?;
    let fwd = photometric_one_direction(i1, i2, flow_fwd, &occ_fwd, cfg);
    let bwd = photometric_one_direction(i2, i1, flow_bwd, &occ_bwd, cfg);
    Ok(LossValue {
        value: fwd.value + bwd.value,
        pixels: fwd.pixels + bwd.pixels,
    })
}

/// Per-pixel edge-aware weights in [0, 1] for the x and y smoothness terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    width: usize,
    height: usize,
    wx: Vec<f64>,
    wy: Vec<f64>,
}

impl EdgeWeights {
    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            wx: vec![1.0; width * height],
            wy: vec![1.0; width * height],
        }
    }

    /// Builds weights from explicit buffers (values must be in [0, 1]).
    pub fn from_parts(width: usize, height: usize, wx: Vec<f64>, wy: Vec<f64>) -> Self {
        assert_eq!(wx.len(), width * height);
        assert_eq!(wy.len(), width * height);
        assert!(wx.iter().chain(wy.iter()).all(|v| (0.0..=1.0).contains(v)));
        Self {
            width,
            height,
            wx,
            wy,
        }
    }

    pub fn wx(&self) -> &[f64] {
        &self.wx
    }

    pub fn wy(&self) -> &[f64] {
        &self.wy
    }
}

/// Default image-edge weight falloff.
pub const EDGE_LAMBDA: f64 = 150.0;

/// Edge-aware weights from image gradients: w = exp(-lambda * mean channel
/// absolute difference to the next pixel along the axis).
pub fn edge_weights_from_image(img: &Image, lambda: f64) -> EdgeWeights {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut wx = vec![1.0; w * h];
    let mut wy = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let mut d = 0.0;
                for c in 0..ch {
                    d += (img.at(x + 1, y, c) - img.at(x, y, c)).abs();
                }
                wx[i] = (-lambda * d / ch as f64).exp();
            }
            if y + 1 < h {
                let mut d = 0.0;
                for c in 0..ch {
                    d += (img.at(x, y + 1, c) - img.at(x, y, c)).abs();
                }
                wy[i] = (-lambda * d / ch as f64).exp();
            }
        }
    }
    EdgeWeights {
        width: w,
        height: h,
        wx,
        wy,
    }
}

/// Binary weights from segment boundaries: zero exactly where the right (x)
/// or down (y) neighbor belongs to a different segment.
pub fn edge_weights_from_segmentation(seg: &Segmentation) -> EdgeWeights {
    let (w, h) = (seg.width(), seg.height());
    let mut wx = vec![1.0; w * h];
    let mut wy = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && seg.id_at(x + 1, y) != seg.id_at(x, y) {
                wx[i] = 0.0;
            }
            if y + 1 < h && seg.id_at(x, y + 1) != seg.id_at(x, y) {
                wy[i] = 0.0;
            }
        }
    }
    EdgeWeights {
        width: w,
        height: h,
        wx,
        wy,
    }
}

/// Norm applied to the per-stencil second-difference 2-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

fn stencil_norm(norm: Norm, du: f64, dv: f64) -> f64 {
    match norm {
        Norm::L1 => du.abs() + dv.abs(),
        Norm::L2 => (du * du + dv * dv).sqrt(),
    }
}

/// Edge-weighted second-order smoothness of a flow field.
///
/// Centered second differences along x and y, each weighted and averaged
/// over the pixels where the stencil fits (x and y terms are normalized
/// separately so single-row or single-column fields stay meaningful).
pub fn smoothness_2nd(flow: &FlowField, weights: &EdgeWeights, norm: Norm) -> f64 {
    let (w, h) = (flow.width(), flow.height());
    assert_eq!((weights.width, weights.height), (w, h), "weight dims");
    let (u, v) = (flow.u(), flow.v());
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    if w >= 3 {
        for y in 0..h {
            for x in 1..w - 1 {
                let i = y * w + x;
                let du = u[i - 1] - 2.0 * u[i] + u[i + 1];
                let dv = v[i - 1] - 2.0 * v[i] + v[i + 1];
                sum_x += weights.wx[i] * stencil_norm(norm, du, dv);
            }
        }
        sum_x /= (h * (w - 2)) as f64;
    }
    if h >= 3 {
        for y in 1..h - 1 {
            for x in 0..w {
                let i = y * w + x;
                let du = u[i - w] - 2.0 * u[i] + u[i + w];
                let dv = v[i - w] - 2.0 * v[i] + v[i + w];
                sum_y += weights.wy[i] * stencil_norm(norm, du, dv);
            }
        }
        sum_y /= (w * (h - 2)) as f64;
    }
    sum_x + sum_y
}

// Subgradient convention: sign(0) = 0.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm_derivative(norm: Norm, du: f64, dv: f64) -> (f64, f64) {
    match norm {
        Norm::L1 => (sign0(du), sign0(dv)),
        Norm::L2 => {
            let n = (du * du + dv * dv).sqrt();
            if n > 0.0 {
                (du / n, dv / n)
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Analytic gradient of [`smoothness_2nd`] with respect to the flow field.
///
/// For L1 the subgradient uses sign(0) = 0. The result is returned as a
/// per-pixel 2-vector field.
pub fn grad_smoothness_2nd(flow: &FlowField, weights: &EdgeWeights, norm: Norm) -> FlowField {
    let (w, h) = (flow.width(), flow.height());
    assert_eq!((weights.width, weights.height), (w, h), "weight dims");
    let (u, v) = (flow.u(), flow.v());
    let mut gu = vec![0.0; w * h];
    let mut gv = vec![0.0; w * h];
    if w >= 3 {
        let scale = 1.0 / (h * (w - 2)) as f64;
        for y in 0..h {
            for x in 1..w - 1 {
                let i = y * w + x;
                let du = u[i - 1] - 2.0 * u[i] + u[i + 1];
                let dv = v[i - 1] - 2.0 * v[i] + v[i + 1];
                let (pu, pv) = norm_derivative(norm, du, dv);
                let (su, sv) = (weights.wx[i] * scale * pu, weights.wx[i] * scale * pv);
                gu[i - 1] += su;
                gu[i] -= 2.0 * su;
                gu[i + 1] += su;
                gv[i - 1] += sv;
                gv[i] -= 2.0 * sv;
                gv[i + 1] += sv;
            }
        }
    }
    if h >= 3 {
        let scale = 1.0 / (w * (h - 2)) as f64;
        for y in 1..h - 1 {
            for x in 0..w {
                let i = y * w + x;
                let du = u[i - w] - 2.0 * u[i] + u[i + w];
                let dv = v[i - w] - 2.0 * v[i] + v[i + w];
                let (pu, pv) = norm_derivative(norm, du, dv);
                let (su, sv) = (weights.wy[i] * scale * pu, weights.wy[i] * scale * pv);
                gu[i - w] += su;
                gu[i] -= 2.0 * su;
                gu[i + w] += su;
                gv[i - w] += sv;
                gv[i] -= 2.0 * sv;
                gv[i + w] += sv;
            }
        }
    }
    FlowField::new(w, h, gu, gv, None).expect("finite gradient")
}

/// Denominator used by the homography smoothness loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgNormalization {
    /// Average over refined-region pixels (scale-comparable across regions).
    Region,
    /// Average over all frame pixels.
    Frame,
}

fn hg_denominator(region_mask: &[bool], normalization: HgNormalization) -> (usize, f64) {
    let masked = region_mask.iter().filter(|&&m| m).count();
    let denom = match normalization {
        HgNormalization::Region => masked as f64,
        HgNormalization::Frame => region_mask.len() as f64,
    };
    (masked, denom)
}

/// Homography smoothness: L1 distance between the flow and its
/// region-refined version, averaged over refined pixels. Zero when no
/// region was refined.
pub fn homography_smoothness(
    flow: &FlowField,
    refined: &FlowField,
    region_mask: &[bool],
    normalization: HgNormalization,
) -> LossValue {
    assert_eq!(flow.u().len(), refined.u().len());
    assert_eq!(flow.u().len(), region_mask.len());
    let (masked, denom) = hg_denominator(region_mask, normalization);
    if masked == 0 {
        return LossValue::empty();
    }
    let mut total = 0.0;
    for (i, &in_region) in region_mask.iter().enumerate() {
        if in_region {
            total += (flow.u()[i] - refined.u()[i]).abs() + (flow.v()[i] - refined.v()[i]).abs();
        }
    }
    LossValue {
        value: total / denom,
        pixels: masked,
    }
}

/// Analytic gradient of [`homography_smoothness`] with the refined flow held
/// constant: sign(F - F_ref) / denominator on region pixels, zero elsewhere.
pub fn grad_homography_smoothness(
    flow: &FlowField,
    refined: &FlowField,
    region_mask: &[bool],
    normalization: HgNormalization,
) -> FlowField {
    let (w, h) = (flow.width(), flow.height());
    let (masked, denom) = hg_denominator(region_mask, normalization);
    let mut gu = vec![0.0; w * h];
    let mut gv = vec![0.0; w * h];
    if masked > 0 {
        for i in 0..region_mask.len() {
            if !region_mask[i] {
                continue;
            }
            gu[i] = sign0(flow.u()[i] - refined.u()[i]) / denom;
            gv[i] = sign0(flow.v()[i] - refined.v()[i]) / denom;
        }
    }
    FlowField::new(w, h, gu, gv, None).expect("finite gradient")
}

/// Default balancing weights of the combined loss.
pub const W_AUG: f64 = 0.1;
pub const W_HG: f64 = 0.1;

/// Named loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub ph: f64,
    pub aug: f64,
    pub hg: f64,
    pub w_aug: f64,
    pub w_hg: f64,
    pub total: f64,
}

impl LossReport {
    /// Field names and values in fixed report order.
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("ph", self.ph),
            ("aug", self.aug),
            ("hg", self.hg),
            ("w_aug", self.w_aug),
            ("w_hg", self.w_hg),
            ("total", self.total),
        ]
    }
}

/// Combines the loss terms: total = ph + w_aug * aug + w_hg * hg.
pub fn total_loss(
    ph: f64,
    aug: f64,
    hg: f64,
    w_aug: f64,
    w_hg: f64,
) -> Result<LossReport, LossError> {
    let named: [(&'static str, f64); 5] = [
        ("ph", ph),
        ("aug", aug),
        ("hg", hg),
        ("w_aug", w_aug),
        ("w_hg", w_hg),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let total = ph + w_aug * aug + w_hg * hg;
    Ok(LossReport {
        ph,
        aug,
        hg,
        w_aug,
        w_hg,
        total,
    })
}
