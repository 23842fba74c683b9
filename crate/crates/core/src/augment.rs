//! Copy-paste augmentation with exact flow targets: pastes cached key
//! objects into a sample with a simple per-object motion, optionally applies
//! a pair of mild affine + appearance transforms, and produces the
//! self-supervision flow target with its validity mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{FlowField, Grid2, Image};
use crate::losses::LossValue;
use crate::masks::KeyObject;

/// Errors from augmentation synthesis.
#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("at most {max} objects per sample, got {got}")]
    TooManyObjects { max: usize, got: usize },
    #[error("object {index} cannot be placed inside the frame in both images")]
    PlacementOutOfFrame { index: usize },
    #[error("motions length {got} != object count {want}")]
    MotionCountMismatch { got: usize, want: usize },
    #[error("transform is not invertible")]
    NotInvertible,
    #[error("dimension mismatch")]
    DimensionMismatch,
}

/// Objects pasted per sample.
pub const MAX_PASTED_OBJECTS: usize = 3;

/// A mild 2D similarity transform about the frame center plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub translation: (f64, f64),
    pub rotation: f64,
    pub scale: f64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            translation: (0.0, 0.0),
            rotation: 0.0,
            scale: 1.0,
        }
    }

    /// Forward map about `center`.
    pub fn apply(&self, p: Grid2, center: (f64, f64)) -> Grid2 {
        let (sin, cos) = self.rotation.sin_cos();
        let (dx, dy) = (p.x - center.0, p.y - center.1);
        Grid2::new(
            self.scale * (cos * dx - sin * dy) + center.0 + self.translation.0,
            self.scale * (sin * dx + cos * dy) + center.1 + self.translation.1,
        )
    }

    /// Inverse map about `center`.
    pub fn invert(&self, q: Grid2, center: (f64, f64)) -> Result<Grid2, AugmentError> {
        if self.scale.abs() < 1e-12 {
            return Err(AugmentError::NotInvertible);
        }
        let (sin, cos) = self.rotation.sin_cos();
        let dx = (q.x - center.0 - self.translation.0) / self.scale;
        let dy = (q.y - center.1 - self.translation.1) / self.scale;
        Ok(Grid2::new(
            cos * dx + sin * dy + center.0,
            -sin * dx + cos * dy + center.1,
        ))
    }
}

/// Brightness/contrast jitter applied after the geometric warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppearanceJitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl AppearanceJitter {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    fn apply(&self, v: f64) -> f64 {
        ((v - 0.5) * (1.0 + self.contrast) + 0.5 + self.brightness).clamp(0.0, 1.0)
    }
}

/// One per-frame augmentation transform: geometry plus appearance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTransform {
    pub affine: AffineTransform,
    pub appearance: AppearanceJitter,
}

impl AugmentTransform {
    pub fn identity() -> Self {
        Self {
            affine: AffineTransform::identity(),
            appearance: AppearanceJitter::identity(),
        }
    }
}

/// Sampling ranges for [`sample_transforms`]. Ranges of zero width yield
/// identity transforms.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    /// Max |translation| per axis in pixels.
    pub max_translation: f64,
    /// Max |rotation| in radians.
    pub max_rotation: f64,
    /// Scale drawn from [1 - max_scale_delta, 1 + max_scale_delta].
    pub max_scale_delta: f64,
    /// Max |brightness| shift.
    pub max_brightness: f64,
    /// Max |contrast| change.
    pub max_contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_translation: 8.0,
            max_rotation: 0.1,
            max_scale_delta: 0.1,
            max_brightness: 0.1,
            max_contrast: 0.1,
        }
    }
}

fn draw_symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

/// Draws one transform pair, deterministic for a fixed seed. All parameters
/// stay within the configured ranges (scale in [0.9, 1.1] and |rotation| <=
/// 0.1 rad under the defaults).
pub fn sample_transforms(seed: u64, cfg: &AugmentConfig) -> (AugmentTransform, AugmentTransform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| AugmentTransform {
        affine: AffineTransform {
            translation: (
                draw_symmetric(rng, cfg.max_translation),
                draw_symmetric(rng, cfg.max_translation),
            ),
            rotation: draw_symmetric(rng, cfg.max_rotation),
            scale: 1.0 + draw_symmetric(rng, cfg.max_scale_delta),
        },
        appearance: AppearanceJitter {
            brightness: draw_symmetric(rng, cfg.max_brightness),
            contrast: draw_symmetric(rng, cfg.max_contrast),
        },
    };
    let t1 = draw(&mut rng);
    let t2 = draw(&mut rng);
    (t1, t2)
}

/// An augmented training pair with its exact flow target.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub img1: Image,
    pub img2: Image,
    /// Exact flow target for the augmented pair.
    pub flow_target: FlowField,
    /// Pixels where the flow target is defined.
    pub valid: Vec<bool>,
    /// Frame-1 pixels whose target got covered by a pasted object; excluded
    /// from photometric supervision.
    pub photo_occluded: Vec<bool>,
}

/// Pastes up to three key objects into a sample.
///
/// Object `k` is pasted at a seeded random placement in frame 1 and at
/// placement + `motions[k]` in frame 2 (later objects composite on top).
/// The flow target becomes `motions[k]` on the pasted frame-1 mask and the
/// base flow elsewhere; background pixels whose frame-2 target is newly
/// covered are flagged photometrically occluded.
pub fn paste_objects(
    img1: &Image,
    img2: &Image,
    flow: &FlowField,
    objects: &[KeyObject],
    motions: &[(i64, i64)],
    seed: u64,
) -> Result<AugmentedSample, AugmentError> {
    let (w, h) = (img1.width(), img1.height());
    if (img2.width(), img2.height()) != (w, h) || (flow.width(), flow.height()) != (w, h) {
        return Err(AugmentError::DimensionMismatch);
    }
    if objects.len() > MAX_PASTED_OBJECTS {
        return Err(AugmentError::TooManyObjects {
            max: MAX_PASTED_OBJECTS,
            got: objects.len(),
        });
    }
    if motions.len() != objects.len() {
        return Err(AugmentError::MotionCountMismatch {
            got: motions.len(),
            want: objects.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out1 = img1.data().to_vec();
    let mut out2 = img2.data().to_vec();
    let channels = img1.channels();
    let mut target = flow.clone();
    target.set_valid(None);
    let mut covered1 = vec![false; w * h];
    let mut covered2 = vec![false; w * h];

    for (index, (obj, &(dx, dy))) in objects.iter().zip(motions).enumerate() {
        let (ow, oh) = (obj.bbox.w, obj.bbox.h);
        if ow > w || oh > h {
            return Err(AugmentError::PlacementOutOfFrame { index });
        }
        // Placement must keep the bbox inside the frame in both images.
        let lo_x = (-dx).max(0);
        let hi_x = (w - ow) as i64 - dx.max(0);
        let lo_y = (-dy).max(0);
        let hi_y = (h - oh) as i64 - dy.max(0);
        if lo_x > hi_x || lo_y > hi_y {
            return Err(AugmentError::PlacementOutOfFrame { index });
        }
        let px = rng.random_range(lo_x..=hi_x) as usize;
        let py = rng.random_range(lo_y..=hi_y) as usize;
        let qx = (px as i64 + dx) as usize;
        let qy = (py as i64 + dy) as usize;
        let crop = &obj.image_crop;
        let gray_to = |src: &Image, ox: usize, oy: usize, c: usize| {
            if src.channels() == channels {
                src.at(ox, oy, c)
            } else {
                // Gray crop onto RGB frame or vice versa: broadcast/average.
                src.to_gray().at(ox, oy, 0)
            }
        };
        for oy in 0..oh {
            for ox in 0..ow {
                if !obj.mask[oy * ow + ox] {
                    continue;
                }
                let i1 = (py + oy) * w + (px + ox);
                let i2 = (qy + oy) * w + (qx + ox);
                for c in 0..channels {
                    out1[i1 * channels + c] = gray_to(crop, ox, oy, c);
                    out2[i2 * channels + c] = gray_to(crop, ox, oy, c);
                }
                covered1[i1] = true;
                covered2[i2] = true;
                target.set(px + ox, py + oy, dx as f64, dy as f64);
            }
        }
    }

    // Background pixels whose original correspondence is now hidden behind a
    // pasted object keep their flow target but lose photometric support.
    let mut photo_occluded = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if covered1[i] {
                continue;
            }
            let tx = (x as f64 + flow.u()[i]).round();
            let ty = (y as f64 + flow.v()[i]).round();
            if tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h {
                photo_occluded[i] = covered2[ty as usize * w + tx as usize];
            }
        }
    }

    Ok(AugmentedSample {
        img1: Image::new(w, h, channels, out1).expect("composited values stay in range"),
        img2: Image::new(w, h, channels, out2).expect("composited values stay in range"),
        flow_target: target,
        valid: vec![true; w * h],
        photo_occluded,
    })
}

/// Applies a transform pair to an augmented sample.
///
/// Frames are backward-warped (each output pixel samples its preimage), the
/// flow target is composed so that matching content still corresponds:
/// F'(T1(p)) = T2(p + F(p)) - T1(p), resampled on the output grid. Validity
/// excludes pixels whose preimage under T1 leaves the frame.
pub fn apply_affine_pair(
    sample: &AugmentedSample,
    t1: &AugmentTransform,
    t2: &AugmentTransform,
) -> Result<AugmentedSample, AugmentError> {
    let (w, h) = (sample.img1.width(), sample.img1.height());
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let channels = sample.img1.channels();

    let warp_image = |src: &Image, t: &AugmentTransform| -> Result<Image, AugmentError> {
        let mut data = Vec::with_capacity(w * h * channels);
        for y in 0..h {
            for x in 0..w {
                let p = t.affine.invert(Grid2::new(x as f64, y as f64), center)?;
                let (values, _) = crate::grid::bilinear_sample(src, p);
                for v in values {
                    data.push(t.appearance.apply(v));
                }
            }
        }
        Ok(Image::new(w, h, channels, data).expect("jitter clamps to range"))
    };
    let img1 = warp_image(&sample.img1, t1)?;
    let img2 = warp_image(&sample.img2, t2)?;

    let sample_flow = |p: Grid2| -> (f64, f64) {
        // Bilinear resample of the flow target at a fractional position.
        let x = p.x.clamp(0.0, (w - 1) as f64);
        let y = p.y.clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |vals: &[f64]| {
            let v00 = vals[y0 * w + x0];
            let v10 = vals[y0 * w + x1];
            let v01 = vals[y1 * w + x0];
            let v11 = vals[y1 * w + x1];
            v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy
        };
        (lerp(sample.flow_target.u()), lerp(sample.flow_target.v()))
    };

    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    let mut photo_occluded = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let q = Grid2::new(x as f64, y as f64);
            let p = t1.affine.invert(q, center)?;
            let i = y * w + x;
            let in_frame =
                p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64;
            if !in_frame {
                continue;
            }
            let base_valid = sample.valid[p.y.round() as usize * w + p.x.round() as usize];
            let (fu, fv) = sample_flow(p);
            let mapped = t2.affine.apply(Grid2::new(p.x + fu, p.y + fv), center);
            u[i] = mapped.x - q.x;
            v[i] = mapped.y - q.y;
            valid[i] = base_valid;
            photo_occluded[i] =
                sample.photo_occluded[p.y.round() as usize * w + p.x.round() as usize];
        }
    }
    Ok(AugmentedSample {
        img1,
        img2,
        flow_target: FlowField::new(w, h, u, v, None).expect("finite composed flow"),
        valid,
        photo_occluded,
    })
}

/// L1 self-supervision loss of a prediction against the augmented flow
/// target, averaged over valid pixels. Flagged zero when nothing is valid.
pub fn self_supervision_loss(flow_pred: &FlowField, target: &AugmentedSample) -> LossValue {
    assert_eq!(
        (flow_pred.width(), flow_pred.height()),
        (target.flow_target.width(), target.flow_target.height()),
        "prediction dims"
    );
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..target.valid.len() {
        if target.valid[i] {
            total += (flow_pred.u()[i] - target.flow_target.u()[i]).abs()
                + (flow_pred.v()[i] - target.flow_target.v()[i]).abs();
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
