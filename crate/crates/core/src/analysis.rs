//! Flow metrics (endpoint error and outlier rates with region splits) and
//! loss-landscape diagnostics: horizontal sweeps of the smoothness loss and
//! rendered gradient-magnitude maps.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{refine_regions, RefineConfig};
use crate::grid::{FlowField, Image};
use crate::losses::{
    edge_weights_from_segmentation, grad_homography_smoothness, grad_smoothness_2nd,
    smoothness_2nd, HgNormalization, Norm, OcclusionMap,
};
use crate::masks::Segmentation;

/// Errors from metric evaluation.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty evaluation set")]
    EmptyEvaluationSet,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Outlier thresholds of the standard flow error rate: endpoint error above
/// 3 px and above 5% of the ground-truth magnitude.
pub const FL_ABS_THRESH: f64 = 3.0;
pub const FL_REL_THRESH: f64 = 0.05;

fn check_dims(est: &FlowField, gt: &FlowField) -> Result<(), AnalysisError> {
    if (est.width(), est.height()) != (gt.width(), gt.height()) {
        return Err(AnalysisError::DimensionMismatch(
            est.width(),
            est.height(),
            gt.width(),
            gt.height(),
        ));
    }
    Ok(())
}

fn masked_indices<'a>(
    gt: &'a FlowField,
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = usize> + 'a {
    (0..gt.u().len()).filter(move |&i| gt.is_valid(i) && mask.is_none_or(|m| m[i]))
}

/// Mean endpoint error over masked ground-truth-valid pixels.
pub fn epe(est: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64, AnalysisError> {
    check_dims(est, gt)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in masked_indices(gt, mask) {
        let du = est.u()[i] - gt.u()[i];
        let dv = est.v()[i] - gt.v()[i];
        total += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(AnalysisError::EmptyEvaluationSet);
    }
    Ok(total / count as f64)
}

/// Percentage of masked pixels whose endpoint error exceeds both 3 px and 5%
/// of the ground-truth magnitude.
pub fn fl_rate(
    est: &FlowField,
    gt: &FlowField,
    mask: Option<&[bool]>,
) -> Result<f64, AnalysisError> {
    check_dims(est, gt)?;
    let mut outliers = 0usize;
    let mut count = 0usize;
    for i in masked_indices(gt, mask) {
        let du = est.u()[i] - gt.u()[i];
        let dv = est.v()[i] - gt.v()[i];
        let err = (du * du + dv * dv).sqrt();
        let mag = (gt.u()[i] * gt.u()[i] + gt.v()[i] * gt.v()[i]).sqrt();
        if err > FL_ABS_THRESH && err > FL_REL_THRESH * mag {
            outliers += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(AnalysisError::EmptyEvaluationSet);
    }
    Ok(100.0 * outliers as f64 / count as f64)
}

/// Pixel counts behind each reported split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub all: usize,
    pub noc: usize,
    pub occ: usize,
    pub bg: usize,
    pub fg: usize,
}

/// Metrics over the full frame and its occlusion / foreground splits.
/// Fields are omitted (None) when their subset is empty or its mask absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub epe_all: f64,
    pub epe_noc: Option<f64>,
    pub epe_occ: Option<f64>,
    pub fl_all: f64,
    pub fl_noc: Option<f64>,
    pub fl_bg: Option<f64>,
    pub fl_fg: Option<f64>,
    pub counts: SplitCounts,
    pub notes: Vec<String>,
}

impl MetricsReport {
    /// Present fields in fixed order for report serialization.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("epe_all", self.epe_all)];
        if let Some(v) = self.epe_noc {
            out.push(("epe_noc", v));
        }
        if let Some(v) = self.epe_occ {
            out.push(("epe_occ", v));
        }
        out.push(("fl_all", self.fl_all));
        if let Some(v) = self.fl_noc {
            out.push(("fl_noc", v));
        }
        if let Some(v) = self.fl_bg {
            out.push(("fl_bg", v));
        }
        if let Some(v) = self.fl_fg {
            out.push(("fl_fg", v));
        }
        out.push(("count_all", self.counts.all as f64));
        out.push(("count_noc", self.counts.noc as f64));
        out.push(("count_occ", self.counts.occ as f64));
        out.push(("count_bg", self.counts.bg as f64));
        out.push(("count_fg", self.counts.fg as f64));
        out
    }
}

fn count_masked(gt: &FlowField, mask: Option<&[bool]>) -> usize {
    masked_indices(gt, mask).count()
}

type MetricFn = fn(&FlowField, &FlowField, Option<&[bool]>) -> Result<f64, AnalysisError>;

fn subset_metric(
    est: &FlowField,
    gt: &FlowField,
    subset: &[bool],
    which: MetricFn,
    name: &str,
    notes: &mut Vec<String>,
) -> Option<f64> {
    match which(est, gt, Some(subset)) {
        Ok(v) => Some(v),
        Err(AnalysisError::EmptyEvaluationSet) => {
            notes.push(format!("{name}: empty subset, omitted"));
            None
        }
        Err(_) => unreachable!("dims validated by caller"),
    }
}

/// Evaluates endpoint error and outlier rate over the full frame with
/// non-occluded/occluded and background/foreground splits.
///
/// `occluded` marks occluded pixels (an estimated map or an inverted
/// provided non-occlusion mask); `fg` marks foreground objects. Splits with
/// no mask or no pixels are omitted with a note.
pub fn metrics_with_splits(
    est: &FlowField,
    gt: &FlowField,
    occluded: Option<&[bool]>,
    fg: Option<&[bool]>,
) -> Result<MetricsReport, AnalysisError> {
    check_dims(est, gt)?;
    let n = gt.u().len();
    let mut notes = Vec::new();
    let epe_all = epe(est, gt, None)?;
    let fl_all = fl_rate(est, gt, None)?;
    let mut counts = SplitCounts {
        all: count_masked(gt, None),
        ..SplitCounts::default()
    };

    let (mut epe_noc, mut epe_occ, mut fl_noc) = (None, None, None);
    if let Some(occ) = occluded {
        let noc: Vec<bool> = occ.iter().map(|&o| !o).collect();
        counts.noc = count_masked(gt, Some(&noc));
        counts.occ = count_masked(gt, Some(occ));
        epe_noc = subset_metric(est, gt, &noc, epe, "epe_noc", &mut notes);
        epe_occ = subset_metric(est, gt, occ, epe, "epe_occ", &mut notes);
        fl_noc = subset_metric(est, gt, &noc, fl_rate, "fl_noc", &mut notes);
    } else {
        notes.push("occlusion mask absent: noc/occ splits omitted".into());
    }

    let (mut fl_bg, mut fl_fg) = (None, None);
    if let Some(fg_mask) = fg {
        assert_eq!(fg_mask.len(), n, "fg mask length");
        let bg: Vec<bool> = fg_mask.iter().map(|&f| !f).collect();
        counts.fg = count_masked(gt, Some(fg_mask));
        counts.bg = count_masked(gt, Some(&bg));
        fl_fg = subset_metric(est, gt, fg_mask, fl_rate, "fl_fg", &mut notes);
        fl_bg = subset_metric(est, gt, &bg, fl_rate, "fl_bg", &mut notes);
    } else {
        notes.push("foreground mask absent: bg/fg splits omitted".into());
    }

    Ok(MetricsReport {
        epe_all,
        epe_noc,
        epe_occ,
        fl_all,
        fl_noc,
        fl_bg,
        fl_fg,
        counts,
        notes,
    })
}

/// A sweep of the smoothness loss against horizontal flow translation.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeCurve {
    pub shifts: Vec<f64>,
    pub losses: Vec<f64>,
    /// Shift with the smallest loss (first of equal minima).
    pub argmin_shift: f64,
}

/// Sweep parameters; the range should cover shift 0 so the unshifted loss is
/// part of the curve.
#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub min_shift: f64,
    pub max_shift: f64,
    pub step: f64,
    pub norm: Norm,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            min_shift: -20.0,
            max_shift: 20.0,
            step: 0.5,
            norm: Norm::L1,
        }
    }
}

/// Translates flow content horizontally by `shift` pixels, bilinearly
/// resampled with border replication.
pub fn translate_flow(flow: &FlowField, shift: f64) -> FlowField {
    let (w, h) = (flow.width(), flow.height());
    let sample = |vals: &[f64], x: f64, y: usize| -> f64 {
        let xc = x.clamp(0.0, (w - 1) as f64);
        let x0 = xc.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let fx = xc - x0 as f64;
        vals[y * w + x0] * (1.0 - fx) + vals[y * w + x1] * fx
    };
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let src_x = x as f64 - shift;
            u.push(sample(flow.u(), src_x, y));
            v.push(sample(flow.v(), src_x, y));
        }
    }
    FlowField::new(w, h, u, v, None).expect("finite translate")
}

/// Evaluates the boundary-weighted second-order smoothness while the flow
/// pattern slides horizontally across the segmentation, recording the curve
/// and its argmin.
pub fn landscape_sweep(
    flow_patch: &FlowField,
    seg_patch: &Segmentation,
    cfg: &SweepConfig,
) -> LandscapeCurve {
    assert!(cfg.step > 0.0, "step must be positive");
    assert!(cfg.min_shift <= cfg.max_shift, "empty shift range");
    let weights = edge_weights_from_segmentation(seg_patch);
    let steps = ((cfg.max_shift - cfg.min_shift) / cfg.step).round() as usize;
    let shifts: Vec<f64> = (0..=steps)
        .map(|k| cfg.min_shift + k as f64 * cfg.step)
        .collect();
    // Sweep points are independent; order is restored by the indexed collect.
    let losses: Vec<f64> = shifts
        .par_iter()
        .map(|&s| smoothness_2nd(&translate_flow(flow_patch, s), &weights, cfg.norm))
        .collect();
    let argmin = losses
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    LandscapeCurve {
        argmin_shift: shifts[argmin],
        shifts,
        losses,
    }
}

/// Which smoothness gradient to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientKind {
    /// Boundary-weighted second-order smoothness.
    Traditional,
    /// Region-refined homography smoothness.
    Homography,
}

/// A rendered gradient map plus the raw per-pixel gradient field.
#[derive(Debug, Clone)]
pub struct GradientMap {
    /// Gradient magnitude min-max normalized to [0, 1].
    pub magnitude: Image,
    pub raw: FlowField,
}

/// Computes the per-pixel gradient of the chosen smoothness loss and renders
/// its magnitude normalized to [0, 1].
pub fn gradient_field_map(
    flow: &FlowField,
    seg: &Segmentation,
    occ: &OcclusionMap,
    kind: GradientKind,
    norm: Norm,
    refine_cfg: &RefineConfig,
) -> Result<GradientMap, AnalysisError> {
    let raw = match kind {
        GradientKind::Traditional => {
            let weights = edge_weights_from_segmentation(seg);
            grad_smoothness_2nd(flow, &weights, norm)
        }
        GradientKind::Homography => {
            let outcome = refine_regions(flow, seg, occ, refine_cfg)?;
            grad_homography_smoothness(
                flow,
                &outcome.refined,
                &outcome.region_mask,
                HgNormalization::Region,
            )
        }
    };
    let (w, h) = (raw.width(), raw.height());
    let mags: Vec<f64> = (0..w * h)
        .map(|i| (raw.u()[i] * raw.u()[i] + raw.v()[i] * raw.v()[i]).sqrt())
        .collect();
    let max = mags.iter().fold(0.0f64, |a, &b| a.max(b));
    let min = mags.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let span = max - min;
    let normalized: Vec<f64> = if span > 0.0 {
        mags.iter().map(|m| (m - min) / span).collect()
    } else {
        vec![0.0; w * h]
    };
    let magnitude = Image::new(w, h, 1, normalized).expect("normalized to [0,1]");
    Ok(GradientMap { magnitude, raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::RawMaskSet;

    fn flow_pair(w: usize, h: usize, du: f64, dv: f64) -> (FlowField, FlowField) {
        let gt = FlowField::constant(w, h, 1.0, -2.0);
        let est = FlowField::constant(w, h, 1.0 + du, -2.0 + dv);
        (est, gt)
    }

    #[test]
    fn epe_exact_match_is_zero() {
        let (_, gt) = flow_pair(8, 6, 0.0, 0.0);
        assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn epe_three_four_offset_is_five() {
        let (est, gt) = flow_pair(8, 6, 3.0, 4.0);
        assert_eq!(epe(&est, &gt, None).unwrap(), 5.0);
    }

    #[test]
    fn epe_matches_direct_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (w, h) = (9, 5);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let u: Vec<f64> = (0..w * h).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..w * h).map(|_| rng.random_range(-5.0..5.0)).collect();
            FlowField::new(w, h, u, v, None).unwrap()
        };
        let est = mk(&mut rng);
        let gt = mk(&mut rng);
        let direct: f64 = (0..w * h)
            .map(|i| ((est.u()[i] - gt.u()[i]).powi(2) + (est.v()[i] - gt.v()[i]).powi(2)).sqrt())
            .sum::<f64>()
            / (w * h) as f64;
        assert!((epe(&est, &gt, None).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn epe_respects_validity_mask() {
        let (est, gt) = flow_pair(4, 1, 3.0, 4.0);
        let mut gt_masked = gt.clone();
        gt_masked.set_valid(Some(vec![true, false, false, false]));
        assert_eq!(epe(&est, &gt_masked, None).unwrap(), 5.0);
        let empty = vec![false; 4];
        assert!(matches!(
            epe(&est, &gt_masked, Some(&empty)),
            Err(AnalysisError::EmptyEvaluationSet)
        ));
    }

    #[test]
    fn fl_exact_match_is_zero() {
        let (_, gt) = flow_pair(8, 6, 0.0, 0.0);
        assert_eq!(fl_rate(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn fl_large_motion_small_relative_error_not_flagged() {
        // gt (100, 0), est (96, 0): error 4 > 3 but 4 <= 5% of 100.
        let gt = FlowField::constant(5, 5, 100.0, 0.0);
        let est = FlowField::constant(5, 5, 96.0, 0.0);
        assert_eq!(fl_rate(&est, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn fl_small_motion_large_relative_error_flagged() {
        // gt (10, 0), est (6, 0): error 4 > 3 and 4 > 0.5.
        let gt = FlowField::constant(5, 5, 10.0, 0.0);
        let est = FlowField::constant(5, 5, 6.0, 0.0);
        assert_eq!(fl_rate(&est, &gt, None).unwrap(), 100.0);
    }

    #[test]
    fn metrics_uniform_error_with_empty_occlusion() {
        let (est, gt) = flow_pair(10, 6, 3.0, 4.0);
        let occ = vec![false; 60];
        let report = metrics_with_splits(&est, &gt, Some(&occ), None).unwrap();
        assert_eq!(report.epe_all, 5.0);
        assert_eq!(report.epe_noc, Some(5.0));
        assert_eq!(report.epe_occ, None);
        assert!(report.notes.iter().any(|n| n.contains("epe_occ")));
        assert_eq!(report.counts.noc, 60);
        assert_eq!(report.counts.occ, 0);
    }

    #[test]
    fn metrics_errors_only_in_foreground() {
        let (w, h) = (10, 4);
        let gt = FlowField::constant(w, h, 10.0, 0.0);
        let mut est = gt.clone();
        let mut fg = vec![false; w * h];
        for y in 0..h {
            for x in 6..w {
                fg[y * w + x] = true;
                est.set(x, y, 0.0, 0.0);
            }
        }
        let report = metrics_with_splits(&est, &gt, None, Some(&fg)).unwrap();
        assert_eq!(report.fl_bg, Some(0.0));
        assert_eq!(report.fl_fg, Some(100.0));
        assert_eq!(report.epe_noc, None);
    }

    #[test]
    fn metrics_match_per_subset_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let (w, h) = (12, 8);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let u: Vec<f64> = (0..w * h).map(|_| rng.random_range(-8.0..8.0)).collect();
            let v: Vec<f64> = (0..w * h).map(|_| rng.random_range(-8.0..8.0)).collect();
            FlowField::new(w, h, u, v, None).unwrap()
        };
        let est = mk(&mut rng);
        let gt = mk(&mut rng);
        let occ: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.3)).collect();
        let report = metrics_with_splits(&est, &gt, Some(&occ), None).unwrap();
        let noc: Vec<bool> = occ.iter().map(|&o| !o).collect();
        assert_eq!(report.epe_noc.unwrap(), epe(&est, &gt, Some(&noc)).unwrap());
        assert_eq!(report.epe_occ.unwrap(), epe(&est, &gt, Some(&occ)).unwrap());
        assert_eq!(
            report.fl_noc.unwrap(),
            fl_rate(&est, &gt, Some(&noc)).unwrap()
        );
    }

    fn block_segmentation(
        w: usize,
        h: usize,
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
    ) -> Segmentation {
        let mut g = vec![false; w * h];
        for y in y0..y1 {
            for x in x0..x1 {
                g[y * w + x] = true;
            }
        }
        let set = RawMaskSet::from_grids(w, h, vec![g]).unwrap();
        Segmentation::build(&set, w, h).unwrap()
    }

    #[test]
    fn sweep_constant_flow_is_flat_with_argmin_first() {
        let flow = FlowField::constant(32, 8, 2.0, 0.0);
        let seg = block_segmentation(32, 8, 10, 20, 2, 6);
        let cfg = SweepConfig {
            min_shift: -4.0,
            max_shift: 4.0,
            step: 1.0,
            norm: Norm::L1,
        };
        let curve = landscape_sweep(&flow, &seg, &cfg);
        assert!(curve.losses.iter().all(|&l| l == curve.losses[0]));
        assert_eq!(curve.argmin_shift, -4.0);
        assert_eq!(curve.shifts.len(), 9);
    }

    #[test]
    fn sweep_translate_flow_shifts_content_right() {
        let mut flow = FlowField::zeros(8, 1);
        flow.set(2, 0, 5.0, 0.0);
        let shifted = translate_flow(&flow, 3.0);
        assert_eq!(shifted.at(5, 0), (5.0, 0.0));
        assert_eq!(shifted.at(2, 0), (0.0, 0.0));
    }

    /// Two-region scene with the flow pattern planted `misalign` pixels left
    /// of the object: a ramped rectangle profile whose loss dips exactly
    /// when it re-aligns with the object columns.
    fn misaligned_scene(misalign: usize) -> (FlowField, Segmentation) {
        let (w, h) = (64, 24);
        let (bl, br) = (40usize, 46usize);
        let (top, bot) = (8usize, 16usize);
        let seg = block_segmentation(w, h, bl, br, top, bot);
        let profile_start = bl - misalign - 1;
        let profile = [0.0, 2.5, 5.0, 5.0, 5.0, 5.0, 2.5, 0.0];
        let mut u = vec![0.0; w * h];
        for y in top..bot {
            for (k, &val) in profile.iter().enumerate() {
                u[y * w + profile_start + k] = val;
            }
        }
        (
            FlowField::new(w, h, u, vec![0.0; w * h], None).unwrap(),
            seg,
        )
    }

    #[test]
    fn sweep_finds_planted_misalignment() {
        let (flow, seg) = misaligned_scene(10);
        let cfg = SweepConfig::default();
        let curve = landscape_sweep(&flow, &seg, &cfg);
        assert!(
            (curve.argmin_shift - 10.0).abs() <= cfg.step,
            "argmin {} not within one step of 10",
            curve.argmin_shift
        );
    }

    #[test]
    fn sweep_aligned_scene_has_argmin_zero() {
        let (flow, seg) = misaligned_scene(0);
        let curve = landscape_sweep(&flow, &seg, &SweepConfig::default());
        assert!(
            curve.argmin_shift.abs() <= 0.5,
            "argmin {}",
            curve.argmin_shift
        );
    }

    #[test]
    fn gradient_map_affine_flow_traditional_is_zero() {
        let (w, h) = (16, 12);
        let mut u = Vec::new();
        for y in 0..h {
            for x in 0..w {
                u.push(0.5 * x as f64 - 0.25 * y as f64);
            }
        }
        let flow = FlowField::new(w, h, u, vec![0.0; w * h], None).unwrap();
        let seg = block_segmentation(w, h, 4, 10, 3, 9);
        let occ = OcclusionMap::none(w, h);
        let map = gradient_field_map(
            &flow,
            &seg,
            &occ,
            GradientKind::Traditional,
            Norm::L2,
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(map.raw.u().iter().chain(map.raw.v()).all(|&g| g == 0.0));
        assert!(map.magnitude.data().iter().all(|&m| m == 0.0));
    }
}
