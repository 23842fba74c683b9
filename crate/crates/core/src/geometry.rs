//! Homography estimation (DLT + RANSAC), homography-induced flow, and the
//! occlusion-driven regional flow refinement pipeline.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{FlowField, Grid2};
use crate::losses::OcclusionMap;
use crate::masks::Segmentation;

/// Errors from homography estimation.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("need at least {required} correspondences, got {got}")]
    TooFewPoints { required: usize, got: usize },
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("projective point at infinity inside region")]
    Singular,
    #[error("region is empty")]
    EmptyRegion,
}

/// A 3x3 projective transform, normalized so that `h[2][2]` = 1 where
/// possible (Frobenius-normalized otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Normalizes and validates a 3x3 matrix as a homography.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Degenerate);
        }
        let h22 = m[(2, 2)];
        let m = if h22.abs() > 1e-8 {
            m / h22
        } else {
            m / m.norm()
        };
        if m.determinant().abs() < 1e-12 {
            return Err(GeometryError::Degenerate);
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    /// Pure-translation homography.
    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major 3x3 entries.
    pub fn to_array(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Projects a point; `None` when the projective denominator vanishes.
    pub fn project(&self, p: Grid2) -> Option<Grid2> {
        let q = self.m * Vector3::new(p.x, p.y, 1.0);
        if q.z.abs() < 1e-9 {
            return None;
        }
        Some(Grid2::new(q.x / q.z, q.y / q.z))
    }

    /// Euclidean reprojection error of one correspondence; infinite when the
    /// source point maps to infinity.
    pub fn reprojection_error(&self, src: Grid2, dst: Grid2) -> f64 {
        match self.project(src) {
            Some(q) => ((q.x - dst.x).powi(2) + (q.y - dst.y).powi(2)).sqrt(),
            None => f64::INFINITY,
        }
    }
}

// Hartley normalization: translate to the centroid and scale the mean
// distance to sqrt(2). Returns the transform and the normalized points.
fn normalize_points(pts: &[Grid2]) -> (Matrix3<f64>, Vec<Grid2>) {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let normed = pts
        .iter()
        .map(|p| Grid2::new(s * (p.x - cx), s * (p.y - cy)))
        .collect();
    (t, normed)
}

fn any_three_collinear(pts: &[Grid2], tol: f64) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                if cross.abs() < tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Least-squares homography from >= 4 correspondences via the normalized
/// direct linear transform.
///
/// Points are Hartley-normalized on both sides; the solution is the
/// null-space direction of the stacked 2n x 9 constraint matrix.
pub fn estimate_homography_dlt(src: &[Grid2], dst: &[Grid2]) -> Result<Homography, GeometryError> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(GeometryError::TooFewPoints {
            required: 4,
            got: n.min(dst.len()),
        });
    }
    let (t_src, s) = normalize_points(src);
    let (t_dst, d) = normalize_points(dst);
    // Minimal configurations must have no 3 collinear source points.
    if n == 4 && any_three_collinear(&s, 1e-9) {
        return Err(GeometryError::Degenerate);
    }

    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for k in 0..n {
        let (x, y) = (s[k].x, s[k].y);
        let (u, v) = (d[k].x, d[k].y);
        let r = 2 * k;
        a[(r, 0)] = -x;
        a[(r, 1)] = -y;
        a[(r, 2)] = -1.0;
        a[(r, 6)] = u * x;
        a[(r, 7)] = u * y;
        a[(r, 8)] = u;
        a[(r + 1, 3)] = -x;
        a[(r + 1, 4)] = -y;
        a[(r + 1, 5)] = -1.0;
        a[(r + 1, 6)] = v * x;
        a[(r + 1, 7)] = v * y;
        a[(r + 1, 8)] = v;
    }

    // Null vector of A = eigenvector of A^T A with the smallest eigenvalue.
    let ata = a.transpose() * &a;
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let lambda_max = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
    // A second near-zero eigenvalue means the solution is not unique.
    if eig.eigenvalues[order[1]] < 1e-14 * lambda_max {
        return Err(GeometryError::Degenerate);
    }
    let hvec = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::new(
        hvec[0], hvec[1], hvec[2], hvec[3], hvec[4], hvec[5], hvec[6], hvec[7], hvec[8],
    );
    let t_dst_inv = t_dst.try_inverse().ok_or(GeometryError::Degenerate)?;
    Homography::new(t_dst_inv * hn * t_src)
}

/// Result of a robust homography fit.
#[derive(Debug, Clone)]
pub struct RansacResult {
    pub homography: Homography,
    /// Fraction of input correspondences within `reproj_thresh` of the model.
    pub inlier_ratio: f64,
    pub inliers: Vec<bool>,
}

/// Robust homography estimation with a seeded RANSAC loop.
///
/// Each iteration fits a minimal 4-point sample and scores it by inlier
/// count at `reproj_thresh`; ties keep the first model found. The winner is
/// refit by least squares on its inliers and the inlier set recomputed under
/// the refit model, so every reported inlier reprojects within threshold.
/// Deterministic for a fixed seed.
pub fn ransac_homography(
    src: &[Grid2],
    dst: &[Grid2],
    reproj_thresh: f64,
    iters: usize,
    seed: u64,
) -> Result<RansacResult, GeometryError> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(GeometryError::TooFewPoints {
            required: 4,
            got: n.min(dst.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    for _ in 0..iters.max(1) {
        let sample = rand::seq::index::sample(&mut rng, n, 4);
        let s: Vec<Grid2> = sample.iter().map(|i| src[i]).collect();
        let d: Vec<Grid2> = sample.iter().map(|i| dst[i]).collect();
        let h = match estimate_homography_dlt(&s, &d) {
            Ok(h) => h,
            Err(_) => continue,
        };
        let mut inliers = vec![false; n];
        let mut count = 0usize;
        for i in 0..n {
            if h.reprojection_error(src[i], dst[i]) <= reproj_thresh {
                inliers[i] = true;
                count += 1;
            }
        }
        if best.as_ref().is_none_or(|(_, _, c)| count > *c) {
            let full_consensus = count == n;
            best = Some((h, inliers, count));
            if full_consensus {
                break;
            }
        }
    }
    let (h, inliers, count) = best.ok_or(GeometryError::Degenerate)?;

    // Gold-standard refit on the consensus set; keep the minimal-sample
    // model if the refit somehow loses support.
    let src_in: Vec<Grid2> = (0..n).filter(|&i| inliers[i]).map(|i| src[i]).collect();
    let dst_in: Vec<Grid2> = (0..n).filter(|&i| inliers[i]).map(|i| dst[i]).collect();
    if let Ok(refit) = estimate_homography_dlt(&src_in, &dst_in) {
        let refit_inliers: Vec<bool> = (0..n)
            .map(|i| refit.reprojection_error(src[i], dst[i]) <= reproj_thresh)
            .collect();
        let refit_count = refit_inliers.iter().filter(|&&b| b).count();
        if refit_count >= count {
            return Ok(RansacResult {
                homography: refit,
                inlier_ratio: refit_count as f64 / n as f64,
                inliers: refit_inliers,
            });
        }
    }
    Ok(RansacResult {
        homography: h,
        inlier_ratio: count as f64 / n as f64,
        inliers,
    })
}

/// Flow induced by a homography over a set of pixels: refined(p) =
/// project(h, p) - p. Pixels outside the region keep zero flow and are
/// marked invalid.
pub fn flow_from_homography(
    h: &Homography,
    region: &[(usize, usize)],
    width: usize,
    height: usize,
) -> Result<FlowField, GeometryError> {
    if region.is_empty() {
        return Err(GeometryError::EmptyRegion);
    }
    let mut flow = FlowField::zeros(width, height);
    let mut valid = vec![false; width * height];
    for &(x, y) in region {
        let p = Grid2::new(x as f64, y as f64);
        let q = h.project(p).ok_or(GeometryError::Singular)?;
        flow.set(x, y, q.x - p.x, q.y - p.y);
        valid[y * width + x] = true;
    }
    flow.set_valid(Some(valid));
    Ok(flow)
}

/// Why a candidate region was not refined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewReliable,
    LowInliers,
    Degenerate,
}

/// Accept/reject bookkeeping for one candidate region.
#[derive(Debug, Clone)]
pub struct RegionRefinement {
    pub segment_id: u32,
    pub occluded_pixels: usize,
    pub correspondences_used: usize,
    pub inlier_ratio: f64,
    pub reliable_fraction: f64,
    pub homography: Option<Homography>,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

/// Tunables for [`refine_regions`].
#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    /// Candidate regions considered per frame, ranked by occluded pixels.
    pub max_regions: usize,
    /// Minimum reliable (non-occluded, in-bounds) fraction of a region.
    pub min_reliable: f64,
    /// Minimum RANSAC inlier ratio over the reliable correspondences.
    pub min_inliers: f64,
    /// RANSAC reprojection threshold in pixels.
    pub reproj_thresh: f64,
    /// RANSAC iterations per region.
    pub ransac_iters: usize,
    /// Base PRNG seed; each region derives its own stream from it.
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_regions: 6,
            min_reliable: 0.2,
            min_inliers: 0.5,
            reproj_thresh: 3.0,
            ransac_iters: 2000,
            seed: 0,
        }
    }
}

/// Output of the regional refinement pipeline.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Input flow with accepted regions overwritten by homography flow.
    pub refined: FlowField,
    /// True exactly on pixels of accepted regions.
    pub region_mask: Vec<bool>,
    /// One record per candidate region, in candidate order.
    pub regions: Vec<RegionRefinement>,
}

// One region's fit: its bookkeeping record plus, when accepted, the
// homography flow and the pixels to overwrite.
type RegionFit = (RegionRefinement, Option<(FlowField, Vec<(usize, usize)>)>);

// Per-region RANSAC seed, decorrelated from neighboring segment IDs.
fn region_seed(base: u64, segment_id: u32) -> u64 {
    base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(segment_id as u64 + 1)
}

/// Refines the flow of the most-occluded segments with per-region
/// homographies.
///
/// Candidates are the up-to-`max_regions` segments with the most occluded
/// pixels (ties to the lower segment ID). For each candidate the reliable
/// correspondences are its non-occluded pixels whose warp target stays in
/// frame; regions below `min_reliable` coverage or `min_inliers` RANSAC
/// support are rejected and recorded. Accepted regions have every pixel
/// overwritten with the homography-induced flow.
pub fn refine_regions(
    flow: &FlowField,
    seg: &Segmentation,
    occ: &OcclusionMap,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, GeometryError> {
    let (w, h) = (flow.width(), flow.height());
    assert_eq!((seg.width(), seg.height()), (w, h), "segmentation dims");
    assert_eq!(occ.occluded.len(), w * h, "occlusion dims");

    let mut occluded_per_segment = vec![0usize; seg.segment_count()];
    for (i, &id) in seg.ids().iter().enumerate() {
        if occ.occluded[i] {
            occluded_per_segment[id as usize] += 1;
        }
    }
    let mut candidates: Vec<(u32, usize)> = occluded_per_segment
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c > 0)
        .map(|(id, &c)| (id as u32, c))
        .collect();
    candidates.sort_by_key(|&(id, c)| (std::cmp::Reverse(c), id));
    candidates.truncate(cfg.max_regions);

    // Regions are disjoint, so they can be fit in parallel and applied in
    // candidate order with results identical to a sequential run.
    let fits: Vec<RegionFit> = candidates
        .par_iter()
        .map(|&(id, occluded_pixels)| refine_one_region(flow, seg, occ, cfg, id, occluded_pixels))
        .collect();

    let mut refined = flow.clone();
    let mut region_mask = vec![false; w * h];
    let mut regions = Vec::with_capacity(fits.len());
    for (record, apply) in fits {
        if let Some((hflow, pixels)) = apply {
            for (x, y) in pixels {
                let (u, v) = hflow.at(x, y);
                refined.set(x, y, u, v);
                region_mask[y * w + x] = true;
            }
        }
        regions.push(record);
    }
    Ok(RefineOutcome {
        refined,
        region_mask,
        regions,
    })
}

fn refine_one_region(
    flow: &FlowField,
    seg: &Segmentation,
    occ: &OcclusionMap,
    cfg: &RefineConfig,
    id: u32,
    occluded_pixels: usize,
) -> RegionFit {
    let (w, h) = (flow.width(), flow.height());
    let mut region = Vec::new();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seg.id_at(x, y) != id {
                continue;
            }
            region.push((x, y));
            let i = y * w + x;
            if occ.occluded[i] {
                continue;
            }
            let (u, v) = flow.at(x, y);
            let (tx, ty) = (x as f64 + u, y as f64 + v);
            let in_bounds = tx >= 0.0 && ty >= 0.0 && tx <= (w - 1) as f64 && ty <= (h - 1) as f64;
            if in_bounds {
                src.push(Grid2::new(x as f64, y as f64));
                dst.push(Grid2::new(tx, ty));
            }
        }
    }
    let reliable_fraction = src.len() as f64 / region.len() as f64;
    let mut record = RegionRefinement {
        segment_id: id,
        occluded_pixels,
        correspondences_used: src.len(),
        inlier_ratio: 0.0,
        reliable_fraction,
        homography: None,
        accepted: false,
        reject_reason: None,
    };
    if reliable_fraction < cfg.min_reliable {
        record.reject_reason = Some(RejectReason::TooFewReliable);
        return (record, None);
    }
    let fit = match ransac_homography(
        &src,
        &dst,
        cfg.reproj_thresh,
        cfg.ransac_iters,
        region_seed(cfg.seed, id),
    ) {
        Ok(fit) => fit,
        Err(_) => {
            record.reject_reason = Some(RejectReason::Degenerate);
            return (record, None);
        }
    };
    record.inlier_ratio = fit.inlier_ratio;
    record.homography = Some(fit.homography.clone());
    if fit.inlier_ratio < cfg.min_inliers {
        record.reject_reason = Some(RejectReason::LowInliers);
        return (record, None);
    }
    match flow_from_homography(&fit.homography, &region, w, h) {
        Ok(hflow) => {
            record.accepted = true;
            (record, Some((hflow, region)))
        }
        Err(_) => {
            record.reject_reason = Some(RejectReason::Degenerate);
            (record, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::RawMaskSet;
    use rand::Rng;

    fn unit_square() -> Vec<Grid2> {
        vec![
            Grid2::new(0.0, 0.0),
            Grid2::new(1.0, 0.0),
            Grid2::new(1.0, 1.0),
            Grid2::new(0.0, 1.0),
        ]
    }

    #[test]
    fn dlt_identity_from_square() {
        let pts = unit_square();
        let h = estimate_homography_dlt(&pts, &pts).unwrap();
        let arr = h.to_array();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (arr[r][c] - expect).abs() < 1e-10,
                    "h[{r}][{c}] = {}",
                    arr[r][c]
                );
            }
        }
    }

    #[test]
    fn dlt_pure_translation() {
        let src = unit_square();
        let dst: Vec<Grid2> = src.iter().map(|p| Grid2::new(p.x + 5.0, p.y)).collect();
        let h = estimate_homography_dlt(&src, &dst).unwrap();
        let arr = h.to_array();
        assert!((arr[0][2] - 5.0).abs() < 1e-9);
        assert!((arr[1][2]).abs() < 1e-9);
    }

    #[test]
    fn dlt_recovers_random_projective_map() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let truth = Homography::new(Matrix3::new(
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-5.0..5.0),
                rng.random_range(-0.2..0.2),
                1.0 + rng.random_range(-0.2..0.2),
                rng.random_range(-5.0..5.0),
                rng.random_range(-1e-3..1e-3),
                rng.random_range(-1e-3..1e-3),
                1.0,
            ))
            .unwrap();
            let src: Vec<Grid2> = (0..8)
                .map(|_| Grid2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..32.0)))
                .collect();
            let dst: Vec<Grid2> = src.iter().map(|&p| truth.project(p).unwrap()).collect();
            let h = estimate_homography_dlt(&src, &dst).unwrap();
            for &p in &src {
                assert!(h.reprojection_error(p, truth.project(p).unwrap()) < 1e-6);
            }
        }
    }

    #[test]
    fn dlt_rejects_collinear_minimal_sample() {
        let src = vec![
            Grid2::new(0.0, 0.0),
            Grid2::new(1.0, 1.0),
            Grid2::new(2.0, 2.0),
            Grid2::new(3.0, 0.0),
        ];
        let dst = src.clone();
        assert!(matches!(
            estimate_homography_dlt(&src, &dst),
            Err(GeometryError::Degenerate)
        ));
    }

    #[test]
    fn ransac_exact_correspondences_full_consensus() {
        let truth = Homography::translation(3.0, -2.0);
        let src: Vec<Grid2> = (0..40)
            .map(|i| Grid2::new((i % 8) as f64 * 3.0, (i / 8) as f64 * 4.0))
            .collect();
        let dst: Vec<Grid2> = src.iter().map(|&p| truth.project(p).unwrap()).collect();
        let fit = ransac_homography(&src, &dst, 1.0, 500, 0).unwrap();
        assert_eq!(fit.inlier_ratio, 1.0);
        for &p in &src {
            assert!(
                fit.homography
                    .reprojection_error(p, truth.project(p).unwrap())
                    < 1e-8
            );
        }
    }

    #[test]
    fn ransac_minimal_four_points() {
        let src = unit_square();
        let dst: Vec<Grid2> = src
            .iter()
            .map(|p| Grid2::new(p.x * 2.0, p.y * 2.0))
            .collect();
        let fit = ransac_homography(&src, &dst, 0.5, 100, 7).unwrap();
        assert_eq!(fit.inlier_ratio, 1.0);
        assert!(fit.inliers.iter().all(|&b| b));
    }

    #[test]
    fn ransac_recovers_planted_model_under_outliers() {
        use rand::SeedableRng;
        // 70% correspondences from a planted homography, 30% uniform junk;
        // the planted inliers must be recovered for nearly every seed.
        let truth = Homography::new(Matrix3::new(
            1.05, 0.02, 4.0, -0.03, 0.98, -2.0, 1e-4, -5e-5, 1.0,
        ))
        .unwrap();
        let mut successes = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let mut src = Vec::new();
            let mut dst = Vec::new();
            let mut planted = Vec::new();
            for i in 0..120 {
                let p = Grid2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..60.0));
                src.push(p);
                if i < 84 {
                    dst.push(truth.project(p).unwrap());
                    planted.push(true);
                } else {
                    dst.push(Grid2::new(
                        rng.random_range(0.0..100.0),
                        rng.random_range(0.0..60.0),
                    ));
                    planted.push(false);
                }
            }
            let fit = ransac_homography(&src, &dst, 2.0, 300, seed).unwrap();
            let covers_planted = planted
                .iter()
                .zip(&fit.inliers)
                .all(|(&truth_in, &got)| !truth_in || got);
            if covers_planted {
                successes += 1;
            }
        }
        assert!(
            successes >= 95,
            "planted inliers recovered in {successes}/100 seeds"
        );
    }

    #[test]
    fn ransac_inliers_reproject_within_threshold() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = Homography::translation(2.0, 1.0);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for _ in 0..60 {
            let p = Grid2::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0));
            let q = truth.project(p).unwrap();
            // Mild noise keeps most points inside the threshold.
            src.push(p);
            dst.push(Grid2::new(
                q.x + rng.random_range(-0.5..0.5),
                q.y + rng.random_range(-0.5..0.5),
            ));
        }
        let thresh = 1.0;
        let fit = ransac_homography(&src, &dst, thresh, 500, 9).unwrap();
        for i in 0..src.len() {
            if fit.inliers[i] {
                assert!(fit.homography.reprojection_error(src[i], dst[i]) <= thresh);
            }
        }
    }

    #[test]
    fn homography_flow_identity_and_translation() {
        let region: Vec<(usize, usize)> =
            (0..4).flat_map(|y| (0..4).map(move |x| (x, y))).collect();
        let flow = flow_from_homography(&Homography::identity(), &region, 4, 4).unwrap();
        assert!(flow.u().iter().chain(flow.v()).all(|&x| x.abs() < 1e-12));

        let flow =
            flow_from_homography(&Homography::translation(3.0, -2.0), &region, 4, 4).unwrap();
        for &(x, y) in &region {
            let (u, v) = flow.at(x, y);
            assert!((u - 3.0).abs() < 1e-12 && (v + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn homography_flow_matches_direct_projection() {
        let h = Homography::new(Matrix3::new(
            1.02, 0.01, 1.5, -0.02, 0.97, 0.5, 2e-4, 1e-4, 1.0,
        ))
        .unwrap();
        let region: Vec<(usize, usize)> =
            (0..10).flat_map(|y| (0..10).map(move |x| (x, y))).collect();
        let flow = flow_from_homography(&h, &region, 10, 10).unwrap();
        for &(x, y) in &region {
            let p = Grid2::new(x as f64, y as f64);
            let q = h.project(p).unwrap();
            let (u, v) = flow.at(x, y);
            assert!((u - (q.x - p.x)).abs() < 1e-12);
            assert!((v - (q.y - p.y)).abs() < 1e-12);
        }
    }

    fn single_segment(w: usize, h: usize) -> Segmentation {
        let set = RawMaskSet::from_grids(w, h, vec![]).unwrap();
        Segmentation::build(&set, w, h).unwrap()
    }

    #[test]
    fn refine_no_occlusion_returns_input() {
        let flow = FlowField::constant(16, 12, 1.0, 0.5);
        let seg = single_segment(16, 12);
        let occ = OcclusionMap {
            occluded: vec![false; 16 * 12],
        };
        let out = refine_regions(&flow, &seg, &occ, &RefineConfig::default()).unwrap();
        assert_eq!(out.refined, flow);
        assert!(out.regions.is_empty());
        assert!(out.region_mask.iter().all(|&m| !m));
    }

    /// Planted scene: flow follows a homography except on occluded outlier
    /// pixels. Returns (flow, occ, truth).
    fn planted_scene(w: usize, h: usize, seed: u64) -> (FlowField, OcclusionMap, Homography) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Homography::new(Matrix3::new(
            1.0 + rng.random_range(-0.01..0.01),
            rng.random_range(-0.01..0.01),
            rng.random_range(-2.0..2.0),
            rng.random_range(-0.01..0.01),
            1.0 + rng.random_range(-0.01..0.01),
            rng.random_range(-2.0..2.0),
            rng.random_range(-1e-4..1e-4),
            rng.random_range(-1e-4..1e-4),
            1.0,
        ))
        .unwrap();
        let mut flow = FlowField::zeros(w, h);
        let mut occluded = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = Grid2::new(x as f64, y as f64);
                let q = truth.project(p).unwrap();
                let outlier = rng.random_bool(0.2);
                if outlier {
                    occluded[y * w + x] = true;
                    flow.set(
                        x,
                        y,
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                    );
                } else {
                    flow.set(x, y, q.x - p.x, q.y - p.y);
                }
            }
        }
        (flow, OcclusionMap { occluded }, truth)
    }

    #[test]
    fn refine_replaces_outliers_on_planted_scene() {
        let (w, h) = (48, 32);
        let (flow, occ, truth) = planted_scene(w, h, 21);
        let seg = single_segment(w, h);
        let cfg = RefineConfig {
            ransac_iters: 300,
            ..RefineConfig::default()
        };
        let out = refine_regions(&flow, &seg, &occ, &cfg).unwrap();
        assert_eq!(out.regions.len(), 1);
        assert!(out.regions[0].accepted, "{:?}", out.regions[0]);
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = Grid2::new(x as f64, y as f64);
                let q = truth.project(p).unwrap();
                let (u, v) = out.refined.at(x, y);
                let err = ((u - (q.x - p.x)).powi(2) + (v - (q.y - p.y)).powi(2)).sqrt();
                worst = worst.max(err);
            }
        }
        assert!(worst < 0.1, "worst endpoint error {worst}");
    }

    #[test]
    fn refine_rejects_mostly_occluded_region() {
        let (w, h) = (20, 10);
        let flow = FlowField::constant(w, h, 1.0, 0.0);
        let seg = single_segment(w, h);
        // 90% occluded: reliable fraction 0.1 < 0.2.
        let occluded: Vec<bool> = (0..w * h).map(|i| i % 10 != 0).collect();
        let out = refine_regions(
            &flow,
            &seg,
            &OcclusionMap { occluded },
            &RefineConfig::default(),
        )
        .unwrap();
        assert_eq!(out.regions.len(), 1);
        assert!(!out.regions[0].accepted);
        assert_eq!(
            out.regions[0].reject_reason,
            Some(RejectReason::TooFewReliable)
        );
        assert_eq!(out.refined, flow);
    }

    #[test]
    fn refine_is_idempotent_on_planted_scene() {
        let (w, h) = (48, 32);
        let (flow, occ, _) = planted_scene(w, h, 33);
        let seg = single_segment(w, h);
        let cfg = RefineConfig {
            ransac_iters: 300,
            ..RefineConfig::default()
        };
        let once = refine_regions(&flow, &seg, &occ, &cfg).unwrap();
        let twice = refine_regions(&once.refined, &seg, &occ, &cfg).unwrap();
        assert!(twice.regions[0].accepted);
        assert_eq!(twice.regions[0].inlier_ratio, 1.0);
        let max_change = once
            .refined
            .u()
            .iter()
            .zip(twice.refined.u())
            .chain(once.refined.v().iter().zip(twice.refined.v()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_change < 1e-9, "second pass moved flow by {max_change}");
    }

    #[test]
    fn refine_is_deterministic() {
        let (w, h) = (32, 24);
        let (flow, occ, _) = planted_scene(w, h, 55);
        let seg = single_segment(w, h);
        let cfg = RefineConfig {
            ransac_iters: 200,
            ..RefineConfig::default()
        };
        let a = refine_regions(&flow, &seg, &occ, &cfg).unwrap();
        let b = refine_regions(&flow, &seg, &occ, &cfg).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.region_mask, b.region_mask);
    }
}
