//! Command implementations behind the `segflow` binary: batch pipelines
//! over flow files, images, and mask dumps. Every command is deterministic
//! given its inputs, flags, and seed, never mutates its inputs, and prints
//! one machine-readable summary line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segflow::analysis::{
    gradient_field_map, landscape_sweep, metrics_with_splits, GradientKind, SweepConfig,
};
use segflow::augment::{
    apply_affine_pair, paste_objects, sample_transforms, AugmentConfig, AugmentTransform,
    AugmentedSample,
};
use segflow::geometry::{refine_regions, RefineConfig, RefineOutcome};
use segflow::grid::{FlowField, Image};
use segflow::io;
use segflow::losses::{
    self, edge_weights_from_image, edge_weights_from_segmentation, homography_smoothness,
    occlusion_fb, photometric_loss, smoothness_2nd, total_loss, HgNormalization, Norm,
    OcclusionMap, PhotometricConfig,
};
use segflow::masks::{
    read_key_object_cache, select_key_objects, write_key_object_cache, Segmentation,
};
use segflow::RawMaskSet;

/// Maximum per-axis magnitude of the pasted-object motion in pixels.
const OBJECT_MOTION_RANGE: i64 = 16;

#[derive(Parser, Debug)]
#[command(
    name = "segflow",
    version,
    about = "Segmentation-guided optical flow toolkit",
    after_help = "Worker count defaults to the SEGFLOW_WORKERS environment variable."
)]
pub struct Cli {
    /// Worker threads for parallel stages (default: SEGFLOW_WORKERS or all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert overlapping object masks to a full segmentation ID image.
    Segment(SegmentArgs),
    /// Refine flow regions with RANSAC homographies and report losses.
    Refine(RefineArgs),
    /// Select key objects from masks and cache their crops.
    Keyobjects(KeyObjectsArgs),
    /// Paste cached key objects into a sample and emit the exact flow target.
    Augment(AugmentArgs),
    /// Compute the combined loss report for a sample.
    Losses(LossesArgs),
    /// Sweep the boundary-weighted smoothness loss against horizontal shifts.
    Landscape(LandscapeArgs),
    /// Evaluate flow metrics with occlusion and foreground splits.
    Metrics(MetricsArgs),
}

/// "WxH" target dimensions.
#[derive(Debug, Clone, Copy)]
pub struct Resize {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Resize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
        let width = w.parse().map_err(|_| format!("bad width '{w}'"))?;
        let height = h.parse().map_err(|_| format!("bad height '{h}'"))?;
        if width == 0 || height == 0 {
            return Err("resize dimensions must be positive".into());
        }
        Ok(Resize { width, height })
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Default)]
pub enum NormArg {
    #[default]
    L1,
    L2,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Norm {
        match n {
            NormArg::L1 => Norm::L1,
            NormArg::L2 => Norm::L2,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Default)]
pub enum EdgeModeArg {
    /// Weights from image gradients.
    Image,
    /// Binary weights from segment boundaries.
    #[default]
    Sam,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default)]
pub enum HgNormArg {
    /// Average the homography loss over refined-region pixels.
    #[default]
    Region,
    /// Average the homography loss over all frame pixels.
    Frame,
}

impl From<HgNormArg> for HgNormalization {
    fn from(n: HgNormArg) -> HgNormalization {
        match n {
            HgNormArg::Region => HgNormalization::Region,
            HgNormArg::Frame => HgNormalization::Frame,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

/// Region-refinement thresholds (defaults follow the method's accept rules).
#[derive(Args, Debug, Clone, Copy)]
pub struct RefineFlags {
    /// Candidate regions per frame, ranked by occluded pixel count.
    #[arg(long, default_value_t = 6)]
    pub max_regions: usize,
    /// Minimum reliable (non-occluded) fraction of a region.
    #[arg(long, default_value_t = 0.2)]
    pub min_reliable: f64,
    /// Minimum RANSAC inlier ratio for acceptance.
    #[arg(long, default_value_t = 0.5)]
    pub min_inliers: f64,
    /// RANSAC reprojection threshold in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub reproj_thresh: f64,
    /// RANSAC iterations per region.
    #[arg(long, default_value_t = 2000)]
    pub ransac_iters: usize,
    /// Base PRNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RefineFlags {
    fn to_config(self) -> RefineConfig {
        RefineConfig {
            max_regions: self.max_regions,
            min_reliable: self.min_reliable,
            min_inliers: self.min_inliers,
            reproj_thresh: self.reproj_thresh,
            ransac_iters: self.ransac_iters,
            seed: self.seed,
        }
    }
}

/// Loss weighting and smoothness options.
#[derive(Args, Debug, Clone, Copy)]
pub struct LossFlags {
    /// Weight of the augmentation self-supervision loss.
    #[arg(long, default_value_t = losses::W_AUG)]
    pub w_aug: f64,
    /// Weight of the homography smoothness loss.
    #[arg(long, default_value_t = losses::W_HG)]
    pub w_hg: f64,
    /// Norm of the second-order smoothness stencil.
    #[arg(long, value_enum, default_value_t)]
    pub norm: NormArg,
    /// Source of the smoothness edge weights.
    #[arg(long, value_enum, default_value_t)]
    pub edge_mode: EdgeModeArg,
    /// Denominator of the homography smoothness loss.
    #[arg(long, value_enum, default_value_t)]
    pub hg_norm: HgNormArg,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    /// Mask records (JSON list with column-major RLE counts).
    #[arg(long)]
    pub masks: PathBuf,
    /// Grid width (defaults to the mask records' size).
    #[arg(long)]
    pub width: Option<usize>,
    /// Grid height (defaults to the mask records' size).
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub img1: PathBuf,
    #[arg(long)]
    pub img2: PathBuf,
    #[arg(long)]
    pub flow_fwd: PathBuf,
    #[arg(long)]
    pub flow_bwd: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Resize all inputs to WxH before processing.
    #[arg(long)]
    pub resize: Option<Resize>,
    /// Report format for the loss file.
    #[arg(long, value_enum, default_value_t)]
    pub format: ReportFormat,
    #[command(flatten)]
    pub refine: RefineFlags,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Args, Debug)]
pub struct KeyObjectsArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Resize the image and masks to WxH before selection.
    #[arg(long)]
    pub resize: Option<Resize>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub img1: PathBuf,
    #[arg(long)]
    pub img2: PathBuf,
    /// Base flow of the sample (.flo).
    #[arg(long)]
    pub flow: PathBuf,
    /// Key-object cache directory (written by `keyobjects`).
    #[arg(long)]
    pub objects: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Objects pasted into the sample.
    #[arg(long, default_value_t = 3)]
    pub max_objects: usize,
    /// Skip the affine transform pair.
    #[arg(long)]
    pub no_affine: bool,
    /// Resize all inputs to WxH before augmenting.
    #[arg(long)]
    pub resize: Option<Resize>,
}

#[derive(Args, Debug)]
pub struct LossesArgs {
    #[arg(long)]
    pub img1: PathBuf,
    #[arg(long)]
    pub img2: PathBuf,
    #[arg(long)]
    pub flow_fwd: PathBuf,
    #[arg(long)]
    pub flow_bwd: PathBuf,
    /// Mask records; enables the homography smoothness term.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Predicted flow on an augmented sample (.flo), for the aug term.
    #[arg(long)]
    pub aug_pred: Option<PathBuf>,
    /// Augmentation flow target (.flo), for the aug term.
    #[arg(long)]
    pub aug_target: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: ReportFormat,
    #[arg(long)]
    pub resize: Option<Resize>,
    #[command(flatten)]
    pub refine: RefineFlags,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(Args, Debug)]
pub struct LandscapeArgs {
    /// Flow patch (.flo).
    #[arg(long)]
    pub flow: PathBuf,
    /// Mask records defining the segmentation of the patch.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = -20.0)]
    pub min_shift: f64,
    #[arg(long, default_value_t = 20.0)]
    pub max_shift: f64,
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    /// Also render gradient-magnitude maps of the chosen kind.
    #[arg(long, value_enum)]
    pub grad: Option<GradArg>,
    /// Occlusion mask PNG (nonzero = occluded) for the homography gradient.
    #[arg(long)]
    pub occ: Option<PathBuf>,
    #[command(flatten)]
    pub refine: RefineFlags,
    #[command(flatten)]
    pub loss: LossFlags,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum GradArg {
    Traditional,
    Homography,
    Both,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Estimated flow (.flo or KITTI 16-bit .png).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth flow (.flo or KITTI 16-bit .png).
    #[arg(long)]
    pub gt: PathBuf,
    /// Non-occlusion mask PNG (nonzero = visible in both frames).
    #[arg(long)]
    pub noc: Option<PathBuf>,
    /// Foreground object mask PNG (nonzero = foreground).
    #[arg(long)]
    pub fg: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: ReportFormat,
}

/// Configures the global worker pool; safe to call once per process.
pub fn configure_workers(cli_workers: Option<usize>) {
    let from_env = std::env::var("SEGFLOW_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok());
    if let Some(n) = cli_workers.or(from_env) {
        // Ignore the error when a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Runs one command and returns its machine-readable summary line.
pub fn run(cli: Cli) -> Result<String> {
    configure_workers(cli.workers);
    match cli.command {
        Command::Segment(args) => cmd_segment(&args),
        Command::Refine(args) => cmd_refine(&args),
        Command::Keyobjects(args) => cmd_keyobjects(&args),
        Command::Augment(args) => cmd_augment(&args),
        Command::Losses(args) => cmd_losses(&args),
        Command::Landscape(args) => cmd_landscape(&args),
        Command::Metrics(args) => cmd_metrics(&args),
    }
}

fn read_flow_auto(path: &Path) -> Result<FlowField> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let flow = match ext.to_ascii_lowercase().as_str() {
        "png" => io::read_kitti_flow_png(path)?,
        _ => io::read_flo(path)?,
    };
    Ok(flow)
}

fn read_masks_resized(path: &Path, resize: Option<Resize>) -> Result<RawMaskSet> {
    let set = io::read_masks(path)?;
    match resize {
        Some(r) if !set.is_empty() => Ok(set.resize_nearest(r.width, r.height).0),
        _ => Ok(set),
    }
}

fn write_report(path_base: &Path, format: ReportFormat, fields: &[(&str, f64)]) -> Result<PathBuf> {
    let path = match format {
        ReportFormat::Csv => path_base.with_extension("csv"),
        ReportFormat::Json => path_base.with_extension("json"),
    };
    match format {
        ReportFormat::Csv => io::write_report_csv(&path, fields)?,
        ReportFormat::Json => io::write_report_json(&path, fields)?,
    }
    Ok(path)
}

#[derive(Serialize)]
struct SegmentStats {
    width: usize,
    height: usize,
    segments: usize,
    background: bool,
    background_id: Option<u32>,
    raw_masks: usize,
    segment_areas: Vec<usize>,
}

fn cmd_segment(args: &SegmentArgs) -> Result<String> {
    let set = io::read_masks(&args.masks).context("reading masks")?;
    let (width, height) = match (args.width, args.height) {
        (Some(w), Some(h)) => (w, h),
        _ if !set.is_empty() => (set.width(), set.height()),
        _ => bail!("empty mask file needs explicit --width and --height"),
    };
    let seg = Segmentation::build(&set, width, height)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let png = args.out_dir.join("segmentation.png");
    io::write_id_png(&png, seg.ids(), width, height)?;
    let stats = SegmentStats {
        width,
        height,
        segments: seg.segment_count(),
        background: seg.background_id().is_some(),
        background_id: seg.background_id(),
        raw_masks: set.len(),
        segment_areas: seg.segment_areas(),
    };
    std::fs::write(
        args.out_dir.join("segment_stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    Ok(format!(
        "segment ok segments={} background={} out={}",
        seg.segment_count(),
        seg.background_id().is_some(),
        png.display()
    ))
}

#[derive(Serialize)]
struct RegionRecord {
    segment_id: u32,
    occluded_pixels: usize,
    correspondences_used: usize,
    inlier_ratio: f64,
    reliable_fraction: f64,
    accepted: bool,
    reject_reason: Option<segflow::geometry::RejectReason>,
    homography: Option<[[f64; 3]; 3]>,
}

fn region_records(outcome: &RefineOutcome) -> Vec<RegionRecord> {
    outcome
        .regions
        .iter()
        .map(|r| RegionRecord {
            segment_id: r.segment_id,
            occluded_pixels: r.occluded_pixels,
            correspondences_used: r.correspondences_used,
            inlier_ratio: r.inlier_ratio,
            reliable_fraction: r.reliable_fraction,
            accepted: r.accepted,
            reject_reason: r.reject_reason,
            homography: r.homography.as_ref().map(|h| h.to_array()),
        })
        .collect()
}

struct RefineInputs {
    img1: Image,
    img2: Image,
    fwd: FlowField,
    bwd: FlowField,
    set: RawMaskSet,
}

fn load_refine_inputs(
    img1: &Path,
    img2: &Path,
    flow_fwd: &Path,
    flow_bwd: &Path,
    masks: Option<&Path>,
    resize: Option<Resize>,
) -> Result<RefineInputs> {
    let mut img1 = io::read_image_png(img1).context("reading img1")?;
    let mut img2 = io::read_image_png(img2).context("reading img2")?;
    let mut fwd = read_flow_auto(flow_fwd).context("reading forward flow")?;
    let mut bwd = read_flow_auto(flow_bwd).context("reading backward flow")?;
    if let Some(r) = resize {
        img1 = img1.resize(r.width, r.height);
        img2 = img2.resize(r.width, r.height);
        fwd = fwd.resize(r.width, r.height);
        bwd = bwd.resize(r.width, r.height);
    }
    let set = match masks {
        Some(path) => read_masks_resized(path, resize).context("reading masks")?,
        None => RawMaskSet::from_grids(fwd.width(), fwd.height(), vec![])?,
    };
    if (img1.width(), img1.height()) != (fwd.width(), fwd.height()) {
        bail!(
            "image {}x{} and flow {}x{} dimensions disagree",
            img1.width(),
            img1.height(),
            fwd.width(),
            fwd.height()
        );
    }
    Ok(RefineInputs {
        img1,
        img2,
        fwd,
        bwd,
        set,
    })
}

fn cmd_refine(args: &RefineArgs) -> Result<String> {
    let inputs = load_refine_inputs(
        &args.img1,
        &args.img2,
        &args.flow_fwd,
        &args.flow_bwd,
        Some(&args.masks),
        args.resize,
    )?;
    let (w, h) = (inputs.fwd.width(), inputs.fwd.height());
    let seg = Segmentation::build(&inputs.set, w, h)?;
    let occ = occlusion_fb(&inputs.fwd, &inputs.bwd, losses::FB_A1, losses::FB_A2)?;
    let outcome = refine_regions(&inputs.fwd, &seg, &occ, &args.refine.to_config())?;

    let ph = photometric_loss(
        &inputs.img1,
        &inputs.img2,
        &inputs.fwd,
        &inputs.bwd,
        &PhotometricConfig::default(),
    )?;
    let hg = homography_smoothness(
        &inputs.fwd,
        &outcome.refined,
        &outcome.region_mask,
        args.loss.hg_norm.into(),
    );
    let report = total_loss(ph.value, 0.0, hg.value, args.loss.w_aug, args.loss.w_hg)?;

    std::fs::create_dir_all(&args.out_dir)?;
    io::write_flo(&args.out_dir.join("refined.flo"), &outcome.refined)?;
    std::fs::write(
        args.out_dir.join("regions.json"),
        serde_json::to_string_pretty(&region_records(&outcome))?,
    )?;
    write_report(&args.out_dir.join("losses"), args.format, &report.fields())?;
    let accepted = outcome.regions.iter().filter(|r| r.accepted).count();
    Ok(format!(
        "refine ok regions={} accepted={} hg={} total={} out={}",
        outcome.regions.len(),
        accepted,
        io::format_sig9(report.hg),
        io::format_sig9(report.total),
        args.out_dir.display()
    ))
}

fn cmd_keyobjects(args: &KeyObjectsArgs) -> Result<String> {
    let mut img = io::read_image_png(&args.image).context("reading image")?;
    let set = read_masks_resized(&args.masks, args.resize)?;
    if let Some(r) = args.resize {
        img = img.resize(r.width, r.height);
    }
    let objects = select_key_objects(&set, &img)?;
    write_key_object_cache(&args.out_dir, &objects)?;
    Ok(format!(
        "keyobjects ok candidates={} selected={} out={}",
        set.len(),
        objects.len(),
        args.out_dir.display()
    ))
}

#[derive(Serialize)]
struct TransformMeta {
    translation: (f64, f64),
    rotation: f64,
    scale: f64,
    brightness: f64,
    contrast: f64,
}

impl From<&AugmentTransform> for TransformMeta {
    fn from(t: &AugmentTransform) -> Self {
        Self {
            translation: t.affine.translation,
            rotation: t.affine.rotation,
            scale: t.affine.scale,
            brightness: t.appearance.brightness,
            contrast: t.appearance.contrast,
        }
    }
}

#[derive(Serialize)]
struct AugmentMeta {
    seed: u64,
    objects_used: usize,
    motions: Vec<(i64, i64)>,
    affine_applied: bool,
    t1: Option<TransformMeta>,
    t2: Option<TransformMeta>,
}

fn write_augmented_sample(dir: &Path, sample: &AugmentedSample) -> Result<()> {
    io::write_image_png(&dir.join("aug_img1.png"), &sample.img1)?;
    io::write_image_png(&dir.join("aug_img2.png"), &sample.img2)?;
    io::write_flo(&dir.join("aug_flow.flo"), &sample.flow_target)?;
    let (w, h) = (sample.img1.width(), sample.img1.height());
    io::write_bool_png(&dir.join("aug_valid.png"), &sample.valid, w, h)?;
    io::write_bool_png(&dir.join("aug_occluded.png"), &sample.photo_occluded, w, h)?;
    Ok(())
}

fn cmd_augment(args: &AugmentArgs) -> Result<String> {
    use rand::{Rng, SeedableRng};
    let mut img1 = io::read_image_png(&args.img1)?;
    let mut img2 = io::read_image_png(&args.img2)?;
    let mut flow = read_flow_auto(&args.flow)?;
    if let Some(r) = args.resize {
        img1 = img1.resize(r.width, r.height);
        img2 = img2.resize(r.width, r.height);
        flow = flow.resize(r.width, r.height);
    }
    let objects = match &args.objects {
        Some(dir) => {
            let mut objs = read_key_object_cache(dir).context("reading key-object cache")?;
            objs.truncate(args.max_objects.min(segflow::augment::MAX_PASTED_OBJECTS));
            objs
        }
        None => Vec::new(),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let motions: Vec<(i64, i64)> = (0..objects.len())
        .map(|_| {
            (
                rng.random_range(-OBJECT_MOTION_RANGE..=OBJECT_MOTION_RANGE),
                rng.random_range(-OBJECT_MOTION_RANGE..=OBJECT_MOTION_RANGE),
            )
        })
        .collect();
    let pasted = paste_objects(&img1, &img2, &flow, &objects, &motions, args.seed)?;
    let (sample, t1, t2) = if args.no_affine {
        (pasted, None, None)
    } else {
        let (t1, t2) = sample_transforms(args.seed.wrapping_add(1), &AugmentConfig::default());
        (apply_affine_pair(&pasted, &t1, &t2)?, Some(t1), Some(t2))
    };
    std::fs::create_dir_all(&args.out_dir)?;
    write_augmented_sample(&args.out_dir, &sample)?;
    let meta = AugmentMeta {
        seed: args.seed,
        objects_used: objects.len(),
        motions,
        affine_applied: !args.no_affine,
        t1: t1.as_ref().map(TransformMeta::from),
        t2: t2.as_ref().map(TransformMeta::from),
    };
    std::fs::write(
        args.out_dir.join("aug_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    let valid = sample.valid.iter().filter(|&&b| b).count();
    Ok(format!(
        "augment ok objects={} valid_px={} seed={} out={}",
        objects.len(),
        valid,
        args.seed,
        args.out_dir.display()
    ))
}

fn cmd_losses(args: &LossesArgs) -> Result<String> {
    let inputs = load_refine_inputs(
        &args.img1,
        &args.img2,
        &args.flow_fwd,
        &args.flow_bwd,
        args.masks.as_deref(),
        args.resize,
    )?;
    let (w, h) = (inputs.fwd.width(), inputs.fwd.height());

    let ph = photometric_loss(
        &inputs.img1,
        &inputs.img2,
        &inputs.fwd,
        &inputs.bwd,
        &PhotometricConfig::default(),
    )?;

    let aug = match (&args.aug_pred, &args.aug_target) {
        (Some(pred), Some(target)) => {
            let pred = read_flow_auto(pred)?;
            let target = read_flow_auto(target)?;
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..target.u().len() {
                if target.is_valid(i) {
                    total +=
                        (pred.u()[i] - target.u()[i]).abs() + (pred.v()[i] - target.v()[i]).abs();
                    count += 1;
                }
            }
            if count > 0 {
                total / count as f64
            } else {
                0.0
            }
        }
        _ => 0.0,
    };

    let seg = Segmentation::build(&inputs.set, w, h)?;
    let occ = occlusion_fb(&inputs.fwd, &inputs.bwd, losses::FB_A1, losses::FB_A2)?;
    let hg = if args.masks.is_some() {
        let outcome = refine_regions(&inputs.fwd, &seg, &occ, &args.refine.to_config())?;
        homography_smoothness(
            &inputs.fwd,
            &outcome.refined,
            &outcome.region_mask,
            args.loss.hg_norm.into(),
        )
        .value
    } else {
        0.0
    };

    let report = total_loss(ph.value, aug, hg, args.loss.w_aug, args.loss.w_hg)?;
    // Informational second-order smoothness with the selected edge weights.
    let weights = match args.loss.edge_mode {
        EdgeModeArg::Image => edge_weights_from_image(&inputs.img1, losses::EDGE_LAMBDA),
        EdgeModeArg::Sam => edge_weights_from_segmentation(&seg),
    };
    let smooth = smoothness_2nd(&inputs.fwd, &weights, args.loss.norm.into());

    std::fs::create_dir_all(&args.out_dir)?;
    let mut fields = report.fields().to_vec();
    fields.push(("smooth_2nd", smooth));
    let path = write_report(&args.out_dir.join("losses"), args.format, &fields)?;
    Ok(format!(
        "losses ok ph={} aug={} hg={} total={} out={}",
        io::format_sig9(report.ph),
        io::format_sig9(report.aug),
        io::format_sig9(report.hg),
        io::format_sig9(report.total),
        path.display()
    ))
}

fn cmd_landscape(args: &LandscapeArgs) -> Result<String> {
    let flow = read_flow_auto(&args.flow)?;
    let set = io::read_masks(&args.masks)?;
    let (w, h) = (flow.width(), flow.height());
    let seg = Segmentation::build(&set, w, h)?;
    let cfg = SweepConfig {
        min_shift: args.min_shift,
        max_shift: args.max_shift,
        step: args.step,
        norm: args.loss.norm.into(),
    };
    if !(cfg.min_shift <= 0.0 && cfg.max_shift >= 0.0) {
        bail!(
            "shift range [{}, {}] must cover 0",
            cfg.min_shift,
            cfg.max_shift
        );
    }
    let curve = landscape_sweep(&flow, &seg, &cfg);

    std::fs::create_dir_all(&args.out_dir)?;
    let mut csv = String::from("shift,loss\n");
    for (s, l) in curve.shifts.iter().zip(&curve.losses) {
        let _ = writeln!(csv, "{},{}", io::format_sig9(*s), io::format_sig9(*l));
    }
    std::fs::write(args.out_dir.join("landscape.csv"), csv)?;

    if let Some(grad) = args.grad {
        let occ = match &args.occ {
            Some(path) => {
                let (mask, mw, mh) = io::read_bool_png(path)?;
                if (mw, mh) != (w, h) {
                    bail!(
                        "occlusion mask {}x{} does not match flow {}x{}",
                        mw,
                        mh,
                        w,
                        h
                    );
                }
                OcclusionMap { occluded: mask }
            }
            None => OcclusionMap::none(w, h),
        };
        let kinds: &[(GradientKind, &str)] = match grad {
            GradArg::Traditional => &[(GradientKind::Traditional, "traditional")],
            GradArg::Homography => &[(GradientKind::Homography, "homography")],
            GradArg::Both => &[
                (GradientKind::Traditional, "traditional"),
                (GradientKind::Homography, "homography"),
            ],
        };
        for &(kind, name) in kinds {
            let map = gradient_field_map(
                &flow,
                &seg,
                &occ,
                kind,
                args.loss.norm.into(),
                &args.refine.to_config(),
            )?;
            io::write_image_png(
                &args.out_dir.join(format!("grad_{name}.png")),
                &map.magnitude,
            )?;
            io::write_flo(&args.out_dir.join(format!("grad_{name}.flo")), &map.raw)?;
        }
    }
    Ok(format!(
        "landscape ok points={} argmin_shift={} out={}",
        curve.shifts.len(),
        io::format_sig9(curve.argmin_shift),
        args.out_dir.display()
    ))
}

fn cmd_metrics(args: &MetricsArgs) -> Result<String> {
    let est = read_flow_auto(&args.est)?;
    let gt = read_flow_auto(&args.gt)?;
    let occluded: Option<Vec<bool>> = match &args.noc {
        Some(path) => {
            let (noc, w, h) = io::read_bool_png(path)?;
            if (w, h) != (gt.width(), gt.height()) {
                bail!(
                    "noc mask {}x{} does not match flow {}x{}",
                    w,
                    h,
                    gt.width(),
                    gt.height()
                );
            }
            Some(noc.iter().map(|&v| !v).collect())
        }
        None => None,
    };
    let fg: Option<Vec<bool>> = match &args.fg {
        Some(path) => {
            let (fg, w, h) = io::read_bool_png(path)?;
            if (w, h) != (gt.width(), gt.height()) {
                bail!(
                    "fg mask {}x{} does not match flow {}x{}",
                    w,
                    h,
                    gt.width(),
                    gt.height()
                );
            }
            Some(fg)
        }
        None => None,
    };
    let report = metrics_with_splits(&est, &gt, occluded.as_deref(), fg.as_deref())?;
    std::fs::create_dir_all(&args.out_dir)?;
    let path = write_report(&args.out_dir.join("metrics"), args.format, &report.fields())?;
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    Ok(format!(
        "metrics ok epe_all={} fl_all={} out={}",
        io::format_sig9(report.epe_all),
        io::format_sig9(report.fl_all),
        path.display()
    ))
}
