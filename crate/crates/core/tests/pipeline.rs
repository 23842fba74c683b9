//! Cross-module pipelines: augmentation consistency against the photometric
//! loss, and mask files flowing through segmentation into the pooled
//! feature operators.

use segflow::augment::{
    apply_affine_pair, paste_objects, AffineTransform, AppearanceJitter, AugmentTransform,
};
use segflow::grid::{downsample_segmentation, FlowField, Image};
use segflow::io;
use segflow::losses::{photometric_loss, PhotometricConfig};
use segflow::maskfeat::{segment_max_pool, FeatureMap};
use segflow::masks::{BBox, KeyObject, RawMaskSet, Segmentation};

fn textured_image(w: usize, h: usize) -> Image {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let v = 0.5 + 0.15 * ((x as f64) * 0.8).sin() + 0.1 * ((y as f64) * 0.6).cos();
            data.push(v.clamp(0.3, 0.7));
        }
    }
    Image::new(w, h, 1, data).unwrap()
}

/// Object whose two intensities never occur in the textured background, so
/// its footprint can be recovered from the composited frames.
fn marker_object(w: usize, h: usize) -> KeyObject {
    let data: Vec<f64> = (0..w * h)
        .map(|i| if (i / 3) % 2 == 0 { 0.95 } else { 0.05 })
        .collect();
    KeyObject {
        mask: vec![true; w * h],
        image_crop: Image::new(w, h, 1, data).unwrap(),
        bbox: BBox { x: 0, y: 0, w, h },
        overlap_count: 5,
    }
}

fn is_marker(v: f64) -> bool {
    !(0.1..=0.9).contains(&v)
}

/// Backward flow consistent with a sample whose only motions are `delta` on
/// the marker object and `carrier` everywhere else.
fn backward_flow_for(sample_img2: &Image, delta: (f64, f64), carrier: (f64, f64)) -> FlowField {
    let (w, h) = (sample_img2.width(), sample_img2.height());
    let mut bwd = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if is_marker(sample_img2.at(x, y, 0)) {
                bwd.set(x, y, -(delta.0 + carrier.0), -(delta.1 + carrier.1));
            } else {
                bwd.set(x, y, -carrier.0, -carrier.1);
            }
        }
    }
    bwd
}

#[test]
fn augmented_flow_target_beats_zero_flow_photometrically() {
    let (w, h) = (64usize, 48usize);
    let img = textured_image(w, h);
    let base = FlowField::zeros(w, h);
    let delta = (5i64, 3i64);
    let sample = paste_objects(&img, &img, &base, &[marker_object(12, 10)], &[delta], 2).unwrap();

    let bwd = backward_flow_for(&sample.img2, (delta.0 as f64, delta.1 as f64), (0.0, 0.0));
    let cfg = PhotometricConfig::default();
    let with_target =
        photometric_loss(&sample.img1, &sample.img2, &sample.flow_target, &bwd, &cfg).unwrap();
    let zero = FlowField::zeros(w, h);
    let with_zero = photometric_loss(&sample.img1, &sample.img2, &zero, &zero, &cfg).unwrap();
    assert!(
        with_target.value <= with_zero.value,
        "target flow {} must not lose to zero flow {}",
        with_target.value,
        with_zero.value
    );
    assert!(
        with_zero.value > 0.0,
        "the pasted motion must be visible to the loss"
    );
}

#[test]
fn affine_pair_keeps_flow_target_photometrically_consistent() {
    let (w, h) = (64usize, 48usize);
    let img = textured_image(w, h);
    let base = FlowField::zeros(w, h);
    let delta = (4i64, 0i64);
    let pasted = paste_objects(&img, &img, &base, &[marker_object(12, 10)], &[delta], 7).unwrap();

    let identity = AugmentTransform::identity();
    let shift = AugmentTransform {
        affine: AffineTransform {
            translation: (2.0, 0.0),
            rotation: 0.0,
            scale: 1.0,
        },
        appearance: AppearanceJitter::identity(),
    };
    let sample = apply_affine_pair(&pasted, &identity, &shift).unwrap();

    let bwd = backward_flow_for(&sample.img2, (delta.0 as f64, delta.1 as f64), (2.0, 0.0));
    let cfg = PhotometricConfig::default();
    let with_target =
        photometric_loss(&sample.img1, &sample.img2, &sample.flow_target, &bwd, &cfg).unwrap();
    let zero = FlowField::zeros(w, h);
    let with_zero = photometric_loss(&sample.img1, &sample.img2, &zero, &zero, &cfg).unwrap();
    assert!(
        with_target.value <= with_zero.value,
        "composed target {} must not lose to zero flow {}",
        with_target.value,
        with_zero.value
    );
}

#[test]
fn mask_file_to_pooled_features_by_level() {
    // Masks from disk become a segmentation, survive downsampling to a
    // coarser level, and drive segment pooling there.
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (16usize, 12usize);
    let mut inner = vec![false; w * h];
    let mut outer = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if (2..10).contains(&x) && (2..10).contains(&y) {
                outer[y * w + x] = true;
            }
            if (4..7).contains(&x) && (4..7).contains(&y) {
                inner[y * w + x] = true;
            }
        }
    }
    let set = RawMaskSet::from_grids(w, h, vec![outer, inner]).unwrap();
    let path = dir.path().join("masks.json");
    io::write_masks(&path, &set).unwrap();

    let read_back = io::read_masks(&path).unwrap();
    let seg = Segmentation::build(&read_back, w, h).unwrap();
    assert_eq!(seg.segment_count(), 3); // inner, outer remainder, background

    let coarse = downsample_segmentation(&seg, 2).unwrap();
    assert_eq!((coarse.width(), coarse.height()), (8, 6));

    let features = FeatureMap::new(
        8,
        6,
        2,
        (0..8 * 6 * 2).map(|i| (i as f64 * 0.37).sin()).collect(),
    );
    let pooled = segment_max_pool(&features, &coarse).unwrap();
    // Pixels of the same coarse segment share the pooled vector.
    for y in 0..6 {
        for x in 0..8 {
            for yy in 0..6 {
                for xx in 0..8 {
                    if coarse.id_at(x, y) == coarse.id_at(xx, yy) {
                        assert_eq!(pooled.vector(x, y), pooled.vector(xx, yy));
                    }
                }
            }
        }
    }
}
