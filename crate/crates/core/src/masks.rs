//! Converts raw overlapping object masks to a full segmentation, computes
//! overlap statistics, selects key objects, and extracts boundaries.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Image;

/// Errors from mask processing.
#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask {index} is empty")]
    EmptyMask { index: usize },
    #[error("mask {index} sized {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("mask grid length {got} != {want}")]
    BadGridLength { got: usize, want: usize },
    #[error("too many segments for 16-bit IDs: {0}")]
    TooManySegments(usize),
    #[error("key-object cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tight bounding box in pixels, `x`/`y` at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One binary object mask with its precomputed area and tight bounding box.
#[derive(Debug, Clone)]
pub struct RawMask {
    grid: Vec<bool>,
    area: usize,
    bbox: BBox,
}

impl RawMask {
    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }
}

/// A set of possibly-overlapping binary object masks over one H x W grid.
///
/// Pixels may belong to zero, one, or many masks. Every stored mask is
/// non-empty with a consistent area and tight bounding box.
#[derive(Debug, Clone)]
pub struct RawMaskSet {
    width: usize,
    height: usize,
    masks: Vec<RawMask>,
}

/// Computes area and tight bbox of a grid; `None` when the grid is all-false.
pub(crate) fn grid_stats(grid: &[bool], width: usize, height: usize) -> Option<(usize, BBox)> {
    let mut area = 0usize;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..height {
        for x in 0..width {
            if grid[y * width + x] {
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if area == 0 {
        return None;
    }
    Some((
        area,
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        },
    ))
}

impl RawMaskSet {
    /// Builds a set from boolean grids, rejecting empty masks.
    pub fn from_grids(
        width: usize,
        height: usize,
        grids: Vec<Vec<bool>>,
    ) -> Result<Self, MaskError> {
        let mut masks = Vec::with_capacity(grids.len());
        for (index, grid) in grids.into_iter().enumerate() {
            if grid.len() != width * height {
                return Err(MaskError::BadGridLength {
                    got: grid.len(),
                    want: width * height,
                });
            }
            let (area, bbox) =
                grid_stats(&grid, width, height).ok_or(MaskError::EmptyMask { index })?;
            masks.push(RawMask { grid, area, bbox });
        }
        Ok(Self {
            width,
            height,
            masks,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[RawMask] {
        &self.masks
    }

    /// Nearest-neighbor resize of every mask. Masks that lose all pixels are
    /// dropped; the second return value counts them.
    pub fn resize_nearest(&self, new_width: usize, new_height: usize) -> (RawMaskSet, usize) {
        assert!(new_width > 0 && new_height > 0, "resize to empty grid");
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
        let mut grids = Vec::with_capacity(self.masks.len());
        let mut dropped = 0usize;
        for m in &self.masks {
            let mut g = Vec::with_capacity(new_width * new_height);
            for y in 0..new_height {
                for x in 0..new_width {
                    let src_x = (x as f64 * sx).round() as usize;
                    let src_y = (y as f64 * sy).round() as usize;
                    g.push(m.grid[src_y * self.width + src_x]);
                }
            }
            if g.iter().any(|&b| b) {
                grids.push(g);
            } else {
                dropped += 1;
            }
        }
        let set = RawMaskSet::from_grids(new_width, new_height, grids).expect("non-empty grids");
        (set, dropped)
    }
}

/// Where a segment of the full segmentation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentSource {
    /// Index into the originating raw-mask set.
    Mask(usize),
    /// Pixels not covered by any raw mask.
    Background,
}

/// A per-pixel partition into segments with contiguous IDs `0..S`.
///
/// Built from overlapping raw masks by assigning each covered pixel to its
/// smallest-area covering mask (ties to the lower raw-mask index) and
/// collecting uncovered pixels into a background segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    sources: Vec<SegmentSource>,
    background_id: Option<u32>,
}

impl Segmentation {
    /// Builds the full segmentation of `set` over a `width` x `height` grid.
    pub fn build(set: &RawMaskSet, width: usize, height: usize) -> Result<Self, MaskError> {
        if (set.width, set.height) != (width, height) && !set.is_empty() {
            return Err(MaskError::DimensionMismatch {
                index: 0,
                got_w: set.width,
                got_h: set.height,
                want_w: width,
                want_h: height,
            });
        }
        let n_px = width * height;
        // Paint in ascending (area, index) order without overwriting, which
        // realizes the smallest-area rule with the lower-index tie-break.
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.sort_by_key(|&k| (set.masks[k].area, k));

        const UNASSIGNED: u32 = u32::MAX;
        let mut provisional = vec![UNASSIGNED; n_px];
        let mut pixel_counts = vec![0usize; set.len().max(1)];
        for (slot, &k) in order.iter().enumerate() {
            let grid = &set.masks[k].grid;
            for i in 0..n_px {
                if grid[i] && provisional[i] == UNASSIGNED {
                    provisional[i] = slot as u32;
                    pixel_counts[slot] += 1;
                }
            }
        }

        // Compact to contiguous IDs, dropping masks that lost every pixel.
        let mut slot_to_id = vec![UNASSIGNED; set.len().max(1)];
        let mut sources = Vec::new();
        for (slot, &k) in order.iter().enumerate() {
            if pixel_counts[slot] > 0 {
                slot_to_id[slot] = sources.len() as u32;
                sources.push(SegmentSource::Mask(k));
            }
        }
        let uncovered = provisional.contains(&UNASSIGNED);
        let background_id = if uncovered {
            sources.push(SegmentSource::Background);
            Some(sources.len() as u32 - 1)
        } else {
            None
        };
        if sources.len() > u16::MAX as usize + 1 {
            return Err(MaskError::TooManySegments(sources.len()));
        }
        let ids = provisional
            .into_iter()
            .map(|p| {
                if p == UNASSIGNED {
                    background_id.unwrap()
                } else {
                    slot_to_id[p as usize]
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            ids,
            sources,
            background_id,
        })
    }

    /// Rebuilds a segmentation from a stored ID grid and segment count, e.g.
    /// after reading a 16-bit ID image back from disk.
    pub fn from_ids(
        width: usize,
        height: usize,
        ids: Vec<u32>,
        segment_count: usize,
    ) -> Result<Self, MaskError> {
        if ids.len() != width * height {
            return Err(MaskError::BadGridLength {
                got: ids.len(),
                want: width * height,
            });
        }
        if ids.iter().any(|&id| id as usize >= segment_count) {
            return Err(MaskError::Cache("segment ID out of range".into()));
        }
        let sources = (0..segment_count).map(SegmentSource::Mask).collect();
        Ok(Self {
            width,
            height,
            ids,
            sources,
            background_id: None,
        })
    }

    /// Same segment table over a new ID grid (used by downsampling).
    pub(crate) fn with_ids(&self, width: usize, height: usize, ids: Vec<u32>) -> Segmentation {
        assert_eq!(ids.len(), width * height);
        Segmentation {
            width,
            height,
            ids,
            sources: self.sources.clone(),
            background_id: self.background_id,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Number of segments in the partition (including background if any).
    pub fn segment_count(&self) -> usize {
        self.sources.len()
    }

    pub fn background_id(&self) -> Option<u32> {
        self.background_id
    }

    /// Originating raw mask of each segment ID.
    pub fn sources(&self) -> &[SegmentSource] {
        &self.sources
    }

    /// Pixel count of every segment ID.
    pub fn segment_areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.sources.len()];
        for &id in &self.ids {
            areas[id as usize] += 1;
        }
        areas
    }
}

/// Per-mask count of other masks it intersects.
///
/// Masks are compared through packed 64-bit words after a bounding-box
/// prefilter, so large mostly-disjoint sets stay cheap.
pub fn overlap_counts(set: &RawMaskSet) -> Vec<usize> {
    let n = set.len();
    let n_px = set.width * set.height;
    let words = n_px.div_ceil(64);
    let packed: Vec<Vec<u64>> = set
        .masks
        .iter()
        .map(|m| {
            let mut bits = vec![0u64; words];
            for (i, &b) in m.grid.iter().enumerate() {
                if b {
                    bits[i / 64] |= 1 << (i % 64);
                }
            }
            bits
        })
        .collect();
    let mut counts = vec![0usize; n];
    for a in 0..n {
        for b in a + 1..n {
            let (ba, bb) = (set.masks[a].bbox, set.masks[b].bbox);
            let boxes_meet = ba.x < bb.x + bb.w
                && bb.x < ba.x + ba.w
                && ba.y < bb.y + bb.h
                && bb.y < ba.y + ba.h;
            if !boxes_meet {
                continue;
            }
            if packed[a].iter().zip(&packed[b]).any(|(x, y)| x & y != 0) {
                counts[a] += 1;
                counts[b] += 1;
            }
        }
    }
    counts
}

/// A selected key object: its mask and image crop plus selection statistics.
#[derive(Debug, Clone)]
pub struct KeyObject {
    /// Binary mask cropped to the bounding box (row-major h x w).
    pub mask: Vec<bool>,
    /// Image crop over the bounding box.
    pub image_crop: Image,
    pub bbox: BBox,
    pub overlap_count: usize,
}

/// Bounding-box dimension gates for key objects.
const KEY_MIN_H: usize = 50;
const KEY_MAX_H: usize = 200;
const KEY_MIN_W: usize = 50;
const KEY_MAX_W: usize = 400;
/// Minimum mask area as a fraction of its bounding-box area.
const KEY_MIN_FILL: f64 = 0.5;
/// Minimum number of other masks a key object must intersect.
const KEY_MIN_OVERLAPS: usize = 5;

/// Selects key objects: bounding box within the dimension gates, mask filling
/// at least half of its box, and intersecting at least five other masks.
///
/// Returned objects are sorted by overlap count descending (ties keep raw
/// mask order) and carry their image and mask crops.
pub fn select_key_objects(set: &RawMaskSet, img: &Image) -> Result<Vec<KeyObject>, MaskError> {
    if !set.is_empty() && (img.width() != set.width || img.height() != set.height) {
        return Err(MaskError::DimensionMismatch {
            index: 0,
            got_w: img.width(),
            got_h: img.height(),
            want_w: set.width,
            want_h: set.height,
        });
    }
    let overlaps = overlap_counts(set);
    let mut selected = Vec::new();
    for (k, m) in set.masks.iter().enumerate() {
        let BBox { x, y, w, h } = m.bbox;
        if !(KEY_MIN_H..=KEY_MAX_H).contains(&h) || !(KEY_MIN_W..=KEY_MAX_W).contains(&w) {
            continue;
        }
        if (m.area as f64) < KEY_MIN_FILL * (w * h) as f64 {
            continue;
        }
        if overlaps[k] < KEY_MIN_OVERLAPS {
            continue;
        }
        let mut mask = Vec::with_capacity(w * h);
        let mut crop = Vec::with_capacity(w * h * img.channels());
        for yy in y..y + h {
            for xx in x..x + w {
                mask.push(m.grid[yy * set.width + xx]);
                for c in 0..img.channels() {
                    crop.push(img.at(xx, yy, c));
                }
            }
        }
        let image_crop = Image::new(w, h, img.channels(), crop).expect("crop of valid image");
        selected.push(KeyObject {
            mask,
            image_crop,
            bbox: m.bbox,
            overlap_count: overlaps[k],
        });
    }
    selected.sort_by_key(|o| std::cmp::Reverse(o.overlap_count));
    Ok(selected)
}

/// Marks pixels whose right or down 4-neighbor has a different segment ID
/// (boundaries sit on the upper/left pixel).
pub fn boundary_map(seg: &Segmentation) -> Vec<bool> {
    let (w, h) = (seg.width(), seg.height());
    let mut boundary = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let id = seg.id_at(x, y);
            if (x + 1 < w && seg.id_at(x + 1, y) != id) || (y + 1 < h && seg.id_at(x, y + 1) != id)
            {
                boundary[y * w + x] = true;
            }
        }
    }
    boundary
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    rgb: String,
    mask: String,
    bbox: [usize; 4],
    overlap_count: usize,
}

/// Writes key objects to a cache directory: `obj_<k>_rgb.png`,
/// `obj_<k>_mask.png`, and an `index.json` listing bboxes and overlap counts.
pub fn write_key_object_cache(dir: &Path, objects: &[KeyObject]) -> Result<(), MaskError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(objects.len());
    for (k, obj) in objects.iter().enumerate() {
        let rgb = format!("obj_{k}_rgb.png");
        let mask = format!("obj_{k}_mask.png");
        crate::io::write_image_png(&dir.join(&rgb), &obj.image_crop)
            .map_err(|e| MaskError::Cache(e.to_string()))?;
        crate::io::write_bool_png(&dir.join(&mask), &obj.mask, obj.bbox.w, obj.bbox.h)
            .map_err(|e| MaskError::Cache(e.to_string()))?;
        entries.push(CacheEntry {
            rgb,
            mask,
            bbox: [obj.bbox.x, obj.bbox.y, obj.bbox.w, obj.bbox.h],
            overlap_count: obj.overlap_count,
        });
    }
    let json =
        serde_json::to_string_pretty(&entries).map_err(|e| MaskError::Cache(e.to_string()))?;
    std::fs::write(dir.join("index.json"), json)?;
    Ok(())
}

/// Reads a key-object cache directory written by [`write_key_object_cache`].
pub fn read_key_object_cache(dir: &Path) -> Result<Vec<KeyObject>, MaskError> {
    let text = std::fs::read_to_string(dir.join("index.json"))?;
    let entries: Vec<CacheEntry> =
        serde_json::from_str(&text).map_err(|e| MaskError::Cache(e.to_string()))?;
    let mut objects = Vec::with_capacity(entries.len());
    for e in entries {
        let image_crop = crate::io::read_image_png(&dir.join(&e.rgb))
            .map_err(|err| MaskError::Cache(err.to_string()))?;
        let (mask, mw, mh) = crate::io::read_bool_png(&dir.join(&e.mask))
            .map_err(|err| MaskError::Cache(err.to_string()))?;
        let bbox = BBox {
            x: e.bbox[0],
            y: e.bbox[1],
            w: e.bbox[2],
            h: e.bbox[3],
        };
        if (mw, mh) != (bbox.w, bbox.h)
            || (image_crop.width(), image_crop.height()) != (bbox.w, bbox.h)
        {
            return Err(MaskError::Cache(
                "crop dimensions disagree with bbox".into(),
            ));
        }
        objects.push(KeyObject {
            mask,
            image_crop,
            bbox,
            overlap_count: e.overlap_count,
        });
    }
    Ok(objects)
}
