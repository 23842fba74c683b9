//! Segment-pooled feature operators with fixed weights: per-segment channel
//! max-pooling, the pooled-feature concatenation block, and the 9x9
//! correlation volume.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::Segmentation;

/// Errors from feature operators and weight files.
#[derive(Debug, Error)]
pub enum MaskFeatError {
    #[error("channel mismatch: got {got}, expected {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("weight file: {0}")]
    WeightFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A dense per-pixel real feature map, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert!(channels > 0, "channels must be positive");
        assert_eq!(data.len(), width * height * channels);
        assert!(
            data.iter().all(|v| v.is_finite()),
            "features must be finite"
        );
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![0.0; width * height * channels],
        )
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

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Per-pixel feature vector.
    #[inline]
    pub fn vector(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channel-wise concatenation of two maps with equal dimensions.
    pub fn concat(&self, other: &FeatureMap) -> Result<FeatureMap, MaskFeatError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(MaskFeatError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.width * self.height * channels);
        for i in 0..self.width * self.height {
            data.extend_from_slice(&self.data[i * self.channels..(i + 1) * self.channels]);
            data.extend_from_slice(&other.data[i * other.channels..(i + 1) * other.channels]);
        }
        Ok(FeatureMap {
            width: self.width,
            height: self.height,
            channels,
            data,
        })
    }
}

/// A fixed 1x1 convolution: per-pixel linear map plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseTransform {
    in_channels: usize,
    out_channels: usize,
    /// Row-major out_channels x in_channels.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl PointwiseTransform {
    pub fn new(in_channels: usize, out_channels: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), in_channels * out_channels);
        assert_eq!(bias.len(), out_channels);
        assert!(weight.iter().chain(bias.iter()).all(|v| v.is_finite()));
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    /// Seeded random parameters, uniform in [-0.5, 0.5] scaled by fan-in.
    pub fn seeded(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_channels as f64).sqrt();
        let weight = (0..in_channels * out_channels)
            .map(|_| rng.random_range(-0.5..0.5) * scale)
            .collect();
        let bias = (0..out_channels)
            .map(|_| rng.random_range(-0.1..0.1))
            .collect();
        Self::new(in_channels, out_channels, weight, bias)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Applies the transform at every pixel.
    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap, MaskFeatError> {
        if f.channels != self.in_channels {
            return Err(MaskFeatError::ChannelMismatch {
                got: f.channels,
                expected: self.in_channels,
            });
        }
        let mut data = Vec::with_capacity(f.width * f.height * self.out_channels);
        for i in 0..f.width * f.height {
            let input = &f.data[i * f.channels..(i + 1) * f.channels];
            for o in 0..self.out_channels {
                let row = &self.weight[o * self.in_channels..(o + 1) * self.in_channels];
                let mut acc = self.bias[o];
                for (w, x) in row.iter().zip(input) {
                    acc += w * x;
                }
                data.push(acc);
            }
        }
        Ok(FeatureMap {
            width: f.width,
            height: f.height,
            channels: self.out_channels,
            data,
        })
    }
}

fn relu(f: FeatureMap) -> FeatureMap {
    let data = f.data.iter().map(|&v| v.max(0.0)).collect();
    FeatureMap { data, ..f }
}

/// Max-pools each channel within every segment and broadcasts the pooled
/// value back to all pixels of that segment.
pub fn segment_max_pool(f: &FeatureMap, seg: &Segmentation) -> Result<FeatureMap, MaskFeatError> {
    if (f.width, f.height) != (seg.width(), seg.height()) {
        return Err(MaskFeatError::DimensionMismatch(
            f.width,
            f.height,
            seg.width(),
            seg.height(),
        ));
    }
    let n_seg = seg.segment_count();
    let mut pooled = vec![f64::NEG_INFINITY; n_seg * f.channels];
    for i in 0..f.width * f.height {
        let s = seg.ids()[i] as usize * f.channels;
        for c in 0..f.channels {
            let v = f.data[i * f.channels + c];
            if v > pooled[s + c] {
                pooled[s + c] = v;
            }
        }
    }
    let mut data = Vec::with_capacity(f.data.len());
    for i in 0..f.width * f.height {
        let s = seg.ids()[i] as usize * f.channels;
        data.extend_from_slice(&pooled[s..s + f.channels]);
    }
    Ok(FeatureMap {
        width: f.width,
        height: f.height,
        channels: f.channels,
        data,
    })
}

/// Options for [`mask_feature`].
#[derive(Debug, Clone, Copy)]
pub struct MaskFeatureConfig {
    /// Apply a relu before pooling (the max then acts on a rectified
    /// feature space). Disable to pool the raw linear features.
    pub relu_before_pool: bool,
}

impl Default for MaskFeatureConfig {
    fn default() -> Self {
        Self {
            relu_before_pool: true,
        }
    }
}

/// The segment-feature block: h = relu(t1(f)); pooled = segment max of h;
/// g = relu(t2(concat(h, pooled))).
///
/// Invariant to any permutation of segment IDs, since pooling only groups
/// pixels by ID.
pub fn mask_feature(
    f: &FeatureMap,
    seg: &Segmentation,
    t1: &PointwiseTransform,
    t2: &PointwiseTransform,
    cfg: &MaskFeatureConfig,
) -> Result<FeatureMap, MaskFeatError> {
    let h = t1.apply(f)?;
    let h = if cfg.relu_before_pool { relu(h) } else { h };
    let pooled = segment_max_pool(&h, seg)?;
    let cat = h.concat(&pooled)?;
    if t2.in_channels != cat.channels {
        return Err(MaskFeatError::ChannelMismatch {
            got: cat.channels,
            expected: t2.in_channels,
        });
    }
    Ok(relu(t2.apply(&cat)?))
}

/// Correlation window radius: a 9x9 neighborhood, 81 output channels.
pub const CORRELATION_RADIUS: usize = 4;

/// Correlation volume between a feature map and a warped feature map.
///
/// Channel k(dx, dy) = (dy + r) * (2r + 1) + (dx + r) holds the dot product
/// of f1 at p with f2w at p + (dx, dy), normalized by the channel count.
/// Out-of-range neighbors contribute zero.
pub fn correlation_volume(
    f1: &FeatureMap,
    f2w: &FeatureMap,
    radius: usize,
) -> Result<FeatureMap, MaskFeatError> {
    if (f1.width, f1.height) != (f2w.width, f2w.height) {
        return Err(MaskFeatError::DimensionMismatch(
            f1.width, f1.height, f2w.width, f2w.height,
        ));
    }
    if f1.channels != f2w.channels {
        return Err(MaskFeatError::ChannelMismatch {
            got: f2w.channels,
            expected: f1.channels,
        });
    }
    let side = 2 * radius + 1;
    let out_channels = side * side;
    let (w, h) = (f1.width, f1.height);
    let mut data = vec![0.0; w * h * out_channels];
    let r = radius as isize;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * out_channels;
            let a = f1.vector(x, y);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let b = f2w.vector(nx as usize, ny as usize);
                    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    let k = ((dy + r) * side as isize + (dx + r)) as usize;
                    data[base + k] = dot / f1.channels as f64;
                }
            }
        }
    }
    Ok(FeatureMap {
        width: w,
        height: h,
        channels: out_channels,
        data,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    tensors: Vec<TensorInfo>,
}

/// A named tensor as stored in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Writes tensors as a single-line JSON header (names, shapes) followed by
/// the concatenated little-endian float32 payloads.
pub fn write_weights(path: &Path, tensors: &[NamedTensor]) -> Result<(), MaskFeatError> {
    let header = WeightHeader {
        tensors: tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    for t in tensors {
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(MaskFeatError::WeightFile(format!(
                "tensor '{}' has {} values but shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let json =
        serde_json::to_string(&header).map_err(|e| MaskFeatError::WeightFile(e.to_string()))?;
    out.write_all(json.as_bytes())?;
    out.write_all(b"\n")?;
    for t in tensors {
        for &v in &t.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a weight file written by [`write_weights`].
pub fn read_weights(path: &Path) -> Result<Vec<NamedTensor>, MaskFeatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| MaskFeatError::WeightFile("missing header line".into()))?;
    let header: WeightHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| MaskFeatError::WeightFile(e.to_string()))?;
    let mut payload = &bytes[newline + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in header.tensors {
        let n: usize = info.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(MaskFeatError::WeightFile(format!(
                "payload too short for '{}'",
                info.name
            )));
        }
        let data = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        payload = &payload[4 * n..];
        tensors.push(NamedTensor {
            name: info.name,
            shape: info.shape,
            data,
        });
    }
    if !payload.is_empty() {
        return Err(MaskFeatError::WeightFile(format!(
            "{} trailing bytes",
            payload.len()
        )));
    }
    Ok(tensors)
}

/// Bundles the two pointwise transforms of the segment-feature block into a
/// weight file.
pub fn write_block_weights(
    path: &Path,
    t1: &PointwiseTransform,
    t2: &PointwiseTransform,
) -> Result<(), MaskFeatError> {
    write_weights(
        path,
        &[
            NamedTensor {
                name: "t1.weight".into(),
                shape: vec![t1.out_channels, t1.in_channels],
                data: t1.weight.clone(),
            },
            NamedTensor {
                name: "t1.bias".into(),
                shape: vec![t1.out_channels],
                data: t1.bias.clone(),
            },
            NamedTensor {
                name: "t2.weight".into(),
                shape: vec![t2.out_channels, t2.in_channels],
                data: t2.weight.clone(),
            },
            NamedTensor {
                name: "t2.bias".into(),
                shape: vec![t2.out_channels],
                data: t2.bias.clone(),
            },
        ],
    )
}

/// Reads the two pointwise transforms of the segment-feature block.
pub fn read_block_weights(
    path: &Path,
) -> Result<(PointwiseTransform, PointwiseTransform), MaskFeatError> {
    let tensors = read_weights(path)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| MaskFeatError::WeightFile(format!("missing tensor '{name}'")))
    };
    let build = |wname: &str, bname: &str| -> Result<PointwiseTransform, MaskFeatError> {
        let wt = find(wname)?;
        let bt = find(bname)?;
        if wt.shape.len() != 2 || bt.shape.len() != 1 || wt.shape[0] != bt.shape[0] {
            return Err(MaskFeatError::WeightFile(format!(
                "bad shapes for {wname}/{bname}"
            )));
        }
        Ok(PointwiseTransform::new(
            wt.shape[1],
            wt.shape[0],
            wt.data.clone(),
            bt.data.clone(),
        ))
    };
    Ok((
        build("t1.weight", "t1.bias")?,
        build("t2.weight", "t2.bias")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::RawMaskSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(w: usize, h: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            w,
            h,
            c,
            (0..w * h * c)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    fn random_segmentation(w: usize, h: usize, max_segments: usize, seed: u64) -> Segmentation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Random rectangles produce between 1 and max_segments + 1 segments.
        let grids: Vec<Vec<bool>> = (0..max_segments)
            .map(|_| {
                let rw = rng.random_range(1..=w);
                let rh = rng.random_range(1..=h);
                let x0 = rng.random_range(0..=w - rw);
                let y0 = rng.random_range(0..=h - rh);
                let mut g = vec![false; w * h];
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        g[y * w + x] = true;
                    }
                }
                g
            })
            .collect();
        let set = RawMaskSet::from_grids(w, h, grids).unwrap();
        Segmentation::build(&set, w, h).unwrap()
    }

    #[test]
    fn pool_single_segment_is_global_max() {
        let set = RawMaskSet::from_grids(6, 4, vec![]).unwrap();
        let seg = Segmentation::build(&set, 6, 4).unwrap();
        let f = random_features(6, 4, 3, 1);
        let pooled = segment_max_pool(&f, &seg).unwrap();
        for c in 0..3 {
            let global = (0..24)
                .map(|i| f.data()[i * 3 + c])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in 0..24 {
                assert_eq!(pooled.data()[i * 3 + c], global);
            }
        }
    }

    #[test]
    fn pool_matches_brute_force_per_segment_max() {
        let seg = random_segmentation(16, 16, 8, 5);
        let f = random_features(16, 16, 4, 6);
        let pooled = segment_max_pool(&f, &seg).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let id = seg.id_at(x, y);
                for c in 0..4 {
                    let mut best = f64::NEG_INFINITY;
                    for yy in 0..16 {
                        for xx in 0..16 {
                            if seg.id_at(xx, yy) == id {
                                best = best.max(f.at(xx, yy, c));
                            }
                        }
                    }
                    assert_eq!(pooled.at(x, y, c), best);
                }
            }
        }
    }

    #[test]
    fn pool_is_idempotent() {
        let seg = random_segmentation(12, 10, 5, 9);
        let f = random_features(12, 10, 3, 10);
        let once = segment_max_pool(&f, &seg).unwrap();
        let twice = segment_max_pool(&once, &seg).unwrap();
        assert_eq!(once, twice);
    }

    /// Relabels segment IDs with a permutation, keeping the partition.
    fn permute_ids(seg: &Segmentation, seed: u64) -> Segmentation {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = seg.segment_count();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        perm.shuffle(&mut rng);
        let ids = seg.ids().iter().map(|&id| perm[id as usize]).collect();
        Segmentation::from_ids(seg.width(), seg.height(), ids, n).unwrap()
    }

    #[test]
    fn pool_invariant_under_id_permutation() {
        let seg = random_segmentation(14, 12, 6, 21);
        let f = random_features(14, 12, 5, 22);
        let a = segment_max_pool(&f, &seg).unwrap();
        for k in 0..20 {
            let b = segment_max_pool(&f, &permute_ids(&seg, 100 + k)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mask_feature_invariant_under_id_permutation() {
        let seg = random_segmentation(10, 8, 5, 31);
        let f = random_features(10, 8, 6, 32);
        let t1 = PointwiseTransform::seeded(6, 4, 1);
        let t2 = PointwiseTransform::seeded(8, 5, 2);
        let cfg = MaskFeatureConfig::default();
        let a = mask_feature(&f, &seg, &t1, &t2, &cfg).unwrap();
        let b = mask_feature(&f, &permute_ids(&seg, 77), &t1, &t2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_feature_constant_input_single_segment_is_constant() {
        let set = RawMaskSet::from_grids(8, 6, vec![]).unwrap();
        let seg = Segmentation::build(&set, 8, 6).unwrap();
        let f = FeatureMap::new(8, 6, 3, vec![0.25; 8 * 6 * 3]);
        let t1 = PointwiseTransform::seeded(3, 4, 3);
        let t2 = PointwiseTransform::seeded(8, 4, 4);
        let g = mask_feature(&f, &seg, &t1, &t2, &MaskFeatureConfig::default()).unwrap();
        let first = g.vector(0, 0).to_vec();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(g.vector(x, y), &first[..]);
            }
        }
    }

    #[test]
    fn mask_feature_matches_straight_line_reference() {
        // Independent scalar-loop reimplementation of the block.
        let seg = random_segmentation(9, 7, 4, 41);
        let f = random_features(9, 7, 3, 42);
        let t1 = PointwiseTransform::seeded(3, 2, 43);
        let t2 = PointwiseTransform::seeded(4, 3, 44);
        let got = mask_feature(&f, &seg, &t1, &t2, &MaskFeatureConfig::default()).unwrap();

        let (w, h) = (9, 7);
        let mut h_map = vec![0.0; w * h * 2];
        for i in 0..w * h {
            for o in 0..2 {
                let mut acc = t1.bias[o];
                for c in 0..3 {
                    acc += t1.weight[o * 3 + c] * f.data()[i * 3 + c];
                }
                h_map[i * 2 + o] = acc.max(0.0);
            }
        }
        let mut pooled = vec![f64::NEG_INFINITY; seg.segment_count() * 2];
        for i in 0..w * h {
            let s = seg.ids()[i] as usize;
            for o in 0..2 {
                pooled[s * 2 + o] = pooled[s * 2 + o].max(h_map[i * 2 + o]);
            }
        }
        for i in 0..w * h {
            let s = seg.ids()[i] as usize;
            let cat = [
                h_map[i * 2],
                h_map[i * 2 + 1],
                pooled[s * 2],
                pooled[s * 2 + 1],
            ];
            for o in 0..3 {
                let mut acc = t2.bias[o];
                for c in 0..4 {
                    acc += t2.weight[o * 4 + c] * cat[c];
                }
                let expect = acc.max(0.0);
                assert!((got.data()[i * 3 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_has_81_channels_at_radius_4() {
        let f = random_features(6, 6, 3, 51);
        let vol = correlation_volume(&f, &f, CORRELATION_RADIUS).unwrap();
        assert_eq!(vol.channels(), 81);
    }

    #[test]
    fn correlation_constant_unit_features_interior_ones() {
        // Constant per-pixel vectors with squared norm = channel count, so
        // each normalized dot product is exactly 1 inside the window.
        let c = 4;
        let f = FeatureMap::new(9, 9, c, vec![1.0; 9 * 9 * c]);
        let vol = correlation_volume(&f, &f, 4).unwrap();
        let (x, y) = (4, 4);
        for k in 0..81 {
            assert_eq!(vol.at(x, y, k), 1.0);
        }
    }

    #[test]
    fn correlation_single_pixel_matches_hand_dot_products() {
        let f1 = random_features(9, 9, 3, 61);
        let f2 = random_features(9, 9, 3, 62);
        let vol = correlation_volume(&f1, &f2, 4).unwrap();
        let (x, y) = (4usize, 4usize);
        for dy in -4i64..=4 {
            for dx in -4i64..=4 {
                let k = ((dy + 4) * 9 + (dx + 4)) as usize;
                let nx = (x as i64 + dx) as usize;
                let ny = (y as i64 + dy) as usize;
                let mut dot = 0.0;
                for c in 0..3 {
                    dot += f1.at(x, y, c) * f2.at(nx, ny, c);
                }
                assert!((vol.at(x, y, k) - dot / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_zero_padding_at_border() {
        let f = random_features(9, 9, 2, 63);
        let vol = correlation_volume(&f, &f, 4).unwrap();
        // At (0,0), the neighbor (-4,-4) is outside: channel 0 must be 0.
        assert_eq!(vol.at(0, 0, 0), 0.0);
    }

    #[test]
    fn correlation_center_channel_dominates_for_unit_norm_features() {
        let mut f = random_features(10, 8, 4, 64);
        // Normalize each pixel vector so Cauchy-Schwarz caps off-center dots.
        let mut data = f.data().to_vec();
        for i in 0..10 * 8 {
            let norm: f64 = data[i * 4..(i + 1) * 4]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for c in 0..4 {
                data[i * 4 + c] /= norm;
            }
        }
        f = FeatureMap::new(10, 8, 4, data);
        let vol = correlation_volume(&f, &f, 4).unwrap();
        let center = (4 * 9 + 4) as usize;
        for y in 0..8 {
            for x in 0..10 {
                let c0 = vol.at(x, y, center);
                for k in 0..81 {
                    assert!(vol.at(x, y, k) <= c0 + 1e-12, "({x},{y}) channel {k}");
                }
            }
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let t1 = PointwiseTransform::seeded(3, 4, 7);
        let t2 = PointwiseTransform::seeded(8, 5, 8);
        write_block_weights(&path, &t1, &t2).unwrap();
        let (r1, r2) = read_block_weights(&path).unwrap();
        assert_eq!(r1.in_channels(), 3);
        assert_eq!(r1.out_channels(), 4);
        assert_eq!(r2.in_channels(), 8);
        // Values survive the f32 narrowing within f32 precision.
        for (a, b) in t1.weight.iter().zip(&r1.weight) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(t2.bias.len(), r2.bias.len());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let f = random_features(4, 4, 3, 71);
        let t = PointwiseTransform::seeded(5, 2, 72);
        assert!(matches!(
            t.apply(&f),
            Err(MaskFeatError::ChannelMismatch { .. })
        ));
    }
}
