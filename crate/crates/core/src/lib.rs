//! Segmentation-guided optical flow toolkit.
//!
//! Building blocks for working with dense flow fields and class-agnostic
//! object masks: conversion of overlapping masks to a full segmentation,
//! occlusion estimation, RANSAC homography refinement of flow regions,
//! photometric and smoothness losses with analytic gradients, copy-paste
//! augmentation with exact flow targets, segment-pooled feature operators,
//! flow metrics, and loss-landscape sweeps.
//!
//! File formats (Middlebury `.flo`, KITTI 16-bit flow PNG, RLE mask JSON)
//! live in [`io`]. The `segflow` binary in the companion CLI crate wires
//! these modules into batch commands.

pub mod analysis;
pub mod augment;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod maskfeat;
pub mod masks;

pub use grid::{FlowField, Grid2, Image};
pub use losses::{LossReport, OcclusionMap};
pub use masks::{RawMaskSet, Segmentation};
