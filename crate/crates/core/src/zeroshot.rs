//! Training-free layering, figure-ground separation and edge detection over a
//! predicted Gaussian set.
//!
//! Gaussians are depth-sorted and split into `d` groups. Prefix `n` renders
//! groups `0..n`, so prefix 0 is the background and prefix `d` the full image.
//! A pixel belongs to the first group whose prefix changes it by more than the
//! threshold. Near Gaussians tend to carry low-frequency background, so
//! foreground is the set of pixels at or beyond a split layer.

use crate::canvas::Image;
use crate::gaussian::GaussianSet;
use crate::render::{depth_sort, project, render, render_tiled, CameraConfig, RenderError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Default per-channel difference that counts as a change.
pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Index of pixels no group ever changes.
pub const UNASSIGNED: i32 = -1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZeroShotError {
    #[error("need at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("{layers} equal-count layers requested for only {gaussians} Gaussians")]
    TooManyLayers { layers: usize, gaussians: usize },
    #[error("threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
    #[error("prefix {prefix} exceeds the {total} available Gaussians")]
    PrefixTooLong { prefix: usize, total: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    /// `⌈K/d⌉` consecutive Gaussians per group in depth order.
    #[default]
    EqualCount,
    /// Uniform bins over the camera depth range.
    EqualDepthWidth,
}

impl fmt::Display for GroupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupMode::EqualCount => "equal_count",
            GroupMode::EqualDepthWidth => "equal_depth_width",
        })
    }
}

impl FromStr for GroupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equal_count" | "equal-count" => Ok(GroupMode::EqualCount),
            "equal_depth_width" | "equal-depth-width" => Ok(GroupMode::EqualDepthWidth),
            other => Err(format!("unknown group mode '{other}' (equal_count, equal_depth_width)")),
        }
    }
}

/// Per-pixel layer assignment and the prefix renders it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: usize,
    pub mode: GroupMode,
    pub threshold: f64,
    pub height: usize,
    pub width: usize,
    /// Row-major, in `{-1, 0..layers-1}`.
    pub index: Vec<i32>,
    /// `layers + 1` renders; entry `n` contains groups `0..n`.
    pub cumulative: Vec<Image>,
    /// Group of every Gaussian, in input order.
    pub group_of: Vec<usize>,
}

impl LayerStack {
    pub fn layer_at(&self, y: usize, x: usize) -> i32 {
        self.index[y * self.width + x]
    }

    /// Pixels per layer, followed by the unassigned count.
    pub fn histogram(&self) -> (Vec<usize>, usize) {
        let mut counts = vec![0; self.layers];
        let mut none = 0;
        for &i in &self.index {
            if i < 0 {
                none += 1;
            } else {
                counts[i as usize] += 1;
            }
        }
        (counts, none)
    }
}

/// Depth group of every Gaussian.
pub fn group_gaussians(
    gs: &GaussianSet,
    layers: usize,
    mode: GroupMode,
    cam: &CameraConfig,
) -> Result<Vec<usize>, ZeroShotError> {
    if layers < 2 {
        return Err(ZeroShotError::TooFewLayers(layers));
    }
    let depths: Vec<f64> = gs.iter().map(|g| cam.depth_of(g.center[2])).collect();
    let mut group_of = vec![0; gs.len()];
    match mode {
        GroupMode::EqualCount => {
            if layers > gs.len() {
                return Err(ZeroShotError::TooManyLayers {
                    layers,
                    gaussians: gs.len(),
                });
            }
            let size = gs.len().div_ceil(layers);
            for (rank, &i) in depth_sort(&depths).iter().enumerate() {
                group_of[i] = rank / size;
            }
        }
        GroupMode::EqualDepthWidth => {
            let [near, far] = cam.depth_range;
            for (i, &z) in depths.iter().enumerate() {
                let t = ((z - near) / (far - near) * layers as f64).floor();
                group_of[i] = (t.max(0.0) as usize).min(layers - 1);
            }
        }
    }
    Ok(group_of)
}

fn render_subset(gs: &GaussianSet, keep: impl Fn(usize) -> bool, cam: &CameraConfig) -> Result<Image, RenderError> {
    let indices: Vec<usize> = (0..gs.len()).filter(|&i| keep(i)).collect();
    let subset = gs.select(&indices);
    let screen = project(&subset, cam)?;
    Ok(render_tiled(&screen, &subset, cam).image)
}

fn max_channel_diff(a: &Image, b: &Image, y: usize, x: usize) -> f64 {
    let (p, q) = (a.pixel(y, x), b.pixel(y, x));
    (0..3).map(|c| (p[c] - q[c]).abs()).fold(0.0, f64::max)
}

/// Groups the Gaussians by depth and assigns every pixel to the first group
/// whose prefix render changes it by more than `threshold`.
pub fn assign_layers(
    gs: &GaussianSet,
    layers: usize,
    mode: GroupMode,
    threshold: f64,
    cam: &CameraConfig,
) -> Result<LayerStack, ZeroShotError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(ZeroShotError::BadThreshold(threshold));
    }
    cam.validate()?;
    let group_of = group_gaussians(gs, layers, mode, cam)?;
    let cumulative = (0..=layers)
        .into_par_iter()
        .map(|n| render_subset(gs, |i| group_of[i] < n, cam))
        .collect::<Result<Vec<_>, _>>()?;
    let (h, w) = (cam.height, cam.width);
    let mut index = vec![UNASSIGNED; h * w];
    for y in 0..h {
        for x in 0..w {
            let slot = &mut index[y * w + x];
            for n in 0..layers {
                if max_channel_diff(&cumulative[n + 1], &cumulative[n], y, x) > threshold {
                    *slot = n as i32;
                    break;
                }
            }
        }
    }
    Ok(LayerStack {
        layers,
        mode,
        threshold,
        height: h,
        width: w,
        index,
        cumulative,
        group_of,
    })
}

/// Render of the `prefix` depth-nearest Gaussians.
pub fn cumulative_render(gs: &GaussianSet, prefix: usize, cam: &CameraConfig) -> Result<Image, ZeroShotError> {
    if prefix > gs.len() {
        return Err(ZeroShotError::PrefixTooLong {
            prefix,
            total: gs.len(),
        });
    }
    if prefix == gs.len() {
        return Ok(render(gs, cam)?.image);
    }
    let depths: Vec<f64> = gs.iter().map(|g| cam.depth_of(g.center[2])).collect();
    let mut rank = vec![0; gs.len()];
    for (r, &i) in depth_sort(&depths).iter().enumerate() {
        rank[i] = r;
    }
    Ok(render_subset(gs, |i| rank[i] < prefix, cam)?)
}

/// Foreground pixels at a split layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub split: usize,
    /// Row-major, `true` on foreground.
    pub mask: Vec<bool>,
}

impl SegmentationMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Foreground is every pixel whose layer is at least `split`; `split >= d`
/// gives an empty mask.
pub fn figure_ground(stack: &LayerStack, split: usize) -> SegmentationMask {
    SegmentationMask {
        height: stack.height,
        width: stack.width,
        split,
        mask: stack.index.iter().map(|&i| i >= 0 && i as usize >= split).collect(),
    }
}

/// Layer-index discontinuities.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    /// Row-major.
    pub edges: Vec<bool>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&b| b).count()
    }
}

/// A pixel is an edge iff some 4-neighbour has a different layer index.
pub fn edge_detect(stack: &LayerStack) -> EdgeMap {
    EdgeMap {
        height: stack.height,
        width: stack.width,
        layers: stack.layers,
        edges: index_edges(&stack.index, stack.height, stack.width),
    }
}

/// Edge scan over a raw row-major index map.
pub fn index_edges(index: &[i32], height: usize, width: usize) -> Vec<bool> {
    let mut edges = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let v = index[y * width + x];
            let differs = |yy: usize, xx: usize| index[yy * width + xx] != v;
            edges[y * width + x] = (y > 0 && differs(y - 1, x))
                || (y + 1 < height && differs(y + 1, x))
                || (x > 0 && differs(y, x - 1))
                || (x + 1 < width && differs(y, x + 1));
        }
    }
    edges
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "masks must have equal size");
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best IoU against `truth` over every split `0..=d`, with the split that
/// achieved it.
pub fn best_split(stack: &LayerStack, truth: &[bool]) -> (usize, f64) {
    (0..=stack.layers)
        .map(|t| (t, iou(&figure_ground(stack, t).mask, truth)))
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;

    fn blob(x: f64, z: f64, opacity: f64) -> Gaussian {
        Gaussian {
            center: [x, 0.0, z],
            scale: [0.1, 0.1, 0.1],
            rotation: [1.0, 0.0, 0.0, 0.0],
            color: [0.9, 0.2, 0.1],
            opacity,
        }
    }

    #[test]
    fn single_opaque_gaussian_is_layer_zero() {
        let cam = CameraConfig::new(16, 16);
        let gs = GaussianSet::new_unchecked(vec![blob(0.0, -0.5, 0.99), blob(5.0, 0.5, 0.99)]);
        let stack = assign_layers(&gs, 2, GroupMode::EqualCount, DEFAULT_THRESHOLD, &cam).unwrap();
        assert_eq!(stack.layer_at(8, 8), 0);
        assert_eq!(stack.layer_at(0, 0), UNASSIGNED);
        assert!(stack.index.iter().all(|&i| i == 0 || i == UNASSIGNED));
        assert_eq!(stack.cumulative[2], render(&gs, &cam).unwrap().image);
    }

    #[test]
    fn edges_of_constructed_maps() {
        assert!(index_edges(&[3; 12], 3, 4).iter().all(|&e| !e));
        let halves: Vec<i32> = (0..24).map(|i| if i % 6 < 3 { 0 } else { 1 }).collect();
        let e = index_edges(&halves, 4, 6);
        for (i, &b) in e.iter().enumerate() {
            assert_eq!(b, i % 6 == 2 || i % 6 == 3);
        }
    }

    #[test]
    fn split_bounds() {
        let stack = LayerStack {
            layers: 2,
            mode: GroupMode::EqualCount,
            threshold: 0.05,
            height: 1,
            width: 3,
            index: vec![-1, 0, 1],
            cumulative: Vec::new(),
            group_of: Vec::new(),
        };
        assert_eq!(figure_ground(&stack, 0).mask, vec![false, true, true]);
        assert_eq!(figure_ground(&stack, 2).count(), 0);
        assert_eq!(best_split(&stack, &[false, false, true]), (1, 1.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let cam = CameraConfig::new(8, 8);
        let gs = GaussianSet::new_unchecked(vec![blob(0.0, 0.0, 0.5)]);
        assert_eq!(
            assign_layers(&gs, 2, GroupMode::EqualCount, 0.05, &cam).unwrap_err(),
            ZeroShotError::TooManyLayers { layers: 2, gaussians: 1 }
        );
        assert!(assign_layers(&gs, 1, GroupMode::EqualDepthWidth, 0.05, &cam).is_err());
        assert!(assign_layers(&gs, 2, GroupMode::EqualDepthWidth, 0.0, &cam).is_err());
        assert!(assign_layers(&gs, 2, GroupMode::EqualDepthWidth, 0.05, &cam).is_ok());
    }

    #[test]
    fn iou_exact() {
        assert_eq!(iou(&[true, true, false, false], &[true, false, true, false]), 1.0 / 3.0);
        assert_eq!(iou(&[false; 3], &[false; 3]), 1.0);
    }
}
