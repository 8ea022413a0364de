//! Orthographic splatting of Gaussians onto the image plane.
//!
//! Two forward paths share one per-pixel kernel: [`render_naive`] walks every
//! Gaussian for every pixel and is the reference; [`render_tiled`] bins
//! footprints into tiles first. Both visit a pixel's Gaussians in the same
//! global depth order with the same arithmetic, so they agree bit for bit.
//! [`render_backward`] recomputes the per-pixel forward state and returns
//! gradients for all 14 raw parameters of every Gaussian.

mod backward;
mod tiles;

pub use backward::{render_backward, render_backward_activated, ScreenGrad};
pub use tiles::TileBins;

use crate::canvas::Image;
use crate::gaussian::{GaussianError, GaussianSet};
use rayon::prelude::*;
use thiserror::Error;

/// Upper bound on a single compositing weight.
pub const ALPHA_MAX: f64 = 0.999;

/// Screen covariances with a larger condition number are skipped.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("gradient image is {got:?}, expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("non-finite upstream gradient at pixel (y={y}, x={x}), channel {channel}")]
    NonFiniteGradient { y: usize, x: usize, channel: usize },
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Projection {
    #[default]
    Orthographic,
}

/// Fixed camera: orthographic view along +z.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub projection: Projection,
    pub height: usize,
    pub width: usize,
    /// Pixels per scene unit along x and y. The scene origin maps to the
    /// image center, so `W/2` maps `[-1, 1]` onto `[0, W)`.
    pub pixel_scale: [f64; 2],
    /// `p_z = -1` maps to `depth_range[0]`, `p_z = 1` to `depth_range[1]`.
    pub depth_range: [f64; 2],
    pub background: [f64; 3],
    /// Low-pass variance added to the screen covariance, in pixels².
    pub dilation: f64,
    /// Footprint radius in standard deviations.
    pub cutoff: f64,
    pub tile_size: usize,
}

impl CameraConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            projection: Projection::Orthographic,
            height,
            width,
            pixel_scale: [width as f64 / 2.0, height as f64 / 2.0],
            depth_range: [0.1, 2.1],
            background: [0.0; 3],
            dilation: 0.3,
            cutoff: 3.0,
            tile_size: 16,
        }
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Self {
        self.background = background;
        self
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::Camera(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("height and width must be at least 1");
        }
        if !(self.depth_range[0] < self.depth_range[1]) {
            return bad("depth_range: z_near must be below z_far");
        }
        if !(self.dilation >= 0.0) {
            return bad("dilation must be non-negative");
        }
        if !(self.cutoff > 0.0) {
            return bad("cutoff must be positive");
        }
        if self.tile_size == 0 {
            return bad("tile_size must be at least 1");
        }
        if !self.pixel_scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad("pixel_scale must be positive");
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return bad("background must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn depth_of(&self, p_z: f64) -> f64 {
        let [near, far] = self.depth_range;
        near + (p_z + 1.0) * 0.5 * (far - near)
    }

    pub(crate) fn cutoff_sq(&self) -> f64 {
        self.cutoff * self.cutoff
    }
}

/// Camera-space Gaussians ready for compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenGaussianSet {
    pub means: Vec<[f64; 2]>,
    /// Symmetric screen covariance `[xx, xy, yy]`, pixels².
    pub cov: Vec<[f64; 3]>,
    /// Inverse of `cov`, same packing.
    pub inv_cov: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    /// Ascending depth, ties by index.
    pub order: Vec<usize>,
    /// Gaussians whose covariance was degenerate; never rendered.
    pub skipped: Vec<bool>,
}

impl ScreenGaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn skipped_count(&self) -> usize {
        self.skipped.iter().filter(|&&s| s).count()
    }
}

/// Stable ascending sort of `depths`; equal depths keep index order.
pub fn depth_sort(depths: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..depths.len()).collect();
    order.sort_by(|&a, &b| depths[a].total_cmp(&depths[b]));
    order
}

fn eigen_2x2(c: &[f64; 3]) -> (f64, f64) {
    let mid = 0.5 * (c[0] + c[2]);
    let rad = (0.25 * (c[0] - c[2]).powi(2) + c[1] * c[1]).sqrt();
    (mid - rad, mid + rad)
}

pub fn project(gs: &GaussianSet, cam: &CameraConfig) -> Result<ScreenGaussianSet, RenderError> {
    cam.validate()?;
    let [sx, sy] = cam.pixel_scale;
    let (cx, cy) = (cam.width as f64 * 0.5, cam.height as f64 * 0.5);
    let n = gs.len();
    let mut out = ScreenGaussianSet {
        means: Vec::with_capacity(n),
        cov: Vec::with_capacity(n),
        inv_cov: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        order: Vec::new(),
        skipped: Vec::with_capacity(n),
    };
    for g in gs.iter() {
        let sigma = g.covariance()?;
        out.means.push([cx + sx * g.center[0], cy + sy * g.center[1]]);
        let cov = [
            sx * sx * sigma[(0, 0)] + cam.dilation,
            sx * sy * sigma[(0, 1)],
            sy * sy * sigma[(1, 1)] + cam.dilation,
        ];
        let (lo, hi) = eigen_2x2(&cov);
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        let degenerate = !(lo > 0.0) || !(hi / lo <= MAX_CONDITION) || !(det > 0.0);
        let inv = if degenerate {
            [0.0; 3]
        } else {
            [cov[2] / det, -cov[1] / det, cov[0] / det]
        };
        out.cov.push(cov);
        out.inv_cov.push(inv);
        out.skipped.push(degenerate);
        out.depth.push(cam.depth_of(g.center[2]));
    }
    out.order = depth_sort(&out.depth);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Transmittance left after the last Gaussian, per pixel.
    pub transmittance: Vec<f64>,
    /// Pixels inside each Gaussian's footprint cutoff.
    pub touch_count: Vec<u32>,
    pub skipped: usize,
}

/// Squared Mahalanobis distance under a packed inverse covariance.
#[inline(always)]
pub(crate) fn mahalanobis(inv: &[f64; 3], dx: f64, dy: f64) -> f64 {
    inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy
}

/// One compositing step; returns the pre-clamp weight `o·G`.
#[inline(always)]
pub(crate) fn kernel_alpha(opacity: f64, m: f64) -> (f64, f64) {
    let gauss = (-0.5 * m).exp();
    let alpha = (opacity * gauss).min(ALPHA_MAX);
    (alpha, gauss)
}

/// Per-pixel oracle renderer: every pixel visits every Gaussian.
pub fn render_naive(screen: &ScreenGaussianSet, gs: &GaussianSet, cam: &CameraConfig) -> RenderOutput {
    let (h, w) = (cam.height, cam.width);
    let cutoff_sq = cam.cutoff_sq();
    let items = gs.items();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut pixels = vec![0.0; w * 3];
            let mut trans = vec![0.0; w];
            let mut touch = vec![0u32; screen.len()];
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let mut t = 1.0;
                let mut c = [0.0; 3];
                for &i in &screen.order {
                    if screen.skipped[i] {
                        continue;
                    }
                    let mean = screen.means[i];
                    let m = mahalanobis(&screen.inv_cov[i], px - mean[0], py - mean[1]);
                    if m > cutoff_sq {
                        continue;
                    }
                    touch[i] += 1;
                    let (alpha, _) = kernel_alpha(items[i].opacity, m);
                    let weight = alpha * t;
                    for k in 0..3 {
                        c[k] += items[i].color[k] * weight;
                    }
                    t *= 1.0 - alpha;
                }
                for k in 0..3 {
                    pixels[x * 3 + k] = c[k] + t * cam.background[k];
                }
                trans[x] = t;
            }
            (pixels, trans, touch)
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    let mut transmittance = Vec::with_capacity(h * w);
    let mut touch_count = vec![0u32; screen.len()];
    for (pixels, trans, touch) in rows {
        data.extend(pixels);
        transmittance.extend(trans);
        for (acc, v) in touch_count.iter_mut().zip(touch) {
            *acc += v;
        }
    }
    RenderOutput {
        image: Image::from_vec(h, w, data),
        transmittance,
        touch_count,
        skipped: screen.skipped_count(),
    }
}

/// Tile-binned renderer; matches [`render_naive`] exactly.
pub fn render_tiled(screen: &ScreenGaussianSet, gs: &GaussianSet, cam: &CameraConfig) -> RenderOutput {
    tiles::render(screen, gs, cam)
}

/// Projects and renders with the tiled path.
pub fn render(gs: &GaussianSet, cam: &CameraConfig) -> Result<RenderOutput, RenderError> {
    let screen = project(gs, cam)?;
    Ok(render_tiled(&screen, gs, cam))
}
