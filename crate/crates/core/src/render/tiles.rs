use super::{kernel_alpha, mahalanobis, CameraConfig, RenderOutput, ScreenGaussianSet};
use crate::canvas::Image;
use crate::gaussian::GaussianSet;
use rayon::prelude::*;

/// Gaussians staged per pass over a tile's pixels.
pub(crate) const CHUNK: usize = 256;

/// Per-tile lists of Gaussian indices, each in global depth order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<usize>>,
}

impl TileBins {
    /// Bins every non-skipped Gaussian into all tiles its `cutoff·σ`
    /// bounding box overlaps.
    pub fn build(screen: &ScreenGaussianSet, cam: &CameraConfig) -> Self {
        let ts = cam.tile_size;
        let tiles_x = cam.width.div_ceil(ts);
        let tiles_y = cam.height.div_ceil(ts);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for &i in &screen.order {
            if screen.skipped[i] {
                continue;
            }
            let Some((x0, x1, y0, y1)) = footprint_bounds(screen, i, cam) else {
                continue;
            };
            for ty in y0 / ts..=y1 / ts {
                for tx in x0 / ts..=x1 / ts {
                    lists[ty * tiles_x + tx].push(i);
                }
            }
        }
        Self {
            tile_size: ts,
            tiles_x,
            tiles_y,
            lists,
        }
    }

    /// Pixel rectangle `(x0, x1, y0, y1)` (exclusive ends) of a tile.
    pub fn tile_rect(&self, tile: usize, cam: &CameraConfig) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            (x0 + self.tile_size).min(cam.width),
            y0,
            (y0 + self.tile_size).min(cam.height),
        )
    }

    /// Tiles that list Gaussian `index`.
    pub fn tiles_of(&self, index: usize) -> Vec<usize> {
        (0..self.lists.len())
            .filter(|&t| self.lists[t].contains(&index))
            .collect()
    }
}

/// Inclusive pixel bounds of a footprint, clipped to the image.
pub(crate) fn footprint_bounds(
    screen: &ScreenGaussianSet,
    i: usize,
    cam: &CameraConfig,
) -> Option<(usize, usize, usize, usize)> {
    let [mx, my] = screen.means[i];
    let cov = screen.cov[i];
    let rx = cam.cutoff * cov[0].sqrt();
    let ry = cam.cutoff * cov[2].sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let x0 = (mx - rx).floor().max(0.0);
    let x1 = (mx + rx).ceil().min(w - 1.0);
    let y0 = (my - ry).floor().max(0.0);
    let y1 = (my + ry).ceil().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

struct TileResult {
    pixels: Vec<f64>,
    trans: Vec<f64>,
    touch: Vec<u32>,
}

fn render_tile(
    bins: &TileBins,
    tile: usize,
    screen: &ScreenGaussianSet,
    gs: &GaussianSet,
    cam: &CameraConfig,
) -> TileResult {
    let (x0, x1, y0, y1) = bins.tile_rect(tile, cam);
    let tw = x1 - x0;
    let npx = tw * (y1 - y0);
    let list = &bins.lists[tile];
    let items = gs.items();
    let cutoff_sq = cam.cutoff_sq();
    let mut t = vec![1.0; npx];
    let mut acc = vec![[0.0f64; 3]; npx];
    let mut touch = vec![0u32; list.len()];

    // Stage a chunk of Gaussian parameters contiguously, then sweep pixels.
    let mut staged: Vec<([f64; 2], [f64; 3], [f64; 3], f64)> = Vec::with_capacity(CHUNK);
    for (chunk_idx, chunk) in list.chunks(CHUNK).enumerate() {
        staged.clear();
        staged.extend(chunk.iter().map(|&i| {
            (
                screen.means[i],
                screen.inv_cov[i],
                items[i].color,
                items[i].opacity,
            )
        }));
        for p in 0..npx {
            let px = (x0 + p % tw) as f64;
            let py = (y0 + p / tw) as f64;
            let mut tp = t[p];
            let mut c = acc[p];
            for (j, (mean, inv, color, opacity)) in staged.iter().enumerate() {
                let m = mahalanobis(inv, px - mean[0], py - mean[1]);
                if m > cutoff_sq {
                    continue;
                }
                touch[chunk_idx * CHUNK + j] += 1;
                let (alpha, _) = kernel_alpha(*opacity, m);
                let weight = alpha * tp;
                for k in 0..3 {
                    c[k] += color[k] * weight;
                }
                tp *= 1.0 - alpha;
            }
            t[p] = tp;
            acc[p] = c;
        }
    }
    let mut pixels = Vec::with_capacity(npx * 3);
    for p in 0..npx {
        for k in 0..3 {
            pixels.push(acc[p][k] + t[p] * cam.background[k]);
        }
    }
    TileResult {
        pixels,
        trans: t,
        touch,
    }
}

pub(super) fn render(
    screen: &ScreenGaussianSet,
    gs: &GaussianSet,
    cam: &CameraConfig,
) -> RenderOutput {
    let bins = TileBins::build(screen, cam);
    let results: Vec<TileResult> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| render_tile(&bins, tile, screen, gs, cam))
        .collect();

    let mut image = Image::new(cam.height, cam.width);
    let mut transmittance = vec![0.0; cam.height * cam.width];
    let mut touch_count = vec![0u32; screen.len()];
    for (tile, res) in results.into_iter().enumerate() {
        let (x0, x1, y0, _) = bins.tile_rect(tile, cam);
        let tw = x1 - x0;
        for (p, &tp) in res.trans.iter().enumerate() {
            let (x, y) = (x0 + p % tw, y0 + p / tw);
            image.set_pixel(y, x, [res.pixels[p * 3], res.pixels[p * 3 + 1], res.pixels[p * 3 + 2]]);
            transmittance[y * cam.width + x] = tp;
        }
        for (&i, n) in bins.lists[tile].iter().zip(res.touch) {
            touch_count[i] += n;
        }
    }
    RenderOutput {
        image,
        transmittance,
        touch_count,
        skipped: screen.skipped_count(),
    }
}
