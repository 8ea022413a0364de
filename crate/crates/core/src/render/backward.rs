use super::tiles::TileBins;
use super::{kernel_alpha, mahalanobis, project, CameraConfig, RenderError, ScreenGaussianSet, ALPHA_MAX};
use crate::canvas::Image;
use crate::gaussian::{
    activate_backward, activate_parameters, covariance_backward, GaussianGrad, GaussianSet,
    RawGaussians, ScaleClamp, RAW_DIM,
};
use nalgebra::{Matrix2, Matrix3};
use rayon::prelude::*;

/// Loss gradient w.r.t. the screen-space quantities of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScreenGrad {
    pub mean: [f64; 2],
    /// Symmetric gradient w.r.t. the inverse covariance, `[g_xx, g_xy, g_yy]`.
    pub inv_cov: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.inv_cov[k] += o.inv_cov[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    t_before: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

fn check_grad_image(grad: &Image, cam: &CameraConfig) -> Result<(), RenderError> {
    if grad.dims() != (cam.height, cam.width) {
        return Err(RenderError::ShapeMismatch {
            got: grad.dims(),
            expected: (cam.height, cam.width),
        });
    }
    if let Some(pos) = grad.data().iter().position(|v| !v.is_finite()) {
        let px = pos / 3;
        return Err(RenderError::NonFiniteGradient {
            y: px / cam.width,
            x: px % cam.width,
            channel: pos % 3,
        });
    }
    Ok(())
}

fn backward_tile(
    bins: &TileBins,
    tile: usize,
    screen: &ScreenGaussianSet,
    gs: &GaussianSet,
    cam: &CameraConfig,
    grad: &Image,
) -> Vec<ScreenGrad> {
    let list = &bins.lists[tile];
    let mut out = vec![ScreenGrad::default(); list.len()];
    if list.is_empty() {
        return out;
    }
    let (x0, x1, y0, y1) = bins.tile_rect(tile, cam);
    let items = gs.items();
    let cutoff_sq = cam.cutoff_sq();
    let mut scratch: Vec<Contribution> = Vec::with_capacity(list.len());
    for y in y0..y1 {
        for x in x0..x1 {
            let d_pix = grad.pixel(y, x);
            if d_pix == [0.0; 3] {
                continue;
            }
            let (px, py) = (x as f64, y as f64);
            scratch.clear();
            let mut t = 1.0;
            for (slot, &i) in list.iter().enumerate() {
                let mean = screen.means[i];
                let (dx, dy) = (px - mean[0], py - mean[1]);
                let m = mahalanobis(&screen.inv_cov[i], dx, dy);
                if m > cutoff_sq {
                    continue;
                }
                let (alpha, gauss) = kernel_alpha(items[i].opacity, m);
                scratch.push(Contribution {
                    slot,
                    alpha,
                    gauss,
                    t_before: t,
                    clamped: items[i].opacity * gauss > ALPHA_MAX,
                    dx,
                    dy,
                });
                t *= 1.0 - alpha;
            }
            // Color accumulated behind the current entry, background included.
            let mut behind: [f64; 3] = std::array::from_fn(|k| t * cam.background[k]);
            for c in scratch.iter().rev() {
                let i = list[c.slot];
                let color = items[i].color;
                let weight = c.alpha * c.t_before;
                let g = &mut out[c.slot];
                let mut d_alpha = 0.0;
                for k in 0..3 {
                    g.color[k] += d_pix[k] * weight;
                    d_alpha += d_pix[k] * (color[k] * c.t_before - behind[k] / (1.0 - c.alpha));
                    behind[k] += color[k] * weight;
                }
                if c.clamped {
                    continue;
                }
                let opacity = items[i].opacity;
                g.opacity += d_alpha * c.gauss;
                let d_m = -0.5 * c.gauss * opacity * d_alpha;
                let inv = &screen.inv_cov[i];
                let ad = [inv[0] * c.dx + inv[1] * c.dy, inv[1] * c.dx + inv[2] * c.dy];
                g.mean[0] -= 2.0 * d_m * ad[0];
                g.mean[1] -= 2.0 * d_m * ad[1];
                g.inv_cov[0] += d_m * c.dx * c.dx;
                g.inv_cov[1] += d_m * c.dx * c.dy;
                g.inv_cov[2] += d_m * c.dy * c.dy;
            }
        }
    }
    out
}

/// Gradients w.r.t. the activated parameters, given `dL/dimage`.
pub fn render_backward_activated(
    screen: &ScreenGaussianSet,
    gs: &GaussianSet,
    cam: &CameraConfig,
    grad_image: &Image,
) -> Result<Vec<GaussianGrad>, RenderError> {
    check_grad_image(grad_image, cam)?;
    let bins = TileBins::build(screen, cam);
    let partials: Vec<Vec<ScreenGrad>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| backward_tile(&bins, tile, screen, gs, cam, grad_image))
        .collect();

    // Fixed tile order keeps the reduction bit-reproducible.
    let mut screen_grads = vec![ScreenGrad::default(); screen.len()];
    for (tile, partial) in partials.iter().enumerate() {
        for (&i, g) in bins.lists[tile].iter().zip(partial) {
            screen_grads[i].add(g);
        }
    }

    let [sx, sy] = cam.pixel_scale;
    let grads = gs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if screen.skipped[i] {
                return GaussianGrad::default();
            }
            let sg = &screen_grads[i];
            let inv = screen.inv_cov[i];
            let a = Matrix2::new(inv[0], inv[1], inv[1], inv[2]);
            let g_a = Matrix2::new(sg.inv_cov[0], sg.inv_cov[1], sg.inv_cov[1], sg.inv_cov[2]);
            let g_cov = -(a * g_a * a);
            let mut g_sigma = Matrix3::zeros();
            g_sigma[(0, 0)] = sx * sx * g_cov[(0, 0)];
            g_sigma[(0, 1)] = sx * sy * g_cov[(0, 1)];
            g_sigma[(1, 0)] = sx * sy * g_cov[(1, 0)];
            g_sigma[(1, 1)] = sy * sy * g_cov[(1, 1)];
            let (d_scale, d_rot) = covariance_backward(g.scale, g.rotation, &g_sigma);
            GaussianGrad {
                center: [sg.mean[0] * sx, sg.mean[1] * sy, 0.0],
                scale: d_scale,
                rotation: d_rot,
                color: sg.color,
                opacity: sg.opacity,
            }
        })
        .collect();
    Ok(grads)
}

/// `dL/du` for every raw coordinate, chaining through activation, covariance
/// construction, projection and compositing.
pub fn render_backward(
    raw: &RawGaussians,
    clamp: ScaleClamp,
    cam: &CameraConfig,
    grad_image: &Image,
) -> Result<Vec<[f64; RAW_DIM]>, RenderError> {
    let gs = activate_parameters(raw, clamp)?;
    let screen = project(&gs, cam)?;
    let grads = render_backward_activated(&screen, &gs, cam, grad_image)?;
    Ok(activate_backward(raw, clamp, &grads))
}
