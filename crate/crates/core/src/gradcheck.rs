//! Central finite-difference checks of the analytic gradients.
//!
//! The forward pass is piecewise smooth: footprint cutoffs, the opacity clamp,
//! the degenerate-covariance skip and the depth order all switch discretely.
//! Each probe therefore compares an active-set signature at `u`, `u + h` and
//! `u - h`, and shrinks `h` until all three agree. A coordinate that never
//! agrees sits on a switch and is reported as unresolved.

use crate::canvas::Image;
use crate::gaussian::{activate_parameters, GaussianSet, RawGaussians, ScaleClamp, RAW_DIM};
use crate::render::{kernel_alpha, mahalanobis, project, render_backward, render_tiled, CameraConfig, RenderError, ALPHA_MAX};
use crate::train::{masked_mse, reconstruct, sample_loss_and_grad, LossMode, TrainError};
use crate::vit::{GmaeModel, MaskSpec};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const SLOT_NAMES: [&str; RAW_DIM] = [
    "center.x", "center.y", "center.z", "scale.x", "scale.y", "scale.z", "rot.w", "rot.x", "rot.y", "rot.z",
    "color.r", "color.g", "color.b", "opacity",
];

/// Pass rule: `|a - n| <= max(rel * max(|a|, |n|), abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-4, abs: 1e-7 }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= (self.rel * analytic.abs().max(numeric.abs())).max(self.abs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub label: String,
    pub analytic: f64,
    /// `None` when no step size avoided a switch.
    pub numeric: Option<f64>,
    pub step: f64,
    pub passed: bool,
}

impl CoordCheck {
    /// `|a - n| / max(|a|, |n|, abs / rel)`: below `tol.rel` exactly when
    /// the check passes, and meaningful for vanishing gradients too.
    pub fn rel_error(&self, tol: Tolerance) -> f64 {
        self.numeric.map_or(0.0, |n| {
            let scale = self.analytic.abs().max(n.abs()).max(tol.abs / tol.rel);
            (self.analytic - n).abs() / scale
        })
    }

    pub fn abs_error(&self) -> f64 {
        self.numeric.map_or(0.0, |n| (self.analytic - n).abs())
    }
}

/// Per-label aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub label: String,
    pub checked: usize,
    pub unresolved: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Groups checks by label in first-seen order.
pub fn summarize(checks: &[CoordCheck], tol: Tolerance) -> Vec<GradCheckRow> {
    let mut rows: Vec<GradCheckRow> = Vec::new();
    for c in checks {
        let row = match rows.iter_mut().position(|r| r.label == c.label) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(GradCheckRow {
                    label: c.label.clone(),
                    checked: 0,
                    unresolved: 0,
                    max_rel_error: 0.0,
                    max_abs_error: 0.0,
                    passed: true,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.checked += 1;
        row.unresolved += c.numeric.is_none() as usize;
        row.max_rel_error = row.max_rel_error.max(c.rel_error(tol));
        row.max_abs_error = row.max_abs_error.max(c.abs_error());
        row.passed &= c.passed;
    }
    rows
}

/// Discrete state of the forward pass: skip flags, depth order, and for each
/// pixel and Gaussian whether it is outside the cutoff, blended, or clamped.
pub fn active_set_signature(gs: &GaussianSet, cam: &CameraConfig) -> Result<Vec<u32>, RenderError> {
    let screen = project(gs, cam)?;
    let mut sig: Vec<u32> = screen.skipped.iter().map(|&s| s as u32).collect();
    sig.extend(screen.order.iter().map(|&i| i as u32));
    let cutoff_sq = cam.cutoff * cam.cutoff;
    for y in 0..cam.height {
        for x in 0..cam.width {
            for &i in &screen.order {
                if screen.skipped[i] {
                    continue;
                }
                let dx = x as f64 - screen.means[i][0];
                let dy = y as f64 - screen.means[i][1];
                let m = mahalanobis(&screen.inv_cov[i], dx, dy);
                let state = if m > cutoff_sq {
                    0
                } else if kernel_alpha(gs.items()[i].opacity, m).0 >= ALPHA_MAX {
                    2
                } else {
                    1
                };
                sig.push(state);
            }
        }
    }
    Ok(sig)
}

const STEPS: [f64; 4] = [1e-6, 1e-7, 1e-8, 1e-9];

/// Central difference of `f` at a point where `signature` must stay constant.
fn probe<E>(
    mut eval: impl FnMut(f64) -> Result<(f64, Vec<u32>), E>,
    base_sig: &[u32],
    steps: &[f64],
) -> Result<(Option<f64>, f64), E> {
    for &h in steps {
        let (lp, sp) = eval(h)?;
        let (lm, sm) = eval(-h)?;
        if sp == base_sig && sm == base_sig {
            return Ok((Some((lp - lm) / (2.0 * h)), h));
        }
    }
    Ok((None, *steps.last().expect("non-empty steps")))
}

fn weighted_sum(img: &Image, weights: &Image) -> f64 {
    img.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn render_loss(raw: &RawGaussians, clamp: ScaleClamp, cam: &CameraConfig, weights: &Image) -> Result<(f64, Vec<u32>), RenderError> {
    let gs = activate_parameters(raw, clamp)?;
    let screen = project(&gs, cam)?;
    let img = render_tiled(&screen, &gs, cam).image;
    Ok((weighted_sum(&img, weights), active_set_signature(&gs, cam)?))
}

/// Checks `d(Σ weights ⊙ render)/d raw` for every raw coordinate.
pub fn check_render_gradients(
    raw: &RawGaussians,
    clamp: ScaleClamp,
    cam: &CameraConfig,
    weights: &Image,
    tol: Tolerance,
) -> Result<Vec<CoordCheck>, RenderError> {
    let analytic = render_backward(raw, clamp, cam, weights)?;
    let (_, base_sig) = render_loss(raw, clamp, cam, weights)?;
    let mut out = Vec::with_capacity(raw.len() * RAW_DIM);
    for g in 0..raw.len() {
        for (slot, name) in SLOT_NAMES.iter().enumerate() {
            let (numeric, step) = probe(
                |h| {
                    let mut p = raw.clone();
                    p.rows_mut()[g][slot] += h;
                    render_loss(&p, clamp, cam, weights)
                },
                &base_sig,
                &STEPS,
            )?;
            let a = analytic[g][slot];
            out.push(CoordCheck {
                label: name.to_string(),
                analytic: a,
                numeric,
                step,
                passed: numeric.is_none_or(|n| tol.accepts(a, n)),
            });
        }
    }
    Ok(out)
}

fn model_loss(
    model: &GmaeModel,
    cam: &CameraConfig,
    image: &Image,
    mask: &MaskSpec,
    mode: LossMode,
) -> Result<(f64, Vec<u32>), TrainError> {
    let rec = reconstruct(model, cam, image, mask)?;
    let grid = model.grid();
    let mode = if mask.masked.is_empty() { LossMode::All } else { mode };
    let loss = masked_mse(&rec.image, image, mask, &grid, mode)?;
    Ok((loss, active_set_signature(&rec.gaussians, cam)?))
}

/// Checks the end-to-end loss gradient for the flat parameter indices
/// `coords`, each labelled with its tensor name.
pub fn check_model_gradients(
    model: &GmaeModel,
    cam: &CameraConfig,
    image: &Image,
    mask: &MaskSpec,
    mode: LossMode,
    coords: &[usize],
    tol: Tolerance,
) -> Result<Vec<CoordCheck>, TrainError> {
    let mut grads = model.params().zeros_like();
    sample_loss_and_grad(model, cam, image, mask, mode, &mut grads)?;
    let (_, base_sig) = model_loss(model, cam, image, mask, mode)?;
    let steps = [1e-5, 1e-6, 1e-7];
    let mut out = Vec::with_capacity(coords.len());
    for &flat in coords {
        let (id, offset) = model.params().locate(flat).expect("coordinate inside the store");
        let (numeric, step) = probe(
            |h| {
                let mut m = model.clone();
                m.params_mut().tensor_mut(id).data[offset] += h;
                model_loss(&m, cam, image, mask, mode)
            },
            &base_sig,
            &steps,
        )?;
        let a = grads.tensor(id).data[offset];
        out.push(CoordCheck {
            label: model.params().name(id).to_string(),
            analytic: a,
            numeric,
            step,
            passed: numeric.is_none_or(|n| tol.accepts(a, n)),
        });
    }
    Ok(out)
}

/// Flat indices of `count` distinct trainable coordinates, drawn uniformly.
pub fn sample_trainable_coords(model: &GmaeModel, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut trainable = Vec::new();
    let mut base = 0;
    for e in model.params().entries() {
        if e.trainable {
            trainable.extend(base..base + e.tensor.len());
        }
        base += e.tensor.len();
    }
    rand::seq::index::sample(rng, trainable.len(), count.min(trainable.len()))
        .into_iter()
        .map(|i| trainable[i])
        .collect()
}

/// Random raw Gaussians that mostly land in view with visible footprints.
pub fn random_raw_scene(rng: &mut impl Rng, count: usize) -> RawGaussians {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    RawGaussians::new(
        (0..count)
            .map(|_| {
                let mut u = [0.0; RAW_DIM];
                for (slot, v) in u.iter_mut().enumerate() {
                    *v = match slot {
                        0 | 1 => 0.6 * n.sample(rng),
                        2 => n.sample(rng),
                        3..=5 => rng.random_range(-3.0..-0.5),
                        _ => n.sample(rng),
                    };
                }
                u
            })
            .collect(),
    )
}

/// Uniform weights in [-1, 1], one per output channel.
pub fn random_weights(rng: &mut impl Rng, height: usize, width: usize) -> Image {
    Image::from_vec(height, width, (0..height * width * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tolerance_rule() {
        let t = Tolerance::default();
        assert!(t.accepts(1.0, 1.0 + 5e-5));
        assert!(!t.accepts(1.0, 1.0 + 5e-4));
        assert!(t.accepts(0.0, 5e-8));
        assert!(!t.accepts(0.0, 5e-7));
    }

    #[test]
    fn small_scene_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = CameraConfig::new(12, 12);
        let raw = random_raw_scene(&mut rng, 3);
        let w = random_weights(&mut rng, 12, 12);
        let checks = check_render_gradients(&raw, ScaleClamp::default(), &cam, &w, Tolerance::default()).unwrap();
        assert_eq!(checks.len(), 42);
        for row in summarize(&checks, Tolerance::default()) {
            assert!(row.passed, "{row:?}");
        }
    }
}
