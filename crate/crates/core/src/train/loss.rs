use super::TrainError;
use crate::canvas::Image;
use crate::vit::{MaskSpec, PatchGrid};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which pixels the reconstruction loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Pixels of masked patches only.
    #[default]
    Masked,
    /// Every pixel.
    All,
    /// Masked patches, against a per-patch mean/std normalized target.
    MaskedNormalized,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Masked => "masked",
            LossMode::All => "all",
            LossMode::MaskedNormalized => "masked_normalized",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked" => Ok(LossMode::Masked),
            "all" => Ok(LossMode::All),
            "masked_normalized" | "masked-normalized" => Ok(LossMode::MaskedNormalized),
            other => Err(format!("unknown loss mode '{other}' (masked, all, masked_normalized)")),
        }
    }
}

const NORM_EPS: f64 = 1e-6;

/// Reconstruction loss of `rendered` against `target`.
pub fn masked_mse(
    rendered: &Image,
    target: &Image,
    mask: &MaskSpec,
    grid: &PatchGrid,
    mode: LossMode,
) -> Result<f64, TrainError> {
    masked_mse_with_grad(rendered, target, mask, grid, mode).map(|(l, _)| l)
}

/// Loss plus `dL/d rendered`.
pub fn masked_mse_with_grad(
    rendered: &Image,
    target: &Image,
    mask: &MaskSpec,
    grid: &PatchGrid,
    mode: LossMode,
) -> Result<(f64, Image), TrainError> {
    if rendered.dims() != target.dims() || rendered.dims() != (grid.height, grid.width) {
        return Err(TrainError::Shape(format!(
            "rendered {:?}, target {:?}, grid {}x{}",
            rendered.dims(),
            target.dims(),
            grid.height,
            grid.width
        )));
    }
    if mask.num_tokens() != grid.num_tokens() {
        return Err(TrainError::Shape(format!(
            "mask covers {} tokens, grid has {}",
            mask.num_tokens(),
            grid.num_tokens()
        )));
    }
    let tokens: Vec<usize> = match mode {
        LossMode::All => (0..grid.num_tokens()).collect(),
        LossMode::Masked | LossMode::MaskedNormalized => mask.masked.clone(),
    };
    if tokens.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let count = (tokens.len() * grid.patch * grid.patch * 3) as f64;
    let mut grad = Image::new(grid.height, grid.width);
    let mut total = 0.0;
    for &t in &tokens {
        let (y0, y1, x0, x1) = grid.token_rect(t);
        let (shift, inv_std) = if mode == LossMode::MaskedNormalized {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    for v in target.pixel(y, x) {
                        sum += v;
                        sum_sq += v * v;
                    }
                }
            }
            let n = (grid.patch * grid.patch * 3) as f64;
            let mean = sum / n;
            // Unbiased variance, as in the usual normalized-pixel target.
            let var = (sum_sq - n * mean * mean).max(0.0) / (n - 1.0).max(1.0);
            (mean, 1.0 / (var + NORM_EPS).sqrt())
        } else {
            (0.0, 1.0)
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let r = rendered.pixel(y, x);
                let tg = target.pixel(y, x);
                let g = std::array::from_fn(|c| {
                    let diff = r[c] - (tg[c] - shift) * inv_std;
                    total += diff * diff;
                    2.0 * diff / count
                });
                grad.set_pixel(y, x, g);
            }
        }
    }
    Ok((total / count, grad))
}
