//! Gaussian primitives: raw decoder vectors, their activation into bounded
//! parameters, and the rotation/covariance construction `Σ = R S Sᵀ Rᵀ`.
//!
//! Raw layout of one 14-vector:
//!
//! | slots   | quantity   | activation                  |
//! |---------|------------|-----------------------------|
//! | 0..3    | center p   | `tanh`                      |
//! | 3..6    | scale s    | `c · sigmoid`               |
//! | 6..10   | rotation φ | `sigmoid`, then unit-normed |
//! | 10..13  | color r    | `sigmoid`                   |
//! | 13      | opacity o  | `sigmoid`                   |

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Number of raw parameters per Gaussian.
pub const RAW_DIM: usize = 14;

/// Tolerance on the quaternion norm accepted by [`quaternion_to_rotation`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("non-finite raw value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("raw matrix has {len} values, not a multiple of {RAW_DIM}")]
    BadLength { len: usize },
    #[error("scale clamp must be positive and finite, got {0}")]
    BadClamp(f64),
    #[error("quaternion norm {0} is not within {UNIT_TOLERANCE} of 1")]
    NotUnit(f64),
    #[error("scale component {index} is {value}, must be positive")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("gaussian {index} violates invariant: {what}")]
    Invariant { index: usize, what: &'static str },
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maximum Gaussian extent `c` in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleClamp(f64);

impl ScaleClamp {
    pub fn new(c: f64) -> Result<Self, GaussianError> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(GaussianError::BadClamp(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for ScaleClamp {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Pre-activation decoder output, one 14-vector per Gaussian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawGaussians {
    rows: Vec<[f64; RAW_DIM]>,
}

impl RawGaussians {
    pub fn new(rows: Vec<[f64; RAW_DIM]>) -> Self {
        Self { rows }
    }

    /// Builds from a flat row-major `K×14` buffer.
    pub fn from_flat(values: &[f64]) -> Result<Self, GaussianError> {
        if values.len() % RAW_DIM != 0 {
            return Err(GaussianError::BadLength { len: values.len() });
        }
        let rows = values
            .chunks_exact(RAW_DIM)
            .map(|c| {
                let mut row = [0.0; RAW_DIM];
                row.copy_from_slice(c);
                row
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn zeros(count: usize) -> Self {
        Self {
            rows: vec![[0.0; RAW_DIM]; count],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[f64; RAW_DIM]] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [[f64; RAW_DIM]] {
        &mut self.rows
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<(), GaussianError> {
        for (row, values) in self.rows.iter().enumerate() {
            for (col, &value) in values.iter().enumerate() {
                if !value.is_finite() {
                    return Err(GaussianError::NonFinite { row, col, value });
                }
            }
        }
        Ok(())
    }
}

/// One activated Gaussian primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub center: [f64; 3],
    pub scale: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Gaussian {
    pub fn covariance(&self) -> Result<Matrix3<f64>, GaussianError> {
        build_covariance(self.scale, self.rotation)
    }
}

/// A set of activated Gaussians satisfying the range invariants.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    items: Vec<Gaussian>,
}

impl GaussianSet {
    /// Checks every invariant against `clamp` before accepting the set.
    pub fn new(items: Vec<Gaussian>, clamp: ScaleClamp) -> Result<Self, GaussianError> {
        let set = Self { items };
        set.validate(clamp)?;
        Ok(set)
    }

    /// Accepts the set without range checks; for callers that construct
    /// edge-case scenes (e.g. saturated opacities) on purpose.
    pub fn new_unchecked(items: Vec<Gaussian>) -> Self {
        Self { items }
    }

    pub fn validate(&self, clamp: ScaleClamp) -> Result<(), GaussianError> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        for (index, g) in self.items.iter().enumerate() {
            let err = |what| Err(GaussianError::Invariant { index, what });
            let norm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return err("quaternion is not unit length");
            }
            if !g.scale.iter().all(|&s| s > 0.0 && s < clamp.value()) {
                return err("scale outside (0, c)");
            }
            if !g.center.iter().all(|p| p.abs() <= 1.0) {
                return err("center outside [-1, 1]^3");
            }
            if !g.color.iter().all(|&r| open_unit(r)) {
                return err("color outside (0, 1)");
            }
            if !open_unit(g.opacity) {
                return err("opacity outside (0, 1)");
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Gaussian] {
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.items.iter()
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i]).collect(),
        }
    }
}

/// Maps raw decoder outputs to a [`GaussianSet`].
pub fn activate_parameters(
    raw: &RawGaussians,
    clamp: ScaleClamp,
) -> Result<GaussianSet, GaussianError> {
    raw.validate()?;
    let c = clamp.value();
    let items = raw
        .rows()
        .iter()
        .map(|u| {
            let q = [
                sigmoid(u[6]),
                sigmoid(u[7]),
                sigmoid(u[8]),
                sigmoid(u[9]),
            ];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            Gaussian {
                center: [u[0].tanh(), u[1].tanh(), u[2].tanh()],
                scale: [c * sigmoid(u[3]), c * sigmoid(u[4]), c * sigmoid(u[5])],
                rotation: [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm],
                color: [sigmoid(u[10]), sigmoid(u[11]), sigmoid(u[12])],
                opacity: sigmoid(u[13]),
            }
        })
        .collect();
    // Saturated inputs can round to the closed bounds; the set is built
    // without the open-interval check for that reason.
    Ok(GaussianSet { items })
}

/// Gradient of a scalar loss w.r.t. the activated parameters of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub center: [f64; 3],
    pub scale: [f64; 3],
    /// W.r.t. the unit quaternion.
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Chains activated-parameter gradients back to the raw 14-vectors.
pub fn activate_backward(
    raw: &RawGaussians,
    clamp: ScaleClamp,
    grads: &[GaussianGrad],
) -> Vec<[f64; RAW_DIM]> {
    assert_eq!(raw.len(), grads.len(), "gradient count mismatch");
    let c = clamp.value();
    raw.rows()
        .iter()
        .zip(grads)
        .map(|(u, g)| {
            let mut out = [0.0; RAW_DIM];
            for i in 0..3 {
                let t = u[i].tanh();
                out[i] = g.center[i] * (1.0 - t * t);
                let s = sigmoid(u[3 + i]);
                out[3 + i] = g.scale[i] * c * s * (1.0 - s);
                let r = sigmoid(u[10 + i]);
                out[10 + i] = g.color[i] * r * (1.0 - r);
            }
            let o = sigmoid(u[13]);
            out[13] = g.opacity * o * (1.0 - o);

            let v: [f64; 4] = std::array::from_fn(|i| sigmoid(u[6 + i]));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let q: [f64; 4] = std::array::from_fn(|i| v[i] / norm);
            let q_dot_g: f64 = (0..4).map(|i| q[i] * g.rotation[i]).sum();
            for i in 0..4 {
                let dv = (g.rotation[i] - q[i] * q_dot_g) / norm;
                out[6 + i] = dv * v[i] * (1.0 - v[i]);
            }
            out
        })
        .collect()
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: [f64; 4]) -> Result<Matrix3<f64>, GaussianError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GaussianError::NotUnit(norm));
    }
    Ok(rotation_unchecked(q))
}

pub(crate) fn rotation_unchecked(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Vector-Jacobian product of [`quaternion_to_rotation`] (treating the
/// quaternion entries as free variables).
pub(crate) fn rotation_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(s)`.
pub fn build_covariance(s: [f64; 3], q: [f64; 4]) -> Result<Matrix3<f64>, GaussianError> {
    for (index, &value) in s.iter().enumerate() {
        if !(value > 0.0) {
            return Err(GaussianError::NonPositiveScale { index, value });
        }
    }
    let r = quaternion_to_rotation(q)?;
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    let sigma = m * m.transpose();
    // Symmetrize so downstream code can rely on exact symmetry.
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Given `dL/dΣ` (symmetric), returns `(dL/ds, dL/dφ)`.
pub(crate) fn covariance_backward(
    s: [f64; 3],
    q: [f64; 4],
    d_sigma: &Matrix3<f64>,
) -> ([f64; 3], [f64; 4]) {
    let r = rotation_unchecked(q);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_s = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_r[(i, j)] = d_m[(i, j)] * s[j];
            d_s[j] += d_m[(i, j)] * r[(i, j)];
        }
    }
    (d_s, rotation_backward(q, &d_r))
}
