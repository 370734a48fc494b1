//! Keypoint configurations modulo rotation.
//!
//! A configuration is a 3×d matrix whose columns are ordered keypoints with
//! the centroid at the origin. Two configurations are compared by
//!
//! ```text
//! r(X, Y) = min_{R ∈ SO(3)} ‖R·X − Y‖²_F
//! ```
//!
//! which has a closed form through the SVD of `Y·Xᵀ` and a gradient
//! `2·(X − Rᵀ·Y)` in its first argument.

use nalgebra::{Matrix3, Matrix3xX, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance on the row sums of a centered configuration.
const CENTER_TOL: f64 = 1e-9;

/// `σ₂ ≤ RANK_TOL·σ₁` marks `Y·Xᵀ` as rank ≤ 1, where the optimal rotation is
/// not unique.
const RANK_TOL: f64 = 1e-10;

/// Ordered 3D keypoints with their centroid at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointConfig {
    coords: Matrix3xX<f64>,
}

impl KeypointConfig {
    /// Wraps an already-centered matrix, checking the invariants.
    pub fn new(coords: Matrix3xX<f64>) -> Result<Self> {
        check_shape_and_finite(&coords)?;
        for (k, row) in coords.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            let scale: f64 = row.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            if sum.abs() > CENTER_TOL * scale {
                return Err(Error::invalid(format!(
                    "row {k} of keypoint configuration sums to {sum:e}, expected 0"
                )));
            }
        }
        Ok(Self { coords })
    }

    /// Subtracts the column mean from every column.
    pub fn center(raw: &Matrix3xX<f64>) -> Result<Self> {
        check_shape_and_finite(raw)?;
        Ok(Self::center_unchecked(raw.clone()))
    }

    pub(crate) fn center_unchecked(mut raw: Matrix3xX<f64>) -> Self {
        let mean = raw.column_mean();
        for mut col in raw.column_iter_mut() {
            col -= mean;
        }
        Self { coords: raw }
    }

    /// Builds a configuration from column-major `[x₀ y₀ z₀ x₁ …]` data and centers it.
    pub fn from_column_slice(data: &[f64]) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "flat keypoint data has length {}, not a multiple of 3",
                data.len()
            )));
        }
        Self::center(&Matrix3xX::from_column_slice(data))
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            coords: Matrix3xX::zeros(d),
        }
    }

    pub fn coords(&self) -> &Matrix3xX<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> Matrix3xX<f64> {
        self.coords
    }

    /// Number of keypoints `d`.
    pub fn len(&self) -> usize {
        self.coords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.ncols() == 0
    }

    pub fn keypoint(&self, j: usize) -> Vector3<f64> {
        self.coords.column(j).into_owned()
    }

    pub fn norm_squared(&self) -> f64 {
        self.coords.norm_squared()
    }

    /// Column-major flat copy, the inverse of [`KeypointConfig::from_column_slice`].
    pub fn to_column_vec(&self) -> Vec<f64> {
        self.coords.as_slice().to_vec()
    }

    pub fn rotated(&self, rotation: &Rotation) -> Self {
        Self {
            coords: rotation.matrix() * &self.coords,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coords: &self.coords * factor,
        }
    }

    /// Length of the diagonal of the axis-aligned bounding box.
    pub fn bbox_diagonal(&self) -> f64 {
        let extent = Vector3::from_fn(|r, _| {
            let row = self.coords.row(r);
            row.max() - row.min()
        });
        extent.norm()
    }

    pub(crate) fn check_same_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "keypoint counts differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

fn check_shape_and_finite(m: &Matrix3xX<f64>) -> Result<()> {
    if m.ncols() < 2 {
        return Err(Error::invalid(format!(
            "a keypoint configuration needs at least 2 keypoints, got {}",
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("keypoint configuration has non-finite entries"));
    }
    Ok(())
}

/// A proper rotation of 3-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub const ORTHO_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Checks orthonormality and unit determinant.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let err = (m.transpose() * m - Matrix3::identity()).amax();
        if err > Self::ORTHO_TOL {
            return Err(Error::invalid(format!(
                "matrix is not orthonormal (max deviation {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > Self::ORTHO_TOL {
            return Err(Error::invalid(format!("rotation determinant is {det}, expected 1")));
        }
        Ok(Self(m))
    }

    /// Rotation from a quaternion `(w, x, y, z)`; the quaternion is normalized first.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = axis.normalize();
        let (s, c) = (angle / 2.0).sin_cos();
        Self::from_quaternion(c, s * axis.x, s * axis.y, s * axis.z)
    }

    /// Haar-uniform random rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        Self::from_quaternion(q[0], q[1], q[2], q[3])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let c = ((self.0.transpose() * other.0).trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        std::array::from_fn(|i| std::array::from_fn(|j| r.0[(i, j)]))
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Rotation::from_matrix(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

/// Deterministic, well-spread set of `n` rotations (super-Fibonacci spiral on
/// the unit quaternion sphere).
pub fn super_fibonacci_rotations(n: usize) -> Vec<Rotation> {
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533_751_168_755_204_3;
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let t = s / n as f64;
            let r = t.sqrt();
            let big_r = (1.0 - t).sqrt();
            let alpha = tau * s / PHI;
            let beta = tau * s / PSI;
            Rotation::from_quaternion(
                r * alpha.sin(),
                r * alpha.cos(),
                big_r * beta.sin(),
                big_r * beta.cos(),
            )
        })
        .collect()
}

/// Optimal rotation between two configurations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Minimizer of `‖R·X − Y‖²_F`.
    pub rotation: Rotation,
    /// `Y·Xᵀ` has rank ≤ 1; the minimizer is not unique and `rotation` is one
    /// of the tied choices.
    pub degenerate: bool,
}

/// Rotation `R` minimizing `‖R·X − Y‖²_F`.
///
/// With `Y·Xᵀ = U·Σ·Vᵀ` (singular values descending) the result is
/// `U·diag(1, 1, s)·Vᵀ`. The sign `s` is `det(U)·det(V)`, which equals
/// `sign(det(X·Yᵀ))` whenever that determinant is nonzero and still yields a
/// proper rotation when it vanishes.
pub fn optimal_rotation(x: &KeypointConfig, y: &KeypointConfig) -> Result<Alignment> {
    x.check_same_len(y)?;
    Ok(align_matrices(x.coords(), y.coords()))
}

pub(crate) fn align_matrices(x: &Matrix3xX<f64>, y: &Matrix3xX<f64>) -> Alignment {
    let h: Matrix3<f64> = y * x.transpose();
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => unreachable!("3x3 SVD always returns U and Vᵀ when requested"),
    };
    let sv = svd.singular_values;
    let s = if u.determinant() * v_t.determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, s));
    let r = u * d * v_t;
    let degenerate = sv[0] == 0.0 || sv[1] <= RANK_TOL * sv[0];
    Alignment {
        rotation: Rotation(r),
        degenerate,
    }
}

/// Pose-invariant squared distance `r(X, Y)`.
///
/// Equal to `‖X‖² + ‖Y‖² − 2·trace(R·X·Yᵀ)` at the optimal `R`; evaluated as
/// the residual `‖R·X − Y‖²` to avoid cancellation, so it is never negative.
pub fn pose_invariant_distance(x: &KeypointConfig, y: &KeypointConfig) -> Result<f64> {
    let alignment = optimal_rotation(x, y)?;
    Ok(distance_from_alignment(x.coords(), y.coords(), &alignment))
}

pub(crate) fn distance_from_alignment(
    x: &Matrix3xX<f64>,
    y: &Matrix3xX<f64>,
    alignment: &Alignment,
) -> f64 {
    (alignment.rotation.matrix() * x - y).norm_squared()
}

/// `r(X, Y)` for inputs whose shapes were already checked.
pub(crate) fn distance_unchecked(x: &KeypointConfig, y: &KeypointConfig) -> f64 {
    let alignment = align_matrices(x.coords(), y.coords());
    distance_from_alignment(x.coords(), y.coords(), &alignment)
}

/// Gradient of `r(X, Y)` with respect to `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGradient {
    pub gradient: Matrix3xX<f64>,
    pub degenerate: bool,
}

/// `∂r/∂X = 2·(X − Rᵀ·Y)` with `R` the optimal rotation of `X` onto `Y`.
pub fn pose_invariant_gradient(x: &KeypointConfig, y: &KeypointConfig) -> Result<DistanceGradient> {
    let alignment = optimal_rotation(x, y)?;
    let gradient = (x.coords() - alignment.rotation.matrix().transpose() * y.coords()) * 2.0;
    Ok(DistanceGradient {
        gradient,
        degenerate: alignment.degenerate,
    })
}
