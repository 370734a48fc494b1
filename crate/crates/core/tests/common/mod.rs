//! Reference implementations used as test oracles.
//!
//! Nothing here calls into the library's SVD path: rotations come from Horn's
//! quaternion eigenproblem or from brute-force search, so agreement with the
//! library is a genuine cross-check.

#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix3xX, Matrix4, SymmetricEigen, UnitQuaternion, Quaternion};
use rand::Rng;
use rand_distr::StandardNormal;
use viewconsist_core::geometry::super_fibonacci_rotations;
use viewconsist_core::KeypointConfig;

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Matrix3xX<f64> {
    Matrix3xX::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_config<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> KeypointConfig {
    KeypointConfig::center(&random_matrix(rng, d, scale)).unwrap()
}

/// Uniformly distributed rotation matrix from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Rotation minimizing `‖R·X − Y‖²_F` by Horn's method: the dominant
/// eigenvector of a symmetric 4×4 matrix is the optimal unit quaternion.
pub fn horn_rotation(x: &Matrix3xX<f64>, y: &Matrix3xX<f64>) -> Matrix3<f64> {
    let s = x * y.transpose();
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let k = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(k);
    let q = Quaternion::new(v[0], v[1], v[2], v[3]);
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// `min_R ‖R·X − Y‖²_F` for raw (not necessarily centered) matrices.
pub fn horn_distance(x: &Matrix3xX<f64>, y: &Matrix3xX<f64>) -> f64 {
    (horn_rotation(x, y) * x - y).norm_squared()
}

/// A fixed set of quasi-uniform rotations for exhaustive search.
pub struct RotationGrid {
    mats: Vec<Matrix3<f64>>,
}

impl RotationGrid {
    pub fn new(n: usize) -> Self {
        let mats: Vec<Matrix3<f64>> = super_fibonacci_rotations(n)
            .into_iter()
            .map(|r| *r.matrix())
            .collect();
        for m in &mats {
            assert!((m.transpose() * m - Matrix3::identity()).amax() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
        Self { mats }
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    /// Smallest `‖R·X − Y‖²_F` over the grid, evaluated through the
    /// equivalent `‖X‖² + ‖Y‖² − 2·⟨R, Y·Xᵀ⟩`.
    pub fn min_residual(&self, x: &Matrix3xX<f64>, y: &Matrix3xX<f64>) -> f64 {
        let k = y * x.transpose();
        let best = self
            .mats
            .iter()
            .map(|r| r.component_mul(&k).sum())
            .fold(f64::NEG_INFINITY, f64::max);
        x.norm_squared() + y.norm_squared() - 2.0 * best
    }

    /// Largest angle from a random rotation to its nearest grid member, over
    /// `probes` random rotations.
    pub fn empirical_covering_angle<R: Rng + ?Sized>(&self, rng: &mut R, probes: usize) -> f64 {
        (0..probes)
            .map(|_| {
                let q = random_rotation(rng);
                self.mats
                    .iter()
                    .map(|m| {
                        let c = ((m.transpose() * q).trace() - 1.0) / 2.0;
                        c.clamp(-1.0, 1.0).acos()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }
}

/// Upper bound on `grid_min − exact_min` when every rotation is within
/// `angle` of some grid member: rotating the optimum by `δ` raises the
/// residual by at most `4·(1 − cos δ)·‖X‖·‖Y‖`.
pub fn grid_resolution_bound(x: &Matrix3xX<f64>, y: &Matrix3xX<f64>, angle: f64) -> f64 {
    4.0 * (1.0 - angle.cos()) * x.norm() * y.norm()
}

/// Central differences of `f` at every entry of `x`.
pub fn central_difference(
    f: impl Fn(&Matrix3xX<f64>) -> f64,
    x: &Matrix3xX<f64>,
    h: f64,
) -> Matrix3xX<f64> {
    let mut grad = Matrix3xX::zeros(x.ncols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let plus = f(&probe);
        probe[idx] = orig - h;
        let minus = f(&probe);
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest entrywise relative error, with entries below `floor·‖expected‖_∞`
/// compared against that floor instead of their own magnitude.
pub fn max_relative_error(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let denom_floor = (floor * scale).max(1e-300);
    actual
        .iter()
        .zip(expected)
        .map(|(a, e)| (a - e).abs() / e.abs().max(denom_floor))
        .fold(0.0, f64::max)
}

/// `Σ cᵢ·min_R ‖R·X − Yᵢ‖²` via Horn rotations.
pub fn weighted_objective(x: &Matrix3xX<f64>, ys: &[Matrix3xX<f64>], w: &[f64]) -> f64 {
    ys.iter().zip(w).map(|(y, c)| c * horn_distance(x, y)).sum()
}

/// Independent alternating minimization for the weighted quotient mean from
/// random initial rotations; returns the best objective over `restarts`.
pub fn restart_quotient_mean<R: Rng + ?Sized>(
    rng: &mut R,
    ys: &[Matrix3xX<f64>],
    w: &[f64],
    restarts: usize,
) -> (f64, Matrix3xX<f64>) {
    let total: f64 = w.iter().sum();
    let mut best = (f64::INFINITY, ys[0].clone());
    for _ in 0..restarts {
        let mut rots: Vec<Matrix3<f64>> = ys.iter().map(|_| random_rotation(rng)).collect();
        let mut x = Matrix3xX::zeros(ys[0].ncols());
        for _ in 0..20_000 {
            let mut next = Matrix3xX::zeros(ys[0].ncols());
            for ((y, r), c) in ys.iter().zip(&rots).zip(w) {
                next += r.transpose() * y * *c;
            }
            next /= total;
            let moved = (&next - &x).norm();
            x = next;
            // R maps X onto Y, so Rᵀ·Y is Y brought back to X's frame.
            rots = ys.iter().map(|y| horn_rotation(&x, y)).collect();
            if moved < 1e-13 {
                break;
            }
        }
        let value = weighted_objective(&x, ys, w);
        if value < best.0 {
            best = (value, x);
        }
    }
    best
}
