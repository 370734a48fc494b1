//! Weighted means in the quotient space of configurations modulo rotation.
//!
//! Minimizes `Σ cᵢ·r(X, Yᵢ)` by alternating between per-item optimal rotations
//! (with `X` fixed) and the weighted average `X = Σ cᵢ·Rᵢᵀ·Yᵢ / Σ cᵢ` (with the
//! rotations fixed). Each half-step is an exact block minimization, so the
//! objective never increases. The problem is non-convex and the result is a
//! local minimum.

use nalgebra::Matrix3xX;

use crate::error::{Error, Result};
use crate::geometry::{align_matrices, KeypointConfig, Rotation};

/// Configurations paired with positive weights.
#[derive(Debug, Clone)]
pub struct WeightedConfigSet {
    configs: Vec<KeypointConfig>,
    weights: Vec<f64>,
}

impl WeightedConfigSet {
    pub fn new(configs: Vec<KeypointConfig>, weights: Vec<f64>) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::invalid("weighted configuration set is empty"));
        }
        if configs.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} configurations but {} weights",
                configs.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(format!("weights must be positive, got {w}")));
        }
        let d = configs[0].len();
        if let Some(c) = configs.iter().find(|c| c.len() != d) {
            return Err(Error::invalid(format!(
                "keypoint counts differ within set: {} vs {d}",
                c.len()
            )));
        }
        Ok(Self { configs, weights })
    }

    /// Every configuration with weight 1.
    pub fn uniform(configs: Vec<KeypointConfig>) -> Result<Self> {
        let weights = vec![1.0; configs.len()];
        Self::new(configs, weights)
    }

    pub fn configs(&self) -> &[KeypointConfig] {
        &self.configs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.configs[0].len()
    }

    /// `Σ cᵢ·r(X, Yᵢ)`.
    pub fn objective(&self, x: &KeypointConfig) -> Result<f64> {
        if x.len() != self.keypoints() {
            return Err(Error::invalid("mean candidate has a different keypoint count"));
        }
        let (_, value, _) = self.rotation_step(x.coords());
        Ok(value)
    }

    fn rotation_step(&self, x: &Matrix3xX<f64>) -> (Vec<Rotation>, f64, bool) {
        let mut value = 0.0;
        let mut degenerate = false;
        let mut rotations = Vec::with_capacity(self.configs.len());
        for (y, w) in self.configs.iter().zip(&self.weights) {
            let a = align_matrices(x, y.coords());
            value += w * (a.rotation.matrix() * x - y.coords()).norm_squared();
            degenerate |= a.degenerate;
            rotations.push(a.rotation);
        }
        (rotations, value, degenerate)
    }

    fn mean_step(&self, rotations: &[Rotation]) -> (Matrix3xX<f64>, f64) {
        let total: f64 = self.weights.iter().sum();
        let mut x = Matrix3xX::zeros(self.keypoints());
        for ((y, r), w) in self.configs.iter().zip(rotations).zip(&self.weights) {
            x += r.matrix().transpose() * y.coords() * (*w);
        }
        x /= total;
        let value = self
            .configs
            .iter()
            .zip(rotations)
            .zip(&self.weights)
            .map(|((y, r), w)| w * (&x - r.matrix().transpose() * y.coords()).norm_squared())
            .sum();
        (x, value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuotientMeanOptions {
    pub max_iters: usize,
    /// Stop once `X` is within this Frobenius distance of the weighted mean of
    /// the configurations aligned to it.
    pub tol: f64,
}

impl Default for QuotientMeanOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-10,
        }
    }
}

impl QuotientMeanOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QuotientMean {
    /// The mean configuration, expressed in the frame of the first item.
    pub mean: KeypointConfig,
    /// `Rᵢ` with `Rᵢ·X* ≈ Yᵢ`; the first is the identity.
    pub rotations: Vec<Rotation>,
    /// `Σ cᵢ·r(X*, Yᵢ)`.
    pub objective: f64,
    /// `‖X* − Σ cᵢ·Rᵢᵀ·Yᵢ / Σ cᵢ‖_F` for the returned rotations.
    pub stationarity: f64,
    pub iterations: usize,
    /// Objective after every half-step, starting with the initial rotation step.
    pub trace: Vec<f64>,
    /// Some rotation in the final step was not unique.
    pub degenerate: bool,
}

/// Weighted quotient mean, started from the heaviest configuration (lowest
/// index on ties).
pub fn quotient_weighted_mean(
    set: &WeightedConfigSet,
    opts: QuotientMeanOptions,
) -> Result<QuotientMean> {
    let mut start = 0;
    for (i, w) in set.weights.iter().enumerate() {
        if *w > set.weights[start] {
            start = i;
        }
    }
    quotient_weighted_mean_from(set, &set.configs[start], opts)
}

/// Weighted quotient mean started from `init`.
///
/// The returned objective is never larger than `Σ cᵢ·r(init, Yᵢ)`.
pub fn quotient_weighted_mean_from(
    set: &WeightedConfigSet,
    init: &KeypointConfig,
    opts: QuotientMeanOptions,
) -> Result<QuotientMean> {
    opts.validate()?;
    if init.len() != set.keypoints() {
        return Err(Error::invalid("initial mean has a different keypoint count"));
    }

    let mut x = init.coords().clone();
    let (mut rotations, mut value, mut degenerate) = set.rotation_step(&x);
    let mut trace = vec![value];
    let mut iterations = 0;
    let stationarity = loop {
        let (next_x, mean_value) = set.mean_step(&rotations);
        let gap = (&next_x - &x).norm();
        if gap <= opts.tol || iterations == opts.max_iters {
            break gap;
        }
        iterations += 1;
        trace.push(mean_value);
        x = next_x;
        let (next_rot, rot_value, deg) = set.rotation_step(&x);
        trace.push(rot_value);
        rotations = next_rot;
        value = rot_value;
        degenerate = deg;
    };

    // Gauge: express X in the frame of the first item so that R₁ = I.
    let gauge = rotations[0];
    let x = gauge.matrix() * x;
    let mut rotations: Vec<Rotation> = rotations
        .iter()
        .map(|r| r.compose(&gauge.transpose()))
        .collect();
    rotations[0] = Rotation::identity();

    Ok(QuotientMean {
        mean: KeypointConfig::center_unchecked(x),
        rotations,
        objective: value,
        stationarity,
        iterations,
        trace,
        degenerate,
    })
}
