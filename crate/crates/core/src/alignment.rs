//! Alignment between source labels and per-object target latents.
//!
//! All nearest-neighbour searches are exhaustive over the pose-invariant
//! distance. Ties resolve to the lowest index.
//!
//! Both sides of the Chamfer term are treated as sets: a configuration that
//! appears several times, coordinate for coordinate, counts once in its
//! average. That is what makes the term insensitive to how often a shape is
//! repeated on either side.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance_unchecked, KeypointConfig};
use crate::quotient::{quotient_weighted_mean_from, QuotientMeanOptions, WeightedConfigSet};

/// Smallest value returned by [`estimate_sigma`].
pub const SIGMA_FLOOR: f64 = 1e-8;

fn check_family(what: &str, configs: &[KeypointConfig]) -> Result<usize> {
    let first = configs
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} is empty")))?;
    let d = first.len();
    if configs.iter().any(|c| c.len() != d) {
        return Err(Error::invalid(format!("{what} mixes keypoint counts")));
    }
    Ok(d)
}

/// `true` at the first occurrence of every distinct configuration.
fn first_occurrences(configs: &[KeypointConfig]) -> Vec<bool> {
    let mut seen = HashSet::with_capacity(configs.len());
    configs
        .iter()
        .map(|c| {
            // adding 0.0 folds −0.0 into +0.0 so the two compare equal
            let key: Vec<u64> = c.coords().iter().map(|v| (v + 0.0).to_bits()).collect();
            seen.insert(key)
        })
        .collect()
}

/// Ground-truth configurations of the labeled source set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBank {
    labels: Vec<KeypointConfig>,
    first: Vec<bool>,
}

impl LabelBank {
    pub fn new(labels: Vec<KeypointConfig>) -> Result<Self> {
        check_family("label bank", &labels)?;
        let first = first_occurrences(&labels);
        Ok(Self { labels, first })
    }

    /// Number of distinct labels.
    pub fn distinct_len(&self) -> usize {
        self.first.iter().filter(|f| **f).count()
    }

    pub fn labels(&self) -> &[KeypointConfig] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.labels[0].len()
    }
}

/// One latent configuration per target object.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    latents: Vec<KeypointConfig>,
    first: Vec<bool>,
}

impl LatentSet {
    pub fn new(latents: Vec<KeypointConfig>) -> Result<Self> {
        check_family("latent set", &latents)?;
        let first = first_occurrences(&latents);
        Ok(Self { latents, first })
    }

    /// Number of distinct latents.
    pub fn distinct_len(&self) -> usize {
        self.first.iter().filter(|f| **f).count()
    }

    pub fn latents(&self) -> &[KeypointConfig] {
        &self.latents
    }

    pub fn into_latents(self) -> Vec<KeypointConfig> {
        self.latents
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.latents[0].len()
    }
}

/// Which quantity the mean nearest-label distance estimates in the density
/// kernel `exp(−r / 2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// `σ² = mean r`, which keeps the exponent dimensionless.
    #[default]
    SquaredMeanDistance,
    /// `σ = mean r`.
    MeanDistance,
}

/// `r(Mᵢ, Y_I)` for every latent/label pair, row-major by latent.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceTable {
    pub fn compute(configs: &[KeypointConfig], bank: &LabelBank) -> Result<Self> {
        let d = check_family("configuration list", configs)?;
        if d != bank.keypoints() {
            return Err(Error::invalid(format!(
                "configurations have {d} keypoints, labels have {}",
                bank.keypoints()
            )));
        }
        let values: Vec<f64> = configs
            .par_iter()
            .flat_map_iter(|m| bank.labels.iter().map(move |y| distance_unchecked(m, y)))
            .collect();
        Ok(Self {
            rows: configs.len(),
            cols: bank.len(),
            values,
        })
    }

    pub fn get(&self, i: usize, label: usize) -> f64 {
        self.values[i * self.cols + label]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Index and value of the nearest label for row `i`.
    pub fn nearest_label(&self, i: usize) -> (usize, f64) {
        argmin(self.row(i).iter().copied())
    }

    /// Index and value of the nearest row for label column `label`.
    pub fn nearest_row(&self, label: usize) -> (usize, f64) {
        argmin((0..self.rows).map(|i| self.get(i, label)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, v) in values.enumerate() {
        if v < best.1 {
            best = (k, v);
        }
    }
    best
}

/// Two-sided Chamfer distance between the distinct latents and the distinct
/// labels under `r`.
pub fn chamfer_alignment(latents: &LatentSet, bank: &LabelBank) -> Result<f64> {
    let table = DistanceTable::compute(&latents.latents, bank)?;
    let forward: f64 = (0..table.rows)
        .filter(|&i| latents.first[i])
        .map(|i| table.nearest_label(i).1)
        .sum();
    let backward: f64 = (0..table.cols)
        .filter(|&l| bank.first[l])
        .map(|l| table.nearest_row(l).1)
        .sum();
    Ok(forward / latents.distinct_len() as f64 + backward / bank.distinct_len() as f64)
}

/// Kernel width from the mean distance of each prediction to its nearest label.
pub fn estimate_sigma(
    predictions: &[KeypointConfig],
    bank: &LabelBank,
    rule: SigmaRule,
) -> Result<f64> {
    let table = DistanceTable::compute(predictions, bank)?;
    let mean = (0..table.rows).map(|i| table.nearest_label(i).1).sum::<f64>() / table.rows as f64;
    let sigma = match rule {
        SigmaRule::SquaredMeanDistance => mean.sqrt(),
        SigmaRule::MeanDistance => mean,
    };
    Ok(sigma.max(SIGMA_FLOOR))
}

/// Un-normalized density `Σ_I exp(−r(M, Y_I) / 2σ²)`.
pub fn density_score(m: &KeypointConfig, bank: &LabelBank, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    m.check_same_len(&bank.labels[0])?;
    Ok(density_from_distances(
        bank.labels.iter().map(|y| distance_unchecked(m, y)),
        sigma,
    ))
}

fn density_from_distances(distances: impl Iterator<Item = f64>, sigma: f64) -> f64 {
    let denom = 2.0 * sigma * sigma;
    distances.map(|r| (-r / denom).exp()).sum()
}

fn check_predictions(per_object: &[Vec<KeypointConfig>], d: usize) -> Result<()> {
    if per_object.is_empty() {
        return Err(Error::invalid("no target objects"));
    }
    for (i, views) in per_object.iter().enumerate() {
        if views.is_empty() {
            return Err(Error::invalid(format!("object {i} has no predictions")));
        }
        if views.iter().any(|v| v.len() != d) {
            return Err(Error::invalid(format!(
                "object {i} has predictions with the wrong keypoint count"
            )));
        }
    }
    Ok(())
}

/// Picks, for every object, the prediction with the highest label density.
///
/// `σ` is estimated once from all predictions pooled.
pub fn init_latents(
    per_object: &[Vec<KeypointConfig>],
    bank: &LabelBank,
    rule: SigmaRule,
) -> Result<LatentSet> {
    check_predictions(per_object, bank.keypoints())?;
    let pooled: Vec<KeypointConfig> = per_object.iter().flatten().cloned().collect();
    let table = DistanceTable::compute(&pooled, bank)?;
    let mean = (0..table.rows).map(|i| table.nearest_label(i).1).sum::<f64>() / table.rows as f64;
    let sigma = match rule {
        SigmaRule::SquaredMeanDistance => mean.sqrt(),
        SigmaRule::MeanDistance => mean,
    }
    .max(SIGMA_FLOOR);

    let mut latents = Vec::with_capacity(per_object.len());
    let mut row = 0;
    for views in per_object {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, _) in views.iter().enumerate() {
            let score = density_from_distances(table.row(row + j).iter().copied(), sigma);
            if score > best.1 {
                best = (j, score);
            }
        }
        latents.push(views[best.0].clone());
        row += views.len();
    }
    LatentSet::new(latents)
}

/// Nearest-pair assignments frozen for one latent update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignments {
    /// `Î(i)`: nearest label of each latent.
    pub nearest_label: Vec<usize>,
    /// `î(I)`: nearest latent of each label.
    pub nearest_latent: Vec<usize>,
}

impl Assignments {
    pub fn compute(latents: &LatentSet, bank: &LabelBank) -> Result<Self> {
        let table = DistanceTable::compute(&latents.latents, bank)?;
        Ok(Self {
            nearest_label: (0..table.rows).map(|i| table.nearest_label(i).0).collect(),
            nearest_latent: (0..table.cols).map(|l| table.nearest_row(l).0).collect(),
        })
    }
}

fn check_weights(lambda: f64, mu: f64) -> Result<()> {
    if !(lambda >= 0.0 && mu >= 0.0 && lambda.is_finite() && mu.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda and mu must be non-negative, got {lambda} and {mu}"
        )));
    }
    if lambda == 0.0 && mu == 0.0 {
        return Err(Error::invalid(
            "lambda = mu = 0 leaves the latent objective constant",
        ));
    }
    Ok(())
}

/// `(1/N)·Σᵢ (1/|Iᵢ|)·Σⱼ r(Gᵢⱼ, Mᵢ)`.
pub fn view_term(latents: &LatentSet, per_object: &[Vec<KeypointConfig>]) -> Result<f64> {
    check_predictions(per_object, latents.keypoints())?;
    if per_object.len() != latents.len() {
        return Err(Error::invalid(format!(
            "{} objects but {} latents",
            per_object.len(),
            latents.len()
        )));
    }
    let per: Vec<f64> = per_object
        .par_iter()
        .zip(latents.latents.par_iter())
        .map(|(views, m)| {
            views.iter().map(|g| distance_unchecked(g, m)).sum::<f64>() / views.len() as f64
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Latent objective with `θ` fixed: `λ·f_view + μ·f_align`.
pub fn latent_objective(
    latents: &LatentSet,
    bank: &LabelBank,
    per_object: &[Vec<KeypointConfig>],
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    let view = if lambda > 0.0 {
        lambda * view_term(latents, per_object)?
    } else {
        0.0
    };
    let align = if mu > 0.0 {
        mu * chamfer_alignment(latents, bank)?
    } else {
        0.0
    };
    Ok(view + align)
}

/// Per-object weighted sets of the latent surrogate under frozen assignments.
///
/// A repeated latent with no view term has nothing to fit and gets `None`.
fn surrogate_sets(
    latents: &LatentSet,
    bank: &LabelBank,
    per_object: &[Vec<KeypointConfig>],
    assignments: &Assignments,
    lambda: f64,
    mu: f64,
) -> Result<Vec<Option<WeightedConfigSet>>> {
    let n_objects = latents.len() as f64;
    let n_distinct = latents.distinct_len() as f64;
    let n_labels = bank.distinct_len() as f64;
    (0..latents.len())
        .map(|i| {
            let views = &per_object[i];
            let mut configs = Vec::new();
            let mut weights = Vec::new();
            if lambda > 0.0 {
                let w = lambda / (n_objects * views.len() as f64);
                for g in views {
                    configs.push(g.clone());
                    weights.push(w);
                }
            }
            if mu > 0.0 && latents.first[i] {
                // ties go to the lowest index, so a repeated latent never owns
                // a label: its first occurrence does
                for (label, owner) in assignments.nearest_latent.iter().enumerate() {
                    if *owner == i && bank.first[label] {
                        configs.push(bank.labels[label].clone());
                        weights.push(mu / n_labels);
                    }
                }
                configs.push(bank.labels[assignments.nearest_label[i]].clone());
                weights.push(mu / n_distinct);
            }
            if configs.is_empty() {
                Ok(None)
            } else {
                WeightedConfigSet::new(configs, weights).map(Some)
            }
        })
        .collect()
}

/// Latent objective with the nearest-pair assignments held fixed. It upper
/// bounds [`latent_objective`] and touches it at the latents the assignments
/// were computed from.
pub fn surrogate_objective(
    latents: &LatentSet,
    bank: &LabelBank,
    per_object: &[Vec<KeypointConfig>],
    assignments: &Assignments,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    check_weights(lambda, mu)?;
    let sets = surrogate_sets(latents, bank, per_object, assignments, lambda, mu)?;
    sets.iter()
        .zip(&latents.latents)
        .map(|(set, m)| set.as_ref().map_or(Ok(0.0), |s| s.objective(m)))
        .sum()
}

/// One majorize-minimize step on the latents.
///
/// Nearest pairs are frozen at the current latents; each latent then solves
/// its weighted quotient mean, warm-started from its current value so the
/// objective cannot increase.
pub fn update_latents(
    latents: &LatentSet,
    bank: &LabelBank,
    per_object: &[Vec<KeypointConfig>],
    lambda: f64,
    mu: f64,
) -> Result<LatentSet> {
    check_weights(lambda, mu)?;
    check_predictions(per_object, bank.keypoints())?;
    if per_object.len() != latents.len() {
        return Err(Error::invalid(format!(
            "{} objects but {} latents",
            per_object.len(),
            latents.len()
        )));
    }
    if latents.keypoints() != bank.keypoints() {
        return Err(Error::invalid("latents and labels have different keypoint counts"));
    }
    let assignments = Assignments::compute(latents, bank)?;
    let sets = surrogate_sets(latents, bank, per_object, &assignments, lambda, mu)?;
    let updated: Result<Vec<KeypointConfig>> = sets
        .par_iter()
        .zip(latents.latents.par_iter())
        .map(|(set, m)| match set {
            Some(set) => {
                quotient_weighted_mean_from(set, m, QuotientMeanOptions::default()).map(|q| q.mean)
            }
            None => Ok(m.clone()),
        })
        .collect();
    LatentSet::new(updated?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_invariant_distance, Rotation};
    use crate::quotient::quotient_weighted_mean;
    use nalgebra::Matrix3xX;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_config(rng: &mut ChaCha8Rng, d: usize) -> KeypointConfig {
        let raw = Matrix3xX::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        KeypointConfig::center(&raw).unwrap()
    }

    #[test]
    fn chamfer_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let configs: Vec<_> = (0..5).map(|_| random_config(&mut rng, 6)).collect();
        let latents = LatentSet::new(configs.clone()).unwrap();
        let bank = LabelBank::new(configs).unwrap();
        assert!(chamfer_alignment(&latents, &bank).unwrap() < 1e-20);
    }

    #[test]
    fn chamfer_singletons_double_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_config(&mut rng, 6);
        let y = random_config(&mut rng, 6);
        let r = pose_invariant_distance(&m, &y).unwrap();
        let latents = LatentSet::new(vec![m]).unwrap();
        let single = LabelBank::new(vec![y.clone()]).unwrap();
        let doubled = LabelBank::new(vec![y.clone(), y]).unwrap();
        assert!((chamfer_alignment(&latents, &single).unwrap() - 2.0 * r).abs() < 1e-12);
        assert!((chamfer_alignment(&latents, &doubled).unwrap() - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(LabelBank::new(vec![]).is_err());
        assert!(LatentSet::new(vec![]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let bank = LabelBank::new(vec![random_config(&mut rng, 4)]).unwrap();
        assert!(estimate_sigma(&[], &bank, SigmaRule::default()).is_err());
        assert!(init_latents(&[vec![]], &bank, SigmaRule::default()).is_err());
        assert!(init_latents(&[], &bank, SigmaRule::default()).is_err());
    }

    #[test]
    fn sigma_floor_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let labels: Vec<_> = (0..3).map(|_| random_config(&mut rng, 5)).collect();
        let bank = LabelBank::new(labels.clone()).unwrap();
        let sigma = estimate_sigma(&labels, &bank, SigmaRule::SquaredMeanDistance).unwrap();
        assert_eq!(sigma, SIGMA_FLOOR);

        // ‖Y‖² = 4, so r(2Y, Y) = ‖Y‖² = 4
        let s = std::f64::consts::SQRT_2;
        let y = KeypointConfig::center(&Matrix3xX::from_column_slice(&[
            s, 0.0, 0.0, -s, 0.0, 0.0,
        ]))
        .unwrap();
        let p = y.scaled(2.0);
        let r = pose_invariant_distance(&p, &y).unwrap();
        assert!((r - 4.0).abs() < 1e-12);
        let bank = LabelBank::new(vec![y]).unwrap();
        let sq = estimate_sigma(std::slice::from_ref(&p), &bank, SigmaRule::SquaredMeanDistance).unwrap();
        assert!((sq - 2.0).abs() < 1e-12);
        let lin = estimate_sigma(&[p], &bank, SigmaRule::MeanDistance).unwrap();
        assert!((lin - 4.0).abs() < 1e-12);
    }

    #[test]
    fn density_values() {
        let y = KeypointConfig::center(&Matrix3xX::from_column_slice(&[
            1.0, 0.0, 0.0, -1.0, 0.0, 0.0,
        ]))
        .unwrap();
        let bank = LabelBank::new(vec![y.clone()]).unwrap();
        assert_eq!(density_score(&y, &bank, 0.7).unwrap(), 1.0);
        // r(2Y, Y) = 2 = 2σ² with σ = 1
        let p = y.scaled(2.0);
        let s = density_score(&p, &bank, 1.0).unwrap();
        assert!((s - (-1.0f64).exp()).abs() < 1e-12);
        assert!(density_score(&p, &bank, 0.0).is_err());

        // r-values {0, 2σ², 8σ²} with σ = 1: labels Y, 2Y, 3Y against M = Y
        let bank3 = LabelBank::new(vec![y.clone(), y.scaled(2.0), y.scaled(3.0)]).unwrap();
        let s = density_score(&y, &bank3, 1.0).unwrap();
        let expected = 1.0 + (-1.0f64).exp() + (-4.0f64).exp();
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn density_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let labels: Vec<_> = (0..4).map(|_| random_config(&mut rng, 5)).collect();
        let bank = LabelBank::new(labels).unwrap();
        let m = random_config(&mut rng, 5);
        let rotated = m.rotated(&Rotation::random(&mut rng));
        let a = density_score(&m, &bank, 1.5).unwrap();
        let b = density_score(&rotated, &bank, 1.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn init_picks_single_view_and_bank_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let y1 = random_config(&mut rng, 6);
        let far = y1.scaled(10.0);
        let lone = random_config(&mut rng, 6);
        let bank = LabelBank::new(vec![y1.clone()]).unwrap();
        let latents = init_latents(
            &[vec![far.clone(), y1.clone()], vec![lone.clone()]],
            &bank,
            SigmaRule::default(),
        )
        .unwrap();
        assert_eq!(latents.latents()[0], y1);
        assert_eq!(latents.latents()[1], lone);
    }

    #[test]
    fn update_with_zero_mu_is_quotient_mean_of_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let base = random_config(&mut rng, 7);
        let views: Vec<_> = (0..5)
            .map(|_| {
                let noise = Matrix3xX::from_fn(7, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
                KeypointConfig::center(&(base.coords() + noise))
                    .unwrap()
                    .rotated(&Rotation::random(&mut rng))
            })
            .collect();
        let bank = LabelBank::new(vec![random_config(&mut rng, 7)]).unwrap();
        let latents = LatentSet::new(vec![views[2].clone()]).unwrap();
        let updated = update_latents(&latents, &bank, std::slice::from_ref(&views), 1.0, 0.0).unwrap();
        let direct = quotient_weighted_mean(
            &WeightedConfigSet::uniform(views).unwrap(),
            Default::default(),
        )
        .unwrap();
        let r = pose_invariant_distance(&updated.latents()[0], &direct.mean).unwrap();
        assert!(r < 1e-8, "r = {r}");
    }

    #[test]
    fn update_converges_to_common_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let y = random_config(&mut rng, 6);
        let bank = LabelBank::new(vec![y.clone()]).unwrap();
        let pred = y.rotated(&Rotation::random(&mut rng));
        let mut latents = LatentSet::new(vec![random_config(&mut rng, 6)]).unwrap();
        for _ in 0..3 {
            latents = update_latents(&latents, &bank, &[vec![pred.clone()]], 1.0, 1.0).unwrap();
        }
        assert!(pose_invariant_distance(&latents.latents()[0], &y).unwrap() < 1e-12);
    }

    #[test]
    fn update_rejects_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let y = random_config(&mut rng, 4);
        let bank = LabelBank::new(vec![y.clone()]).unwrap();
        let latents = LatentSet::new(vec![y.clone()]).unwrap();
        let err = update_latents(&latents, &bank, &[vec![y]], 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn surrogate_touches_objective_at_assignment_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let bank =
            LabelBank::new((0..5).map(|_| random_config(&mut rng, 5)).collect()).unwrap();
        let latents = LatentSet::new((0..3).map(|_| random_config(&mut rng, 5)).collect()).unwrap();
        let preds: Vec<Vec<_>> = (0..3)
            .map(|_| (0..4).map(|_| random_config(&mut rng, 5)).collect())
            .collect();
        let a = Assignments::compute(&latents, &bank).unwrap();
        let s = surrogate_objective(&latents, &bank, &preds, &a, 1.0, 0.1).unwrap();
        let f = latent_objective(&latents, &bank, &preds, 1.0, 0.1).unwrap();
        assert!((s - f).abs() < 1e-12 * f.max(1.0));
    }
}
