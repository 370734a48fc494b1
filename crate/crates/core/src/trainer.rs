//! Source pretraining and alternating adaptation on the target domain.
//!
//! The objective over network parameters `θ` and per-object latents `{Mᵢ}` is
//!
//! ```text
//! f_labeled(θ) + λ·f_view(θ, M) + μ·f_align(M)
//! ```
//!
//! `θ` is trained by minibatch SGD with the latents fixed; every
//! `latent_update_period_epochs` epochs the latents take one majorize-minimize
//! step with `θ` fixed.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::Matrix3xX;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    chamfer_alignment, init_latents, latent_objective, update_latents, view_term, LabelBank,
    LatentSet, SigmaRule,
};
use crate::error::{Error, Result};
use crate::geometry::{pose_invariant_gradient, KeypointConfig};
use crate::predictor::{sgd_step, Architecture, MomentumState, PredictorParams, SgdConfig};
use crate::synth::{derive_seed, ViewSample, ViewSet};

/// Which parts of the adaptation objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// No view-consistency term (`λ = 0`).
    DropView,
    /// No alignment term (`μ = 0`).
    DropAlign,
    /// Latents are re-selected from the current predictions instead of updated.
    #[serde(rename = "reinit")]
    ReinitLatents,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::DropView => "drop-view",
            Ablation::DropAlign => "drop-align",
            Ablation::ReinitLatents => "reinit",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "drop-view" => Ok(Ablation::DropView),
            "drop-align" => Ok(Ablation::DropAlign),
            "reinit" => Ok(Ablation::ReinitLatents),
            other => Err(Error::invalid(format!(
                "unknown ablation {other:?}; expected full, drop-view, drop-align or reinit"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mu: f64,
    pub latent_update_period_epochs: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub sigma_rule: SigmaRule,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mu: 0.1,
            latent_update_period_epochs: 5,
            pretrain_epochs: 400,
            adapt_epochs: 100,
            ablation: Ablation::Full,
            seed: 0,
            sigma_rule: SigmaRule::default(),
            sgd: SgdConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu must be non-negative"));
        }
        if self.latent_update_period_epochs == 0 {
            return Err(Error::invalid("latent_update_period_epochs must be positive"));
        }
        Ok(())
    }

    /// `(λ, μ)` after the ablation switches.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.ablation {
            Ablation::DropView => (0.0, self.mu),
            Ablation::DropAlign => (self.lambda, 0.0),
            Ablation::Full | Ablation::ReinitLatents => (self.lambda, self.mu),
        }
    }
}

/// Loss terms of one full-dataset evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub f_labeled: f64,
    pub f_view: f64,
    pub f_align: f64,
    pub total: f64,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub learning_rate: f64,
    pub f_labeled: f64,
    pub f_view: Option<f64>,
    pub f_align: Option<f64>,
    pub total: f64,
}

/// Objective values around one latent update, with `θ` fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentUpdateRecord {
    pub epoch: usize,
    pub kind: String,
    /// `λ·f_view + μ·f_align` before and after.
    pub objective_before: f64,
    pub objective_after: f64,
    pub total_before: f64,
    pub total_after: f64,
}

/// Wall-clock duration of one epoch. Kept apart from the run log so that logs
/// stay byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub phase: String,
    pub epoch: usize,
    pub seconds: f64,
}

pub fn label_bank(source: &[ViewSample]) -> Result<LabelBank> {
    LabelBank::new(source.iter().map(|s| s.gt.clone()).collect())
}

fn check_source(source: &[ViewSample]) -> Result<()> {
    if source.is_empty() {
        return Err(Error::invalid("labeled source set is empty"));
    }
    Ok(())
}

fn check_targets(targets: &[ViewSet]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid("target set is empty"));
    }
    if let Some(s) = targets.iter().find(|s| s.views.is_empty()) {
        return Err(Error::invalid(format!("target object {} has no views", s.object_id)));
    }
    Ok(())
}

const EVAL_CHUNK: usize = 64;

/// Predictions for a list of inputs, in order.
pub fn predict(params: &PredictorParams, inputs: &[&[f64]]) -> Result<Vec<KeypointConfig>> {
    let chunks: Result<Vec<Vec<KeypointConfig>>> = inputs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| params.forward_batch(chunk).map(|c| c.into_outputs()))
        .collect();
    Ok(chunks?.into_iter().flatten().collect())
}

/// Fresh predictions for every view of every target object.
pub fn predict_targets(
    params: &PredictorParams,
    targets: &[ViewSet],
) -> Result<Vec<Vec<KeypointConfig>>> {
    let inputs: Vec<&[f64]> = targets
        .iter()
        .flat_map(|s| s.views.iter().map(|v| v.input.as_slice()))
        .collect();
    let mut flat = predict(params, &inputs)?.into_iter();
    Ok(targets
        .iter()
        .map(|s| flat.by_ref().take(s.views.len()).collect())
        .collect())
}

/// `(1/|Ī|)·Σ ‖G_θ(I) − Y(I)‖²_F`.
pub fn labeled_loss(params: &PredictorParams, source: &[ViewSample]) -> Result<f64> {
    check_source(source)?;
    let inputs: Vec<&[f64]> = source.iter().map(|s| s.input.as_slice()).collect();
    let preds = predict(params, &inputs)?;
    let mut sum = 0.0;
    for (p, s) in preds.iter().zip(source) {
        p.check_same_len(&s.gt)?;
        sum += (p.coords() - s.gt.coords()).norm_squared();
    }
    Ok(sum / source.len() as f64)
}

/// `(1/N)·Σᵢ (1/|Iᵢ|)·Σⱼ r(G_θ(Iᵢⱼ), Mᵢ)`.
pub fn view_consistency_loss(
    params: &PredictorParams,
    targets: &[ViewSet],
    latents: &LatentSet,
) -> Result<f64> {
    check_targets(targets)?;
    view_term(latents, &predict_targets(params, targets)?)
}

/// All three terms and `f_labeled + λ·f_view + μ·f_align`, with the ablation's
/// zeroed weights.
pub fn total_loss(
    params: &PredictorParams,
    source: &[ViewSample],
    targets: &[ViewSet],
    latents: &LatentSet,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let bank = label_bank(source)?;
    let preds = predict_targets(params, targets)?;
    loss_with_predictions(params, source, &bank, &preds, latents, cfg)
}

fn loss_with_predictions(
    params: &PredictorParams,
    source: &[ViewSample],
    bank: &LabelBank,
    preds: &[Vec<KeypointConfig>],
    latents: &LatentSet,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let f_labeled = labeled_loss(params, source)?;
    let f_view = view_term(latents, preds)?;
    let f_align = chamfer_alignment(latents, bank)?;
    let (lambda, mu) = cfg.effective_weights();
    Ok(LossBreakdown {
        f_labeled,
        f_view,
        f_align,
        total: f_labeled + lambda * f_view + mu * f_align,
    })
}

/// Everything that changes during adaptation.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PredictorParams,
    pub latents: Option<LatentSet>,
    pub momentum: MomentumState,
    /// Adaptation epochs completed.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: PredictorParams, seed: u64) -> Self {
        let momentum = MomentumState::new(&params);
        Self {
            params,
            latents: None,
            momentum,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xADA9])),
        }
    }

    /// Picks initial latents from the current predictions by label density.
    pub fn initialize_latents(
        &mut self,
        source: &[ViewSample],
        targets: &[ViewSet],
        rule: SigmaRule,
    ) -> Result<()> {
        check_targets(targets)?;
        let bank = label_bank(source)?;
        let preds = predict_targets(&self.params, targets)?;
        self.latents = Some(init_latents(&preds, &bank, rule)?);
        Ok(())
    }
}

enum Batch {
    Source(Vec<usize>),
    /// `(object, view)` pairs.
    Target(Vec<(usize, usize)>),
}

fn chunked<T: Clone>(items: &[T], size: usize) -> impl Iterator<Item = Vec<T>> + '_ {
    items.chunks(size).map(|c| c.to_vec())
}

/// `Σ_b scale·∇‖G − Y‖²` over one source batch.
fn source_batch_grads(
    params: &PredictorParams,
    source: &[ViewSample],
    batch: &[usize],
    scale: f64,
) -> Result<crate::predictor::ParamGrads> {
    let inputs: Vec<&[f64]> = batch.iter().map(|&k| source[k].input.as_slice()).collect();
    let cache = params.forward_batch(&inputs)?;
    let output_grads: Vec<Matrix3xX<f64>> = cache
        .outputs()
        .iter()
        .zip(batch)
        .map(|(g, &k)| (g.coords() - source[k].gt.coords()) * (2.0 * scale))
        .collect();
    params.backward_batch(&cache, &output_grads)
}

/// Minimizes the labeled loss from a seeded initialization.
pub fn pretrain(
    source: &[ViewSample],
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<(PredictorParams, Vec<EpochRecord>, Vec<EpochTiming>)> {
    cfg.validate()?;
    check_source(source)?;
    if cfg.pretrain_epochs == 0 {
        return Err(Error::invalid("pretrain_epochs must be at least 1"));
    }
    if arch.input_dim != source[0].input.len() {
        return Err(Error::invalid(format!(
            "architecture expects {} inputs but samples have {}",
            arch.input_dim,
            source[0].input.len()
        )));
    }
    let mut params = PredictorParams::init(arch, derive_seed(cfg.seed, &[0x1417]))?;
    let mut momentum = MomentumState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5A3F]));
    let batch_size = cfg.sgd.batch_size;
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);
    let mut timing = Vec::with_capacity(cfg.pretrain_epochs);

    for epoch in 0..cfg.pretrain_epochs {
        let started = Instant::now();
        let lr = cfg.sgd.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let grads = source_batch_grads(&params, source, batch, 1.0 / batch_size as f64)?;
            sgd_step(&mut params, &grads, &mut momentum, &cfg.sgd, lr)?;
        }
        let f_labeled = labeled_loss(&params, source)?;
        if !f_labeled.is_finite() {
            return Err(Error::InvalidState(format!(
                "pretraining diverged at epoch {epoch}"
            )));
        }
        log.push(EpochRecord {
            phase: "pretrain".into(),
            epoch,
            learning_rate: lr,
            f_labeled,
            f_view: None,
            f_align: None,
            total: f_labeled,
        });
        timing.push(EpochTiming {
            phase: "pretrain".into(),
            epoch,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log, timing))
}

/// Result of [`adapt`].
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochRecord>,
    pub latent_updates: Vec<LatentUpdateRecord>,
    pub timing: Vec<EpochTiming>,
}

/// Alternates SGD epochs on `θ` with periodic latent updates.
pub fn adapt(
    state: TrainState,
    source: &[ViewSample],
    targets: &[ViewSet],
    cfg: &TrainConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    check_source(source)?;
    check_targets(targets)?;
    if cfg.lambda == 0.0 && cfg.mu == 0.0 {
        return Err(Error::invalid(
            "lambda = mu = 0 gives no adaptation signal; set lambda or mu above zero",
        ));
    }
    let mut state = state;
    let Some(latents) = state.latents.as_ref() else {
        return Err(Error::InvalidState(
            "latents must be initialized before adaptation".into(),
        ));
    };
    if latents.len() != targets.len() {
        return Err(Error::InvalidState(format!(
            "{} latents for {} target objects",
            latents.len(),
            targets.len()
        )));
    }

    let bank = label_bank(source)?;
    let (lambda, mu) = cfg.effective_weights();
    let batch_size = cfg.sgd.batch_size;
    let n_objects = targets.len() as f64;
    // Per-epoch sums of source and target gradients both equal
    // (|Ī|/B)·∇(their term of the objective).
    let epoch_scale = source.len() as f64 / batch_size as f64;

    let mut source_order: Vec<usize> = (0..source.len()).collect();
    let mut target_order: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.views.len()).map(move |j| (i, j)))
        .collect();

    let mut epochs = Vec::with_capacity(cfg.adapt_epochs);
    let mut updates = Vec::new();
    let mut timing = Vec::with_capacity(cfg.adapt_epochs);

    for epoch in 0..cfg.adapt_epochs {
        let started = Instant::now();
        let lr = cfg.sgd.learning_rate_at(epoch);
        source_order.shuffle(&mut state.rng);
        target_order.shuffle(&mut state.rng);
        let mut batches: Vec<Batch> = chunked(&source_order, batch_size)
            .map(Batch::Source)
            .collect();
        if lambda > 0.0 {
            batches.extend(chunked(&target_order, batch_size).map(Batch::Target));
        }
        batches.shuffle(&mut state.rng);

        let latents = state.latents.clone().expect("checked above");
        for batch in &batches {
            let grads = match batch {
                Batch::Source(idx) => {
                    source_batch_grads(&state.params, source, idx, 1.0 / batch_size as f64)?
                }
                Batch::Target(pairs) => {
                    let inputs: Vec<&[f64]> = pairs
                        .iter()
                        .map(|&(i, j)| targets[i].views[j].input.as_slice())
                        .collect();
                    let cache = state.params.forward_batch(&inputs)?;
                    let output_grads = cache
                        .outputs()
                        .iter()
                        .zip(pairs)
                        .map(|(g, &(i, _))| {
                            let weight = epoch_scale * lambda
                                / (n_objects * targets[i].views.len() as f64);
                            pose_invariant_gradient(g, &latents.latents()[i])
                                .map(|d| d.gradient * weight)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    state.params.backward_batch(&cache, &output_grads)?
                }
            };
            sgd_step(&mut state.params, &grads, &mut state.momentum, &cfg.sgd, lr)?;
        }
        state.epoch += 1;

        let preds = predict_targets(&state.params, targets)?;
        let loss = loss_with_predictions(&state.params, source, &bank, &preds, &latents, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::InvalidState(format!("adaptation diverged at epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            phase: "adapt".into(),
            epoch,
            learning_rate: lr,
            f_labeled: loss.f_labeled,
            f_view: Some(loss.f_view),
            f_align: Some(loss.f_align),
            total: loss.total,
        });

        if (epoch + 1) % cfg.latent_update_period_epochs == 0 {
            let next = match cfg.ablation {
                Ablation::DropView => None,
                Ablation::ReinitLatents => Some((init_latents(&preds, &bank, cfg.sigma_rule)?, "reinit")),
                Ablation::Full | Ablation::DropAlign => Some((
                    update_latents(&latents, &bank, &preds, lambda, mu)?,
                    "update",
                )),
            };
            if let Some((next, kind)) = next {
                let before = latent_objective(&latents, &bank, &preds, lambda, mu)?;
                let after = latent_objective(&next, &bank, &preds, lambda, mu)?;
                let after_loss =
                    loss_with_predictions(&state.params, source, &bank, &preds, &next, cfg)?;
                updates.push(LatentUpdateRecord {
                    epoch,
                    kind: kind.into(),
                    objective_before: before,
                    objective_after: after,
                    total_before: loss.total,
                    total_after: after_loss.total,
                });
                epochs.push(EpochRecord {
                    phase: "latent-update".into(),
                    epoch,
                    learning_rate: lr,
                    f_labeled: after_loss.f_labeled,
                    f_view: Some(after_loss.f_view),
                    f_align: Some(after_loss.f_align),
                    total: after_loss.total,
                });
                state.latents = Some(next);
            }
        }
        timing.push(EpochTiming {
            phase: "adapt".into(),
            epoch,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(AdaptOutcome {
        state,
        epochs,
        latent_updates: updates,
        timing,
    })
}
