//! Unsupervised domain adaptation for 3D keypoint regression through
//! multi-view consistency.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: centered keypoint configurations, the rotation-invariant
//!   distance `r(X, Y)` and its gradient.
//! * [`quotient`]: weighted means of configurations modulo rotation.
//! * [`alignment`]: Chamfer alignment between target latents and source
//!   labels, density-based latent initialization and latent updates.
//! * [`predictor`]: a small feedforward regressor with manual backprop and SGD.
//! * [`trainer`]: source pretraining and the alternating adaptation loop.
//! * [`synth`]: the synthetic multi-view benchmark with domain shift.
//! * [`metrics`]: AE, PAE and PCK.
//! * [`experiment`]: file formats and end-to-end orchestration.

pub mod alignment;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod predictor;
pub mod quotient;
pub mod synth;
pub mod trainer;

pub use alignment::{
    chamfer_alignment, density_score, estimate_sigma, init_latents, latent_objective,
    update_latents, LabelBank, LatentSet, SigmaRule,
};
pub use error::{Error, Result};
pub use geometry::{
    optimal_rotation, pose_invariant_distance, pose_invariant_gradient, Alignment,
    KeypointConfig, Rotation,
};
pub use quotient::{
    quotient_weighted_mean, quotient_weighted_mean_from, QuotientMean, QuotientMeanOptions,
    WeightedConfigSet,
};
pub use predictor::{
    sgd_step, Architecture, MomentumState, ParamGrads, PredictorParams, SgdConfig,
};
pub use synth::{
    generate_source, generate_target, BenchConfig, Benchmark, DomainShiftConfig, ShapeTemplate,
    ViewSample, ViewSet,
};
pub use metrics::{
    average_error, pck_curve, pose_invariant_average_error, EvalReport, PckPoint,
};
pub use trainer::{
    adapt, labeled_loss, pretrain, total_loss, view_consistency_loss, Ablation, AdaptOutcome,
    LossBreakdown, TrainConfig, TrainState,
};
pub use experiment::{ExperimentConfig, Split};
