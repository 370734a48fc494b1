//! Evaluation metrics on held-out views.
//!
//! All errors are per-keypoint Euclidean distances between centered
//! configurations, normalized by the sample's bounding-box diagonal and
//! reported in percent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{optimal_rotation, KeypointConfig};
use crate::io;
use crate::predictor::PredictorParams;
use crate::synth::ViewSample;
use crate::trainer::predict;

fn check_pair(pred: &KeypointConfig, gt: &KeypointConfig, diagonal: f64) -> Result<()> {
    pred.check_same_len(gt)?;
    if !(diagonal > 0.0 && diagonal.is_finite()) {
        return Err(Error::invalid(format!("diagonal must be positive, got {diagonal}")));
    }
    Ok(())
}

/// Normalized per-keypoint distances, in percent.
pub fn keypoint_errors(
    pred: &KeypointConfig,
    gt: &KeypointConfig,
    diagonal: f64,
) -> Result<Vec<f64>> {
    check_pair(pred, gt, diagonal)?;
    Ok((pred.coords() - gt.coords())
        .column_iter()
        .map(|c| 100.0 * c.norm() / diagonal)
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean normalized keypoint distance (AE), in percent.
pub fn average_error(pred: &KeypointConfig, gt: &KeypointConfig, diagonal: f64) -> Result<f64> {
    Ok(mean(&keypoint_errors(pred, gt, diagonal)?))
}

/// AE after rotating the prediction onto the ground truth (PAE).
///
/// The rotation minimizes the summed squared distance, which does not always
/// minimize the mean distance. Since the identity is also a rotation, the
/// result is capped at the plain AE; both candidates bound the best achievable
/// mean distance from above and the smaller one is the tighter bound.
pub fn pose_invariant_average_error(
    pred: &KeypointConfig,
    gt: &KeypointConfig,
    diagonal: f64,
) -> Result<f64> {
    let ae = average_error(pred, gt, diagonal)?;
    let r = optimal_rotation(pred, gt)?.rotation;
    let aligned = pred.rotated(&r);
    Ok(average_error(&aligned, gt, diagonal)?.min(ae))
}

/// `0, 0.5, …, 25` percent.
pub fn default_thresholds() -> Vec<f64> {
    (0..=50).map(|k| k as f64 * 0.5).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckPoint {
    pub threshold_percent: f64,
    pub fraction: f64,
}

/// Fraction of keypoint errors at or below each threshold.
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<PckPoint>> {
    if errors.is_empty() {
        return Err(Error::invalid("no keypoint errors to summarize"));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("thresholds must be strictly increasing"));
    }
    if thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::invalid("thresholds must be finite and non-negative"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| PckPoint {
            threshold_percent: t,
            fraction: sorted.partition_point(|&e| e <= t) as f64 / sorted.len() as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub object_id: usize,
    pub view_id: usize,
    pub ae: f64,
    pub pae: f64,
}

pub const REPORT_FORMAT: &str = "viewconsist-eval";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub mean_ae: f64,
    pub mean_pae: f64,
    pub pck: Vec<PckPoint>,
    pub samples: Vec<SampleEval>,
    /// Whatever configuration produced the evaluated predictor.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let report: Self = io::read_json(path)?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported report {} v{}", report.format, report.version),
            ));
        }
        Ok(report)
    }

    /// `threshold_percent,fraction` rows with a header line.
    pub fn pck_csv(&self) -> String {
        let mut out = String::from("threshold_percent,fraction\n");
        for p in &self.pck {
            out.push_str(&format!("{},{}\n", p.threshold_percent, p.fraction));
        }
        out
    }
}

/// Runs the predictor on every sample and summarizes AE, PAE and PCK.
pub fn evaluate(
    params: &PredictorParams,
    samples: &[ViewSample],
    thresholds: &[f64],
    split: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    let preds = predict(params, &inputs)?;
    let mut all_errors = Vec::with_capacity(samples.len() * params.architecture().keypoints);
    let mut evals = Vec::with_capacity(samples.len());
    for (pred, s) in preds.iter().zip(samples) {
        let errors = keypoint_errors(pred, &s.gt, s.diagonal)?;
        let ae = mean(&errors);
        let pae = pose_invariant_average_error(pred, &s.gt, s.diagonal)?;
        all_errors.extend(errors);
        evals.push(SampleEval {
            object_id: s.object_id,
            view_id: s.view_id,
            ae,
            pae,
        });
    }
    let n = evals.len() as f64;
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        split: split.into(),
        seed,
        mean_ae: evals.iter().map(|e| e.ae).sum::<f64>() / n,
        mean_pae: evals.iter().map(|e| e.pae).sum::<f64>() / n,
        pck: pck_curve(&all_errors, thresholds)?,
        samples: evals,
        config,
    })
}
