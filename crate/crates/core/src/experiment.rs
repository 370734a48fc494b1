//! End-to-end runs: configuration, run directories and latent files.
//!
//! Both the command-line tool and the integration tests drive experiments
//! through these functions, so a run started from either side writes the same
//! artifacts.

use std::path::{Path, PathBuf};

use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use crate::alignment::LatentSet;
use crate::error::{Error, Result};
use crate::geometry::KeypointConfig;
use crate::io;
use crate::metrics::{default_thresholds, evaluate, EvalReport};
use crate::predictor::{Architecture, PredictorParams};
use crate::synth::{BenchConfig, Benchmark, ViewSample};
use crate::trainer::{adapt, pretrain, AdaptOutcome, EpochRecord, EpochTiming, TrainConfig, TrainState};

pub const PREDICTOR_FILE: &str = "predictor.json";
pub const LATENTS_FILE: &str = "latents.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const LATENT_LOG_FILE: &str = "latent_updates.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const PCK_FILE: &str = "pck.csv";

/// Everything needed to reproduce a run, apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bench: BenchConfig,
    /// Hidden layer widths of the predictor.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bench: BenchConfig::default(),
            hidden: vec![64],
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.template.validate()?;
        self.bench.shift.validate()?;
        self.train.validate()?;
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.bench.template.input_dim(),
            hidden: self.hidden.clone(),
            keypoints: self.bench.template.keypoints(),
        }
    }
}

/// The resolved configuration stored beside every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Serialize, Deserialize)]
struct LatentEntry {
    object_id: usize,
    /// Column-major `3 × d`.
    coords: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LatentFile {
    format: String,
    version: u32,
    keypoints: usize,
    latents: Vec<LatentEntry>,
}

const LATENT_FORMAT: &str = "viewconsist-latents";
const LATENT_VERSION: u32 = 1;

pub fn save_latents(latents: &LatentSet, object_ids: &[usize], path: &Path) -> Result<()> {
    if object_ids.len() != latents.len() {
        return Err(Error::invalid(format!(
            "{} object ids for {} latents",
            object_ids.len(),
            latents.len()
        )));
    }
    let file = LatentFile {
        format: LATENT_FORMAT.into(),
        version: LATENT_VERSION,
        keypoints: latents.keypoints(),
        latents: latents
            .latents()
            .iter()
            .zip(object_ids)
            .map(|(m, &object_id)| LatentEntry {
                object_id,
                coords: m.to_column_vec(),
            })
            .collect(),
    };
    io::write_json(path, &file)
}

/// Latents with their object ids, in file order.
pub fn load_latents(path: &Path) -> Result<(LatentSet, Vec<usize>)> {
    let file: LatentFile = io::read_json(path)?;
    if file.format != LATENT_FORMAT || file.version != LATENT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported latent file {} v{}", file.format, file.version),
        ));
    }
    let mut ids = Vec::with_capacity(file.latents.len());
    let mut configs = Vec::with_capacity(file.latents.len());
    for entry in file.latents {
        if entry.coords.len() != 3 * file.keypoints {
            return Err(Error::format(
                path,
                format!("object {} has {} coordinates", entry.object_id, entry.coords.len()),
            ));
        }
        // Stored latents are already centered; re-centering would perturb the
        // low bits and break exact round trips.
        let coords = Matrix3xX::from_column_slice(&entry.coords);
        configs.push(KeypointConfig::new(coords).map_err(|e| Error::format(path, e))?);
        ids.push(entry.object_id);
    }
    let set = LatentSet::new(configs).map_err(|e| Error::format(path, e))?;
    Ok((set, ids))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_logs(dir: &Path, log: &[EpochRecord], timing: &[EpochTiming]) -> Result<()> {
    io::write_jsonl(&dir.join(LOG_FILE), log)?;
    io::write_jsonl(&dir.join(TIMING_FILE), timing)
}

/// Generates the benchmark and writes it to `out`.
pub fn run_gen(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Benchmark> {
    cfg.validate()?;
    let bench = Benchmark::generate(&cfg.bench, seed)?;
    bench.write(out, &cfg.bench, seed)?;
    Ok(bench)
}

/// Pretrains on the labeled source split in memory.
pub fn pretrain_model(
    bench: &Benchmark,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PredictorParams, Vec<EpochRecord>, Vec<EpochTiming>)> {
    cfg.validate()?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    pretrain(&bench.source, cfg.architecture(), &train)
}

/// Adapts a pretrained predictor to the target split in memory.
pub fn adapt_model(
    bench: &Benchmark,
    params: PredictorParams,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut state = TrainState::new(params, seed);
    state.initialize_latents(&bench.source, &bench.target, train.sigma_rule)?;
    adapt(state, &bench.source, &bench.target, &train)
}

fn record(command: &str, seed: u64, cfg: &ExperimentConfig) -> RunRecord {
    RunRecord {
        command: command.into(),
        seed,
        config: cfg.clone(),
    }
}

/// Reads the dataset in `data`, pretrains and writes the run to `out`.
pub fn run_pretrain(data: &Path, cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PredictorParams> {
    let (bench, _) = Benchmark::read(data)?;
    let (params, log, timing) = pretrain_model(&bench, cfg, seed)?;
    ensure_dir(out)?;
    params.save(&out.join(PREDICTOR_FILE))?;
    write_logs(out, &log, &timing)?;
    io::write_json(&out.join(CONFIG_FILE), &record("pretrain", seed, cfg))?;
    Ok(params)
}

/// Adapts the predictor stored at `predictor` and writes the run to `out`.
pub fn run_adapt(
    data: &Path,
    predictor: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
) -> Result<AdaptOutcome> {
    let (bench, _) = Benchmark::read(data)?;
    let params = PredictorParams::load(predictor)?;
    if params.architecture().input_dim != cfg.bench.template.input_dim() {
        return Err(Error::invalid(format!(
            "predictor expects {} inputs but the configuration produces {}",
            params.architecture().input_dim,
            cfg.bench.template.input_dim()
        )));
    }
    let outcome = adapt_model(&bench, params, cfg, seed)?;
    ensure_dir(out)?;
    outcome.state.params.save(&out.join(PREDICTOR_FILE))?;
    let latents = outcome
        .state
        .latents
        .as_ref()
        .expect("adaptation always leaves latents in place");
    let ids: Vec<usize> = bench.target.iter().map(|s| s.object_id).collect();
    save_latents(latents, &ids, &out.join(LATENTS_FILE))?;
    write_logs(out, &outcome.epochs, &outcome.timing)?;
    io::write_jsonl(&out.join(LATENT_LOG_FILE), &outcome.latent_updates)?;
    io::write_json(&out.join(CONFIG_FILE), &record("adapt", seed, cfg))?;
    Ok(outcome)
}

/// Which part of a dataset to evaluate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Source,
    Holdout,
    Target,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Holdout => "holdout",
            Split::Target => "target",
        }
    }

    pub fn samples(&self, bench: &Benchmark) -> Vec<ViewSample> {
        match self {
            Split::Source => bench.source.clone(),
            Split::Holdout => bench.holdout.clone(),
            Split::Target => bench.target_views(),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Split::Source),
            "holdout" => Ok(Split::Holdout),
            "target" => Ok(Split::Target),
            other => Err(Error::invalid(format!(
                "unknown split {other:?}; expected source, holdout or target"
            ))),
        }
    }
}

/// Evaluates a predictor in memory.
pub fn evaluate_split(
    params: &PredictorParams,
    bench: &Benchmark,
    split: Split,
    seed: u64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    evaluate(
        params,
        &split.samples(bench),
        &default_thresholds(),
        split.as_str(),
        seed,
        config,
    )
}

/// Evaluates the predictor at `predictor` and writes `report.json` and
/// `pck.csv` to `out`. The run record next to the predictor, if any, is echoed
/// into the report.
pub fn run_eval(data: &Path, predictor: &Path, split: Split, out: &Path) -> Result<EvalReport> {
    let (bench, manifest) = Benchmark::read(data)?;
    let params = PredictorParams::load(predictor)?;
    let record_path = predictor
        .parent()
        .map(|p| p.join(CONFIG_FILE))
        .unwrap_or_else(|| PathBuf::from(CONFIG_FILE));
    let (seed, config) = if record_path.exists() {
        let rec: RunRecord = io::read_json(&record_path)?;
        let value = serde_json::to_value(&rec).map_err(|e| Error::format(&record_path, e))?;
        (rec.seed, value)
    } else {
        (manifest.seed, serde_json::Value::Null)
    };
    let report = evaluate_split(&params, &bench, split, seed, config)?;
    ensure_dir(out)?;
    report.write(&out.join(REPORT_FILE))?;
    let csv = out.join(PCK_FILE);
    std::fs::write(&csv, report.pck_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}
