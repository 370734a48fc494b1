//! The `viewconsist` command line: generate the benchmark, pretrain, adapt,
//! evaluate and tabulate runs.
//!
//! Exit status is 0 on success, 1 on any runtime or configuration error and 2
//! on a malformed command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use viewconsist_core::experiment::{self, ExperimentConfig, Split, REPORT_FILE};
use viewconsist_core::{Ablation, EvalReport};

#[derive(Debug, Parser)]
#[command(name = "viewconsist", version, about = "Multi-view consistent keypoint domain adaptation")]
pub struct Cli {
    /// Master seed for data generation and training.
    #[arg(long, global = true, env = "VIEWCONSIST_SEED")]
    pub seed: Option<u64>,

    /// JSON experiment configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source, holdout and target datasets.
    Gen {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the predictor on labeled source views.
    Pretrain {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Adapt a pretrained predictor to the unlabeled target views.
    Adapt {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint written by `pretrain`.
        #[arg(long, value_name = "FILE")]
        predictor: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        #[command(flatten)]
        weights: WeightOverrides,
    },
    /// Compute AE, PAE and PCK of a predictor on one split.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        predictor: PathBuf,
        #[arg(long, default_value = "target", value_parser = parse_split)]
        split: Split,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Tabulate before/after AE and PAE for several evaluated runs.
    Report {
        /// `LABEL=BEFORE,AFTER`, each side an eval output directory or report file.
        #[arg(long = "run", value_name = "LABEL=BEFORE,AFTER", required = true, value_parser = parse_run)]
        runs: Vec<RunPair>,
        /// Also write the table to `DIR/table.md`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct WeightOverrides {
    /// Weight of the view-consistency term.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of the alignment term.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Epochs between latent updates.
    #[arg(long)]
    pub period: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPair {
    pub label: String,
    pub before: PathBuf,
    pub after: PathBuf,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: viewconsist_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: viewconsist_core::Error| e.to_string())
}

fn parse_run(s: &str) -> Result<RunPair, String> {
    let (label, paths) = s
        .split_once('=')
        .ok_or_else(|| format!("expected LABEL=BEFORE,AFTER, got {s:?}"))?;
    let (before, after) = paths
        .split_once(',')
        .ok_or_else(|| format!("expected BEFORE,AFTER after '=', got {paths:?}"))?;
    if label.is_empty() || before.is_empty() || after.is_empty() {
        return Err(format!("empty field in {s:?}"));
    }
    Ok(RunPair {
        label: label.into(),
        before: before.into(),
        after: after.into(),
    })
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("invalid configuration {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_report(path: &Path) -> anyhow::Result<EvalReport> {
    let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    Ok(EvalReport::read(&file)?)
}

/// Markdown table with one row per run and a mean row when there are several.
pub fn comparison_table(rows: &[(String, EvalReport, EvalReport)]) -> String {
    let mut out = String::from(
        "| Run | Default AE | Ours AE | Default PAE | Ours PAE |\n|---|---:|---:|---:|---:|\n",
    );
    let mut sums = [0.0; 4];
    for (label, before, after) in rows {
        let vals = [before.mean_ae, after.mean_ae, before.mean_pae, after.mean_pae];
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v;
        }
        out.push_str(&format!(
            "| {label} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            vals[0], vals[1], vals[2], vals[3]
        ));
    }
    if rows.len() > 1 {
        let n = rows.len() as f64;
        out.push_str(&format!(
            "| mean | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        ));
    }
    out
}

/// Runs a parsed command and returns the text to print on success.
pub fn execute(cli: Cli) -> anyhow::Result<String> {
    let seed = cli.seed.unwrap_or(0);
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen { out } => {
            let bench = experiment::run_gen(&cfg, seed, &out)?;
            Ok(format!(
                "wrote {} source, {} holdout and {} target views to {}",
                bench.source.len(),
                bench.holdout.len(),
                bench.target.iter().map(|s| s.views.len()).sum::<usize>(),
                out.display()
            ))
        }
        Command::Pretrain { data, out } => {
            experiment::run_pretrain(&data, &cfg, seed, &out)?;
            Ok(format!("pretrained predictor written to {}", out.display()))
        }
        Command::Adapt {
            data,
            predictor,
            out,
            ablation,
            weights,
        } => {
            cfg.train.ablation = ablation;
            if let Some(l) = weights.lambda {
                cfg.train.lambda = l;
            }
            if let Some(m) = weights.mu {
                cfg.train.mu = m;
            }
            if let Some(p) = weights.period {
                cfg.train.latent_update_period_epochs = p;
            }
            cfg.validate().context("invalid configuration")?;
            let outcome = experiment::run_adapt(&data, &predictor, &cfg, seed, &out)?;
            let last = outcome
                .epochs
                .last()
                .map(|e| format!("; final total loss {:.6}", e.total))
                .unwrap_or_default();
            Ok(format!(
                "adapted ({ablation}) predictor written to {}{last}",
                out.display()
            ))
        }
        Command::Eval {
            data,
            predictor,
            split,
            out,
        } => {
            let report = experiment::run_eval(&data, &predictor, split, &out)?;
            Ok(format!(
                "{} views: AE {:.3}%, PAE {:.3}% ({} samples); report in {}",
                split.as_str(),
                report.mean_ae,
                report.mean_pae,
                report.samples.len(),
                out.display()
            ))
        }
        Command::Report { runs, out } => {
            let mut rows = Vec::with_capacity(runs.len());
            for run in runs {
                let before = load_report(&run.before)
                    .with_context(|| format!("run {}: {}", run.label, run.before.display()))?;
                let after = load_report(&run.after)
                    .with_context(|| format!("run {}: {}", run.label, run.after.display()))?;
                if before.split != after.split {
                    bail!(
                        "run {}: comparing a {} report with a {} report",
                        run.label,
                        before.split,
                        after.split
                    );
                }
                rows.push((run.label, before, after));
            }
            let table = comparison_table(&rows);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join("table.md");
                std::fs::write(&path, &table)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(table.trim_end().to_string())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            let _ = writeln!(std::io::stdout(), "{msg}");
            0
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            1
        }
    }
}
