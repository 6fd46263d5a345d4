//! Row types for the CSV artefacts and the JSON summary/checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use lyapctl::agents::{Algo, EvalEpisode, HierarchicalAgent, RunRecord};
use lyapctl::environments::EnvKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::EnvOverrides;
use crate::CliError;

/// One line of `records.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub episode: usize,
    pub algo: Algo,
    pub seed: u64,
    pub iae: f64,
    pub ise: f64,
    pub final_norm_err: f64,
    pub mean_reward: f64,
    /// Smoothed and normalised; `NaN` when the baselines are degenerate.
    pub norm_reward: f64,
    pub lambda: f64,
    pub violation_rate: f64,
    pub kl: f64,
    pub truncated: bool,
}

impl RecordRow {
    pub fn new(algo: Algo, seed: u64, r: &RunRecord, norm_reward: f64) -> Self {
        Self {
            episode: r.episode,
            algo,
            seed,
            iae: r.iae,
            ise: r.ise,
            final_norm_err: r.final_norm_err,
            mean_reward: r.mean_reward,
            norm_reward,
            lambda: r.lambda,
            violation_rate: r.violation_rate,
            kl: r.kl,
            truncated: r.truncated,
        }
    }
}

/// One evaluation rollout in `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Training episodes behind the evaluated policy.
    pub episode: u64,
    pub algo: Algo,
    pub seed: u64,
    pub iae: f64,
    pub ise: f64,
    pub final_norm_err: f64,
    pub mean_reward: f64,
    pub norm_reward: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub algo: Algo,
    pub median_iae: f64,
    pub median_ise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub algo: Algo,
    pub median_norm_reward: f64,
}

/// Reference points of the reward normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub random_baseline: f64,
    pub best_reference: Option<f64>,
    pub baseline_episodes: usize,
    pub smoothing_window: usize,
}

impl Normalization {
    pub fn apply(&self, r: f64) -> f64 {
        match self.best_reference {
            Some(best) => lyapctl::metrics::normalize_rewards(&[r], self.random_baseline, best).map_or(f64::NAN, |v| v[0]),
            None => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_iae: f64,
    pub median_iae: f64,
    pub mean_ise: f64,
    pub median_ise: f64,
    pub mean_final_norm_err: f64,
    pub mean_reward: f64,
    pub truncated: usize,
}

impl EvalSummary {
    pub fn from_episodes(eps: &[EvalEpisode]) -> Self {
        let mean = |f: fn(&EvalEpisode) -> f64| {
            if eps.is_empty() {
                f64::NAN
            } else {
                eps.iter().map(f).sum::<f64>() / eps.len() as f64
            }
        };
        let col = |f: fn(&EvalEpisode) -> f64| eps.iter().map(f).collect::<Vec<_>>();
        Self {
            episodes: eps.len(),
            mean_iae: mean(|e| e.iae),
            median_iae: lyapctl::metrics::median(&col(|e| e.iae)),
            mean_ise: mean(|e| e.ise),
            median_ise: lyapctl::metrics::median(&col(|e| e.ise)),
            mean_final_norm_err: mean(|e| e.final_norm_err),
            mean_reward: mean(|e| e.mean_reward),
            truncated: eps.iter().filter(|e| e.truncated).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSummary {
    pub final_lambda: Option<f64>,
    pub min_lambda: Option<f64>,
    pub mean_violation_rate: f64,
    pub kl_accepted: usize,
    pub kl_rejected: usize,
    pub kl_max: Option<f64>,
    pub low_updates: usize,
    pub high_updates: usize,
    pub pretrain_fit_error: Option<f64>,
    pub clone_error: Option<f64>,
}

/// `summary.json` of a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algo: Algo,
    pub env: EnvKind,
    pub seed: u64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub truncated_episodes: usize,
    pub final_norm_reward: Option<f64>,
    pub normalization: Normalization,
    pub eval: EvalSummary,
    pub constraint: ConstraintSummary,
}

pub const CHECKPOINT_FORMAT: &str = "lyapctl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub env: EnvKind,
    pub env_overrides: EnvOverrides,
    pub seed: u64,
    pub episodes: usize,
    pub normalization: Normalization,
    pub agent: HierarchicalAgent,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(format!("cannot open checkpoint {}", path.display()), e))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(CliError::Usage(format!(
                "{}: unsupported checkpoint format {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(format!("cannot create {}", parent.display()), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))
}

/// Writes serialisable rows with a header, even when `rows` is empty.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

pub const RECORD_HEADER: [&str; 12] = [
    "episode",
    "algo",
    "seed",
    "iae",
    "ise",
    "final_norm_err",
    "mean_reward",
    "norm_reward",
    "lambda",
    "violation_rate",
    "kl",
    "truncated",
];
pub const METRIC_HEADER: [&str; 9] = ["episode", "algo", "seed", "iae", "ise", "final_norm_err", "mean_reward", "norm_reward", "truncated"];
pub const TABLE_HEADER: [&str; 3] = ["algo", "median_iae", "median_ise"];
pub const CURVE_HEADER: [&str; 3] = ["episode", "algo", "median_norm_reward"];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}
