//! Orchestration behind the `train`, `evaluate` and `sweep` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use lyapctl::agents::{eval_rollout, evaluate, random_policy_baseline, train, Algo, EvalEpisode, TrainOutcome};
use lyapctl::environments::EnvKind;
use lyapctl::metrics::{median, smooth};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{
    self, Checkpoint, ConstraintSummary, CurveRow, EvalSummary, MetricRow, Normalization, RecordRow, RunSummary, TableRow,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION, CURVE_HEADER, METRIC_HEADER, RECORD_HEADER, TABLE_HEADER,
};
use crate::CliError;

pub fn run_id(algo: Algo, env: EnvKind, seed: u64) -> String {
    format!("{algo}-{env}-seed{seed}")
}

/// A finished training run held in memory until its normalisation is known.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub algo: Algo,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub outcome: TrainOutcome,
    pub eval: Vec<EvalEpisode>,
    /// Trailing-average learning curve of per-step rewards.
    pub smoothed: Vec<f64>,
    pub random_baseline: f64,
}

impl RunOutput {
    pub fn best_smoothed(&self) -> Option<f64> {
        self.smoothed.iter().copied().filter(|v| v.is_finite()).reduce(f64::max)
    }

    pub fn normalization(&self, best_reference: Option<f64>) -> Normalization {
        Normalization {
            random_baseline: self.random_baseline,
            best_reference,
            baseline_episodes: self.config.experiment.baseline_episodes,
            smoothing_window: self.config.experiment.smoothing_window,
        }
    }

    pub fn rows(&self, norm: &Normalization) -> Vec<RecordRow> {
        self.outcome
            .records
            .iter()
            .zip(&self.smoothed)
            .map(|(r, s)| RecordRow::new(self.algo, self.seed, r, norm.apply(*s)))
            .collect()
    }

    pub fn summary(&self, norm: &Normalization) -> RunSummary {
        let d = &self.outcome.diagnostics;
        let records = &self.outcome.records;
        let lambdas = d.lambda_trace.iter().copied();
        RunSummary {
            algo: self.algo,
            env: self.config.experiment.env,
            seed: self.seed,
            episodes: records.len(),
            steps_per_episode: self.config.train.steps_per_episode.unwrap_or(0),
            truncated_episodes: records.iter().filter(|r| r.truncated).count(),
            final_norm_reward: self.smoothed.last().map(|s| norm.apply(*s)),
            normalization: norm.clone(),
            eval: EvalSummary::from_episodes(&self.eval),
            constraint: ConstraintSummary {
                final_lambda: d.lambda_trace.last().copied(),
                min_lambda: lambdas.reduce(f64::min),
                mean_violation_rate: mean(records.iter().map(|r| r.violation_rate)),
                kl_accepted: d.kl_accepted,
                kl_rejected: d.kl_rejected,
                kl_max: d.kl_measured.iter().copied().reduce(f64::max),
                low_updates: d.low_updates,
                high_updates: d.high_updates,
                pretrain_fit_error: d.pretrain_fit_error,
                clone_error: d.clone_error,
            },
        }
    }

    /// Writes `config.toml`, `records.csv`, `summary.json` and
    /// `checkpoint.json` into `dir`.
    pub fn write(&self, dir: &Path, norm: &Normalization) -> Result<(), CliError> {
        output::write_text(&dir.join("config.toml"), &self.config.to_toml()?)?;
        output::write_csv(&dir.join("records.csv"), &RECORD_HEADER, &self.rows(norm))?;
        output::write_json(&dir.join("summary.json"), &self.summary(norm))?;
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            env: self.config.experiment.env,
            env_overrides: self.config.env.clone(),
            seed: self.seed,
            episodes: self.outcome.records.len(),
            normalization: norm.clone(),
            agent: self.outcome.agent.clone(),
        };
        output::write_json(&dir.join("checkpoint.json"), &ck)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Trains and evaluates one `(algo, seed)` pair. When `random_baseline` is
/// `None` it is estimated from uniform-random rollouts under `seed`.
pub fn run_training(exp: &ExperimentConfig, algo: Algo, seed: u64, random_baseline: Option<f64>) -> Result<RunOutput, CliError> {
    let config = exp.resolved(algo, seed)?;
    let task = config.task()?;
    let mut cfg = config.train.clone();
    cfg.seed = seed;
    let steps = cfg.steps_per_episode.unwrap_or_else(|| task.steps());
    let random_baseline = match random_baseline {
        Some(r) => r,
        None => random_policy_baseline(&task, config.experiment.baseline_episodes, steps, seed)?,
    };
    info!("training {} on {} with seed {seed}", algo, config.experiment.env);
    let outcome = train(algo, &task, &cfg)?;
    let eval = evaluate(&outcome.agent, &task, cfg.eval_episodes, seed)?;
    let curve: Vec<f64> = outcome.records.iter().map(|r| r.mean_reward).collect();
    let smoothed = smooth(&curve, config.experiment.smoothing_window);
    Ok(RunOutput {
        algo,
        seed,
        config,
        outcome,
        eval,
        smoothed,
        random_baseline,
    })
}

/// `lyapctl train`: the first configured algorithm over every seed.
pub fn train_command(exp: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let algo = exp.experiment.algos[0];
    let mut dirs = Vec::new();
    for &seed in &exp.experiment.seeds {
        let run = run_training(exp, algo, seed, None)?;
        let norm = run.normalization(run.best_smoothed());
        if norm.best_reference.is_some_and(|b| b <= norm.random_baseline) {
            warn!("{algo} seed {seed}: best reward does not exceed the random baseline; norm_reward is NaN");
        }
        let dir = exp.experiment.output_dir.join(run_id(algo, exp.experiment.env, seed));
        run.write(&dir, &norm)?;
        info!("wrote {}", dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Clone, Debug, Serialize)]
pub struct AlgoSummary {
    pub algo: Algo,
    pub runs: usize,
    pub failed: usize,
    pub median_iae: f64,
    pub median_ise: f64,
    pub final_median_norm_reward: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepFailure {
    pub algo: Algo,
    pub seed: u64,
    pub error: String,
    pub divergence: bool,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub runs: Vec<RunOutput>,
    pub failures: Vec<SweepFailure>,
    pub normalization: Normalization,
    pub table: Vec<TableRow>,
    pub curves: Vec<CurveRow>,
    pub algos: Vec<AlgoSummary>,
}

impl SweepOutput {
    pub fn run(&self, algo: Algo, seed: u64) -> Option<&RunOutput> {
        self.runs.iter().find(|r| r.algo == algo && r.seed == seed)
    }

    pub fn table_row(&self, algo: Algo) -> Option<&TableRow> {
        self.table.iter().find(|r| r.algo == algo)
    }

    /// Median over seeds of the final smoothed normalised reward.
    pub fn final_norm_reward(&self, algo: Algo) -> Option<f64> {
        self.curves.iter().rev().find(|c| c.algo == algo).map(|c| c.median_norm_reward)
    }
}

/// Every algorithm against every seed on a pool of `parallel` threads.
/// Failed runs are collected rather than aborting the sweep; when `dir` is
/// given, all artefacts are written beneath it.
pub fn run_sweep(exp: &ExperimentConfig, dir: Option<&Path>, parallel: usize) -> Result<SweepOutput, CliError> {
    let e = &exp.experiment;
    let task = exp.task()?;
    let steps = exp.train.steps_per_episode.unwrap_or_else(|| task.steps());
    let random = random_policy_baseline(&task, e.baseline_episodes, steps, e.seeds[0])?;
    let pairs: Vec<(Algo, u64)> = e.algos.iter().flat_map(|&a| e.seeds.iter().map(move |&s| (a, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|err| CliError::Usage(format!("cannot start worker pool: {err}")))?;
    let results: Vec<_> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(a, s)| ((a, s), run_training(exp, a, s, Some(random))))
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for ((algo, seed), res) in results {
        match res {
            Ok(r) => runs.push(r),
            Err(err) => {
                warn!("{algo} seed {seed} failed: {err}");
                failures.push(SweepFailure {
                    algo,
                    seed,
                    divergence: err.exit_code() == crate::EXIT_DIVERGENCE,
                    error: err.to_string(),
                });
            }
        }
    }
    let best = runs.iter().filter_map(RunOutput::best_smoothed).reduce(f64::max);
    let normalization = Normalization {
        random_baseline: random,
        best_reference: best,
        baseline_episodes: e.baseline_episodes,
        smoothing_window: e.smoothing_window,
    };
    if best.is_some_and(|b| b <= random) {
        warn!("no run beat the random baseline; normalised rewards are NaN");
    }

    let mut table = Vec::new();
    let mut curves = Vec::new();
    let mut algos = Vec::new();
    for &algo in &e.algos {
        let mine: Vec<&RunOutput> = runs.iter().filter(|r| r.algo == algo).collect();
        let failed = failures.iter().filter(|f| f.algo == algo).count();
        let per_seed = |f: fn(&EvalSummary) -> f64| -> f64 {
            median(&mine.iter().map(|r| f(&EvalSummary::from_episodes(&r.eval))).collect::<Vec<_>>())
        };
        let (median_iae, median_ise) = (per_seed(|s| s.median_iae), per_seed(|s| s.median_ise));
        let len = mine.iter().map(|r| r.smoothed.len()).min().unwrap_or(0);
        let mut last = None;
        for ep in 0..len {
            let vals: Vec<f64> = mine.iter().map(|r| normalization.apply(r.smoothed[ep])).collect();
            let m = median(&vals);
            last = Some(m);
            curves.push(CurveRow {
                episode: mine[0].outcome.records[ep].episode,
                algo,
                median_norm_reward: m,
            });
        }
        if !mine.is_empty() {
            table.push(TableRow {
                algo,
                median_iae,
                median_ise,
            });
        }
        algos.push(AlgoSummary {
            algo,
            runs: mine.len(),
            failed,
            median_iae,
            median_ise,
            final_median_norm_reward: last,
        });
    }

    let out = SweepOutput {
        runs,
        failures,
        normalization,
        table,
        curves,
        algos,
    };
    if let Some(dir) = dir {
        write_sweep(&out, exp, dir)?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct SweepSummaryFile<'a> {
    env: EnvKind,
    normalization: &'a Normalization,
    algos: &'a [AlgoSummary],
    failures: &'a [SweepFailure],
}

fn write_sweep(out: &SweepOutput, exp: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let env = exp.experiment.env;
    let mut all = Vec::new();
    for r in &out.runs {
        r.write(&dir.join("runs").join(run_id(r.algo, env, r.seed)), &out.normalization)?;
        all.extend(r.rows(&out.normalization));
    }
    output::write_text(&dir.join("config.toml"), &exp.to_toml()?)?;
    output::write_csv(&dir.join("records.csv"), &RECORD_HEADER, &all)?;
    output::write_csv(&dir.join("table.csv"), &TABLE_HEADER, &out.table)?;
    output::write_csv(&dir.join("curves.csv"), &CURVE_HEADER, &out.curves)?;
    output::write_json(&dir.join("normalization.json"), &out.normalization)?;
    output::write_json(
        &dir.join("summary.json"),
        &SweepSummaryFile {
            env,
            normalization: &out.normalization,
            algos: &out.algos,
            failures: &out.failures,
        },
    )
}

/// `lyapctl evaluate`: one rollout per seed from a checkpoint. Nothing is
/// written unless every rollout succeeds.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    env: Option<EnvKind>,
    config: Option<&ExperimentConfig>,
    seeds: &[u64],
    dir: &Path,
) -> Result<Vec<MetricRow>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one seed".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let mut exp = config.cloned().unwrap_or_default();
    exp.experiment.env = env.unwrap_or(ck.env);
    if config.is_none() && exp.experiment.env == ck.env {
        exp.env = ck.env_overrides.clone();
    }
    let task = exp.task()?;
    let mut rows = Vec::new();
    let mut trajectories = BTreeMap::new();
    for &seed in seeds {
        let ep = eval_rollout(&ck.agent, &task, seed, 0)?;
        rows.push(MetricRow {
            episode: ck.agent.k,
            algo: ck.agent.algo,
            seed,
            iae: ep.iae,
            ise: ep.ise,
            final_norm_err: ep.final_norm_err,
            mean_reward: ep.mean_reward,
            norm_reward: ck.normalization.apply(ep.mean_reward),
            truncated: ep.truncated,
        });
        trajectories.insert(seed, ep.trajectory);
    }
    for (seed, traj) in &trajectories {
        let path = dir.join(format!("trajectory-seed{seed}.csv"));
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        output::write_text(&path, std::str::from_utf8(&buf).expect("csv output is UTF-8"))?;
    }
    output::write_csv(&dir.join("metrics.csv"), &METRIC_HEADER, &rows)?;
    Ok(rows)
}
