//! Experiment files: TOML with an `[experiment]`, a `[train]` and an
//! `[env]` table. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use lyapctl::agents::{Algo, TrainConfig};
use lyapctl::environments::{default_task, EnvKind, Hyperchaotic8D, Manipulator5DOF, TaskSpec};
use lyapctl::numerics::Matrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub env: EnvKind,
    /// `train` uses the first entry; `sweep` runs all of them.
    pub algos: Vec<Algo>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Uniform-random episodes behind the reward normalisation floor.
    pub baseline_episodes: usize,
    /// Trailing window for learning-curve smoothing.
    pub smoothing_window: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            env: EnvKind::Hyperchaotic8d,
            algos: vec![Algo::Mtlhrl],
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            baseline_episodes: 50,
            smoothing_window: 10,
        }
    }
}

/// Plant and task overrides; absent keys keep the environment defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvOverrides {
    pub horizon: Option<f64>,
    pub control_dt: Option<f64>,
    pub substeps: Option<usize>,
    pub action_bound: Option<f64>,
    pub reward_rho: Option<f64>,
    pub process_noise_std: Option<f64>,
    /// Manipulator only.
    pub sensor_noise_std: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub train: TrainConfig,
    pub env: EnvOverrides,
}

fn config_error(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error(origin, e.to_string()))?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| config_error(&origin, format!("cannot read: {e}")))?;
        Self::parse(&text, &origin)
    }

    pub fn validate(&self, origin: &str) -> Result<(), CliError> {
        let e = &self.experiment;
        if e.algos.is_empty() {
            return Err(config_error(origin, "[experiment] algos must list at least one algorithm"));
        }
        if e.seeds.is_empty() {
            return Err(config_error(origin, "[experiment] seeds must list at least one seed"));
        }
        if e.baseline_episodes == 0 || e.smoothing_window == 0 {
            return Err(config_error(origin, "[experiment] baseline_episodes and smoothing_window must be positive"));
        }
        if self.train.seed != 0 {
            return Err(config_error(origin, "[train] seed is not read; list seeds under [experiment] seeds"));
        }
        self.train.validate().map_err(|err| config_error(origin, format!("[train] {err}")))?;
        self.task().map_err(|err| config_error(origin, err.to_string()))?;
        Ok(())
    }

    /// The task with all overrides applied.
    pub fn task(&self) -> Result<TaskSpec, CliError> {
        let o = &self.env;
        let kind = self.experiment.env;
        let mut task = match (kind, o.process_noise_std) {
            (_, Some(s)) if !(s >= 0.0 && s.is_finite()) => return Err(CliError::Usage(format!("[env] process_noise_std must be nonnegative, got {s}"))),
            (EnvKind::Hyperchaotic8d, Some(s)) => TaskSpec::hyperchaotic(Hyperchaotic8D {
                process_noise_std: s,
                ..Hyperchaotic8D::default()
            }),
            (EnvKind::Manipulator5dof, Some(s)) => TaskSpec::manipulator(Manipulator5DOF {
                process_noise_std: s,
                ..Manipulator5DOF::default()
            }),
            (EnvKind::LinearTest, Some(s)) => {
                let mut model = lyapctl::environments::linear_test_model();
                model.sigma = Matrix::identity(2).scale(s);
                TaskSpec {
                    model: std::sync::Arc::new(model),
                    ..TaskSpec::linear_test()
                }
            }
            (kind, None) => default_task(kind),
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(CliError::Usage(format!("[env] {name} must be positive, got {v}")))
            }
        };
        if let Some(v) = o.horizon {
            task.horizon = positive("horizon", v)?;
        }
        if let Some(v) = o.control_dt {
            task.control_dt = positive("control_dt", v)?;
        }
        if let Some(v) = o.substeps {
            if v == 0 {
                return Err(CliError::Usage("[env] substeps must be positive".into()));
            }
            task.substeps = v;
        }
        if let Some(v) = o.action_bound {
            task.action_bound = positive("action_bound", v)?;
        }
        if let Some(v) = o.reward_rho {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::Usage(format!("[env] reward_rho must be nonnegative, got {v}")));
            }
            task.reward_rho = v;
        }
        if let Some(v) = o.sensor_noise_std {
            if kind != EnvKind::Manipulator5dof {
                return Err(CliError::Usage(format!("[env] sensor_noise_std applies to manipulator5dof, not {kind}")));
            }
            task.sensor_noise_std = v;
        }
        if task.steps() == 0 {
            return Err(CliError::Usage("[env] horizon is shorter than one control period".into()));
        }
        Ok(task)
    }

    /// A copy with every default written out, for one `(algo, seed)` run.
    pub fn resolved(&self, algo: Algo, seed: u64) -> Result<Self, CliError> {
        let task = self.task()?;
        let mut out = self.clone();
        out.experiment.algos = vec![algo];
        out.experiment.seeds = vec![seed];
        out.train.steps_per_episode = Some(self.train.steps_per_episode.unwrap_or_else(|| task.steps()));
        out.env = EnvOverrides {
            horizon: Some(task.horizon),
            control_dt: Some(task.control_dt),
            substeps: Some(task.substeps),
            action_bound: Some(task.action_bound),
            reward_rho: Some(task.reward_rho),
            process_noise_std: Some(self.env.process_noise_std.unwrap_or(default_process_noise(self.experiment.env))),
            sensor_noise_std: (self.experiment.env == EnvKind::Manipulator5dof).then_some(task.sensor_noise_std),
        };
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialise config: {e}")))
    }
}

fn default_process_noise(kind: EnvKind) -> f64 {
    match kind {
        EnvKind::Hyperchaotic8d => Hyperchaotic8D::default().process_noise_std,
        EnvKind::Manipulator5dof => Manipulator5DOF::default().process_noise_std,
        EnvKind::LinearTest => lyapctl::environments::linear_test_model().sigma[(0, 0)],
    }
}
