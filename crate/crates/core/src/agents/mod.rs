//! Hierarchical actor-critic agents, the Lagrangian and trust-region
//! machinery, baselines and the training loop.

mod policy;
mod ppo;
mod train;
mod update;

pub use policy::{ActOutput, HierarchicalAgent, HierarchyMode};
pub use train::{evaluate, eval_rollout, random_policy_baseline, train, Diagnostics, EvalEpisode, RunRecord, TrainOutcome};
pub use update::{actor_gradients, td_losses, ActorGrads, HighSample, TdReport};

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::environments::EnvError;
use crate::lyapunov::{GeneratorConfig, LyapunovError, PretrainConfig};
use crate::metrics::MetricsError;
use crate::neural::{Mlp, NeuralError, Schedule};
use crate::numerics::NumericsError;
use crate::replay::ReplayError;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("training diverged at episode {episode}: {truncated} of the last {window} episodes were truncated")]
    Divergence { episode: usize, truncated: usize, window: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Mtlhrl,
    Stlhrl,
    Ddpg,
    Ppo,
    AblNoHierarchy,
    AblNoLyapunov,
    AblNoMultiscale,
}

impl Algo {
    pub const ALL: [Algo; 7] = [
        Algo::Mtlhrl,
        Algo::Stlhrl,
        Algo::Ddpg,
        Algo::Ppo,
        Algo::AblNoHierarchy,
        Algo::AblNoLyapunov,
        Algo::AblNoMultiscale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Mtlhrl => "mtlhrl",
            Algo::Stlhrl => "stlhrl",
            Algo::Ddpg => "ddpg",
            Algo::Ppo => "ppo",
            Algo::AblNoHierarchy => "abl-no-hierarchy",
            Algo::AblNoLyapunov => "abl-no-lyapunov",
            Algo::AblNoMultiscale => "abl-no-multiscale",
        }
    }

    pub fn hierarchical(self) -> bool {
        matches!(self, Algo::Mtlhrl | Algo::Stlhrl | Algo::AblNoLyapunov | Algo::AblNoMultiscale)
    }

    /// Algorithms that pretrain a Lyapunov function, warm-start from it and
    /// run the trust region.
    pub fn uses_lyapunov(self) -> bool {
        !matches!(self, Algo::Ddpg | Algo::Ppo)
    }

    /// Learning-rate schedule per parameter group.
    pub fn rates(self, cfg: &TrainConfig) -> Rates {
        let base = Rates {
            theta_h: cfg.gamma_schedule,
            phi_h: cfg.gamma_schedule,
            theta_l: cfg.alpha_schedule,
            phi_l: cfg.alpha_schedule,
            phi: cfg.beta_schedule,
            lambda: cfg.lambda_schedule,
        };
        match self {
            Algo::Stlhrl => Rates {
                theta_h: cfg.alpha_schedule,
                phi_h: cfg.alpha_schedule,
                theta_l: cfg.alpha_schedule,
                phi_l: cfg.alpha_schedule,
                phi: cfg.alpha_schedule,
                lambda: cfg.alpha_schedule,
            },
            Algo::AblNoMultiscale => Rates {
                theta_h: cfg.alpha_schedule,
                phi_h: cfg.alpha_schedule,
                ..base
            },
            _ => base,
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| AgentError::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub theta_h: Schedule,
    pub phi_h: Schedule,
    pub theta_l: Schedule,
    pub phi_l: Schedule,
    pub phi: Schedule,
    pub lambda: Schedule,
}

/// What "halved" acts on when the violation rate exceeds its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaHalving {
    StepSize,
    Multiplier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch: 64,
            std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Control steps per training episode; the task horizon when absent.
    pub steps_per_episode: Option<usize>,
    pub batch: usize,
    /// Gradient updates happen every this many control steps.
    pub update_every: usize,
    pub delta_kl: f64,
    pub tau: f64,
    pub gamma: f64,
    pub big_gamma: f64,
    pub t_h: usize,
    pub alpha_schedule: Schedule,
    pub beta_schedule: Schedule,
    pub gamma_schedule: Schedule,
    pub lambda_schedule: Schedule,
    pub lambda0: f64,
    pub lambda_halving: LambdaHalving,
    pub violation_threshold: f64,
    pub clip_norm: f64,
    pub exploration_start: f64,
    pub exploration_end: f64,
    pub replay_capacity: usize,
    pub reward_scale: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lyapunov_hidden: usize,
    pub lyapunov_features: usize,
    pub hierarchy: HierarchyMode,
    pub clone_iters: usize,
    pub clone_scale: f64,
    /// Exploratory episodes of the cloned policy gathered before learning.
    pub critic_warmup_episodes: usize,
    /// Fitted-TD iterations on that data, zero to skip.
    pub critic_warmup_iters: usize,
    pub critic_warmup_lr: f64,
    pub eval_episodes: usize,
    pub divergence_window: usize,
    pub divergence_rate: f64,
    /// Keeps λ at its initial value.
    pub freeze_lambda: bool,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            steps_per_episode: None,
            batch: 64,
            update_every: 1,
            delta_kl: 0.01,
            tau: 0.005,
            gamma: 0.99,
            big_gamma: 0.9,
            t_h: 20,
            alpha_schedule: Schedule::alpha(),
            beta_schedule: Schedule::beta(),
            gamma_schedule: Schedule::gamma(),
            lambda_schedule: Schedule::lambda(),
            lambda0: 1.0,
            lambda_halving: LambdaHalving::StepSize,
            violation_threshold: 0.1,
            clip_norm: 1.0,
            exploration_start: 0.1,
            exploration_end: 0.01,
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            reward_scale: 1.0,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            lyapunov_hidden: 32,
            lyapunov_features: 16,
            hierarchy: HierarchyMode::Additive,
            clone_iters: 1500,
            clone_scale: 1.0,
            critic_warmup_episodes: 5,
            critic_warmup_iters: 2000,
            critic_warmup_lr: 1e-3,
            eval_episodes: 5,
            divergence_window: 20,
            divergence_rate: 0.5,
            freeze_lambda: false,
            generator: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            ppo: PpoConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.update_every == 0 {
            return bad("update_every must be positive");
        }
        if self.steps_per_episode == Some(0) {
            return bad("steps_per_episode must be positive");
        }
        if self.t_h == 0 {
            return bad("t_h must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.big_gamma) {
            return bad("discount factors must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.delta_kl > 0.0) {
            return bad("delta_kl must be positive");
        }
        if self.lambda0 < 0.0 {
            return bad("lambda0 must be nonnegative");
        }
        if !(self.exploration_start > 0.0 && self.exploration_end > 0.0) {
            return bad("exploration std must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.replay_capacity < self.batch {
            return bad("replay_capacity must hold at least one batch");
        }
        for s in [self.alpha_schedule, self.beta_schedule, self.gamma_schedule, self.lambda_schedule] {
            if !(s.base > 0.0 && s.power > 0.0) {
                return bad("schedules must be positive and decreasing");
            }
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        self.generator.validate()?;
        Ok(())
    }

    /// Exploration std at `episode`, annealed linearly.
    pub fn exploration_std(&self, episode: usize) -> f64 {
        if self.episodes <= 1 {
            return self.exploration_start;
        }
        let f = episode as f64 / (self.episodes - 1) as f64;
        self.exploration_start + f.min(1.0) * (self.exploration_end - self.exploration_start)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    /// Multiplies the `α_k^λ` schedule; halved on excessive violations.
    pub step_scale: f64,
    pub halving: LambdaHalving,
    pub threshold: f64,
    pub frozen: bool,
    pub violation_window: VecDeque<f64>,
}

const VIOLATION_WINDOW: usize = 100;

impl LagrangeState {
    pub fn new(lambda0: f64, halving: LambdaHalving, threshold: f64, frozen: bool) -> Self {
        Self {
            lambda: lambda0.max(0.0),
            step_scale: 1.0,
            halving,
            threshold,
            frozen,
            violation_window: VecDeque::new(),
        }
    }

    pub fn mean_violation_rate(&self) -> f64 {
        if self.violation_window.is_empty() {
            0.0
        } else {
            self.violation_window.iter().sum::<f64>() / self.violation_window.len() as f64
        }
    }
}

/// Projected dual ascent `λ ← max(0, λ + α_k^λ · violation_mean)`.
pub fn lambda_update(state: &mut LagrangeState, violation_mean: f64, violation_rate: f64, k: u64, schedule: &Schedule) {
    if state.violation_window.len() == VIOLATION_WINDOW {
        state.violation_window.pop_front();
    }
    state.violation_window.push_back(violation_rate);
    if state.frozen {
        return;
    }
    let step = schedule.at(k) * state.step_scale;
    state.lambda = (state.lambda + step * violation_mean.max(0.0)).max(0.0);
    if violation_rate > state.threshold {
        match state.halving {
            LambdaHalving::StepSize => state.step_scale *= 0.5,
            LambdaHalving::Multiplier => state.lambda *= 0.5,
        }
    }
}

/// `Σ_k γ^k r_k`.
pub fn high_level_return(rewards: &[f64], gamma: f64) -> f64 {
    if rewards.is_empty() {
        log::warn!("high-level return of an empty window");
        return 0.0;
    }
    let mut acc = 0.0;
    let mut g = 1.0;
    for r in rewards {
        acc += g * r;
        g *= gamma;
    }
    acc
}

/// Mean `‖μ_new(x) − μ_old(x)‖² / 2σ²` over the rows of `states`.
pub fn kl_gaussian(old: &Mlp, new: &Mlp, states: &[f64], count: usize, std: f64) -> Result<f64, AgentError> {
    if count == 0 {
        return Ok(0.0);
    }
    let a = old.forward_batch(states, count)?.into_output();
    let b = new.forward_batch(states, count)?.into_output();
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / (2.0 * std * std * count as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustRegionStep {
    pub params: Vec<f64>,
    pub scale: f64,
    pub kl: f64,
    pub accepted: bool,
}

/// Backtracks the step `proposed − current` by halving until the KL on
/// `states` is at most `delta`; after 10 halvings the step is rejected.
pub fn trust_region_apply(
    current: &Mlp,
    proposed: &[f64],
    states: &[f64],
    count: usize,
    std: f64,
    delta: f64,
) -> Result<TrustRegionStep, AgentError> {
    let base = current.params();
    if proposed.len() != base.len() {
        return Err(AgentError::Dimension(format!(
            "proposed step has {} parameters, policy has {}",
            proposed.len(),
            base.len()
        )));
    }
    let mut trial = current.clone();
    let mut scale = 1.0;
    for _ in 0..=10 {
        let p: Vec<f64> = base.iter().zip(proposed).map(|(b, q)| b + scale * (q - b)).collect();
        trial.set_params(&p)?;
        let kl = kl_gaussian(current, &trial, states, count, std)?;
        if kl <= delta {
            return Ok(TrustRegionStep {
                params: p,
                scale,
                kl,
                accepted: true,
            });
        }
        scale *= 0.5;
    }
    log::debug!("trust region rejected an actor step");
    Ok(TrustRegionStep {
        params: base.to_vec(),
        scale: 0.0,
        kl: 0.0,
        accepted: false,
    })
}

/// `target ← τ·online + (1 − τ)·target`.
pub fn polyak(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), AgentError> {
    if target.sizes() != online.sizes() {
        return Err(AgentError::Dimension(format!(
            "target layout {:?} differs from online layout {:?}",
            target.sizes(),
            online.sizes()
        )));
    }
    for (t, o) in target.params_mut().iter_mut().zip(online.params()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Activation;
    use crate::numerics::RngStream;

    #[test]
    fn algo_names_roundtrip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
        }
        assert!("sac".parse::<Algo>().is_err());
    }

    #[test]
    fn lambda_step() {
        let mut s = LagrangeState::new(1.0, LambdaHalving::StepSize, 0.1, false);
        lambda_update(&mut s, 0.5, 0.0, 0, &Schedule::lambda());
        assert!((s.lambda - 1.05).abs() < 1e-15);
        lambda_update(&mut s, 0.0, 0.0, 3, &Schedule::lambda());
        assert!((s.lambda - 1.05).abs() < 1e-15);
        lambda_update(&mut s, 0.2, 0.5, 0, &Schedule::lambda());
        assert_eq!(s.step_scale, 0.5);
        let mut m = LagrangeState::new(1.0, LambdaHalving::Multiplier, 0.1, false);
        lambda_update(&mut m, 0.0, 0.5, 0, &Schedule::lambda());
        assert_eq!(m.lambda, 0.5);
    }

    #[test]
    fn returns() {
        let r = high_level_return(&[1.0; 10], 0.99);
        assert!((r - (1.0 - 0.99f64.powi(10)) / 0.01).abs() < 1e-12);
        assert_eq!(high_level_return(&[3.0, 5.0], 0.0), 3.0);
        assert_eq!(high_level_return(&[2.5], 0.99), 2.5);
        assert_eq!(high_level_return(&[], 0.99), 0.0);
    }

    #[test]
    fn kl_of_shifted_bias() {
        let mut a = Mlp::zeros(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let b = a.clone();
        assert_eq!(kl_gaussian(&a, &b, &[0.3, 0.7], 2, 1.0).unwrap(), 0.0);
        a.output_bias_mut()[0] = 0.1;
        assert!((kl_gaussian(&b, &a, &[0.3, 0.7], 2, 1.0).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn trust_region_backtracks() {
        let mut rng = RngStream::new(1, 0);
        let net = Mlp::init(&[3, 8, 2], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
        let states: Vec<f64> = (0..30).map(|_| rng.standard_normal()).collect();
        let same = trust_region_apply(&net, net.params(), &states, 10, 0.1, 0.01).unwrap();
        assert_eq!(same.scale, 1.0);
        assert_eq!(same.params, net.params());
        let tiny: Vec<f64> = net.params().iter().map(|p| p + 1e-6).collect();
        assert_eq!(trust_region_apply(&net, &tiny, &states, 10, 0.1, 0.01).unwrap().scale, 1.0);
        let huge: Vec<f64> = net.params().iter().map(|p| p + 0.5).collect();
        let step = trust_region_apply(&net, &huge, &states, 10, 0.1, 0.01).unwrap();
        assert!(step.accepted && step.scale < 1.0 && step.kl <= 0.01);
    }

    #[test]
    fn polyak_examples() {
        let mut t = Mlp::zeros(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut o = t.clone();
        o.set_params(&[1.0, 1.0]).unwrap();
        polyak(&mut t, &o, 0.005).unwrap();
        assert!(t.params().iter().all(|&v| (v - 0.005).abs() < 1e-15));
        let before = o.clone();
        polyak(&mut o, &before, 0.005).unwrap();
        assert_eq!(o, before);
        let wrong = Mlp::zeros(&[2, 1], Activation::Identity, Activation::Identity).unwrap();
        assert!(polyak(&mut t, &wrong, 0.5).is_err());
    }
}
