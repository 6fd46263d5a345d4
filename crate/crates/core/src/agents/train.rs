use serde::{Deserialize, Serialize};

use super::update::{high_actor_gradient, high_critic_grad, high_critic_step, low_actor_gradient, low_critic_grad, low_critic_step, lyapunov_step, HighSample};
use super::{kl_gaussian, lambda_update, polyak, ppo, trust_region_apply, ActOutput, AgentError, Algo, HierarchicalAgent, Rates, TrainConfig};
use crate::dynamics::{integrate_interval, EmWorkspace, RolloutOptions, SdeModel, Trajectory};
use crate::environments::TaskSpec;
use crate::lyapunov::{equilibrium_input, pretrain};
use crate::metrics::{iae, ise, norm2, ErrorSeries};
use crate::neural::{sgd_step, Adam, Direction, Mlp};
use crate::numerics::RngStream;
use crate::replay::{PrioritizedBuffer, Transition};

/// One row of the per-episode training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub episode: usize,
    pub iae: f64,
    pub ise: f64,
    pub final_norm_err: f64,
    pub mean_reward: f64,
    pub lambda: f64,
    pub violation_rate: f64,
    /// Mean measured actor KL over the episode's updates.
    pub kl: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// KL between consecutive accepted actor iterates, measured on the
    /// batch of the following update.
    pub kl_measured: Vec<f64>,
    pub kl_accepted: usize,
    pub kl_rejected: usize,
    /// λ after every multiplier update.
    pub lambda_trace: Vec<f64>,
    pub pretrain_fit_error: Option<f64>,
    pub clone_error: Option<f64>,
    pub low_updates: usize,
    pub high_updates: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: HierarchicalAgent,
    pub records: Vec<RunRecord>,
    pub diagnostics: Diagnostics,
}

/// A scored rollout. `errors` spans the full horizon: a truncated episode
/// is padded with its last error.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalEpisode {
    pub trajectory: Trajectory,
    pub errors: ErrorSeries,
    pub iae: f64,
    pub ise: f64,
    pub final_norm_err: f64,
    pub mean_reward: f64,
    pub truncated: bool,
}

pub(super) struct EpisodeRngs {
    pub env: RngStream,
    pub obs: RngStream,
    pub explore: RngStream,
}

impl EpisodeRngs {
    pub fn new(seed: u64, base: u64) -> Self {
        Self {
            env: RngStream::new(seed, base),
            obs: RngStream::new(seed, base + 1),
            explore: RngStream::new(seed, base + 2),
        }
    }
}

pub(super) struct Step<'a> {
    pub obs: &'a [f64],
    pub act: &'a ActOutput,
    pub reward: f64,
    pub next_obs: &'a [f64],
    pub done: bool,
    pub step: usize,
    pub time: f64,
}

/// Runs one episode of `steps` control periods, calling `hook` after each.
///
/// A blow-up ends the episode with a terminal step whose reward is the last
/// reward held forever, `r/(1 − γ)`.
pub(super) fn simulate<F>(
    agent: &mut HierarchicalAgent,
    task: &TaskSpec,
    steps: usize,
    rngs: &mut EpisodeRngs,
    explore: bool,
    mut hook: F,
) -> Result<EvalEpisode, AgentError>
where
    F: FnMut(&mut HierarchicalAgent, Step<'_>) -> Result<(), AgentError>,
{
    if steps == 0 {
        return Err(AgentError::Config("episodes need at least one step".into()));
    }
    let model = task.model.as_ref();
    let dt = task.control_dt;
    let opts = RolloutOptions::new(dt, steps as f64 * dt).with_substeps(task.substeps);
    let mut ws = EmWorkspace::new(model);
    let mut scratch = Vec::new();
    let mut x = task.x0.clone();
    let mut obs = task.observe(&x, 0.0, &mut rngs.obs);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x.clone()],
        ..Trajectory::default()
    };
    agent.reset();
    let zero_u = vec![0.0; task.action_dim()];
    let mut last_reward = task.reward(&x, &zero_u, 0.0);
    for step in 0..steps {
        let t = step as f64 * dt;
        let act = agent.act(&obs, step, &mut rngs.explore, explore)?;
        let ok = integrate_interval(model, &mut x, &act.u, t, &opts, &mut rngs.env, &mut ws, &mut scratch)?;
        let t1 = (step + 1) as f64 * dt;
        if !ok {
            traj.truncated = true;
            let penalty = last_reward / (1.0 - agent.gamma);
            hook(agent, Step { obs: &obs, act: &act, reward: penalty, next_obs: &obs, done: true, step, time: t })?;
            break;
        }
        let r = task.reward(&x, &act.u, t1);
        let next_obs = task.observe(&x, t1, &mut rngs.obs);
        hook(agent, Step { obs: &obs, act: &act, reward: r, next_obs: &next_obs, done: false, step, time: t })?;
        last_reward = r;
        traj.times.push(t1);
        traj.states.push(x.clone());
        traj.actions.push(act.u);
        traj.rewards.push(r);
        obs = next_obs;
    }
    score(task, traj, steps)
}

/// Tracking metrics over the full horizon of `steps` periods.
fn score(task: &TaskSpec, traj: Trajectory, steps: usize) -> Result<EvalEpisode, AgentError> {
    let dims = task.metric_dims;
    let dt = task.control_dt;
    let mut errors = ErrorSeries::default();
    for (t, x) in traj.times.iter().zip(&traj.states) {
        errors.push(*t, task.error(x, *t)[..dims].to_vec());
    }
    let last_e = errors.errors.last().cloned().unwrap_or_default();
    for k in traj.times.len()..=steps {
        errors.push(k as f64 * dt, last_e.clone());
    }
    let last_r = match traj.rewards.last() {
        Some(r) => *r,
        None => task.reward(&traj.states[0], &vec![0.0; task.action_dim()], 0.0),
    };
    let reward_sum: f64 = traj.rewards.iter().sum::<f64>() + last_r * (steps - traj.rewards.len()) as f64;
    Ok(EvalEpisode {
        iae: iae(&errors)?,
        ise: ise(&errors)?,
        final_norm_err: norm2(&last_e),
        mean_reward: reward_sum / steps as f64,
        truncated: traj.truncated,
        errors,
        trajectory: traj,
    })
}

/// Greedy rollout over the task horizon (no exploration noise).
pub fn eval_rollout(agent: &HierarchicalAgent, task: &TaskSpec, seed: u64, episode: u64) -> Result<EvalEpisode, AgentError> {
    check_dims(agent, task)?;
    let mut a = agent.clone();
    let mut rngs = EpisodeRngs::new(seed, 1000 + 3 * episode);
    simulate(&mut a, task, task.steps(), &mut rngs, false, |_, _| Ok(()))
}

/// `episodes` greedy rollouts with independent noise.
pub fn evaluate(agent: &HierarchicalAgent, task: &TaskSpec, episodes: usize, seed: u64) -> Result<Vec<EvalEpisode>, AgentError> {
    (0..episodes as u64).map(|e| eval_rollout(agent, task, seed, e)).collect()
}

/// Mean per-step reward of uniformly random inputs over `episodes` rollouts.
pub fn random_policy_baseline(task: &TaskSpec, episodes: usize, steps: usize, seed: u64) -> Result<f64, AgentError> {
    if episodes == 0 || steps == 0 {
        return Err(AgentError::Config("random baseline needs at least one episode and one step".into()));
    }
    let model = task.model.as_ref();
    let dt = task.control_dt;
    let opts = RolloutOptions::new(dt, task.horizon).with_substeps(task.substeps);
    let mut act_rng = RngStream::new(seed, 900);
    let mut env_rng = RngStream::new(seed, 901);
    let mut ws = EmWorkspace::new(model);
    let mut scratch = Vec::new();
    let b = task.action_bound;
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut x = task.x0.clone();
        let mut traj = Trajectory {
            times: vec![0.0],
            states: vec![x.clone()],
            ..Trajectory::default()
        };
        for step in 0..steps {
            let t = step as f64 * dt;
            let u: Vec<f64> = (0..task.action_dim()).map(|_| act_rng.uniform(-b, b)).collect();
            if !integrate_interval(model, &mut x, &u, t, &opts, &mut env_rng, &mut ws, &mut scratch)? {
                traj.truncated = true;
                break;
            }
            let t1 = (step + 1) as f64 * dt;
            traj.rewards.push(task.reward(&x, &u, t1));
            traj.times.push(t1);
            traj.states.push(x.clone());
            traj.actions.push(u);
        }
        total += score(task, traj, steps)?.mean_reward;
    }
    Ok(total / episodes as f64)
}

fn check_dims(agent: &HierarchicalAgent, task: &TaskSpec) -> Result<(), AgentError> {
    if agent.state_dim != task.state_dim() || agent.action_dim != task.action_dim() {
        return Err(AgentError::Dimension(format!(
            "agent has state dim {} and action dim {}, environment `{}` has {} and {}",
            agent.state_dim,
            agent.action_dim,
            task.kind.name(),
            task.state_dim(),
            task.action_dim()
        )));
    }
    Ok(())
}

/// Off-policy learner state shared by the low- and high-level updates.
struct Learner<'a> {
    cfg: &'a TrainConfig,
    rates: Rates,
    model: Option<&'a dyn SdeModel>,
    buffer: PrioritizedBuffer,
    replay_rng: RngStream,
    diag: Diagnostics,
    prev_low: Option<Mlp>,
    prev_high: Option<Mlp>,
    total_steps: usize,
    episode_violations: Vec<f64>,
    episode_kl: Vec<f64>,
    /// Off while gathering warm-up data.
    learning: bool,
}

impl Learner<'_> {
    fn kl_std(&self) -> f64 {
        self.cfg.exploration_start
    }

    /// Actor step with the KL trust region for the certified algorithms.
    fn actor_step(&mut self, agent: &mut HierarchicalAgent, high: bool, grad: &[f64], lr: f64, states: &[f64], count: usize) -> Result<(), AgentError> {
        let trust = agent.algo.uses_lyapunov();
        let net = if high {
            agent.pi_h.as_mut().expect("hierarchical agent")
        } else {
            &mut agent.pi_l
        };
        let mut proposed = net.params().to_vec();
        sgd_step(&mut proposed, grad, lr, Direction::Ascent)?;
        if !trust {
            net.set_params(&proposed)?;
            return Ok(());
        }
        let step = trust_region_apply(net, &proposed, states, count, self.kl_std(), self.cfg.delta_kl)?;
        if step.accepted {
            let old = net.clone();
            net.set_params(&step.params)?;
            self.diag.kl_accepted += 1;
            if high {
                self.prev_high = Some(old);
            } else {
                self.prev_low = Some(old);
            }
        } else {
            self.diag.kl_rejected += 1;
        }
        Ok(())
    }

    fn low_update(&mut self, agent: &mut HierarchicalAgent) -> Result<(), AgentError> {
        let cfg = self.cfg;
        let k = agent.k;
        let (idx, weights) = self.buffer.sample(cfg.batch, &mut self.replay_rng)?;
        let lows: Vec<Transition> = idx.iter().map(|i| self.buffer.get(*i).expect("sampled index is live").clone()).collect();
        let refs: Vec<&Transition> = lows.iter().collect();
        let states: Vec<f64> = lows.iter().flat_map(|t| t.state.iter().copied()).collect();
        let a_h: Vec<f64> = lows.iter().flat_map(|t| t.high_action.iter().copied()).collect();
        let times: Vec<f64> = lows.iter().map(|t| t.time).collect();

        let td = low_critic_step(agent, &refs, &weights, self.rates.phi_l.at(k), cfg.clip_norm)?;
        let res = low_actor_gradient(agent, &states, &a_h, &times, self.model, &cfg.generator, cfg.clip_norm)?;
        if let Some(prev) = self.prev_low.take() {
            let kl = kl_gaussian(&prev, &agent.pi_l, &res.low_inputs, lows.len(), self.kl_std())?;
            self.diag.kl_measured.push(kl);
            self.episode_kl.push(kl);
        }
        let mut violation = vec![0.0; lows.len()];
        if let Some(ev) = &res.eval {
            for (v, r) in violation.iter_mut().zip(&ev.residual) {
                *v = r.max(0.0);
            }
            if let Some(v) = agent.lyapunov.as_mut() {
                lyapunov_step(v, &states, ev, &cfg.generator, self.rates.phi.at(k), cfg.clip_norm)?;
            }
            lambda_update(&mut agent.lagrange, ev.hinge_mean(), ev.violation_rate(), k, &self.rates.lambda);
            self.diag.lambda_trace.push(agent.lagrange.lambda);
            self.episode_violations.push(ev.violation_rate());
        }
        self.actor_step(agent, false, &res.grad, self.rates.theta_l.at(k), &res.low_inputs, lows.len())?;
        for (i, d) in idx.iter().enumerate() {
            self.buffer.update_priority(*d, td[i], violation[i]);
        }
        polyak(&mut agent.target_q_l, &agent.q_l, cfg.tau)?;
        self.diag.low_updates += 1;
        Ok(())
    }

    fn high_update(&mut self, agent: &mut HierarchicalAgent) -> Result<(), AgentError> {
        let cfg = self.cfg;
        let k = agent.k;
        let (idx, _) = self.buffer.sample(cfg.batch, &mut self.replay_rng)?;
        let highs: Vec<HighSample> = idx
            .iter()
            .filter_map(|i| HighSample::from_buffer(&self.buffer, *i, agent.t_h, agent.gamma))
            .collect();
        if highs.is_empty() {
            return Ok(());
        }
        let states: Vec<f64> = highs.iter().flat_map(|h| h.state.iter().copied()).collect();
        let times: Vec<f64> = highs.iter().map(|h| h.time).collect();
        if let Some(prev) = self.prev_high.take() {
            let kl = kl_gaussian(&prev, agent.pi_h.as_ref().expect("hierarchical agent"), &states, highs.len(), self.kl_std())?;
            self.diag.kl_measured.push(kl);
            self.episode_kl.push(kl);
        }
        high_critic_step(agent, &highs, self.rates.phi_h.at(k), cfg.clip_norm)?;
        let g = high_actor_gradient(agent, &states, &times, self.model, &cfg.generator, cfg.clip_norm)?;
        self.actor_step(agent, true, &g, self.rates.theta_h.at(k), &states, highs.len())?;
        let (Some(tq), Some(q)) = (agent.target_q_h.as_mut(), agent.q_h.as_ref()) else {
            unreachable!("hierarchical agents carry both high-level critics")
        };
        polyak(tq, q, cfg.tau)?;
        self.diag.high_updates += 1;
        Ok(())
    }

    /// Fits the critics to the replayed behaviour of the current actors by
    /// Adam on the TD loss, with targets synced every `SYNC` iterations.
    fn warm_critics(&mut self, agent: &mut HierarchicalAgent) -> Result<(), AgentError> {
        const SYNC: usize = 100;
        let cfg = self.cfg;
        if self.buffer.len() < cfg.batch {
            return Ok(());
        }
        let mut adam_l = Adam::new(agent.q_l.num_params(), cfg.critic_warmup_lr);
        let mut adam_h = agent.q_h.as_ref().map(|q| Adam::new(q.num_params(), cfg.critic_warmup_lr));
        for it in 0..cfg.critic_warmup_iters {
            if it % SYNC == 0 {
                agent.target_q_l = agent.q_l.clone();
                agent.target_q_h = agent.q_h.clone();
            }
            let (idx, _) = self.buffer.sample(cfg.batch, &mut self.replay_rng)?;
            let lows: Vec<&Transition> = idx.iter().map(|i| self.buffer.get(*i).expect("sampled index is live")).collect();
            let (_, g) = low_critic_grad(agent, &lows, None, cfg.clip_norm)?;
            adam_l.step(agent.q_l.params_mut(), &g);
            if let Some(adam) = adam_h.as_mut() {
                let highs: Vec<HighSample> = idx
                    .iter()
                    .filter_map(|i| HighSample::from_buffer(&self.buffer, *i, agent.t_h, agent.gamma))
                    .collect();
                if !highs.is_empty() {
                    let (_, g) = high_critic_grad(agent, &highs, cfg.clip_norm)?;
                    adam.step(agent.q_h.as_mut().expect("hierarchical agent").params_mut(), &g);
                }
            }
        }
        agent.target_q_l = agent.q_l.clone();
        agent.target_q_h = agent.q_h.clone();
        Ok(())
    }

    fn on_step(&mut self, agent: &mut HierarchicalAgent, s: Step<'_>) -> Result<(), AgentError> {
        let tr = Transition {
            state: s.obs.to_vec(),
            high_action: s.act.a_h.clone(),
            low_action: s.act.a_l.clone(),
            reward: s.reward * self.cfg.reward_scale,
            next_state: s.next_obs.to_vec(),
            done: s.done,
            step_in_option: s.step % agent.t_h,
            time: s.time,
        };
        let p = self.buffer.max_priority();
        self.buffer.push(tr, p)?;
        self.total_steps += 1;
        if self.learning && self.buffer.len() >= self.cfg.batch && self.total_steps % self.cfg.update_every == 0 {
            self.low_update(agent)?;
            if agent.is_hierarchical() && self.diag.low_updates % agent.t_h == 0 {
                self.high_update(agent)?;
            }
        }
        Ok(())
    }
}

/// Trains `algo` on `task`.
///
/// Certified algorithms first fit the Lyapunov network to the LQR
/// certificate of the linearised error dynamics and clone the actors onto
/// the LQR law; the learning loop then follows with replayed minibatches.
pub fn train(algo: Algo, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    let n = task.state_dim();
    let m = task.action_dim();
    let mut init_rng = RngStream::new(cfg.seed, 0);
    let mut agent = HierarchicalAgent::new(algo, n, m, task.action_bound, cfg, &mut init_rng)?;
    let mut diag = Diagnostics::default();
    let error_model = task.error_model();
    let zero = vec![0.0; n];
    let warm = agent.lyapunov.is_some();
    if let Some(v) = agent.lyapunov.as_mut() {
        let mut rng = RngStream::new(cfg.seed, 5);
        let u_star = equilibrium_input(&error_model, &zero, 0.0)?;
        let rep = pretrain(v, &error_model, &zero, &u_star, &mut rng, &cfg.pretrain)?;
        diag.pretrain_fit_error = Some(rep.fit_error);
        let mse = agent.warm_start(&u_star, &rep.k, cfg.clone_iters, cfg.clone_scale, &mut rng)?;
        log::debug!("{algo}: clone mse {mse:.3e}");
        diag.clone_error = Some(mse);
    }
    // Zero episodes yield the initialised (pretrained, cloned) agent.
    if cfg.episodes == 0 {
        return Ok(TrainOutcome {
            agent,
            records: Vec::new(),
            diagnostics: diag,
        });
    }
    let steps = cfg.steps_per_episode.unwrap_or_else(|| task.steps());
    if algo == Algo::Ppo {
        return ppo::train_ppo(agent, task, cfg, steps, diag);
    }

    let model: Option<&dyn SdeModel> = agent.lyapunov.as_ref().map(|_| &error_model as &dyn SdeModel);
    let mut learner = Learner {
        cfg,
        rates: algo.rates(cfg),
        model,
        buffer: PrioritizedBuffer::new(cfg.replay_capacity)?,
        replay_rng: RngStream::new(cfg.seed, 4),
        diag,
        prev_low: None,
        prev_high: None,
        total_steps: 0,
        episode_violations: Vec::new(),
        episode_kl: Vec::new(),
        learning: false,
    };
    if warm && cfg.critic_warmup_iters > 0 {
        let mut rngs = EpisodeRngs::new(cfg.seed, 6);
        agent.exploration_std = cfg.exploration_start;
        for _ in 0..cfg.critic_warmup_episodes {
            simulate(&mut agent, task, steps, &mut rngs, true, |a, s| learner.on_step(a, s))?;
        }
        learner.warm_critics(&mut agent)?;
    }
    learner.learning = true;
    let mut rngs = EpisodeRngs::new(cfg.seed, 1);
    let mut records = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        agent.k = episode as u64;
        agent.exploration_std = cfg.exploration_std(episode);
        learner.episode_violations.clear();
        learner.episode_kl.clear();
        let ep = simulate(&mut agent, task, steps, &mut rngs, true, |a, s| learner.on_step(a, s))?;
        let vr = &learner.episode_violations;
        records.push(RunRecord {
            episode,
            iae: ep.iae,
            ise: ep.ise,
            final_norm_err: ep.final_norm_err,
            mean_reward: ep.mean_reward,
            lambda: agent.lagrange.lambda,
            violation_rate: mean_or_zero(vr),
            kl: mean_or_zero(&learner.episode_kl),
            truncated: ep.truncated,
        });
        check_divergence(&records, cfg)?;
    }
    agent.k = cfg.episodes as u64;
    Ok(TrainOutcome {
        agent,
        records,
        diagnostics: learner.diag,
    })
}

pub(super) fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(super) fn check_divergence(records: &[RunRecord], cfg: &TrainConfig) -> Result<(), AgentError> {
    let w = cfg.divergence_window;
    if w == 0 || records.len() < w {
        return Ok(());
    }
    let truncated = records[records.len() - w..].iter().filter(|r| r.truncated).count();
    if truncated as f64 > cfg.divergence_rate * w as f64 {
        return Err(AgentError::Divergence {
            episode: records.len() - 1,
            truncated,
            window: w,
        });
    }
    Ok(())
}
