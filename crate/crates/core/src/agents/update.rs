use super::{high_level_return, AgentError, HierarchicalAgent, HierarchyMode};
use crate::dynamics::SdeModel;
use crate::lyapunov::{accumulate_constraint_param_grad, generator_action_grad, hessian_trace_batch, GeneratorConfig, LyapunovFunction, LyapunovNet};
use crate::neural::{clip_global_norm, sgd_step, Direction, Mlp};
use crate::numerics::Matrix;
use crate::replay::{PrioritizedBuffer, SampleIndex, Transition};

/// A reconstructed `T_h`-step window for the high-level critic.
#[derive(Clone, Debug, PartialEq)]
pub struct HighSample {
    pub state: Vec<f64>,
    pub a_h: Vec<f64>,
    /// `Σ γ^k r_k` over the window.
    pub ret: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Control time at the window start.
    pub time: f64,
}

impl HighSample {
    /// Window containing `idx`, or `None` when it is incomplete or evicted.
    pub fn from_buffer(buf: &PrioritizedBuffer, idx: SampleIndex, t_h: usize, gamma: f64) -> Option<Self> {
        let w = buf.option_window(idx, t_h)?;
        let last = w.last()?;
        if w.len() < t_h && !last.done {
            return None;
        }
        let rewards: Vec<f64> = w.iter().map(|t| t.reward).collect();
        Some(Self {
            state: w[0].state.clone(),
            a_h: w[0].high_action.clone(),
            ret: high_level_return(&rewards, gamma),
            next_state: last.next_state.clone(),
            done: last.done,
            time: w[0].time,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TdReport {
    pub loss_h: f64,
    pub loss_l: f64,
    /// `target − Q` per low-level sample.
    pub td_l: Vec<f64>,
    pub td_h: Vec<f64>,
}

fn concat_rows(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// High-level action in force at the step after `t`.
fn next_high_action(agent: &HierarchicalAgent, t: &Transition) -> Result<Vec<f64>, AgentError> {
    match &agent.pi_h {
        None => Ok(Vec::new()),
        Some(_) if t.step_in_option + 1 < agent.t_h => Ok(t.high_action.clone()),
        Some(pi_h) => Ok(pi_h.forward(&t.next_state)?),
    }
}

/// Critic inputs and bootstrapped targets for the low-level TD loss.
fn low_targets(agent: &HierarchicalAgent, lows: &[&Transition]) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let mut inputs = Vec::new();
    let mut next_inputs = Vec::new();
    for t in lows {
        inputs.extend(concat_rows(&[&t.state, &t.high_action, &t.low_action]));
        let ah = next_high_action(agent, t)?;
        let al = agent.pi_l.forward(&agent.low_input(&t.next_state, &ah))?;
        next_inputs.extend(concat_rows(&[&t.next_state, &ah, &al]));
    }
    let q_next = agent.target_q_l.forward_batch(&next_inputs, lows.len())?.into_output();
    let targets = lows
        .iter()
        .zip(&q_next)
        .map(|(t, q)| t.reward + if t.done { 0.0 } else { agent.gamma * q })
        .collect();
    Ok((inputs, targets))
}

fn high_targets(agent: &HierarchicalAgent, highs: &[HighSample]) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let (Some(pi_h), Some(tq)) = (&agent.pi_h, &agent.target_q_h) else {
        return Err(AgentError::Config("flat agents have no high-level critic".into()));
    };
    let mut inputs = Vec::new();
    let mut next_inputs = Vec::new();
    for h in highs {
        inputs.extend(concat_rows(&[&h.state, &h.a_h]));
        let a = pi_h.forward(&h.next_state)?;
        next_inputs.extend(concat_rows(&[&h.next_state, &a]));
    }
    let q_next = tq.forward_batch(&next_inputs, highs.len())?.into_output();
    let targets = highs
        .iter()
        .zip(&q_next)
        .map(|(h, q)| h.ret + if h.done { 0.0 } else { agent.big_gamma * q })
        .collect();
    Ok((inputs, targets))
}

/// TD losses of both critics without changing any parameters.
pub fn td_losses(agent: &HierarchicalAgent, lows: &[&Transition], highs: &[HighSample]) -> Result<TdReport, AgentError> {
    let mut rep = TdReport::default();
    if !lows.is_empty() {
        let (inputs, targets) = low_targets(agent, lows)?;
        let q = agent.q_l.forward_batch(&inputs, lows.len())?.into_output();
        rep.td_l = targets.iter().zip(&q).map(|(y, q)| y - q).collect();
        rep.loss_l = rep.td_l.iter().map(|d| d * d).sum::<f64>() / lows.len() as f64;
    }
    if !highs.is_empty() && agent.q_h.is_some() {
        let (inputs, targets) = high_targets(agent, highs)?;
        let q = agent.q_h.as_ref().expect("checked").forward_batch(&inputs, highs.len())?.into_output();
        rep.td_h = targets.iter().zip(&q).map(|(y, q)| y - q).collect();
        rep.loss_h = rep.td_h.iter().map(|d| d * d).sum::<f64>() / highs.len() as f64;
    }
    Ok(rep)
}

/// Gradient of the weighted squared-TD loss and `target − Q`.
fn critic_grad(net: &Mlp, inputs: &[f64], targets: &[f64], weights: Option<&[f64]>, clip: f64) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let count = targets.len();
    let tape = net.forward_batch(inputs, count)?;
    let td: Vec<f64> = targets.iter().zip(tape.output()).map(|(y, q)| y - q).collect();
    let up: Vec<f64> = td
        .iter()
        .enumerate()
        .map(|(i, d)| -2.0 * weights.map_or(1.0, |w| w[i]) * d / count as f64)
        .collect();
    let mut g = vec![0.0; net.num_params()];
    net.backward_batch(&tape, &up, &mut g, None)?;
    clip_global_norm(&mut g, clip);
    Ok((td, g))
}

pub(super) fn low_critic_grad(agent: &HierarchicalAgent, lows: &[&Transition], weights: Option<&[f64]>, clip: f64) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let (inputs, targets) = low_targets(agent, lows)?;
    critic_grad(&agent.q_l, &inputs, &targets, weights, clip)
}

pub(super) fn high_critic_grad(agent: &HierarchicalAgent, highs: &[HighSample], clip: f64) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    let (inputs, targets) = high_targets(agent, highs)?;
    let q_h = agent.q_h.as_ref().ok_or_else(|| AgentError::Config("no high-level critic".into()))?;
    critic_grad(q_h, &inputs, &targets, None, clip)
}

/// One weighted squared-TD descent step; returns `target − Q` before the step.
pub(super) fn low_critic_step(agent: &mut HierarchicalAgent, lows: &[&Transition], weights: &[f64], lr: f64, clip: f64) -> Result<Vec<f64>, AgentError> {
    let (td, g) = low_critic_grad(agent, lows, Some(weights), clip)?;
    sgd_step(agent.q_l.params_mut(), &g, lr, Direction::Descent)?;
    Ok(td)
}

pub(super) fn high_critic_step(agent: &mut HierarchicalAgent, highs: &[HighSample], lr: f64, clip: f64) -> Result<Vec<f64>, AgentError> {
    let (td, g) = high_critic_grad(agent, highs, clip)?;
    let q_h = agent.q_h.as_mut().expect("checked by high_critic_grad");
    sgd_step(q_h.params_mut(), &g, lr, Direction::Descent)?;
    Ok(td)
}

/// Lyapunov quantities at a batch of `(state, input)` pairs.
#[derive(Clone, Debug, Default)]
pub(super) struct ConstraintEval {
    pub residual: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub drift: Vec<Vec<f64>>,
    pub sigma: Vec<Matrix>,
}

impl ConstraintEval {
    pub fn hinge_mean(&self) -> f64 {
        if self.residual.is_empty() {
            return 0.0;
        }
        self.residual.iter().map(|r| r.max(0.0)).sum::<f64>() / self.residual.len() as f64
    }

    pub fn violation_rate(&self) -> f64 {
        if self.residual.is_empty() {
            return 0.0;
        }
        self.residual.iter().filter(|&&r| r > 0.0).count() as f64 / self.residual.len() as f64
    }
}

pub(super) fn constraint_batch(
    v: &LyapunovNet,
    model: &dyn SdeModel,
    states: &[f64],
    inputs: &[Vec<f64>],
    times: &[f64],
    gen: &GeneratorConfig,
) -> Result<ConstraintEval, AgentError> {
    let n = v.dim();
    let count = inputs.len();
    let values = v.value_batch(states, count);
    let grad_v = v.grad_x_batch(states, count);
    let mut drift = Vec::with_capacity(count);
    let mut sigma = Vec::with_capacity(count);
    for i in 0..count {
        let x = &states[i * n..(i + 1) * n];
        drift.push(model.drift_vec(x, &inputs[i], times[i]));
        sigma.push(model.diffusion_matrix(x, &inputs[i], times[i]));
    }
    let curv = hessian_trace_batch(v, states, &sigma, gen)?;
    let mut residual = Vec::with_capacity(count);
    for i in 0..count {
        let g = &grad_v[i * n..(i + 1) * n];
        let lv: f64 = g.iter().zip(&drift[i]).map(|(a, b)| a * b).sum::<f64>() + curv[i];
        let r = lv + gen.alpha * values[i] - gen.beta;
        if !r.is_finite() {
            return Err(AgentError::Lyapunov(crate::lyapunov::LyapunovError::Degenerate(format!(
                "constraint residual not finite at {:?}",
                &states[i * n..(i + 1) * n]
            ))));
        }
        residual.push(r);
    }
    let eval = ConstraintEval { residual, grad_v, drift, sigma };
    Ok(eval)
}

/// `−λ/B · ∂hinge/∂c` for each violating row, zero elsewhere, in
/// normalised composite units.
fn constraint_upstream(
    agent: &HierarchicalAgent,
    v: &LyapunovNet,
    model: &dyn SdeModel,
    states: &[f64],
    inputs: &[Vec<f64>],
    masks: &[Vec<bool>],
    times: &[f64],
    eval: &ConstraintEval,
    gen: &GeneratorConfig,
) -> Result<Vec<f64>, AgentError> {
    let n = agent.state_dim;
    let m = agent.action_dim;
    let count = inputs.len();
    let lambda = agent.lagrange.lambda;
    let mut out = vec![0.0; count * m];
    for i in 0..count {
        if eval.residual[i] <= 0.0 {
            continue;
        }
        let x = &states[i * n..(i + 1) * n];
        let gu = generator_action_grad(v, model, x, &inputs[i], times[i], &eval.grad_v[i * n..(i + 1) * n], gen)?;
        for j in 0..m {
            if masks[i][j] {
                out[i * m + j] = -lambda / count as f64 * agent.action_bound * gu[j];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActorGrads {
    /// Ascent direction for the low-level (or flat) actor, clipped.
    pub low: Vec<f64>,
    pub high: Option<Vec<f64>>,
    /// Constraint residuals `ℒV + αV − β` at the low-level batch.
    pub residuals: Vec<f64>,
    pub hinge_mean: f64,
    pub violation_rate: f64,
}

pub(super) struct LowActorResult {
    pub grad: Vec<f64>,
    pub eval: Option<ConstraintEval>,
    pub low_inputs: Vec<f64>,
}

/// Gradient of `mean Q_l − λ mean hinge` for the low-level actor at
/// stored high-level actions.
pub(super) fn low_actor_gradient(
    agent: &HierarchicalAgent,
    states: &[f64],
    stored_a_h: &[f64],
    times: &[f64],
    model: Option<&dyn SdeModel>,
    gen: &GeneratorConfig,
    clip: f64,
) -> Result<LowActorResult, AgentError> {
    let n = agent.state_dim;
    let m_h = agent.m_h;
    let m_l = agent.m_l;
    let count = times.len();
    let mut low_inputs = Vec::with_capacity(count * (n + m_h));
    for i in 0..count {
        low_inputs.extend_from_slice(&states[i * n..(i + 1) * n]);
        low_inputs.extend_from_slice(&stored_a_h[i * m_h..(i + 1) * m_h]);
    }
    let tape_l = agent.pi_l.forward_batch(&low_inputs, count)?;
    let a_l = tape_l.output();
    let mut q_in = Vec::with_capacity(count * (n + m_h + m_l));
    for i in 0..count {
        q_in.extend_from_slice(&low_inputs[i * (n + m_h)..(i + 1) * (n + m_h)]);
        q_in.extend_from_slice(&a_l[i * m_l..(i + 1) * m_l]);
    }
    let tape_q = agent.q_l.forward_batch(&q_in, count)?;
    let dq = agent.q_l.input_gradients(&tape_q, &vec![1.0 / count as f64; count])?;
    let w = n + m_h + m_l;
    let mut up: Vec<f64> = (0..count).flat_map(|i| dq[i * w + n + m_h..(i + 1) * w].to_vec()).collect();

    let mut eval = None;
    if let (Some(v), Some(model)) = (&agent.lyapunov, model) {
        let mut inputs = Vec::with_capacity(count);
        let mut masks = Vec::with_capacity(count);
        for i in 0..count {
            let (c, mask) = agent.composite(&stored_a_h[i * m_h..(i + 1) * m_h], &a_l[i * m_l..(i + 1) * m_l]);
            inputs.push(c.iter().map(|c| c * agent.action_bound).collect::<Vec<_>>());
            masks.push(mask);
        }
        let ev = constraint_batch(v, model, states, &inputs, times, gen)?;
        if agent.lagrange.lambda > 0.0 {
            let dc = constraint_upstream(agent, v, model, states, &inputs, &masks, times, &ev, gen)?;
            let m = agent.action_dim;
            let off = if agent.is_hierarchical() && agent.mode == HierarchyMode::Split { m_h } else { 0 };
            for i in 0..count {
                for j in 0..m_l {
                    up[i * m_l + j] += dc[i * m + off + j];
                }
            }
        }
        eval = Some(ev);
    }
    let mut g = vec![0.0; agent.pi_l.num_params()];
    agent.pi_l.backward_batch(&tape_l, &up, &mut g, None)?;
    clip_global_norm(&mut g, clip);
    Ok(LowActorResult { grad: g, eval, low_inputs })
}

/// Gradient of `mean Q_h − λ mean hinge` for the high-level actor, with
/// the constraint differentiated through the low-level response.
pub(super) fn high_actor_gradient(
    agent: &HierarchicalAgent,
    states: &[f64],
    times: &[f64],
    model: Option<&dyn SdeModel>,
    gen: &GeneratorConfig,
    clip: f64,
) -> Result<Vec<f64>, AgentError> {
    let (Some(pi_h), Some(q_h)) = (&agent.pi_h, &agent.q_h) else {
        return Err(AgentError::Config("flat agents have no high-level actor".into()));
    };
    let n = agent.state_dim;
    let m_h = agent.m_h;
    let m_l = agent.m_l;
    let m = agent.action_dim;
    let count = times.len();
    let tape_h = pi_h.forward_batch(states, count)?;
    let a_h = tape_h.output().to_vec();
    let mut qin = Vec::with_capacity(count * (n + m_h));
    for i in 0..count {
        qin.extend_from_slice(&states[i * n..(i + 1) * n]);
        qin.extend_from_slice(&a_h[i * m_h..(i + 1) * m_h]);
    }
    let tape_q = q_h.forward_batch(&qin, count)?;
    let dq = q_h.input_gradients(&tape_q, &vec![1.0 / count as f64; count])?;
    let mut up: Vec<f64> = (0..count).flat_map(|i| dq[i * (n + m_h) + n..(i + 1) * (n + m_h)].to_vec()).collect();

    if let (Some(v), Some(model)) = (&agent.lyapunov, model) {
        if agent.lagrange.lambda > 0.0 {
            let tape_l = agent.pi_l.forward_batch(&qin, count)?;
            let a_l = tape_l.output();
            let mut inputs = Vec::with_capacity(count);
            let mut masks = Vec::with_capacity(count);
            for i in 0..count {
                let (c, mask) = agent.composite(&a_h[i * m_h..(i + 1) * m_h], &a_l[i * m_l..(i + 1) * m_l]);
                inputs.push(c.iter().map(|c| c * agent.action_bound).collect::<Vec<_>>());
                masks.push(mask);
            }
            let ev = constraint_batch(v, model, states, &inputs, times, gen)?;
            let dc = constraint_upstream(agent, v, model, states, &inputs, &masks, times, &ev, gen)?;
            let (dc_h, dc_l): (Vec<f64>, Vec<f64>) = match agent.mode {
                HierarchyMode::Additive => (dc.clone(), dc),
                HierarchyMode::Split => (
                    (0..count).flat_map(|i| dc[i * m..i * m + m_h].to_vec()).collect(),
                    (0..count).flat_map(|i| dc[i * m + m_h..(i + 1) * m].to_vec()).collect(),
                ),
            };
            // Low-level response: (∂π_l/∂a_h)ᵀ dc_l.
            let through = agent.pi_l.input_gradients(&tape_l, &dc_l)?;
            for i in 0..count {
                for j in 0..m_h {
                    up[i * m_h + j] += dc_h[i * m_h + j] + through[i * (n + m_h) + n + j];
                }
            }
        }
    }
    let mut g = vec![0.0; pi_h.num_params()];
    pi_h.backward_batch(&tape_h, &up, &mut g, None)?;
    clip_global_norm(&mut g, clip);
    Ok(g)
}

/// Constrained deterministic policy gradients of both actors on one batch.
///
/// `states` are observations (`count × n`), `stored_a_h` the high-level
/// actions in force when they were recorded (`count × m_h`).
pub fn actor_gradients(
    agent: &HierarchicalAgent,
    states: &[f64],
    stored_a_h: &[f64],
    times: &[f64],
    model: Option<&dyn SdeModel>,
    gen: &GeneratorConfig,
    clip: f64,
) -> Result<ActorGrads, AgentError> {
    if times.is_empty() {
        return Err(AgentError::Config("actor gradients need a nonempty batch".into()));
    }
    if states.len() != times.len() * agent.state_dim || stored_a_h.len() != times.len() * agent.m_h {
        return Err(AgentError::Dimension(format!(
            "batch of {} rows needs {} state and {} high-action entries, got {} and {}",
            times.len(),
            times.len() * agent.state_dim,
            times.len() * agent.m_h,
            states.len(),
            stored_a_h.len()
        )));
    }
    let low = low_actor_gradient(agent, states, stored_a_h, times, model, gen, clip)?;
    let high = if agent.is_hierarchical() {
        Some(high_actor_gradient(agent, states, times, model, gen, clip)?)
    } else {
        None
    };
    let (residuals, hinge_mean, violation_rate) = match &low.eval {
        Some(e) => (e.residual.clone(), e.hinge_mean(), e.violation_rate()),
        None => (Vec::new(), 0.0, 0.0),
    };
    Ok(ActorGrads {
        low: low.grad,
        high,
        residuals,
        hinge_mean,
        violation_rate,
    })
}

/// Descends the mean squared hinge in `φ`; returns the pre-clip norm.
pub(super) fn lyapunov_step(
    v: &mut LyapunovNet,
    states: &[f64],
    eval: &ConstraintEval,
    gen: &GeneratorConfig,
    lr: f64,
    clip: f64,
) -> Result<f64, AgentError> {
    let n = v.dim();
    let count = eval.residual.len();
    let mut g = vec![0.0; v.num_params()];
    let mut any = false;
    for i in 0..count {
        let r = eval.residual[i];
        if r > 0.0 {
            any = true;
            let x = &states[i * n..(i + 1) * n];
            accumulate_constraint_param_grad(v, x, &eval.drift[i], &eval.sigma[i], gen, 2.0 * r / count as f64, &mut g);
        }
    }
    if !any {
        return Ok(0.0);
    }
    let norm = clip_global_norm(&mut g, clip);
    let mut p = v.params();
    sgd_step(&mut p, &g, lr, Direction::Descent)?;
    v.set_params(&p)?;
    v.project();
    Ok(norm)
}
