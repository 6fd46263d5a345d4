use serde::{Deserialize, Serialize};

use super::{AgentError, Algo, LagrangeState, TrainConfig};
use crate::lyapunov::LyapunovNet;
use crate::neural::{Activation, Adam, Mlp};
use crate::numerics::{Matrix, RngStream};

/// How the two levels combine into the plant input.
///
/// `Additive`: both levels act on every channel and `u = b·clip(a_h + a_l)`.
/// `Split`: `u = b·[a_h, a_l]` with `m_h = ⌊m/2⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierarchyMode {
    Additive,
    Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub u: Vec<f64>,
    pub a_h: Vec<f64>,
    pub a_l: Vec<f64>,
}

/// Actors and critics of one agent. Flat agents have no high level and
/// `m_h = 0`. Actions are normalised to `[−1, 1]` and scaled by
/// `action_bound` on the way to the plant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalAgent {
    pub algo: Algo,
    pub mode: HierarchyMode,
    pub state_dim: usize,
    pub action_dim: usize,
    pub m_h: usize,
    pub m_l: usize,
    pub action_bound: f64,
    pub pi_h: Option<Mlp>,
    pub pi_l: Mlp,
    pub q_h: Option<Mlp>,
    pub q_l: Mlp,
    pub target_q_h: Option<Mlp>,
    pub target_q_l: Mlp,
    /// State-value network of the on-policy baseline.
    pub value: Option<Mlp>,
    pub lyapunov: Option<LyapunovNet>,
    pub lagrange: LagrangeState,
    pub t_h: usize,
    pub gamma: f64,
    pub big_gamma: f64,
    pub exploration_std: f64,
    pub latched_a_h: Vec<f64>,
    /// Schedule index (completed training episodes).
    pub k: u64,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl HierarchicalAgent {
    pub fn new(algo: Algo, n: usize, m: usize, action_bound: f64, cfg: &TrainConfig, rng: &mut RngStream) -> Result<Self, AgentError> {
        if n == 0 || m == 0 {
            return Err(AgentError::Dimension(format!("state dim {n} and action dim {m} must be positive")));
        }
        let mode = cfg.hierarchy;
        let (m_h, m_l) = if !algo.hierarchical() {
            (0, m)
        } else {
            match mode {
                HierarchyMode::Additive => (m, m),
                HierarchyMode::Split if m >= 2 => (m / 2, m - m / 2),
                HierarchyMode::Split => {
                    return Err(AgentError::Config("split hierarchy needs at least two action channels".into()));
                }
            }
        };
        let actor = |i: usize, o: usize, rng: &mut RngStream| Mlp::init(&sizes(i, &cfg.actor_hidden, o), Activation::Tanh, Activation::Tanh, rng);
        let critic = |i: usize, rng: &mut RngStream| Mlp::init(&sizes(i, &cfg.critic_hidden, 1), Activation::Relu, Activation::Identity, rng);
        let (pi_h, q_h) = if m_h > 0 {
            (Some(actor(n, m_h, rng)?), Some(critic(n + m_h, rng)?))
        } else {
            (None, None)
        };
        let mut pi_l = actor(n + m_h, m_l, rng)?;
        if !algo.uses_lyapunov() {
            // Near-zero initial actions for the baselines without a warm start.
            pi_l.scale_output_layer(0.01);
        }
        let q_l = critic(n + m_h + m_l, rng)?;
        let value = if algo == Algo::Ppo {
            Some(critic(n, rng)?)
        } else {
            None
        };
        let frozen = cfg.freeze_lambda || algo == Algo::AblNoLyapunov;
        let lambda0 = if algo == Algo::AblNoLyapunov || !algo.uses_lyapunov() {
            0.0
        } else {
            cfg.lambda0
        };
        let lyapunov = if algo.uses_lyapunov() {
            Some(LyapunovNet::new(n, cfg.lyapunov_hidden, cfg.lyapunov_features, rng)?)
        } else {
            None
        };
        Ok(Self {
            algo,
            mode,
            state_dim: n,
            action_dim: m,
            m_h,
            m_l,
            action_bound,
            target_q_h: q_h.clone(),
            target_q_l: q_l.clone(),
            pi_h,
            pi_l,
            q_h,
            q_l,
            value,
            lyapunov,
            lagrange: LagrangeState::new(lambda0, cfg.lambda_halving, cfg.violation_threshold, frozen),
            t_h: cfg.t_h,
            gamma: cfg.gamma,
            big_gamma: cfg.big_gamma,
            exploration_std: cfg.exploration_start,
            latched_a_h: vec![0.0; m_h],
            k: 0,
        })
    }

    pub fn is_hierarchical(&self) -> bool {
        self.pi_h.is_some()
    }

    /// Input row of the low-level actor.
    pub fn low_input(&self, obs: &[f64], a_h: &[f64]) -> Vec<f64> {
        let mut v = obs.to_vec();
        v.extend_from_slice(a_h);
        v
    }

    /// Normalised plant input and the mask of unsaturated channels.
    pub fn composite(&self, a_h: &[f64], a_l: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let raw: Vec<f64> = match (self.is_hierarchical(), self.mode) {
            (false, _) => a_l.to_vec(),
            (true, HierarchyMode::Additive) => a_h.iter().zip(a_l).map(|(h, l)| h + l).collect(),
            (true, HierarchyMode::Split) => a_h.iter().chain(a_l).copied().collect(),
        };
        let mask = raw.iter().map(|v| v.abs() < 1.0).collect();
        (raw.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), mask)
    }

    pub fn plant_input(&self, a_h: &[f64], a_l: &[f64]) -> Vec<f64> {
        self.composite(a_h, a_l).0.into_iter().map(|c| c * self.action_bound).collect()
    }

    /// Clears the latch so the next call refreshes the high-level action.
    pub fn reset(&mut self) {
        self.latched_a_h.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Chooses the plant input at control step `t_step`.
    ///
    /// The high-level action is recomputed when `t_step` is a multiple of
    /// `T_h` and held otherwise.
    pub fn act(&mut self, obs: &[f64], t_step: usize, rng: &mut RngStream, explore: bool) -> Result<ActOutput, AgentError> {
        if obs.len() != self.state_dim {
            return Err(AgentError::Dimension(format!(
                "observation has {} entries, agent expects {}",
                obs.len(),
                self.state_dim
            )));
        }
        let std = self.exploration_std;
        let clamp_noise = self.algo != Algo::Ppo;
        if let Some(pi_h) = &self.pi_h {
            if t_step % self.t_h == 0 {
                let mut a = pi_h.forward(obs)?;
                if explore {
                    for v in &mut a {
                        *v = (*v + std * rng.standard_normal()).clamp(-1.0, 1.0);
                    }
                }
                self.latched_a_h = a;
            }
        }
        let a_h = self.latched_a_h.clone();
        let mut a_l = self.pi_l.forward(&self.low_input(obs, &a_h))?;
        if explore {
            for v in &mut a_l {
                *v += std * rng.standard_normal();
                if clamp_noise {
                    *v = v.clamp(-1.0, 1.0);
                }
            }
        }
        let u = self.plant_input(&a_h, &a_l);
        Ok(ActOutput { u, a_h, a_l })
    }

    /// Deterministic action without touching the latch.
    pub fn greedy(&self, obs: &[f64]) -> Result<ActOutput, AgentError> {
        let a_h = match &self.pi_h {
            Some(p) => p.forward(obs)?,
            None => Vec::new(),
        };
        let a_l = self.pi_l.forward(&self.low_input(obs, &a_h))?;
        Ok(ActOutput {
            u: self.plant_input(&a_h, &a_l),
            a_h,
            a_l,
        })
    }

    /// Behaviour-clones the actors onto `u = u* − K e` (saturated).
    ///
    /// Returns the final mean squared clone error of the low-level actor.
    pub fn warm_start(&mut self, u_star: &[f64], k_gain: &Matrix, iters: usize, scale: f64, rng: &mut RngStream) -> Result<f64, AgentError> {
        let n = self.state_dim;
        let m = self.action_dim;
        if u_star.len() != m || k_gain.rows() != m || k_gain.cols() != n {
            return Err(AgentError::Dimension(format!(
                "feedback gain is {}x{}, agent needs {m}x{n}",
                k_gain.rows(),
                k_gain.cols()
            )));
        }
        let bound = self.action_bound;
        let lim = 0.98;
        let target = |e: &[f64]| -> Vec<f64> {
            let ke = k_gain.matvec(e).expect("shape checked");
            (0..m).map(|i| ((u_star[i] - ke[i]) / bound).clamp(-lim, lim)).collect()
        };
        let sample_e = |rng: &mut RngStream| -> Vec<f64> {
            let s = if rng.uniform(0.0, 1.0) < 0.5 { scale } else { 0.2 * scale };
            (0..n).map(|_| s * rng.standard_normal()).collect()
        };
        let h_std = self.exploration_std;
        let m_h = self.m_h;
        let mode = self.mode;
        match (&mut self.pi_h, mode) {
            (None, _) => fit(&mut self.pi_l, iters, rng, |rng| {
                let e = sample_e(rng);
                let t = target(&e);
                (e, t)
            }),
            (Some(pi_h), HierarchyMode::Additive) => {
                let h_star: Vec<f64> = u_star.iter().map(|u| (u / bound).clamp(-lim, lim)).collect();
                let off = pi_h.layer_offset(pi_h.layers() - 1);
                let np = pi_h.num_params();
                for p in &mut pi_h.params_mut()[off..np - m] {
                    *p = 0.0;
                }
                for (b, h) in pi_h.output_bias_mut().iter_mut().zip(&h_star) {
                    *b = h.atanh();
                }
                fit(&mut self.pi_l, iters, rng, |rng| {
                    let e = sample_e(rng);
                    let a_h: Vec<f64> = h_star.iter().map(|h| (h + h_std * rng.standard_normal()).clamp(-1.0, 1.0)).collect();
                    let c = target(&e);
                    let t = c.iter().zip(&a_h).map(|(c, h)| (c - h).clamp(-lim, lim)).collect();
                    let mut x = e;
                    x.extend_from_slice(&a_h);
                    (x, t)
                })
            }
            (Some(pi_h), HierarchyMode::Split) => {
                fit(pi_h, iters, rng, |rng| {
                    let e = sample_e(rng);
                    let t = target(&e)[..m_h].to_vec();
                    (e, t)
                })?;
                fit(&mut self.pi_l, iters, rng, |rng| {
                    let e = sample_e(rng);
                    let c = target(&e);
                    let a_h: Vec<f64> = c[..m_h].iter().map(|h| (h + h_std * rng.standard_normal()).clamp(-1.0, 1.0)).collect();
                    let mut x = e;
                    x.extend_from_slice(&a_h);
                    (x, c[m_h..].to_vec())
                })
            }
        }
    }
}

/// Mean-squared regression with Adam on freshly sampled pairs.
fn fit<F>(net: &mut Mlp, iters: usize, rng: &mut RngStream, mut sample: F) -> Result<f64, AgentError>
where
    F: FnMut(&mut RngStream) -> (Vec<f64>, Vec<f64>),
{
    let batch = 64;
    let nin = net.input_dim();
    let nout = net.output_dim();
    let mut opt = Adam::new(net.num_params(), 3e-3);
    let mut params = net.params().to_vec();
    let mut last = f64::NAN;
    let mut xs = vec![0.0; batch * nin];
    let mut ys = vec![0.0; batch * nout];
    for it in 0..iters {
        for b in 0..batch {
            let (x, y) = sample(rng);
            xs[b * nin..(b + 1) * nin].copy_from_slice(&x);
            ys[b * nout..(b + 1) * nout].copy_from_slice(&y);
        }
        let tape = net.forward_batch(&xs, batch)?;
        let out = tape.output();
        let up: Vec<f64> = out.iter().zip(&ys).map(|(o, y)| 2.0 * (o - y) / batch as f64).collect();
        last = out.iter().zip(&ys).map(|(o, y)| (o - y) * (o - y)).sum::<f64>() / (batch * nout) as f64;
        let mut g = vec![0.0; params.len()];
        net.backward_batch(&tape, &up, &mut g, None)?;
        opt.step(&mut params, &g);
        net.set_params(&params)?;
        if it == iters / 2 {
            opt.set_lr(1e-3);
        }
    }
    Ok(last)
}
