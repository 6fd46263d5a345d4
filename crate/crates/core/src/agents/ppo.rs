//! On-policy clipped-surrogate baseline with a fixed-std Gaussian policy.

use super::train::{check_divergence, simulate, EpisodeRngs, RunRecord, TrainOutcome};
use super::{kl_gaussian, AgentError, Diagnostics, HierarchicalAgent, TrainConfig};
use crate::environments::TaskSpec;
use crate::neural::{clip_global_norm, sgd_step, Direction};
use crate::numerics::RngStream;

/// `(advantages, returns)` by generalised advantage estimation.
///
/// `values` has one more entry than `rewards`: the bootstrap value of the
/// state after the last step, ignored when that step is terminal.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

struct Rollout {
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    last_obs: Vec<f64>,
}

fn shuffle(idx: &mut [usize], rng: &mut RngStream) {
    for i in (1..idx.len()).rev() {
        let j = rng.index(i + 1);
        idx.swap(i, j);
    }
}

fn update(agent: &mut HierarchicalAgent, ro: &Rollout, cfg: &TrainConfig, lr: f64, rng: &mut RngStream) -> Result<(), AgentError> {
    let n = agent.state_dim;
    let m = agent.action_dim;
    let p = &cfg.ppo;
    let count = ro.rewards.len();
    let value = agent.value.as_mut().ok_or_else(|| AgentError::Config("PPO agent has no value network".into()))?;
    let mut all_obs = ro.obs.clone();
    all_obs.extend_from_slice(&ro.last_obs);
    let values = value.forward_batch(&all_obs, count + 1)?.into_output();
    let (mut adv, ret) = gae(&ro.rewards, &values, &ro.dones, cfg.gamma, p.gae_lambda);
    let mean = adv.iter().sum::<f64>() / count as f64;
    let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / count as f64).sqrt();
    for a in &mut adv {
        *a = (*a - mean) / (std + 1e-8);
    }
    let old_mu = agent.pi_l.forward_batch(&ro.obs, count)?.into_output();
    let var = p.std * p.std;
    let mut order: Vec<usize> = (0..count).collect();
    for _ in 0..p.epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(p.minibatch) {
            let b = chunk.len();
            let obs: Vec<f64> = chunk.iter().flat_map(|&i| ro.obs[i * n..(i + 1) * n].iter().copied()).collect();
            let tape = agent.pi_l.forward_batch(&obs, b)?;
            let mu = tape.output();
            let mut up = vec![0.0; b * m];
            for (r, &i) in chunk.iter().enumerate() {
                let a = &ro.actions[i * m..(i + 1) * m];
                let mo = &old_mu[i * m..(i + 1) * m];
                let mn = &mu[r * m..(r + 1) * m];
                let log_ratio: f64 = (0..m).map(|j| ((a[j] - mo[j]).powi(2) - (a[j] - mn[j]).powi(2)) / (2.0 * var)).sum();
                let ratio = log_ratio.exp();
                let clipped = (adv[i] >= 0.0 && ratio > 1.0 + p.clip) || (adv[i] < 0.0 && ratio < 1.0 - p.clip);
                if clipped {
                    continue;
                }
                for j in 0..m {
                    up[r * m + j] = adv[i] * ratio * (a[j] - mn[j]) / var / b as f64;
                }
            }
            let mut g = vec![0.0; agent.pi_l.num_params()];
            agent.pi_l.backward_batch(&tape, &up, &mut g, None)?;
            clip_global_norm(&mut g, cfg.clip_norm);
            sgd_step(agent.pi_l.params_mut(), &g, lr, Direction::Ascent)?;

            let value = agent.value.as_mut().expect("checked above");
            let vt = value.forward_batch(&obs, b)?;
            let vup: Vec<f64> = chunk
                .iter()
                .zip(vt.output())
                .map(|(&i, v)| 2.0 * (v - ret[i]) / b as f64)
                .collect();
            let mut gv = vec![0.0; value.num_params()];
            value.backward_batch(&vt, &vup, &mut gv, None)?;
            clip_global_norm(&mut gv, cfg.clip_norm);
            sgd_step(value.params_mut(), &gv, lr, Direction::Descent)?;
        }
    }
    Ok(())
}

pub(super) fn train_ppo(mut agent: HierarchicalAgent, task: &TaskSpec, cfg: &TrainConfig, steps: usize, diag: Diagnostics) -> Result<TrainOutcome, AgentError> {
    let rates = agent.algo.rates(cfg);
    let mut rngs = EpisodeRngs::new(cfg.seed, 1);
    let mut shuffle_rng = RngStream::new(cfg.seed, 4);
    let mut records = Vec::with_capacity(cfg.episodes);
    let n = agent.state_dim;
    for episode in 0..cfg.episodes {
        agent.k = episode as u64;
        agent.exploration_std = cfg.ppo.std;
        let mut ro = Rollout {
            obs: Vec::with_capacity(steps * n),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            last_obs: Vec::new(),
        };
        let ep = simulate(&mut agent, task, steps, &mut rngs, true, |_, s| {
            ro.obs.extend_from_slice(s.obs);
            ro.actions.extend_from_slice(&s.act.a_l);
            ro.rewards.push(s.reward * cfg.reward_scale);
            ro.dones.push(s.done);
            ro.last_obs = s.next_obs.to_vec();
            Ok(())
        })?;
        let lr = rates.theta_l.at(agent.k);
        let old = agent.pi_l.clone();
        update(&mut agent, &ro, cfg, lr, &mut shuffle_rng)?;
        let count = ro.rewards.len();
        let kl = kl_gaussian(&old, &agent.pi_l, &ro.obs, count, cfg.ppo.std)?;
        records.push(RunRecord {
            episode,
            iae: ep.iae,
            ise: ep.ise,
            final_norm_err: ep.final_norm_err,
            mean_reward: ep.mean_reward,
            lambda: 0.0,
            violation_rate: 0.0,
            kl,
            truncated: ep.truncated,
        });
        check_divergence(&records, cfg)?;
    }
    agent.k = cfg.episodes as u64;
    Ok(TrainOutcome {
        agent,
        records,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_reduces_to_td_and_mc() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 0.25, 0.125, 4.0];
        let d = [false, false, false];
        let (a0, _) = gae(&r, &v, &d, 0.9, 0.0);
        for t in 0..3 {
            assert!((a0[t] - (r[t] + 0.9 * v[t + 1] - v[t])).abs() < 1e-12);
        }
        let (_, ret) = gae(&r, &v, &[false, false, true], 0.9, 1.0);
        assert!((ret[0] - (1.0 + 0.9 * 2.0 + 0.81 * 3.0)).abs() < 1e-12);
    }
}
