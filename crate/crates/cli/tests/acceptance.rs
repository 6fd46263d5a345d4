//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero on any FAIL only when `ACCEPTANCE_STRICT=1`, so a failed
//! criterion does not stop the rest of the workspace tests from running.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use lyapctl::agents::{actor_gradients, evaluate, high_level_return, Algo, HierarchicalAgent, TrainConfig};
use lyapctl::dynamics::{rollout_with, LinearSde, RolloutOptions, SdeModel};
use lyapctl::environments::{Hyperchaotic8D, TaskSpec};
use lyapctl::lyapunov::{
    accumulate_constraint_param_grad, constraint_residual, equilibrium_input, generator, lyapunov_loss, pretrain, Backend, GeneratorConfig,
    LyapunovFunction, LyapunovNet, PretrainConfig,
};
use lyapctl::metrics::{iae, ise, ErrorSeries};
use lyapctl::neural::{Activation, Mlp};
use lyapctl::numerics::{Matrix, RngStream};
use lyapctl_cli::{run_sweep, ExperimentConfig, SweepOutput};

const FD_STEP: f64 = 1e-6;
/// Normalised rewards closer than this are reported as equal (three decimals).
const TIE: f64 = 5e-4;

struct Line {
    pass: bool,
    text: String,
}

fn line(id: u32, name: &str, pass: bool, elapsed: Duration, detail: String) -> Line {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let text = format!("criterion {id:>2} {verdict} {name} [{:.1}s] {detail}", elapsed.as_secs_f64());
    println!("{text}");
    Line { pass, text }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s: f64 = a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt() / 2f64.sqrt();
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

fn central_diff(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let fp = f(&p);
            p[i] = orig - FD_STEP;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn normals(n: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| scale * rng.standard_normal()).collect()
}

fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            m[(i, j)] = scale * rng.standard_normal();
        }
    }
    m
}

/// Worst relative error over 20 instances of each gradient family.
fn criterion_1() -> Line {
    let start = Instant::now();
    let mut rng = RngStream::new(2024, 1);
    let mut worst = [0.0f64; 5];

    for i in 0..20 {
        let n_in = 2 + rng.index(4);
        let sizes = [n_in, 3 + rng.index(6), 2 + rng.index(5), 1 + rng.index(3)];
        let hidden = if i % 2 == 0 { Activation::Tanh } else { Activation::Softplus };
        let out = if i % 3 == 0 { Activation::Tanh } else { Activation::Identity };
        let net = Mlp::init(&sizes, hidden, out, &mut rng).unwrap();
        let x = normals(n_in, 1.0, &mut rng);
        let up = normals(sizes[3], 1.0, &mut rng);
        let g = net.backward(&x, &up).unwrap();
        let mut probe = net.clone();
        let scalar = |net: &Mlp, x: &[f64]| net.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let fd_p = central_diff(net.params(), |p| {
            probe.set_params(p).unwrap();
            scalar(&probe, &x)
        });
        let fd_x = central_diff(&x, |xx| scalar(&net, xx));
        worst[0] = worst[0].max(vec_rel(&g.d_params, &fd_p)).max(vec_rel(&g.d_input, &fd_x));
    }

    for _ in 0..20 {
        let n = 2 + rng.index(4);
        let mut v = LyapunovNet::new(n, 4 + rng.index(5), 2 + rng.index(3), &mut rng).unwrap();
        let x = normals(n, 1.0, &mut rng);
        let g = v.param_grad(&x);
        let fd = central_diff(&v.params(), |p| {
            v.set_params(p).unwrap();
            v.value(&x)
        });
        let gx = v.grad_x(&x);
        let fdx = central_diff(&x, |xx| v.value(xx));
        worst[1] = worst[1].max(vec_rel(&g, &fd)).max(vec_rel(&gx, &fdx));
    }

    let cfg = GeneratorConfig::default();
    for _ in 0..20 {
        let n = 2 + rng.index(3);
        let model = LinearSde::new(random_matrix(n, n, 1.0, &mut rng), Matrix::identity(n), random_matrix(n, n, 0.3, &mut rng)).unwrap();
        let mut v = LyapunovNet::new(n, 5, 3, &mut rng).unwrap();
        let x = normals(n, 1.0, &mut rng);
        let u = normals(n, 0.5, &mut rng);
        let f = model.drift_vec(&x, &u, 0.0);
        let sigma = model.diffusion_matrix(&x, &u, 0.0);
        let mut g = vec![0.0; v.num_params()];
        accumulate_constraint_param_grad(&v, &x, &f, &sigma, &cfg, 1.0, &mut g);
        let fd = central_diff(&v.params(), |p| {
            v.set_params(p).unwrap();
            generator(&v, &model, &x, &u, 0.0, &cfg).unwrap() + cfg.alpha * v.value(&x)
        });
        worst[2] = worst[2].max(vec_rel(&g, &fd));
    }

    // Constrained actor objectives with every hinge active.
    let gen = GeneratorConfig {
        beta: -50.0,
        ..GeneratorConfig::default()
    };
    let tcfg = TrainConfig {
        actor_hidden: vec![5],
        critic_hidden: vec![6],
        lyapunov_hidden: 5,
        lyapunov_features: 3,
        ..TrainConfig::default()
    };
    let task = TaskSpec::linear_test();
    let model = task.error_model();
    for i in 0..20u64 {
        let mut a = HierarchicalAgent::new(Algo::Mtlhrl, 2, 2, 10.0, &tcfg, &mut RngStream::new(300 + i, 0)).unwrap();
        a.lagrange.lambda = 0.2 + rng.uniform(0.0, 1.0);
        let count = 6;
        let states = normals(count * 2, 0.8, &mut rng);
        let a_h: Vec<f64> = (0..count * a.m_h).map(|_| rng.uniform(-0.3, 0.3)).collect();
        let times = vec![0.0; count];
        let g = actor_gradients(&a, &states, &a_h, &times, Some(&model), &gen, 1e9).unwrap();
        let low = |a: &HierarchicalAgent| {
            let v = a.lyapunov.as_ref().unwrap();
            let mut acc = 0.0;
            for k in 0..count {
                let x = &states[2 * k..2 * k + 2];
                let ah = &a_h[a.m_h * k..a.m_h * (k + 1)];
                let al = a.pi_l.forward(&a.low_input(x, ah)).unwrap();
                let qin: Vec<f64> = x.iter().chain(ah).chain(&al).copied().collect();
                let r = constraint_residual(v, &model, x, &a.plant_input(ah, &al), 0.0, &gen).unwrap().residual;
                acc += a.q_l.forward(&qin).unwrap()[0] - a.lagrange.lambda * r.max(0.0);
            }
            acc / count as f64
        };
        let high = |a: &HierarchicalAgent| {
            let v = a.lyapunov.as_ref().unwrap();
            let mut acc = 0.0;
            for k in 0..count {
                let x = &states[2 * k..2 * k + 2];
                let ah = a.pi_h.as_ref().unwrap().forward(x).unwrap();
                let al = a.pi_l.forward(&a.low_input(x, &ah)).unwrap();
                let qin: Vec<f64> = x.iter().chain(&ah).copied().collect();
                let r = constraint_residual(v, &model, x, &a.plant_input(&ah, &al), 0.0, &gen).unwrap().residual;
                acc += a.q_h.as_ref().unwrap().forward(&qin).unwrap()[0] - a.lagrange.lambda * r.max(0.0);
            }
            acc / count as f64
        };
        let mut probe = a.clone();
        let fd_low = central_diff(a.pi_l.params(), |p| {
            probe.pi_l.set_params(p).unwrap();
            low(&probe)
        });
        let mut probe = a.clone();
        let fd_high = central_diff(a.pi_h.as_ref().unwrap().params(), |p| {
            probe.pi_h.as_mut().unwrap().set_params(p).unwrap();
            high(&probe)
        });
        worst[3] = worst[3].max(vec_rel(&g.low, &fd_low));
        worst[4] = worst[4].max(vec_rel(g.high.as_ref().unwrap(), &fd_high));
    }

    let elapsed = start.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    line(
        1,
        "gradient correctness",
        max < 1e-4 && elapsed < Duration::from_secs(60),
        elapsed,
        format!(
            "worst rel err: mlp {:.1e}, V {:.1e}, constraint {:.1e}, low actor {:.1e}, high actor {:.1e} (< 1e-4)",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn criterion_2() -> Line {
    let start = Instant::now();
    let mut rng = RngStream::new(2024, 2);
    let closed = GeneratorConfig::default();
    let fd = GeneratorConfig {
        backend: Backend::FiniteDifference,
        ..GeneratorConfig::default()
    };
    let (mut worst_closed, mut worst_fd) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 1 + rng.index(5);
        let a = random_matrix(n, n, 1.0, &mut rng);
        let sigma = random_matrix(n, 1 + rng.index(n + 1), 0.5, &mut rng);
        // P = LLᵀ with a well-conditioned lower-triangular L.
        let mut l = random_matrix(n, n, 0.3, &mut rng);
        for i in 0..n {
            l[(i, i)] = 0.5 + l[(i, i)].abs();
            for j in i + 1..n {
                l[(i, j)] = 0.0;
            }
        }
        let p = l.matmul(&l.transpose()).unwrap();
        let mut v = LyapunovNet::identity_psi(n, &l);
        v.eps0 = 0.0;
        let model = LinearSde::new(a.clone(), Matrix::zeros(n, 1), sigma.clone()).unwrap();
        let x = normals(n, 1.0, &mut rng);
        let m = a.transpose().matmul(&p).unwrap().add(&p.matmul(&a).unwrap()).unwrap();
        let drift: f64 = (0..n).map(|i| (0..n).map(|j| x[i] * m[(i, j)] * x[j]).sum::<f64>()).sum();
        let diffusion = sigma.transpose().matmul(&p).unwrap().matmul(&sigma).unwrap().trace();
        let expected = drift + diffusion;
        let got = generator(&v, &model, &x, &[0.0], 0.0, &closed).unwrap();
        worst_closed = worst_closed.max((got - expected).abs());
        let got = generator(&v, &model, &x, &[0.0], 0.0, &fd).unwrap();
        worst_fd = worst_fd.max((got - expected).abs() / (drift.abs() + diffusion.abs()).max(1e-12));
    }
    let elapsed = start.elapsed();
    line(
        2,
        "generator oracle",
        worst_closed < 1e-8 && worst_fd < 1e-3 && elapsed < Duration::from_secs(60),
        elapsed,
        format!("1000 cases: closed-form abs err {worst_closed:.1e} (< 1e-8), finite-difference rel err {worst_fd:.1e} (< 1e-3)"),
    )
}

fn criterion_3() -> Line {
    let start = Instant::now();
    let plant = Hyperchaotic8D::default();
    let mut rng = RngStream::new(2024, 3);
    let mut v = LyapunovNet::new(8, 32, 16, &mut rng).unwrap();
    let x_star = plant.target.to_vec();
    let u_star = equilibrium_input(&plant, &x_star, 0.0).unwrap();
    let rep = pretrain(&mut v, &plant, &x_star, &u_star, &mut rng, &PretrainConfig::default()).unwrap();
    // Error dynamics of the linearisation under u = u* − K e.
    let sigma = plant.diffusion_matrix(&x_star, &u_star, 0.0);
    let lin = LinearSde::new(rep.a.clone(), rep.b.clone(), sigma).unwrap();
    let k = rep.k.clone();
    let e0: Vec<f64> = plant.x0.iter().zip(&x_star).map(|(a, b)| a - b).collect();
    let opts = RolloutOptions::new(0.01, 5.0);
    let steps = opts.steps();
    let mut mean_v = vec![0.0; steps + 1];
    let (mut states, mut actions) = (Vec::new(), Vec::new());
    let rollouts = 200;
    for r in 0..rollouts {
        let mut rr = RngStream::new(2024, 1000 + r);
        let traj = rollout_with(&lin, |e, _| k.matvec(e).unwrap().iter().map(|v| -v).collect(), &e0, &opts, &mut rr, |_, _, _| 0.0).unwrap();
        assert!(!traj.truncated);
        for (t, e) in traj.states.iter().enumerate() {
            mean_v[t] += v.value(e) / rollouts as f64;
        }
        if r < 4 {
            for (e, u) in traj.states.iter().zip(&traj.actions) {
                states.push(e.clone());
                actions.push(u.clone());
            }
        }
    }
    let times = vec![0.0; states.len()];
    let loss = lyapunov_loss(&v, &lin, &states, &actions, &times, &GeneratorConfig::default()).unwrap().loss;
    // Each mean may exceed the running minimum by at most 5% of E[V(x_0)].
    let band = 0.05 * mean_v[0];
    let mut running = mean_v[0];
    let mut excess = f64::NEG_INFINITY;
    for &m in &mean_v {
        excess = excess.max(m - running);
        running = running.min(m);
    }
    let elapsed = start.elapsed();
    line(
        3,
        "pretraining certificate",
        loss < 1e-4 && excess <= band && elapsed < Duration::from_secs(300),
        elapsed,
        format!(
            "loss {loss:.2e} (< 1e-4) on {} on-policy states; E[V] {:.3} -> {:.3e}, worst rise {excess:.2e} vs band {band:.2e}",
            states.len(),
            mean_v[0],
            mean_v[steps]
        ),
    )
}

/// Max over time of the across-rollout mean of `‖x_t‖²`; infinite if any
/// rollout left the simulation box.
fn max_mean_square(states: &[Vec<Vec<f64>>]) -> f64 {
    if states.iter().any(|s| s.len() != states[0].len()) {
        return f64::INFINITY;
    }
    (0..states[0].len())
        .map(|t| states.iter().map(|s| s[t].iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / states.len() as f64)
        .fold(0.0, f64::max)
}

fn criterion_4(sweep: &SweepOutput, task: &TaskSpec, sweep_time: Duration) -> Line {
    let start = Instant::now();
    let x0_sq: f64 = task.x0.iter().map(|v| v * v).sum();
    let mut passed = 0;
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let Some(run) = sweep.run(Algo::Mtlhrl, seed) else {
            ratios.push("failed".to_string());
            continue;
        };
        let eps = evaluate(&run.outcome.agent, task, 100, 7000 + seed).unwrap();
        let trunc = eps.iter().filter(|e| e.truncated).count();
        let states: Vec<Vec<Vec<f64>>> = eps.into_iter().map(|e| e.trajectory.states).collect();
        let ratio = if trunc > 0 { f64::INFINITY } else { max_mean_square(&states) / x0_sq };
        if ratio < 10.0 {
            passed += 1;
        }
        ratios.push(format!("{ratio:.3}"));
    }
    // Training time of the five runs is estimated as 5/35 of the sweep.
    let elapsed = start.elapsed() + sweep_time / 7;
    line(
        4,
        "mean-square boundedness",
        passed >= 4 && elapsed < Duration::from_secs(1800),
        elapsed,
        format!("max_t E|x_t|^2 / |x_0|^2 per seed [{}] (< 10 in >= 4 of 5): {passed} of 5", ratios.join(", ")),
    )
}

fn criterion_5(sweep: &SweepOutput, sweep_time: Duration) -> Line {
    let iae = |a: Algo| sweep.table_row(a).map_or(f64::NAN, |r| r.median_iae);
    let (m, s, d, p) = (iae(Algo::Mtlhrl), iae(Algo::Stlhrl), iae(Algo::Ddpg), iae(Algo::Ppo));
    let pass = m < s && s < d && p >= d && sweep_time < Duration::from_secs(7200);
    line(
        5,
        "IAE ordering",
        pass,
        sweep_time,
        format!("median IAE mtlhrl {m:.3}, stlhrl {s:.3}, ddpg {d:.3}, ppo {p:.3} (need mtlhrl < stlhrl < ddpg <= ppo)"),
    )
}

fn criterion_6(sweep: &SweepOutput, sweep_time: Duration) -> Line {
    let score = |a: Algo| sweep.final_norm_reward(a).unwrap_or(f64::NAN);
    let iae = |a: Algo| sweep.table_row(a).map_or(f64::NAN, |r| r.median_iae);
    let (m, m_iae) = (score(Algo::Mtlhrl), iae(Algo::Mtlhrl));
    let mut pass = true;
    let mut parts = vec![format!("mtlhrl {m:.4} (IAE {m_iae:.3})")];
    for abl in [Algo::AblNoHierarchy, Algo::AblNoLyapunov, Algo::AblNoMultiscale] {
        let (a, a_iae) = (score(abl), iae(abl));
        let wins = if (m - a).abs() < TIE { m_iae < a_iae } else { m > a };
        pass &= wins;
        parts.push(format!("{abl} {a:.4} (IAE {a_iae:.3}){}", if wins { "" } else { " <- not beaten" }));
    }
    line(6, "ablation direction", pass, sweep_time, format!("final median normalised reward: {}", parts.join(", ")))
}

fn criterion_7(sweep: &SweepOutput) -> Line {
    let start = Instant::now();
    let kl: Vec<f64> = (0..5)
        .filter_map(|s| sweep.run(Algo::Mtlhrl, s))
        .flat_map(|r| r.outcome.diagnostics.kl_measured.iter().copied())
        .collect();
    let within = kl.iter().filter(|v| **v <= 0.012).count();
    let frac = within as f64 / kl.len().max(1) as f64;
    let max = kl.iter().copied().fold(0.0, f64::max);
    line(
        7,
        "trust-region compliance",
        !kl.is_empty() && frac >= 0.95,
        start.elapsed(),
        format!("{within} of {} accepted updates with KL <= 0.012 ({:.2}%, need >= 95%); max KL {max:.2e}", kl.len(), 100.0 * frac),
    )
}

fn criterion_8(sweep: &SweepOutput) -> Line {
    let start = Instant::now();
    let mut logged = 0usize;
    let mut min_lambda = f64::INFINITY;
    for r in &sweep.runs {
        let trace = r.outcome.diagnostics.lambda_trace.iter().copied();
        for l in trace.chain(r.outcome.records.iter().map(|rec| rec.lambda)) {
            logged += 1;
            min_lambda = min_lambda.min(l);
        }
    }
    let cfg = TrainConfig::default();
    let ratio = |k: u64| cfg.gamma_schedule.at(k) / cfg.alpha_schedule.at(k);
    let first_bad = (0..100_000u64).find(|&k| ratio(k + 1) >= ratio(k));
    line(
        8,
        "lambda and schedules",
        min_lambda >= 0.0 && first_bad.is_none(),
        start.elapsed(),
        format!(
            "min lambda {min_lambda:.4} over {logged} logged values; gamma_k/alpha_k strictly decreasing on [0, 1e5]: {}",
            first_bad.map_or("yes".to_string(), |k| format!("no, at k = {k}"))
        ),
    )
}

fn criterion_9() -> Line {
    let start = Instant::now();
    let dt = 1e-3;
    let end = 2.0 * std::f64::consts::PI;
    let mut times: Vec<f64> = (0..).map(|i| i as f64 * dt).take_while(|t| *t < end).collect();
    times.push(end);
    let errors = times.iter().map(|t| vec![t.sin()]).collect();
    let es = ErrorSeries::new(times, errors).unwrap();
    let (i, s) = (iae(&es).unwrap(), ise(&es).unwrap());
    let ret = high_level_return(&[1.0; 10], 0.99);
    let rel_i = (i - 4.0).abs() / 4.0;
    let rel_s = (s - std::f64::consts::PI).abs() / std::f64::consts::PI;
    let elapsed = start.elapsed();
    line(
        9,
        "metric exactness",
        rel_i < 1e-3 && rel_s < 1e-3 && (ret - 9.5618).abs() < 1e-4 && elapsed < Duration::from_secs(1),
        elapsed,
        format!("IAE {i:.6} (4), ISE {s:.6} (pi), return {ret:.6} (9.5618)"),
    )
}

fn criterion_10() -> Line {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("det.toml");
    std::fs::write(
        &cfg,
        "[experiment]\nenv = \"hyperchaotic8d\"\nalgos = [\"mtlhrl\"]\nseeds = [3]\n\n\
         [train]\nepisodes = 12\nsteps_per_episode = 100\nupdate_every = 10\nreward_scale = 0.001\n",
    )
    .unwrap();
    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_lyapctl"))
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--output-dir")
            .arg(out)
            .env_remove("LYAPCTL_SEED")
            .stdout(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ok = run(&a) && run(&b);
    let file = |d: &Path| std::fs::read(d.join("mtlhrl-hyperchaotic8d-seed3").join("records.csv")).unwrap_or_default();
    let (fa, fb) = (file(&a), file(&b));
    let identical = ok && !fa.is_empty() && fa == fb;
    let elapsed = start.elapsed();
    line(
        10,
        "determinism",
        identical && elapsed < Duration::from_secs(300),
        elapsed,
        format!("two `lyapctl train` runs, seed 3: records.csv {} ({} bytes)", if identical { "byte-identical" } else { "differ" }, fa.len()),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and friends: this target has no sub-tests.
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_9(), criterion_10()];

    let exp = ExperimentConfig::load(&workspace_root().join("configs/desk.toml")).expect("desk config");
    let task = exp.task().unwrap();
    let start = Instant::now();
    let sweep = run_sweep(&exp, None, 1).expect("sweep");
    let sweep_time = start.elapsed();
    for f in &sweep.failures {
        println!("sweep run failed: {} seed {}: {}", f.algo, f.seed, f.error);
    }
    lines.push(criterion_4(&sweep, &task, sweep_time));
    lines.push(criterion_5(&sweep, sweep_time));
    lines.push(criterion_6(&sweep, sweep_time));
    lines.push(criterion_7(&sweep));
    lines.push(criterion_8(&sweep));

    let failed: Vec<&Line> = lines.iter().filter(|l| !l.pass).collect();
    println!("acceptance: {} of {} criteria pass", lines.len() - failed.len(), lines.len());
    for l in &failed {
        println!("  failing: {}", l.text);
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
