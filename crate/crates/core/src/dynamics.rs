//! Controlled SDEs `dx = f(x, u, t) dt + σ(x, u, t) dW`, Euler–Maruyama
//! integration, rollouts and finite-difference linearisation.

use std::io::Write;

use thiserror::Error;

use crate::numerics::{Matrix, NumericsError, RngStream};

/// States with `‖x‖∞` above this are treated as blown up.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e4;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite {what} at t = {t}, state {state:?}")]
    NonFinite {
        what: &'static str,
        t: f64,
        state: Vec<f64>,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A controlled stochastic system.
pub trait SdeModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// Writes `f(x, u, t)` into `out`.
    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]);

    /// Writes the `n × r` diffusion matrix into `out`.
    fn diffusion(&self, x: &[f64], u: &[f64], t: f64, out: &mut Matrix);

    /// Whether `σ` varies with the action. Lets callers skip action
    /// derivatives of the curvature term.
    fn diffusion_depends_on_action(&self) -> bool {
        false
    }

    fn drift_vec(&self, x: &[f64], u: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.drift(x, u, t, &mut out);
        out
    }

    fn diffusion_matrix(&self, x: &[f64], u: &[f64], t: f64) -> Matrix {
        let mut out = Matrix::zeros(self.state_dim(), self.noise_dim());
        self.diffusion(x, u, t, &mut out);
        out
    }
}

impl<M: SdeModel + ?Sized> SdeModel for &M {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
    fn noise_dim(&self) -> usize {
        (**self).noise_dim()
    }
    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        (**self).drift(x, u, t, out)
    }
    fn diffusion(&self, x: &[f64], u: &[f64], t: f64, out: &mut Matrix) {
        (**self).diffusion(x, u, t, out)
    }
    fn diffusion_depends_on_action(&self) -> bool {
        (**self).diffusion_depends_on_action()
    }
}

/// `dx = (A x + B u) dt + Σ dW` with constant `Σ`.
#[derive(Clone, Debug)]
pub struct LinearSde {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma: Matrix,
}

impl LinearSde {
    pub fn new(a: Matrix, b: Matrix, sigma: Matrix) -> Result<Self, DynamicsError> {
        let n = a.rows();
        if !a.is_square() || b.rows() != n || sigma.rows() != n {
            return Err(DynamicsError::Argument(format!(
                "linear SDE shapes disagree: A {}x{}, B {}x{}, sigma {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols(),
                sigma.rows(),
                sigma.cols()
            )));
        }
        Ok(Self { a, b, sigma })
    }
}

impl SdeModel for LinearSde {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }
    fn action_dim(&self) -> usize {
        self.b.cols()
    }
    fn noise_dim(&self) -> usize {
        self.sigma.cols()
    }
    fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        let n = self.a.rows();
        let m = self.b.cols();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut s = 0.0;
            for j in 0..n {
                s += self.a[(i, j)] * x[j];
            }
            for j in 0..m {
                s += self.b[(i, j)] * u[j];
            }
            *o = s;
        }
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut Matrix) {
        out.as_mut_slice().copy_from_slice(self.sigma.as_slice());
    }
}

/// Scratch buffers for allocation-free stepping.
#[derive(Clone, Debug)]
pub struct EmWorkspace {
    drift: Vec<f64>,
    sigma: Matrix,
    xi: Vec<f64>,
}

impl EmWorkspace {
    pub fn new(model: &dyn SdeModel) -> Self {
        Self {
            drift: vec![0.0; model.state_dim()],
            sigma: Matrix::zeros(model.state_dim(), model.noise_dim()),
            xi: vec![0.0; model.noise_dim()],
        }
    }
}

/// One Euler–Maruyama step `x + f·dt + σ·√dt·ξ`, written into `out`.
///
/// With zero diffusion no normal draws are consumed from `rng`, and the step
/// is forward Euler exactly.
#[allow(clippy::too_many_arguments)]
pub fn em_step_into(
    model: &dyn SdeModel,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    rng: &mut RngStream,
    ws: &mut EmWorkspace,
    out: &mut [f64],
) -> Result<(), DynamicsError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::Argument(format!("dt must be positive, got {dt}")));
    }
    model.drift(x, u, t, &mut ws.drift);
    if ws.drift.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite {
            what: "drift",
            t,
            state: x.to_vec(),
        });
    }
    model.diffusion(x, u, t, &mut ws.sigma);
    if !ws.sigma.is_finite() {
        return Err(DynamicsError::NonFinite {
            what: "diffusion",
            t,
            state: x.to_vec(),
        });
    }
    let noisy = ws.sigma.as_slice().iter().any(|&v| v != 0.0);
    let r = ws.xi.len();
    if noisy {
        rng.fill_standard_normal(&mut ws.xi);
    }
    let sq = dt.sqrt();
    for i in 0..out.len() {
        let mut v = x[i] + ws.drift[i] * dt;
        if noisy {
            let row = &ws.sigma.as_slice()[i * r..(i + 1) * r];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(&ws.xi) {
                s += a * b;
            }
            v += s * sq;
        }
        out[i] = v;
    }
    Ok(())
}

pub fn em_step(
    model: &dyn SdeModel,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>, DynamicsError> {
    let mut ws = EmWorkspace::new(model);
    let mut out = vec![0.0; x.len()];
    em_step_into(model, x, u, t, dt, rng, &mut ws, &mut out)?;
    Ok(out)
}

/// Sampled path of a controlled system.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Columns `t, x1..xn, u1..um, r`. The final state row leaves the action
    /// and reward fields empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DynamicsError> {
        let n = self.states.first().map_or(0, |s| s.len());
        let m = self.actions.first().map_or(0, |a| a.len());
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("r".into());
        wtr.write_record(&header)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            match (self.actions.get(k), self.rewards.get(k)) {
                (Some(u), Some(r)) => {
                    row.extend(u.iter().map(|v| v.to_string()));
                    row.push(r.to_string());
                }
                _ => row.extend(std::iter::repeat_n(String::new(), m + 1)),
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Timing of a rollout: the policy is queried every `dt`, and each control
/// interval is integrated with `substeps` Euler–Maruyama steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub dt: f64,
    pub substeps: usize,
    pub horizon: f64,
    pub blowup_bound: f64,
}

impl RolloutOptions {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self {
            dt,
            substeps: 1,
            horizon,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

/// True once `x` has left the box `‖x‖∞ ≤ bound` or gone non-finite.
pub fn is_blown_up(x: &[f64], bound: f64) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > bound)
}

/// Integrates one control interval of `opts.substeps` steps in place.
#[allow(clippy::too_many_arguments)]
pub fn integrate_interval(
    model: &dyn SdeModel,
    x: &mut Vec<f64>,
    u: &[f64],
    t: f64,
    opts: &RolloutOptions,
    rng: &mut RngStream,
    ws: &mut EmWorkspace,
    scratch: &mut Vec<f64>,
) -> Result<bool, DynamicsError> {
    let h = opts.dt / opts.substeps as f64;
    scratch.resize(x.len(), 0.0);
    for s in 0..opts.substeps {
        em_step_into(model, x, u, t + s as f64 * h, h, rng, ws, scratch)?;
        std::mem::swap(x, scratch);
        if is_blown_up(x, opts.blowup_bound) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Simulates `x0` under `policy` for `opts.horizon` seconds.
///
/// `reward(x_next, u, t_next)` scores each interval. The rollout stops early,
/// with `truncated` set, once the state leaves the blow-up box; the offending
/// state is not recorded.
pub fn rollout_with<P, R>(
    model: &dyn SdeModel,
    mut policy: P,
    x0: &[f64],
    opts: &RolloutOptions,
    rng: &mut RngStream,
    mut reward: R,
) -> Result<Trajectory, DynamicsError>
where
    P: FnMut(&[f64], f64) -> Vec<f64>,
    R: FnMut(&[f64], &[f64], f64) -> f64,
{
    if !(opts.dt > 0.0) || opts.horizon < opts.dt || opts.substeps == 0 {
        return Err(DynamicsError::Argument(format!(
            "need dt > 0, horizon >= dt and substeps >= 1; got dt {}, horizon {}, substeps {}",
            opts.dt, opts.horizon, opts.substeps
        )));
    }
    if x0.len() != model.state_dim() {
        return Err(DynamicsError::Argument(format!(
            "x0 has {} entries, model state dimension is {}",
            x0.len(),
            model.state_dim()
        )));
    }
    let steps = opts.steps();
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
        truncated: false,
    };
    let mut ws = EmWorkspace::new(model);
    let mut scratch = Vec::new();
    let mut x = x0.to_vec();
    traj.times.push(0.0);
    traj.states.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * opts.dt;
        let u = policy(&x, t);
        if u.len() != model.action_dim() {
            return Err(DynamicsError::Argument(format!(
                "policy returned {} actions, model expects {}",
                u.len(),
                model.action_dim()
            )));
        }
        let ok = integrate_interval(model, &mut x, &u, t, opts, rng, &mut ws, &mut scratch)?;
        if !ok {
            traj.truncated = true;
            break;
        }
        let t_next = (k + 1) as f64 * opts.dt;
        let r = reward(&x, &u, t_next);
        traj.actions.push(u);
        traj.rewards.push(r);
        traj.times.push(t_next);
        traj.states.push(x.clone());
    }
    Ok(traj)
}

/// [`rollout_with`] with one integration step per control interval.
pub fn rollout<P, R>(
    model: &dyn SdeModel,
    policy: P,
    x0: &[f64],
    dt: f64,
    horizon: f64,
    rng: &mut RngStream,
    reward: R,
) -> Result<Trajectory, DynamicsError>
where
    P: FnMut(&[f64], f64) -> Vec<f64>,
    R: FnMut(&[f64], &[f64], f64) -> f64,
{
    rollout_with(model, policy, x0, &RolloutOptions::new(dt, horizon), rng, reward)
}

/// Central-difference Jacobians `(∂f/∂x, ∂f/∂u)` of the drift at `(x*, u*)`, time 0.
pub fn linearize(model: &dyn SdeModel, x_star: &[f64], u_star: &[f64], h: f64) -> (Matrix, Matrix) {
    linearize_at(model, x_star, u_star, 0.0, h)
}

pub fn linearize_at(model: &dyn SdeModel, x_star: &[f64], u_star: &[f64], t: f64, h: f64) -> (Matrix, Matrix) {
    let n = model.state_dim();
    let m = model.action_dim();
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, m);
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut x = x_star.to_vec();
    for j in 0..n {
        x[j] = x_star[j] + h;
        model.drift(&x, u_star, t, &mut fp);
        x[j] = x_star[j] - h;
        model.drift(&x, u_star, t, &mut fm);
        x[j] = x_star[j];
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut u = u_star.to_vec();
    for j in 0..m {
        u[j] = u_star[j] + h;
        model.drift(x_star, &u, t, &mut fp);
        u[j] = u_star[j] - h;
        model.drift(x_star, &u, t, &mut fm);
        u[j] = u_star[j];
        for i in 0..n {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        rate: f64,
        sigma: f64,
    }

    impl SdeModel for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = -self.rate * x[0] + u[0];
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut Matrix) {
            out[(0, 0)] = self.sigma;
        }
    }

    struct Cubic;

    impl SdeModel for Cubic {
        fn state_dim(&self) -> usize {
            2
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
            out[0] = x[0].powi(3) + x[1] * u[0];
            out[1] = (x[0] * x[1]).sin() + u[0].powi(3);
        }
        fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut Matrix) {
            out.as_mut_slice().fill(0.0);
        }
    }

    #[test]
    fn fixed_point_without_dynamics() {
        let model = LinearSde::new(Matrix::zeros(2, 2), Matrix::zeros(2, 1), Matrix::zeros(2, 2)).unwrap();
        let mut rng = RngStream::new(0, 0);
        let x = em_step(&model, &[3.0, -1.0], &[0.0], 0.0, 0.1, &mut rng).unwrap();
        assert_eq!(x, vec![3.0, -1.0]);
    }

    #[test]
    fn one_euler_step() {
        let model = Scalar { rate: 1.0, sigma: 0.0 };
        let mut rng = RngStream::new(0, 0);
        let x = em_step(&model, &[1.0], &[0.0], 0.0, 0.01, &mut rng).unwrap();
        assert_eq!(x, vec![0.99]);
    }

    #[test]
    fn increment_variance_matches_sigma_squared_dt() {
        let model = Scalar { rate: 0.0, sigma: 0.5 };
        let mut rng = RngStream::new(9, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| em_step(&model, &[0.0], &[0.0], 0.0, 0.01, &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / 0.0025 - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn non_finite_drift_is_reported_with_state() {
        struct Bad;
        impl SdeModel for Bad {
            fn state_dim(&self) -> usize {
                1
            }
            fn action_dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn drift(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut [f64]) {
                out[0] = f64::NAN;
            }
            fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut Matrix) {
                out[(0, 0)] = 0.0;
            }
        }
        let mut rng = RngStream::new(0, 0);
        match em_step(&Bad, &[2.5], &[0.0], 0.0, 0.1, &mut rng) {
            Err(DynamicsError::NonFinite { state, .. }) => assert_eq!(state, vec![2.5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_dynamics_rollout_holds_state() {
        let model = LinearSde::new(Matrix::zeros(2, 2), Matrix::zeros(2, 1), Matrix::zeros(2, 2)).unwrap();
        let mut rng = RngStream::new(0, 0);
        let traj = rollout(&model, |_, _| vec![0.0], &[1.0, 2.0], 0.1, 1.0, &mut rng, |_, _, _| 0.0).unwrap();
        assert_eq!(traj.actions.len(), 10);
        assert_eq!(traj.states.len(), 11);
        assert!(traj.states.iter().all(|s| s == &vec![1.0, 2.0]));
        assert!(!traj.truncated);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn ou_mean_matches_exponential_decay() {
        let model = Scalar { rate: 1.0, sigma: 0.1 };
        let runs = 1000;
        let mut finals = Vec::with_capacity(runs);
        for s in 0..runs {
            let mut rng = RngStream::new(17, s as u64);
            let traj = rollout(&model, |_, _| vec![0.0], &[2.0], 0.001, 5.0, &mut rng, |_, _, _| 0.0).unwrap();
            finals.push(traj.states.last().unwrap()[0]);
        }
        let mean = finals.iter().sum::<f64>() / runs as f64;
        let sd = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        let se = sd / (runs as f64).sqrt();
        let expected = 2.0 * (-5.0f64).exp();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean}, expected {expected}, se {se}");
    }

    #[test]
    fn blowup_truncates() {
        let model = Scalar { rate: -50.0, sigma: 0.0 };
        let mut rng = RngStream::new(0, 0);
        let traj = rollout(&model, |_, _| vec![0.0], &[1.0], 0.01, 10.0, &mut rng, |_, _, _| 0.0).unwrap();
        assert!(traj.truncated);
        assert!(traj.states.len() < 1000);
        assert!(traj.states.iter().all(|s| s[0].abs() <= DEFAULT_BLOWUP_BOUND));
    }

    #[test]
    fn linearize_recovers_linear_maps() {
        let a0 = Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]).unwrap();
        let b0 = Matrix::from_rows(&[vec![1.0], vec![0.5]]).unwrap();
        let model = LinearSde::new(a0.clone(), b0.clone(), Matrix::zeros(2, 1)).unwrap();
        let (a, b) = linearize(&model, &[0.3, -0.7], &[1.1], 1e-5);
        assert!(a.sub(&a0).unwrap().max_abs() < 1e-8);
        assert!(b.sub(&b0).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn central_difference_is_second_order() {
        let x: [f64; 2] = [0.7, -0.4];
        let u: [f64; 1] = [0.9];
        let exact_a = [
            [3.0 * x[0] * x[0], u[0]],
            [x[1] * (x[0] * x[1]).cos(), x[0] * (x[0] * x[1]).cos()],
        ];
        let exact_b = [x[1], 3.0 * u[0] * u[0]];
        let err = |h: f64| {
            let (a, b) = linearize(&Cubic, &x, &u, h);
            let mut e: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    e = e.max((a[(i, j)] - exact_a[i][j]).abs());
                }
                e = e.max((b[(i, 0)] - exact_b[i]).abs());
            }
            e
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn csv_export_leaves_last_action_blank() {
        let traj = Trajectory {
            times: vec![0.0, 0.5],
            states: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            actions: vec![vec![0.25]],
            rewards: vec![-1.0],
            truncated: false,
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,x1,x2,u1,r\n0,1,2,0.25,-1\n0.5,3,4,,\n");
    }
}
