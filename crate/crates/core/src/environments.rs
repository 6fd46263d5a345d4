//! Benchmark plants: the 8D hyperchaotic system, a planar 5-link manipulator
//! and a stable 2D linear test system, wrapped as tracking tasks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{LinearSde, SdeModel};
use crate::numerics::{gaussian, Matrix, NumericsError, RngStream};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("model parameter error: {0}")]
    ModelParameter(String),
    #[error("unknown environment '{0}' (expected hyperchaotic8d, manipulator5dof or linear-test)")]
    Unknown(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub const HYPER_GAMMA: [f64; 7] = [10.0, 76.0, 3.0, 0.2, 0.1, 0.1, 0.2];
pub const HYPER_X0: [f64; 8] = [-1.1, -1.4, 1.7, 0.8, 1.45, -1.6, -1.8, 1.34];
pub const HYPER_TARGET: [f64; 8] = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];

/// The eight coupled equations with additive control on every channel.
pub fn hyperchaotic_drift(gamma: &[f64; 7], x: &[f64], u: &[f64], out: &mut [f64]) {
    let g = gamma;
    out[0] = g[0] * (x[1] - x[0]) + x[3] + u[0];
    out[1] = g[1] * x[0] - x[0] * x[2] + x[3] + u[1];
    out[2] = x[0] * x[1] - x[2] - x[3] + x[6] + u[2];
    out[3] = -g[2] * (x[0] + x[1]) + x[4] + u[3];
    out[4] = -x[1] - g[3] * x[3] + x[5] + u[4];
    out[5] = -g[4] * (x[0] + x[4]) + g[3] * x[6] + u[5];
    out[6] = -g[5] * (x[0] + x[5] - x[7]) + u[6];
    out[7] = -g[6] * x[6] + u[7];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperchaotic8D {
    pub gamma: [f64; 7],
    pub process_noise_std: f64,
    pub x0: [f64; 8],
    pub target: [f64; 8],
}

impl Default for Hyperchaotic8D {
    fn default() -> Self {
        Self {
            gamma: HYPER_GAMMA,
            process_noise_std: 0.1,
            x0: HYPER_X0,
            target: HYPER_TARGET,
        }
    }
}

impl SdeModel for Hyperchaotic8D {
    fn state_dim(&self) -> usize {
        8
    }
    fn action_dim(&self) -> usize {
        8
    }
    fn noise_dim(&self) -> usize {
        8
    }
    fn drift(&self, x: &[f64], u: &[f64], _t: f64, out: &mut [f64]) {
        hyperchaotic_drift(&self.gamma, x, u, out)
    }
    fn diffusion(&self, _x: &[f64], _u: &[f64], _t: f64, out: &mut Matrix) {
        let s = out.as_mut_slice();
        s.fill(0.0);
        for i in 0..8 {
            s[i * 8 + i] = self.process_noise_std;
        }
    }
}

/// Five joint phases of the reference and disturbance signals.
pub const MANIPULATOR_PHASES: [f64; 5] = [PI / 5.0, 2.0 * PI / 5.0, 3.0 * PI / 5.0, 4.0 * PI / 5.0, 6.0 * PI / 5.0];

/// Planar serial chain of uniform rods joined by revolute joints, with
/// relative joint angles and gravity along −y.
///
/// The physical parameters are a canonical stand-in: unit masses, 0.5 m
/// links, `g = 9.81`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manipulator5DOF {
    pub link_masses: [f64; 5],
    pub link_lengths: [f64; 5],
    pub gravity: f64,
    /// Standard deviation of the additive joint-torque noise `w`.
    pub process_noise_std: f64,
    /// Multiplicative actuator noise `σ_a`.
    pub actuator_noise_scale: f64,
    pub sensor_noise_std: f64,
    pub q0: [f64; 5],
    pub qdot0: [f64; 5],
    pub reference_amplitude: f64,
    pub reference_frequency: f64,
    pub disturbance_amplitude: f64,
    pub disturbance_frequency: f64,
    pub disturbance_window: [f64; 2],
}

impl Default for Manipulator5DOF {
    fn default() -> Self {
        Self {
            link_masses: [1.0; 5],
            link_lengths: [0.5; 5],
            gravity: 9.81,
            process_noise_std: 0.05f64.sqrt(),
            actuator_noise_scale: 0.05,
            sensor_noise_std: 0.1,
            q0: [-1.0, -2.0, 2.0, 1.0, 0.0],
            qdot0: [0.5, 1.0, -1.0, -0.5, 0.0],
            reference_amplitude: 2.0,
            reference_frequency: 0.5,
            disturbance_amplitude: 6.5,
            disturbance_frequency: 4.0,
            disturbance_window: [10.0, 20.0],
        }
    }
}

fn cross2(r: [f64; 2], f: [f64; 2]) -> f64 {
    r[0] * f[1] - r[1] * f[0]
}

impl Manipulator5DOF {
    /// Joint torques `τ = M(q)q̈ + C(q,q̇)q̇ + G(q)` by recursive Newton–Euler.
    /// `with_gravity = false` drops the `G` term.
    pub fn inverse_dynamics(&self, q: &[f64], qd: &[f64], qdd: &[f64], with_gravity: bool) -> [f64; 5] {
        let mut alpha = [0.0; 5];
        let mut rc = [[0.0; 2]; 5];
        let mut rl = [[0.0; 2]; 5];
        let mut acc_c = [[0.0; 2]; 5];
        // Base acceleration of +g along y stands in for gravity.
        let mut acc_o = [0.0, if with_gravity { self.gravity } else { 0.0 }];
        let (mut th, mut om, mut al) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..5 {
            th += q[i];
            om += qd[i];
            al += qdd[i];
            alpha[i] = al;
            let (s, c) = th.sin_cos();
            let l = self.link_lengths[i];
            rc[i] = [0.5 * l * c, 0.5 * l * s];
            rl[i] = [l * c, l * s];
            acc_c[i] = [
                acc_o[0] - al * rc[i][1] - om * om * rc[i][0],
                acc_o[1] + al * rc[i][0] - om * om * rc[i][1],
            ];
            acc_o = [
                acc_o[0] - al * rl[i][1] - om * om * rl[i][0],
                acc_o[1] + al * rl[i][0] - om * om * rl[i][1],
            ];
        }
        let mut tau = [0.0; 5];
        let mut f_next = [0.0; 2];
        let mut n_next = 0.0;
        for i in (0..5).rev() {
            let m = self.link_masses[i];
            let l = self.link_lengths[i];
            let inertia = m * l * l / 12.0;
            let ma = [m * acc_c[i][0], m * acc_c[i][1]];
            let f = [ma[0] + f_next[0], ma[1] + f_next[1]];
            let n = inertia * alpha[i] + n_next + cross2(rc[i], ma) + cross2(rl[i], f_next);
            tau[i] = n;
            f_next = f;
            n_next = n;
        }
        tau
    }

    pub fn mass_matrix(&self, q: &[f64]) -> Matrix {
        let zero = [0.0; 5];
        let mut m = Matrix::zeros(5, 5);
        for j in 0..5 {
            let mut e = [0.0; 5];
            e[j] = 1.0;
            let col = self.inverse_dynamics(q, &zero, &e, false);
            for i in 0..5 {
                m[(i, j)] = col[i];
            }
        }
        m.symmetrized()
    }

    pub fn gravity_torque(&self, q: &[f64]) -> [f64; 5] {
        self.inverse_dynamics(q, &[0.0; 5], &[0.0; 5], true)
    }

    /// `C(q, q̇)q̇ + G(q)`.
    pub fn bias_torque(&self, q: &[f64], qd: &[f64]) -> [f64; 5] {
        self.inverse_dynamics(q, qd, &[0.0; 5], true)
    }

    /// `ω(t) = 1` on the disturbance window, else 0.
    pub fn window(&self, t: f64) -> f64 {
        let [a, b] = self.disturbance_window;
        if t >= a && t < b {
            1.0
        } else {
            0.0
        }
    }

    /// External disturbance torque; the phases of rows 4 and 5 repeat 2π/5.
    pub fn disturbance(&self, t: f64) -> [f64; 5] {
        let w = self.window(t);
        if w == 0.0 {
            return [0.0; 5];
        }
        let f = self.disturbance_frequency;
        let a = 0.5 * self.disturbance_amplitude * w;
        [
            a * (f * t + PI / 5.0).sin(),
            a * 0.9 * (f * t + 2.0 * PI / 5.0).sin(),
            a * (f * t + 3.0 * PI / 5.0).sin(),
            a * 0.9 * (f * t + 2.0 * PI / 5.0).sin(),
            a * (f * t + 2.0 * PI / 5.0).sin(),
        ]
    }

    pub fn reference(&self, t: f64) -> [f64; 5] {
        let (a, f) = (self.reference_amplitude, self.reference_frequency);
        let mut out = [0.0; 5];
        for (o, p) in out.iter_mut().zip(MANIPULATOR_PHASES) {
            *o = a * (f * t + p).sin();
        }
        out
    }

    pub fn reference_rate(&self, t: f64) -> [f64; 5] {
        let (a, f) = (self.reference_amplitude, self.reference_frequency);
        let mut out = [0.0; 5];
        for (o, p) in out.iter_mut().zip(MANIPULATOR_PHASES) {
            *o = a * f * (f * t + p).cos();
        }
        out
    }

    /// Joint accelerations with one sampled draw of the process and actuator
    /// noise: `q̈ = M⁻¹(u + w + σ_a·u·ξ − C q̇ − G + Dist(t))`.
    pub fn manipulator_accel(
        &self,
        q: &[f64],
        qd: &[f64],
        u: &[f64],
        t: f64,
        rng: &mut RngStream,
    ) -> Result<[f64; 5], EnvError> {
        let m = self.mass_matrix(q);
        m.cholesky().map_err(|e| {
            EnvError::ModelParameter(format!("inertia matrix not positive definite at q = {q:?}: {e}"))
        })?;
        let h = self.bias_torque(q, qd);
        let d = self.disturbance(t);
        let mut rhs = [0.0; 5];
        for i in 0..5 {
            let w = gaussian(rng, 0.0, self.process_noise_std)?;
            let xi = gaussian(rng, 0.0, 1.0)?;
            rhs[i] = u[i] + w + self.actuator_noise_scale * u[i] * xi - h[i] + d[i];
        }
        let sol = m.solve_vec(&rhs)?;
        let mut out = [0.0; 5];
        out.copy_from_slice(&sol);
        Ok(out)
    }
}

/// 2·sin(0.5 t + φᵢ) for the five joint phases.
pub fn reference_manipulator(t: f64) -> [f64; 5] {
    Manipulator5DOF::default().reference(t)
}

impl SdeModel for Manipulator5DOF {
    fn state_dim(&self) -> usize {
        10
    }
    fn action_dim(&self) -> usize {
        5
    }
    fn noise_dim(&self) -> usize {
        10
    }
    fn drift(&self, x: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        let (q, qd) = x.split_at(5);
        out[..5].copy_from_slice(qd);
        let h = self.bias_torque(q, qd);
        let d = self.disturbance(t);
        let rhs: Vec<f64> = (0..5).map(|i| u[i] - h[i] + d[i]).collect();
        match self.mass_matrix(q).solve_vec(&rhs) {
            Ok(a) => out[5..].copy_from_slice(&a),
            Err(_) => out[5..].fill(f64::NAN),
        }
    }
    fn diffusion(&self, x: &[f64], u: &[f64], _t: f64, out: &mut Matrix) {
        out.as_mut_slice().fill(0.0);
        let mut forcing = Matrix::zeros(5, 10);
        for i in 0..5 {
            forcing[(i, i)] = self.process_noise_std;
            forcing[(i, 5 + i)] = self.actuator_noise_scale * u[i];
        }
        match self.mass_matrix(&x[..5]).solve(&forcing) {
            Ok(s) => {
                for i in 0..5 {
                    for j in 0..10 {
                        out[(5 + i, j)] = s[(i, j)];
                    }
                }
            }
            Err(_) => out.as_mut_slice().fill(f64::NAN),
        }
    }
    fn diffusion_depends_on_action(&self) -> bool {
        self.actuator_noise_scale != 0.0
    }
}

/// `dx = [[0, 1], [−2, −3]] x dt + u dt + 0.1 dW`, target 0.
pub fn linear_test_model() -> LinearSde {
    LinearSde {
        a: Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]).expect("static shape"),
        b: Matrix::identity(2),
        sigma: Matrix::identity(2).scale(0.1),
    }
}

/// `r = −‖x − x_d‖² − ρ‖u‖²`.
pub fn tracking_reward(x: &[f64], u: &[f64], x_d: &[f64], rho: f64) -> f64 {
    let e: f64 = x.iter().zip(x_d).map(|(a, b)| (a - b) * (a - b)).sum();
    let c: f64 = u.iter().map(|v| v * v).sum();
    -e - rho * c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "hyperchaotic8d")]
    Hyperchaotic8d,
    #[serde(rename = "manipulator5dof")]
    Manipulator5dof,
    #[serde(rename = "linear-test")]
    LinearTest,
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Hyperchaotic8d => "hyperchaotic8d",
            EnvKind::Manipulator5dof => "manipulator5dof",
            EnvKind::LinearTest => "linear-test",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hyperchaotic8d" => Ok(EnvKind::Hyperchaotic8d),
            "manipulator5dof" => Ok(EnvKind::Manipulator5dof),
            "linear-test" => Ok(EnvKind::LinearTest),
            other => Err(EnvError::Unknown(other.to_string())),
        }
    }
}

/// Desired state `x_d(t)` and its time derivative.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    Constant(Vec<f64>),
    /// Joint angles `A sin(f t + φᵢ)` followed by their rates.
    Sinusoid { amplitude: f64, frequency: f64, phases: Vec<f64> },
}

impl Reference {
    pub fn dim(&self) -> usize {
        match self {
            Reference::Constant(v) => v.len(),
            Reference::Sinusoid { phases, .. } => 2 * phases.len(),
        }
    }

    pub fn value_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Reference::Constant(v) => out.copy_from_slice(v),
            Reference::Sinusoid {
                amplitude,
                frequency,
                phases,
            } => {
                let k = phases.len();
                for (i, p) in phases.iter().enumerate() {
                    let (s, c) = (frequency * t + p).sin_cos();
                    out[i] = amplitude * s;
                    out[k + i] = amplitude * frequency * c;
                }
            }
        }
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.value_into(t, &mut out);
        out
    }

    pub fn rate_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Reference::Constant(_) => out.fill(0.0),
            Reference::Sinusoid {
                amplitude,
                frequency,
                phases,
            } => {
                let k = phases.len();
                let w = *frequency;
                for (i, p) in phases.iter().enumerate() {
                    let (s, c) = (w * t + p).sin_cos();
                    out[i] = amplitude * w * c;
                    out[k + i] = -amplitude * w * w * s;
                }
            }
        }
    }
}

/// A plant plus everything needed to pose it as a tracking problem.
#[derive(Clone)]
pub struct TaskSpec {
    pub kind: EnvKind,
    pub model: Arc<dyn SdeModel>,
    pub reference: Reference,
    pub x0: Vec<f64>,
    pub horizon: f64,
    /// Control period; the policy is queried once per period.
    pub control_dt: f64,
    /// Euler–Maruyama steps per control period.
    pub substeps: usize,
    /// Symmetric per-channel actuator limit.
    pub action_bound: f64,
    pub sensor_noise_std: f64,
    pub reward_rho: f64,
    /// Leading state components entering IAE/ISE.
    pub metric_dims: usize,
}

impl fmt::Debug for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskSpec")
            .field("kind", &self.kind)
            .field("horizon", &self.horizon)
            .field("control_dt", &self.control_dt)
            .field("substeps", &self.substeps)
            .field("action_bound", &self.action_bound)
            .finish_non_exhaustive()
    }
}

impl TaskSpec {
    pub fn hyperchaotic(env: Hyperchaotic8D) -> Self {
        let target = env.target.to_vec();
        let x0 = env.x0.to_vec();
        Self {
            kind: EnvKind::Hyperchaotic8d,
            model: Arc::new(env),
            reference: Reference::Constant(target),
            x0,
            horizon: 10.0,
            control_dt: 0.01,
            substeps: 10,
            action_bound: 100.0,
            sensor_noise_std: 0.0,
            reward_rho: 0.001,
            metric_dims: 8,
        }
    }

    pub fn manipulator(env: Manipulator5DOF) -> Self {
        let mut x0 = env.q0.to_vec();
        x0.extend_from_slice(&env.qdot0);
        let reference = Reference::Sinusoid {
            amplitude: env.reference_amplitude,
            frequency: env.reference_frequency,
            phases: MANIPULATOR_PHASES.to_vec(),
        };
        let sensor = env.sensor_noise_std;
        Self {
            kind: EnvKind::Manipulator5dof,
            model: Arc::new(env),
            reference,
            x0,
            horizon: 30.0,
            control_dt: 0.01,
            substeps: 1,
            action_bound: 150.0,
            sensor_noise_std: sensor,
            reward_rho: 0.001,
            metric_dims: 5,
        }
    }

    pub fn linear_test() -> Self {
        Self {
            kind: EnvKind::LinearTest,
            model: Arc::new(linear_test_model()),
            reference: Reference::Constant(vec![0.0, 0.0]),
            x0: vec![1.0, -1.0],
            horizon: 5.0,
            control_dt: 0.01,
            substeps: 1,
            action_bound: 10.0,
            sensor_noise_std: 0.0,
            reward_rho: 0.001,
            metric_dims: 2,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.control_dt - 1e-9).ceil() as usize
    }

    pub fn clip_action(&self, u: &mut [f64]) {
        let b = self.action_bound;
        for v in u {
            *v = v.clamp(-b, b);
        }
    }

    /// `e = x − x_d(t)`.
    pub fn error_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.reference.value_into(t, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi - *o;
        }
    }

    pub fn error(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.error_into(x, t, &mut out);
        out
    }

    /// Error seen by a policy: sensor noise is added to the measured state.
    pub fn observe(&self, x: &[f64], t: f64, rng: &mut RngStream) -> Vec<f64> {
        let mut e = self.error(x, t);
        if self.sensor_noise_std > 0.0 {
            for v in &mut e {
                *v += self.sensor_noise_std * rng.standard_normal();
            }
        }
        e
    }

    pub fn reward(&self, x: &[f64], u: &[f64], t: f64) -> f64 {
        let xd = self.reference.value(t);
        tracking_reward(x, u, &xd, self.reward_rho)
    }

    pub fn error_model(&self) -> ErrorDynamics<'_> {
        ErrorDynamics { task: self }
    }
}

/// Tracking-error dynamics `ė = f(e + x_d(t), u, t) − ẋ_d(t)`, sharing the
/// plant's diffusion.
pub struct ErrorDynamics<'a> {
    task: &'a TaskSpec,
}

impl SdeModel for ErrorDynamics<'_> {
    fn state_dim(&self) -> usize {
        self.task.state_dim()
    }
    fn action_dim(&self) -> usize {
        self.task.action_dim()
    }
    fn noise_dim(&self) -> usize {
        self.task.model.noise_dim()
    }
    fn drift(&self, e: &[f64], u: &[f64], t: f64, out: &mut [f64]) {
        let n = e.len();
        let mut x = vec![0.0; n];
        self.task.reference.value_into(t, &mut x);
        for (xi, ei) in x.iter_mut().zip(e) {
            *xi += ei;
        }
        self.task.model.drift(&x, u, t, out);
        let mut rate = vec![0.0; n];
        self.task.reference.rate_into(t, &mut rate);
        for (o, r) in out.iter_mut().zip(&rate) {
            *o -= r;
        }
    }
    fn diffusion(&self, e: &[f64], u: &[f64], t: f64, out: &mut Matrix) {
        let mut x = vec![0.0; e.len()];
        self.task.reference.value_into(t, &mut x);
        for (xi, ei) in x.iter_mut().zip(e) {
            *xi += ei;
        }
        self.task.model.diffusion(&x, u, t, out)
    }
    fn diffusion_depends_on_action(&self) -> bool {
        self.task.model.diffusion_depends_on_action()
    }
}

/// Builds the task for `kind` with default plant parameters.
pub fn default_task(kind: EnvKind) -> TaskSpec {
    match kind {
        EnvKind::Hyperchaotic8d => TaskSpec::hyperchaotic(Hyperchaotic8D::default()),
        EnvKind::Manipulator5dof => TaskSpec::manipulator(Manipulator5DOF::default()),
        EnvKind::LinearTest => TaskSpec::linear_test(),
    }
}
