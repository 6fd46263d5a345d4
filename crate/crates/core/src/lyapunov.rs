//! Lyapunov candidates, the infinitesimal generator, the Lyapunov loss and
//! warm-start fitting on the linearised plant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{linearize_at, SdeModel};
use crate::neural::{Activation, Adam, Mlp, NeuralError};
use crate::numerics::{lqr_gain, sigmoid, softplus, softplus_inv, solve_continuous_lyapunov, Matrix, NumericsError, RngStream};

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("pretraining failed: {0}")]
    Pretrain(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    ClosedForm,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub backend: Backend,
    pub fd_step: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::ClosedForm,
            fd_step: 1e-4,
            alpha: 0.1,
            beta: 0.01,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), LyapunovError> {
        if !(self.fd_step > 0.0) {
            return Err(LyapunovError::Argument(format!("fd_step must be positive, got {}", self.fd_step)));
        }
        Ok(())
    }
}

/// A parameterised candidate `V(x; φ)` with `V(0) = 0`.
///
/// Batched methods take row-major `count × dim` point matrices.
pub trait LyapunovFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]) -> Result<(), LyapunovError>;

    fn value_batch(&self, pts: &[f64], count: usize) -> Vec<f64>;
    fn grad_x_batch(&self, pts: &[f64], count: usize) -> Vec<f64>;

    /// Adds `Σ_s c_s ∂V(y_s)/∂φ` into `out`.
    fn accumulate_param_grad(&self, pts: &[f64], coeffs: &[f64], out: &mut [f64]);

    /// `½ Tr(σᵀ ∇²V σ)` when an exact expression is available.
    fn curvature_closed_form(&self, _x: &[f64], _sigma: &Matrix) -> Option<f64> {
        None
    }

    /// [`Self::curvature_closed_form`] over `count` rows, `None` if any row
    /// lacks one.
    fn curvature_closed_form_batch(&self, pts: &[f64], sigmas: &[Matrix]) -> Option<Vec<f64>> {
        let n = self.dim();
        sigmas
            .iter()
            .enumerate()
            .map(|(s, sigma)| self.curvature_closed_form(&pts[s * n..(s + 1) * n], sigma))
            .collect()
    }

    /// Guaranteed constant `c` with `V(x) ≥ c‖x‖²`.
    fn quadratic_floor(&self) -> f64;

    /// Re-imposes structural constraints after a raw parameter update.
    fn project(&mut self) {}

    fn value(&self, x: &[f64]) -> f64 {
        self.value_batch(x, 1)[0]
    }

    fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        self.grad_x_batch(x, 1)
    }

    fn param_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        self.accumulate_param_grad(x, &[1.0], &mut out);
        out
    }
}

/// `V(x) = zᵀ L Lᵀ z + ε₀‖x‖²` with `z = ψ(x) − ψ(0)`.
///
/// `L` is lower triangular; its diagonal is stored through softplus so it
/// stays positive under unconstrained updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovNet {
    pub psi: Mlp,
    /// Row-major lower triangle of `L` (`k(k+1)/2` entries); diagonal raw.
    pub l_raw: Vec<f64>,
    pub eps0: f64,
}

pub const DEFAULT_EPS0: f64 = 1e-3;

fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl LyapunovNet {
    /// `ψ: ℝⁿ → ℝᵏ` with one softplus hidden layer of `hidden` units and a
    /// linear output; `L = I`.
    pub fn new(n: usize, hidden: usize, k: usize, rng: &mut RngStream) -> Result<Self, LyapunovError> {
        let psi = Mlp::init(&[n, hidden, k], Activation::Softplus, Activation::Identity, rng)?;
        Ok(Self::from_psi(psi, &Matrix::identity(k)))
    }

    /// Linear `ψ(x) = x`, so `V = xᵀ(LLᵀ + ε₀I)x`.
    pub fn identity_psi(n: usize, l: &Matrix) -> Self {
        let mut psi = Mlp::zeros(&[n, n], Activation::Identity, Activation::Identity).expect("n > 0");
        for i in 0..n {
            psi.params_mut()[i * n + i] = 1.0;
        }
        Self::from_psi(psi, l)
    }

    pub fn from_psi(psi: Mlp, l: &Matrix) -> Self {
        let k = psi.output_dim();
        let mut l_raw = vec![0.0; k * (k + 1) / 2];
        for i in 0..k {
            for j in 0..=i {
                l_raw[tri_index(i, j)] = if i == j {
                    softplus_inv(l[(i, i)].max(1e-8))
                } else {
                    l[(i, j)]
                };
            }
        }
        Self {
            psi,
            l_raw,
            eps0: DEFAULT_EPS0,
        }
    }

    pub fn k(&self) -> usize {
        self.psi.output_dim()
    }

    pub fn lower(&self) -> Matrix {
        let k = self.k();
        let mut l = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let r = self.l_raw[tri_index(i, j)];
                l[(i, j)] = if i == j { softplus(r) } else { r };
            }
        }
        l
    }

    /// `P = LLᵀ`.
    pub fn p_matrix(&self) -> Matrix {
        crate::numerics::cholesky_psd(&self.lower()).expect("square factor")
    }

    fn psi_is_linear(&self) -> bool {
        self.psi.layers() == 1 && self.psi.output_activation() == Activation::Identity
    }

    /// `WᵀPW + ε₀I` when `ψ(x) = Wx + b`, so that `V(x) = xᵀHx`.
    pub fn quadratic_form(&self) -> Option<Matrix> {
        if !self.psi_is_linear() {
            return None;
        }
        let n = self.dim();
        let k = self.k();
        let w = Matrix::from_vec(k, n, self.psi.params()[..k * n].to_vec()).ok()?;
        let h = w.transpose().matmul(&self.p_matrix()).ok()?.matmul(&w).ok()?;
        h.add(&Matrix::identity(n).scale(self.eps0)).ok()
    }

    /// `½Tr(σᵀ∇²Vσ)` for `ψ = W₂ s(W₁x + b₁) + b₂` with softplus `s`:
    /// `Σ_c (Jσ_c)ᵀP(Jσ_c) + Σ_j g_j s''(a_j)(w₁ⱼ·σ_c)² + ε₀‖σ_c‖²`,
    /// `g = W₂ᵀPz`.
    fn softplus_curvature(&self, pts: &[f64], sigmas: &[Matrix]) -> Option<Vec<f64>> {
        let sizes = self.psi.sizes();
        if sizes.len() != 3 || self.psi.hidden_activation() != Activation::Softplus || self.psi.output_activation() != Activation::Identity {
            return None;
        }
        let (n, hdim, k) = (sizes[0], sizes[1], sizes[2]);
        let count = sigmas.len();
        let p = self.psi.params();
        let w1 = &p[..n * hdim];
        let off = (n + 1) * hdim;
        let w2 = &p[off..off + hdim * k];
        let (z, tape) = self.latent(pts, count);
        let l = self.lower();
        let pz = self.l_times(&l, &self.lt_times(&l, &z, count), count);
        let mut out = Vec::with_capacity(count);
        let mut g = vec![0.0; hdim];
        let mut d1 = vec![0.0; hdim];
        let mut ws = vec![0.0; hdim];
        let mut js = vec![0.0; k];
        let mut lt = vec![0.0; k];
        for (s, sigma) in sigmas.iter().enumerate() {
            let pre = &tape.pre_activations(0)[s * hdim..(s + 1) * hdim];
            let pzr = &pz[s * k..(s + 1) * k];
            for j in 0..hdim {
                d1[j] = sigmoid(pre[j]);
                g[j] = (0..k).map(|r| w2[r * hdim + j] * pzr[r]).sum();
            }
            let mut tr = 0.0;
            for c in 0..sigma.cols() {
                let col = sigma.column(c);
                if col.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for j in 0..hdim {
                    ws[j] = (0..n).map(|i| w1[j * n + i] * col[i]).sum();
                }
                for r in 0..k {
                    js[r] = (0..hdim).map(|j| w2[r * hdim + j] * d1[j] * ws[j]).sum();
                }
                for j in 0..k {
                    lt[j] = (j..k).map(|i| l[(i, j)] * js[i]).sum();
                }
                tr += lt.iter().map(|v| v * v).sum::<f64>();
                for j in 0..hdim {
                    tr += g[j] * d1[j] * (1.0 - d1[j]) * ws[j] * ws[j];
                }
                tr += self.eps0 * col.iter().map(|v| v * v).sum::<f64>();
            }
            out.push(tr);
        }
        Some(out)
    }

    /// Rows `z_s = ψ(y_s) − ψ(0)` and the tape of the batched pass.
    fn latent(&self, pts: &[f64], count: usize) -> (Vec<f64>, crate::neural::Tape) {
        let tape = self.psi.forward_batch(pts, count).expect("dimension checked by caller");
        let psi0 = self.psi.forward(&vec![0.0; self.dim()]).expect("dimension");
        let k = self.k();
        let mut z = tape.output().to_vec();
        for s in 0..count {
            for (zi, p0) in z[s * k..(s + 1) * k].iter_mut().zip(&psi0) {
                *zi -= p0;
            }
        }
        (z, tape)
    }

    /// `LᵀZ` row by row.
    fn lt_times(&self, l: &Matrix, z: &[f64], count: usize) -> Vec<f64> {
        let k = self.k();
        let mut w = vec![0.0; count * k];
        for s in 0..count {
            let zr = &z[s * k..(s + 1) * k];
            let wr = &mut w[s * k..(s + 1) * k];
            for j in 0..k {
                let mut acc = 0.0;
                for i in j..k {
                    acc += l[(i, j)] * zr[i];
                }
                wr[j] = acc;
            }
        }
        w
    }

    /// `L w` row by row.
    fn l_times(&self, l: &Matrix, w: &[f64], count: usize) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; count * k];
        for s in 0..count {
            let wr = &w[s * k..(s + 1) * k];
            let or = &mut out[s * k..(s + 1) * k];
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l[(i, j)] * wr[j];
                }
                or[i] = acc;
            }
        }
        out
    }
}

impl LyapunovFunction for LyapunovNet {
    fn dim(&self) -> usize {
        self.psi.input_dim()
    }

    fn num_params(&self) -> usize {
        self.psi.num_params() + self.l_raw.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.psi.params().to_vec();
        p.extend_from_slice(&self.l_raw);
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<(), LyapunovError> {
        if p.len() != self.num_params() {
            return Err(LyapunovError::Argument(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let np = self.psi.num_params();
        self.psi.set_params(&p[..np])?;
        self.l_raw.copy_from_slice(&p[np..]);
        Ok(())
    }

    fn value_batch(&self, pts: &[f64], count: usize) -> Vec<f64> {
        let n = self.dim();
        let k = self.k();
        let (z, _) = self.latent(pts, count);
        let l = self.lower();
        let w = self.lt_times(&l, &z, count);
        (0..count)
            .map(|s| {
                let q: f64 = w[s * k..(s + 1) * k].iter().map(|v| v * v).sum();
                let x2: f64 = pts[s * n..(s + 1) * n].iter().map(|v| v * v).sum();
                q + self.eps0 * x2
            })
            .collect()
    }

    fn grad_x_batch(&self, pts: &[f64], count: usize) -> Vec<f64> {
        let (z, tape) = self.latent(pts, count);
        let l = self.lower();
        let w = self.lt_times(&l, &z, count);
        // ∂V/∂ψ = 2 L Lᵀ z
        let mut up = self.l_times(&l, &w, count);
        up.iter_mut().for_each(|v| *v *= 2.0);
        let mut g = self.psi.input_gradients(&tape, &up).expect("shapes");
        for (gi, xi) in g.iter_mut().zip(pts) {
            *gi += 2.0 * self.eps0 * xi;
        }
        g
    }

    fn accumulate_param_grad(&self, pts: &[f64], coeffs: &[f64], out: &mut [f64]) {
        let count = coeffs.len();
        let k = self.k();
        let (z, tape) = self.latent(pts, count);
        let l = self.lower();
        let w = self.lt_times(&l, &z, count);
        let pz = self.l_times(&l, &w, count);
        let np = self.psi.num_params();
        let (out_psi, out_l) = out.split_at_mut(np);
        let mut up = vec![0.0; count * k];
        let mut up0 = vec![0.0; k];
        for s in 0..count {
            for i in 0..k {
                let v = 2.0 * coeffs[s] * pz[s * k + i];
                up[s * k + i] = v;
                up0[i] -= v;
            }
        }
        self.psi.backward_batch(&tape, &up, out_psi, None).expect("shapes");
        let zero_tape = self.psi.forward_batch(&vec![0.0; self.dim()], 1).expect("shapes");
        self.psi.backward_batch(&zero_tape, &up0, out_psi, None).expect("shapes");
        // ∂(‖Lᵀz‖²)/∂L_ij = 2 z_i (Lᵀz)_j for i ≥ j.
        for s in 0..count {
            let c = coeffs[s];
            if c == 0.0 {
                continue;
            }
            for i in 0..k {
                let zi = z[s * k + i];
                for j in 0..=i {
                    let mut g = 2.0 * c * zi * w[s * k + j];
                    if i == j {
                        g *= sigmoid(self.l_raw[tri_index(i, i)]);
                    }
                    out_l[tri_index(i, j)] += g;
                }
            }
        }
    }

    fn curvature_closed_form(&self, x: &[f64], sigma: &Matrix) -> Option<f64> {
        self.curvature_closed_form_batch(x, std::slice::from_ref(sigma)).map(|v| v[0])
    }

    fn curvature_closed_form_batch(&self, pts: &[f64], sigmas: &[Matrix]) -> Option<Vec<f64>> {
        if let Some(h) = self.quadratic_form() {
            return Some(
                sigmas
                    .iter()
                    .map(|sigma| (0..sigma.cols()).map(|c| h.quad_form(&sigma.column(c))).sum())
                    .collect(),
            );
        }
        self.softplus_curvature(pts, sigmas)
    }

    fn quadratic_floor(&self) -> f64 {
        self.eps0
    }
}

/// `V(x) = ε‖x‖² + Σ_p w_p [φ(x − μ_p) + φ(x + μ_p) − 2φ(μ_p)]` with
/// Gaussian bumps `φ(y) = exp(−‖y‖²/2σ_p²)` placed in antipodal pairs.
///
/// The pairing makes `∇V(0) = 0`, and keeping `Σ_p w_p/σ_p² ≤ κ ε` bounds
/// the bump part by `κ ε‖x‖²`, so `V ≥ (1 − κ) ε ‖x‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRbf {
    /// Softplus-stored pair weights.
    pub w_raw: Vec<f64>,
    /// One representative centre per pair (its mirror is `−μ`).
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
    pub eps: f64,
    pub kappa: f64,
}

impl LyapunovRbf {
    /// `m` bumps (`m/2` pairs) with centres drawn from `N(0, scale²I)`.
    pub fn new(n: usize, m: usize, scale: f64, width: f64, rng: &mut RngStream) -> Self {
        let pairs = (m / 2).max(1);
        let centers = (0..pairs)
            .map(|_| (0..n).map(|_| scale * rng.standard_normal()).collect())
            .collect();
        let mut v = Self {
            w_raw: vec![softplus_inv(1e-6); pairs],
            centers,
            widths: vec![width; pairs],
            eps: 0.01,
            kappa: 0.9,
        };
        v.project();
        v
    }

    pub fn with_weights(centers: Vec<Vec<f64>>, widths: Vec<f64>, weights: &[f64], eps: f64) -> Self {
        Self {
            w_raw: weights.iter().map(|&w| if w > 0.0 { softplus_inv(w) } else { -40.0 }).collect(),
            centers,
            widths,
            eps,
            kappa: 0.9,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.w_raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn offset(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.centers)
            .zip(&self.widths)
            .map(|((w, mu), s)| 2.0 * w * bump(mu, *s))
            .sum()
    }

    fn pair_terms<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = (f64, [(f64, Vec<f64>); 2], f64, f64)> + 'a {
        let n = x.len();
        self.weights().into_iter().zip(&self.centers).zip(&self.widths).map(move |((w, mu), &s)| {
            let d1: Vec<f64> = (0..n).map(|i| x[i] - mu[i]).collect();
            let d2: Vec<f64> = (0..n).map(|i| x[i] + mu[i]).collect();
            let b1 = gauss(&d1, s);
            let b2 = gauss(&d2, s);
            (w, [(b1, d1), (b2, d2)], s, bump(mu, s))
        })
    }
}

fn gauss(d: &[f64], s: f64) -> f64 {
    (-d.iter().map(|v| v * v).sum::<f64>() / (2.0 * s * s)).exp()
}

fn bump(mu: &[f64], s: f64) -> f64 {
    gauss(mu, s)
}

impl LyapunovFunction for LyapunovRbf {
    fn dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }

    fn num_params(&self) -> usize {
        self.w_raw.len()
    }

    fn params(&self) -> Vec<f64> {
        self.w_raw.clone()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<(), LyapunovError> {
        if p.len() != self.w_raw.len() {
            return Err(LyapunovError::Argument(format!(
                "expected {} parameters, got {}",
                self.w_raw.len(),
                p.len()
            )));
        }
        self.w_raw.copy_from_slice(p);
        Ok(())
    }

    fn value_batch(&self, pts: &[f64], count: usize) -> Vec<f64> {
        let n = self.dim();
        (0..count)
            .map(|s| {
                let x = &pts[s * n..(s + 1) * n];
                let mut v = self.eps * x.iter().map(|a| a * a).sum::<f64>();
                for (w, b, _, b0) in self.pair_terms(x) {
                    v += w * (b[0].0 + b[1].0 - 2.0 * b0);
                }
                v
            })
            .collect()
    }

    fn grad_x_batch(&self, pts: &[f64], count: usize) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; count * n];
        for s in 0..count {
            let x = &pts[s * n..(s + 1) * n];
            let g = &mut out[s * n..(s + 1) * n];
            for i in 0..n {
                g[i] = 2.0 * self.eps * x[i];
            }
            for (w, b, sig, _) in self.pair_terms(x) {
                for (phi, d) in &b {
                    let c = -w * phi / (sig * sig);
                    for i in 0..n {
                        g[i] += c * d[i];
                    }
                }
            }
        }
        out
    }

    fn accumulate_param_grad(&self, pts: &[f64], coeffs: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (s, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let x = &pts[s * n..(s + 1) * n];
            for (p, (_, b, _, b0)) in self.pair_terms(x).enumerate() {
                out[p] += c * (b[0].0 + b[1].0 - 2.0 * b0) * sigmoid(self.w_raw[p]);
            }
        }
    }

    fn curvature_closed_form(&self, x: &[f64], sigma: &Matrix) -> Option<f64> {
        // ∇²φ = φ (d dᵀ/σ⁴ − I/σ²)
        let r = sigma.cols();
        let fro: f64 = sigma.as_slice().iter().map(|v| v * v).sum();
        let mut tr = 2.0 * self.eps * fro;
        for (w, b, s, _) in self.pair_terms(x) {
            for (phi, d) in &b {
                let std: f64 = (0..r)
                    .map(|c| {
                        let proj: f64 = (0..d.len()).map(|i| sigma[(i, c)] * d[i]).sum();
                        proj * proj
                    })
                    .sum();
                tr += w * phi * (std / s.powi(4) - fro / (s * s));
            }
        }
        Some(0.5 * tr)
    }

    fn quadratic_floor(&self) -> f64 {
        (1.0 - self.kappa) * self.eps
    }

    fn project(&mut self) {
        let budget: f64 = self.weights().iter().zip(&self.widths).map(|(w, s)| w / (s * s)).sum();
        let cap = self.kappa * self.eps;
        if budget > cap {
            let scale = cap / budget;
            for r in &mut self.w_raw {
                *r = softplus_inv((softplus(*r) * scale).max(1e-300));
            }
        }
    }
}

/// `½ Tr(σᵀ ∇²V σ)`.
///
/// The finite-difference path differences the exact gradient along each
/// column of `σ`.
pub fn hessian_trace(v: &dyn LyapunovFunction, x: &[f64], sigma: &Matrix, cfg: &GeneratorConfig) -> Result<f64, LyapunovError> {
    if cfg.backend == Backend::ClosedForm {
        if let Some(t) = v.curvature_closed_form(x, sigma) {
            return Ok(t);
        }
    }
    hessian_trace_fd(v, x, sigma, cfg.fd_step)
}

pub fn hessian_trace_fd(v: &dyn LyapunovFunction, x: &[f64], sigma: &Matrix, h: f64) -> Result<f64, LyapunovError> {
    let n = x.len();
    let r = sigma.cols();
    let cols: Vec<usize> = (0..r).filter(|&c| (0..n).any(|i| sigma[(i, c)] != 0.0)).collect();
    if cols.is_empty() {
        return Ok(0.0);
    }
    let mut pts = Vec::with_capacity(2 * cols.len() * n);
    for &c in &cols {
        for sign in [1.0, -1.0] {
            pts.extend((0..n).map(|i| x[i] + sign * h * sigma[(i, c)]));
        }
    }
    let g = v.grad_x_batch(&pts, 2 * cols.len());
    let mut tr = 0.0;
    for (q, &c) in cols.iter().enumerate() {
        let gp = &g[(2 * q) * n..(2 * q + 1) * n];
        let gm = &g[(2 * q + 1) * n..(2 * q + 2) * n];
        for i in 0..n {
            tr += sigma[(i, c)] * (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    if !tr.is_finite() {
        return Err(LyapunovError::Degenerate(format!("curvature term not finite at {x:?}")));
    }
    Ok(0.5 * tr)
}

/// [`hessian_trace`] at `count` points, batching every finite-difference
/// evaluation into a single gradient pass.
pub fn hessian_trace_batch(v: &dyn LyapunovFunction, pts: &[f64], sigmas: &[Matrix], cfg: &GeneratorConfig) -> Result<Vec<f64>, LyapunovError> {
    let n = v.dim();
    let count = sigmas.len();
    if pts.len() != count * n {
        return Err(LyapunovError::Argument(format!(
            "{} coordinates for {count} points of dimension {n}",
            pts.len()
        )));
    }
    if cfg.backend == Backend::ClosedForm {
        if let Some(out) = v.curvature_closed_form_batch(pts, sigmas) {
            if let Some(s) = out.iter().position(|t| !t.is_finite()) {
                return Err(LyapunovError::Degenerate(format!("curvature term not finite at sample {s}")));
            }
            return Ok(out);
        }
    }
    let mut out = vec![0.0; count];
    let mut fd_pts = Vec::new();
    // (sample, column) per difference pair
    let mut pairs = Vec::new();
    for s in 0..count {
        let x = &pts[s * n..(s + 1) * n];
        let sigma = &sigmas[s];
        if cfg.backend == Backend::ClosedForm {
            if let Some(t) = v.curvature_closed_form(x, sigma) {
                out[s] = t;
                continue;
            }
        }
        for c in 0..sigma.cols() {
            if (0..n).all(|i| sigma[(i, c)] == 0.0) {
                continue;
            }
            for sign in [1.0, -1.0] {
                fd_pts.extend((0..n).map(|i| x[i] + sign * cfg.fd_step * sigma[(i, c)]));
            }
            pairs.push((s, c));
        }
    }
    if !pairs.is_empty() {
        let g = v.grad_x_batch(&fd_pts, 2 * pairs.len());
        for (q, &(s, c)) in pairs.iter().enumerate() {
            let gp = &g[(2 * q) * n..(2 * q + 1) * n];
            let gm = &g[(2 * q + 1) * n..(2 * q + 2) * n];
            let sigma = &sigmas[s];
            let mut acc = 0.0;
            for i in 0..n {
                acc += sigma[(i, c)] * (gp[i] - gm[i]) / (2.0 * cfg.fd_step);
            }
            out[s] += 0.5 * acc;
        }
    }
    if let Some(s) = out.iter().position(|t| !t.is_finite()) {
        return Err(LyapunovError::Degenerate(format!("curvature term not finite at sample {s}")));
    }
    Ok(out)
}

/// `ℒV(x, u) = ∇V·f + ½ Tr(σᵀ∇²Vσ)`.
pub fn generator(v: &dyn LyapunovFunction, model: &dyn SdeModel, x: &[f64], u: &[f64], t: f64, cfg: &GeneratorConfig) -> Result<f64, LyapunovError> {
    let f = model.drift_vec(x, u, t);
    let sigma = model.diffusion_matrix(x, u, t);
    generator_parts(v, x, &f, &sigma, cfg)
}

/// Generator from a precomputed drift and diffusion.
pub fn generator_parts(v: &dyn LyapunovFunction, x: &[f64], f: &[f64], sigma: &Matrix, cfg: &GeneratorConfig) -> Result<f64, LyapunovError> {
    let g = v.grad_x(x);
    let drift: f64 = g.iter().zip(f).map(|(a, b)| a * b).sum();
    let curv = hessian_trace(v, x, sigma, cfg)?;
    let out = drift + curv;
    if !out.is_finite() {
        return Err(LyapunovError::Degenerate(format!("generator not finite at {x:?}")));
    }
    Ok(out)
}

/// One sample of the constraint `ℒV + αV − β`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSample {
    pub value: f64,
    pub generator: f64,
    pub residual: f64,
}

pub fn constraint_residual(v: &dyn LyapunovFunction, model: &dyn SdeModel, x: &[f64], u: &[f64], t: f64, cfg: &GeneratorConfig) -> Result<ConstraintSample, LyapunovError> {
    let value = v.value(x);
    let generator = generator(v, model, x, u, t, cfg)?;
    Ok(ConstraintSample {
        value,
        generator,
        residual: generator + cfg.alpha * value - cfg.beta,
    })
}

/// Batch summary of the Lyapunov constraint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Mean of `max(0, ℒV + αV − β)²`.
    pub loss: f64,
    /// Mean of `max(0, ℒV + αV − β)`.
    pub hinge_mean: f64,
    pub violation_rate: f64,
    pub mean_generator: f64,
    pub residuals: Vec<f64>,
}

/// `states` holds `count` rows, `actions` the matching controls, `times` the
/// sample times (drift may be time dependent).
pub fn lyapunov_loss(
    v: &dyn LyapunovFunction,
    model: &dyn SdeModel,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    times: &[f64],
    cfg: &GeneratorConfig,
) -> Result<LossReport, LyapunovError> {
    if states.is_empty() {
        return Err(LyapunovError::Argument("Lyapunov loss needs a non-empty batch".into()));
    }
    if states.len() != actions.len() || states.len() != times.len() {
        return Err(LyapunovError::Argument("states, actions and times differ in length".into()));
    }
    let mut rep = LossReport::default();
    let n = states.len() as f64;
    for ((x, u), &t) in states.iter().zip(actions).zip(times) {
        let c = constraint_residual(v, model, x, u, t, cfg)?;
        let h = c.residual.max(0.0);
        rep.loss += h * h / n;
        rep.hinge_mean += h / n;
        if c.residual > 0.0 {
            rep.violation_rate += 1.0 / n;
        }
        rep.mean_generator += c.generator / n;
        rep.residuals.push(c.residual);
    }
    Ok(rep)
}

/// Adds `weight · ∂/∂φ (ℒV(x) + αV(x))` into `out`.
///
/// The drift term differences `V` along `f̂` and the curvature term takes
/// second differences along the columns of `σ`; the parameter gradient of
/// each difference quotient is exact.
pub fn accumulate_constraint_param_grad(
    v: &dyn LyapunovFunction,
    x: &[f64],
    f: &[f64],
    sigma: &Matrix,
    cfg: &GeneratorConfig,
    weight: f64,
    out: &mut [f64],
) {
    let n = x.len();
    let h = cfg.fd_step.max(1e-3);
    let mut pts: Vec<f64> = x.to_vec();
    let mut coeffs = vec![weight * cfg.alpha];
    let fnorm = f.iter().map(|a| a * a).sum::<f64>().sqrt();
    if fnorm > 0.0 {
        for sign in [1.0, -1.0] {
            pts.extend((0..n).map(|i| x[i] + sign * h * f[i] / fnorm));
            coeffs.push(weight * sign * fnorm / (2.0 * h));
        }
    }
    for c in 0..sigma.cols() {
        let col = sigma.column(c);
        let s = col.iter().map(|a| a * a).sum::<f64>().sqrt();
        if s == 0.0 {
            continue;
        }
        // ½ σ_cᵀ∇²Vσ_c = ½ s² d²V/dt² along the unit column.
        let k = 0.5 * s * s / (h * h);
        for sign in [1.0, -1.0] {
            pts.extend((0..n).map(|i| x[i] + sign * h * col[i] / s));
            coeffs.push(weight * k);
        }
        coeffs[0] -= weight * 2.0 * k;
    }
    v.accumulate_param_grad(&pts, &coeffs, out);
}

/// `∂ℒV/∂u` at `(x, u)`.
pub fn generator_action_grad(
    v: &dyn LyapunovFunction,
    model: &dyn SdeModel,
    x: &[f64],
    u: &[f64],
    t: f64,
    grad_v: &[f64],
    cfg: &GeneratorConfig,
) -> Result<Vec<f64>, LyapunovError> {
    let m = u.len();
    let n = x.len();
    let h = 1e-5 * (1.0 + u.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    let mut up = u.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut out = vec![0.0; m];
    let action_noise = model.diffusion_depends_on_action();
    for j in 0..m {
        up[j] = u[j] + h;
        model.drift(x, &up, t, &mut fp);
        let cp = if action_noise {
            hessian_trace(v, x, &model.diffusion_matrix(x, &up, t), cfg)?
        } else {
            0.0
        };
        up[j] = u[j] - h;
        model.drift(x, &up, t, &mut fm);
        let cm = if action_noise {
            hessian_trace(v, x, &model.diffusion_matrix(x, &up, t), cfg)?
        } else {
            0.0
        };
        up[j] = u[j];
        let mut d = 0.0;
        for i in 0..n {
            d += grad_v[i] * (fp[i] - fm[i]);
        }
        out[j] = (d + cp - cm) / (2.0 * h);
    }
    Ok(out)
}

/// Warm-start settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// State cost weight `Q = q·I` in the gain synthesis.
    pub lqr_q: f64,
    /// Control cost weight `R = r·I`.
    pub lqr_r: f64,
    /// Discretisation step of the Riccati iteration.
    pub lqr_dt: f64,
    /// Fit states are drawn from `N(0, scale²I)`.
    pub sample_scale: f64,
    pub fit_tolerance: f64,
    pub max_iters: usize,
    pub fit_batch: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lqr_q: 1.0,
            lqr_r: 0.01,
            lqr_dt: 0.01,
            sample_scale: 1.0,
            fit_tolerance: 0.05,
            max_iters: 20_000,
            fit_batch: 128,
            learning_rate: 0.01,
        }
    }
}

/// Result of [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub a: Matrix,
    pub b: Matrix,
    /// Feedback gain, used as `u = u* − K (x − x*)`.
    pub k: Matrix,
    pub a_closed: Matrix,
    /// Certificate of the closed linearisation: `A_clᵀP + PA_cl = −I`.
    pub p: Matrix,
    pub fit_error: f64,
    pub iterations: usize,
}

/// Input holding `x*` in equilibrium, by least squares on the drift's
/// linearisation in `u`.
pub fn equilibrium_input(model: &dyn SdeModel, x_star: &[f64], t: f64) -> Result<Vec<f64>, LyapunovError> {
    let m = model.action_dim();
    let u0 = vec![0.0; m];
    let f0 = model.drift_vec(x_star, &u0, t);
    let (_, b) = linearize_at(model, x_star, &u0, t, 1e-5);
    let bt = b.transpose();
    let gram = bt.matmul(&b)?;
    let rhs: Vec<f64> = bt.matvec(&f0)?.into_iter().map(|v| -v).collect();
    Ok(gram.solve_vec(&rhs)?)
}

/// Mean relative error `|V(x) − xᵀPx| / xᵀPx` over `samples`.
pub fn fit_error(v: &dyn LyapunovFunction, p: &Matrix, samples: &[f64], count: usize) -> f64 {
    let n = p.rows();
    let vals = v.value_batch(samples, count);
    let mut err = 0.0;
    for s in 0..count {
        let x = &samples[s * n..(s + 1) * n];
        let t = p.quad_form(x);
        err += (vals[s] - t).abs() / t.max(1e-12);
    }
    err / count as f64
}

/// Linearises at `(x*, u*)`, synthesises an LQR gain, certifies the closed
/// loop with a Lyapunov solve and regresses `V(e)` onto `eᵀPe`.
///
/// `V` takes the deviation `e = x − x*`.
pub fn pretrain(
    v: &mut dyn LyapunovFunction,
    model: &dyn SdeModel,
    x_star: &[f64],
    u_star: &[f64],
    rng: &mut RngStream,
    cfg: &PretrainConfig,
) -> Result<PretrainReport, LyapunovError> {
    let n = model.state_dim();
    let m = model.action_dim();
    if v.dim() != n {
        return Err(LyapunovError::Argument(format!(
            "Lyapunov function has dimension {}, model state {}",
            v.dim(),
            n
        )));
    }
    let (a, b) = linearize_at(model, x_star, u_star, 0.0, 1e-5);
    let k = lqr_gain(&a, &b, &Matrix::identity(n).scale(cfg.lqr_q), &Matrix::identity(m).scale(cfg.lqr_r), cfg.lqr_dt)
        .map_err(|e| LyapunovError::Pretrain(format!("no stabilising gain for the linearisation: {e}")))?;
    let a_closed = a.sub(&b.matmul(&k)?)?;
    let p = solve_continuous_lyapunov(&a_closed, &Matrix::identity(n))
        .map_err(|e| LyapunovError::Pretrain(format!("closed-loop linearisation is not certified stable: {e}")))?;

    let holdout = 512;
    let mut test = vec![0.0; holdout * n];
    for v in &mut test {
        *v = cfg.sample_scale * rng.standard_normal();
    }
    let mut opt = Adam::new(v.num_params(), cfg.learning_rate);
    let mut params = v.params();
    let mut batch = vec![0.0; cfg.fit_batch * n];
    let mut err = fit_error(v, &p, &test, holdout);
    let mut iters = 0;
    while err >= cfg.fit_tolerance && iters < cfg.max_iters {
        for x in &mut batch {
            *x = cfg.sample_scale * rng.standard_normal();
        }
        let vals = v.value_batch(&batch, cfg.fit_batch);
        let coeffs: Vec<f64> = (0..cfg.fit_batch)
            .map(|s| {
                let t = p.quad_form(&batch[s * n..(s + 1) * n]).max(1e-12);
                2.0 * (vals[s] - t) / (t * t) / cfg.fit_batch as f64
            })
            .collect();
        let mut g = vec![0.0; params.len()];
        v.accumulate_param_grad(&batch, &coeffs, &mut g);
        opt.step(&mut params, &g);
        v.set_params(&params)?;
        v.project();
        params = v.params();
        iters += 1;
        if iters % 50 == 0 {
            err = fit_error(v, &p, &test, holdout);
            if iters % 2000 == 0 {
                opt.set_lr(cfg.learning_rate * 0.5f64.powi((iters / 2000) as i32));
            }
        }
    }
    log::debug!("Lyapunov pretraining: {iters} iterations, mean relative fit error {err:.4}");
    if err >= cfg.fit_tolerance {
        log::warn!("Lyapunov fit stopped at relative error {err:.4} (target {})", cfg.fit_tolerance);
    }
    Ok(PretrainReport {
        a,
        b,
        k,
        a_closed,
        p,
        fit_error: err,
        iterations: iters,
    })
}

/// Number of sampled points with `V(x) ≤ 0` among `count` draws from
/// `N(0, scale²I)`, excluding the origin.
pub fn positivity_audit(v: &dyn LyapunovFunction, count: usize, scale: f64, rng: &mut RngStream) -> usize {
    let n = v.dim();
    let mut pts = vec![0.0; count * n];
    for x in &mut pts {
        *x = scale * rng.standard_normal();
    }
    v.value_batch(&pts, count).into_iter().filter(|&val| val <= 0.0).count()
}
