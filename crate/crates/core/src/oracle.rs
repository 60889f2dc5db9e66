//! Ground truth for the rest of the crate: finite differences, straight-line
//! re-evaluation of the network and losses, closed forms for a Gaussian data
//! distribution under rectified flow, and exact per-step log-densities.
//!
//! Nothing here calls the tape, the batched predictor helpers or the sampler
//! step functions it is used to check.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::flow::{Denoiser, FlowError, PredictionKind, Predictor, Schedule};
use crate::sampler::{RolloutRecord, SamplerConfig, SamplerKind};
use crate::tensor::{Activation, MlpParams, Tensor};

/// Central differences of `f` at `x`.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let hi = f(&p);
            p[i] = orig - step;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub fn flatten(params: &MlpParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|t| t.data().to_vec()).collect()
}

pub fn unflatten(params: &mut MlpParams, flat: &[f64]) {
    let mut k = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[k..k + n]);
        k += n;
    }
    assert_eq!(k, flat.len(), "flat parameter length");
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

/// MLP output for one input vector, by explicit loops over the weights.
pub fn reference_mlp(params: &MlpParams, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let (fan_in, fan_out) = (layer.weight.rows(), layer.weight.cols());
        assert_eq!(h.len(), fan_in);
        let w = layer.weight.data();
        let mut next = vec![0.0; fan_out];
        for (j, n) in next.iter_mut().enumerate() {
            let mut acc = layer.bias.data()[j];
            for (i, &hi) in h.iter().enumerate() {
                acc += hi * w[i * fan_out + j];
            }
            *n = if l == last { acc } else { act(params.activation, acc) };
        }
        h = next;
    }
    h
}

/// Head output of `den` at one point, rebuilding the embedding by hand.
pub fn reference_denoiser(den: &Denoiser, z: &[f64], t: f64, label: u32) -> Vec<f64> {
    let e = &den.embedding;
    let mut input = z.to_vec();
    let pi = std::f64::consts::PI;
    for k in 0..e.time_freqs {
        let f = pi * 2f64.powi(k as i32);
        input.push((f * t).sin());
        input.push((f * t).cos());
    }
    let u = (label as f64 + 0.5) / e.num_labels.max(1) as f64;
    for k in 0..e.cond_freqs {
        let f = 2.0 * pi * 2f64.powi(k as i32);
        input.push((f * u).sin());
        input.push((f * u).cos());
    }
    reference_mlp(&den.params, &input)
}

/// Rectified-flow x-prediction from a head output.
pub fn rf_x_from_head(head: PredictionKind, out: &[f64], z: &[f64], t: f64) -> Vec<f64> {
    match head {
        PredictionKind::X => out.to_vec(),
        PredictionKind::Eps => z.iter().zip(out).map(|(zi, e)| (zi - t * e) / (1.0 - t)).collect(),
        PredictionKind::V => z.iter().zip(out).map(|(zi, v)| zi - t * v).collect(),
    }
}

/// Rectified-flow velocity from a head output.
pub fn rf_v_from_head(head: PredictionKind, out: &[f64], z: &[f64], t: f64) -> Vec<f64> {
    match head {
        PredictionKind::V => out.to_vec(),
        PredictionKind::X => z.iter().zip(out).map(|(zi, x)| (zi - x) / t).collect(),
        PredictionKind::Eps => z.iter().zip(out).map(|(zi, e)| (e - zi) / (1.0 - t)).collect(),
    }
}

/// Rectified-flow regression target for a head.
pub fn rf_target(head: PredictionKind, x: &[f64], eps: &[f64]) -> Vec<f64> {
    match head {
        PredictionKind::X => x.to_vec(),
        PredictionKind::Eps => eps.to_vec(),
        PredictionKind::V => eps.iter().zip(x).map(|(e, xi)| e - xi).collect(),
    }
}

fn rf_z(x: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(eps).map(|(xi, e)| (1.0 - t) * xi + t * e).collect()
}

/// `w || NN(z_t) - r_t ||^2` for one sample with an explicit weight.
pub fn reference_regression_loss(den: &Denoiser, x: &[f64], eps: &[f64], t: f64, label: u32, w: f64) -> f64 {
    let z = rf_z(x, eps, t);
    let out = reference_denoiser(den, &z, t, label);
    let r = rf_target(den.head, x, eps);
    w * out.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// `|| x(z_t) - o ||^2 / scale`, with `scale` the detached mean absolute
/// residual when `None`.
pub fn reference_adaptive_loss(
    den: &Denoiser,
    o: &[f64],
    eps: &[f64],
    t: f64,
    label: u32,
    scale: Option<f64>,
) -> f64 {
    let z = rf_z(o, eps, t);
    let out = reference_denoiser(den, &z, t, label);
    let x = rf_x_from_head(den.head, &out, &z, t);
    let r: Vec<f64> = x.iter().zip(o).map(|(a, b)| a - b).collect();
    let s = scale.unwrap_or_else(|| r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64);
    if s == 0.0 {
        return 0.0;
    }
    r.iter().map(|v| v * v).sum::<f64>() / s
}

/// Mean absolute x-residual, the adaptive scale.
pub fn reference_adaptive_scale(den: &Denoiser, o: &[f64], eps: &[f64], t: f64, label: u32) -> f64 {
    let z = rf_z(o, eps, t);
    let out = reference_denoiser(den, &z, t, label);
    let x = rf_x_from_head(den.head, &out, &z, t);
    x.iter().zip(o).map(|(a, b)| (a - b).abs()).sum::<f64>() / o.len() as f64
}

/// Squared x-prediction difference between two parameter sets at `z_t`.
pub fn reference_kl_term(new: &Denoiser, old: &Denoiser, o: &[f64], eps: &[f64], t: f64, label: u32) -> f64 {
    let z = rf_z(o, eps, t);
    let a = rf_x_from_head(new.head, &reference_denoiser(new, &z, t, label), &z, t);
    let b = rf_x_from_head(old.head, &reference_denoiser(old, &z, t, label), &z, t);
    a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Data distribution `N(mu, diag(sigma0^2))` pushed through rectified flow
/// with a standard normal prior.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianProblem {
    pub mu: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl GaussianProblem {
    pub fn new(mu: Vec<f64>, sigma0: Vec<f64>) -> Self {
        assert_eq!(mu.len(), sigma0.len());
        assert!(sigma0.iter().all(|&s| s >= 0.0));
        Self { mu, sigma0 }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Variance of coordinate `i` of `z_t`.
    pub fn marginal_var(&self, i: usize, t: f64) -> f64 {
        let a = 1.0 - t;
        a * a * self.sigma0[i] * self.sigma0[i] + t * t
    }

    /// `(E[x | z_t], E[eps | z_t])`.
    pub fn posterior_means(&self, z: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let a = 1.0 - t;
        let mut ex = Vec::with_capacity(z.len());
        let mut ee = Vec::with_capacity(z.len());
        for i in 0..z.len() {
            let v = self.marginal_var(i, t);
            let dev = z[i] - a * self.mu[i];
            let s2 = self.sigma0[i] * self.sigma0[i];
            ex.push(self.mu[i] + a * s2 / v * dev);
            ee.push(t / v * dev);
        }
        (ex, ee)
    }

    /// `E[eps - x | z_t]` on the open interval.
    pub fn optimal_field(&self, z: &[f64], t: f64) -> Result<Vec<f64>, FlowError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(FlowError::Singular {
                what: "optimal field at an endpoint",
                t,
            });
        }
        Ok(self.field_unchecked(z, t))
    }

    fn field_unchecked(&self, z: &[f64], t: f64) -> Vec<f64> {
        let (ex, ee) = self.posterior_means(z, t);
        ee.iter().zip(&ex).map(|(e, x)| e - x).collect()
    }

    /// `Var(eps - x | z_t)` summed over coordinates.
    pub fn velocity_posterior_var(&self, t: f64) -> f64 {
        (0..self.dim())
            .map(|i| {
                let s2 = self.sigma0[i] * self.sigma0[i];
                let c = t - (1.0 - t) * s2;
                1.0 + s2 - c * c / self.marginal_var(i, t)
            })
            .sum()
    }

    /// Uniform-weight velocity loss of the optimal field, integrated over
    /// `t ~ U(0, 1)` by composite Simpson.
    pub fn pretrain_floor(&self) -> f64 {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut acc = self.velocity_posterior_var(0.0) + self.velocity_posterior_var(1.0);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * self.velocity_posterior_var(k as f64 * h);
        }
        acc * h / 3.0
    }

    /// `E_eps || v*(z_t) - (eps - o) ||^2` for a fixed output `o`.
    pub fn expected_v_residual(&self, o: &[f64], t: f64) -> f64 {
        (0..self.dim())
            .map(|i| {
                let v = self.marginal_var(i, t);
                let s2 = self.sigma0[i] * self.sigma0[i];
                let c = (t - (1.0 - t) * s2) / v;
                let m = (o[i] - self.mu[i]) * (1.0 + c * (1.0 - t));
                m * m + (c * t - 1.0) * (c * t - 1.0)
            })
            .sum()
    }

    pub fn exact_logpdf(&self, o: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        o.iter()
            .zip(&self.mu)
            .zip(&self.sigma0)
            .map(|((x, m), s)| {
                let u = (x - m) / s;
                -0.5 * ln2pi - s.ln() - 0.5 * u * u
            })
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma0)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Exact probability-flow state at time `t` starting from prior noise `z1`.
    pub fn transport(&self, z1: &[f64], t: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (1.0 - t) * self.mu[i] + self.marginal_var(i, t).sqrt() * z1[i])
            .collect()
    }
}

/// The closed-form optimal field as a velocity-head predictor.
#[derive(Clone, Debug)]
pub struct AnalyticDenoiser {
    pub problem: GaussianProblem,
}

impl Predictor for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn schedule(&self) -> Schedule {
        Schedule::rectified_flow()
    }

    fn head(&self) -> PredictionKind {
        PredictionKind::V
    }

    fn predict(&self, z: &Tensor, t: &[f64], _labels: &[u32]) -> Result<Tensor, FlowError> {
        let mut out = Vec::with_capacity(z.len());
        for i in 0..z.rows() {
            out.extend(self.problem.field_unchecked(z.row(i), t[i]));
        }
        Ok(Tensor::matrix(z.rows(), z.cols(), out))
    }
}

/// Velocity `rate * z + offset`.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub rate: f64,
    pub offset: Vec<f64>,
}

impl Predictor for LinearField {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn schedule(&self) -> Schedule {
        Schedule::rectified_flow()
    }

    fn head(&self) -> PredictionKind {
        PredictionKind::V
    }

    fn predict(&self, z: &Tensor, _t: &[f64], _labels: &[u32]) -> Result<Tensor, FlowError> {
        let d = z.cols();
        let data = z
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| self.rate * v + self.offset[k % d])
            .collect();
        Ok(Tensor::matrix(z.rows(), d, data))
    }
}

/// x-head predictor `alpha + beta t`, independent of `z`.
#[derive(Clone, Debug)]
pub struct TimeLinearX {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Predictor for TimeLinearX {
    fn dim(&self) -> usize {
        self.alpha.len()
    }

    fn schedule(&self) -> Schedule {
        Schedule::rectified_flow()
    }

    fn head(&self) -> PredictionKind {
        PredictionKind::X
    }

    fn predict(&self, z: &Tensor, t: &[f64], _labels: &[u32]) -> Result<Tensor, FlowError> {
        let mut out = Vec::with_capacity(z.len());
        for &ti in t {
            out.extend(self.alpha.iter().zip(&self.beta).map(|(a, b)| a + b * ti));
        }
        Ok(Tensor::matrix(z.rows(), z.cols(), out))
    }
}

impl TimeLinearX {
    /// Exact solution of `dz/dt = (z - alpha - beta t) / t` from `z(1) = z1`:
    /// `z(t) = alpha + t (z1 - alpha - beta ln t)`.
    pub fn solution(&self, z1: &[f64], t: f64) -> Vec<f64> {
        (0..self.alpha.len())
            .map(|i| {
                let lnt = if t == 0.0 { 0.0 } else { t * t.ln() };
                self.alpha[i] + t * (z1[i] - self.alpha[i]) - self.beta[i] * lnt
            })
            .collect()
    }
}

/// Solution of `dx/dt = a x + b` from `x(t0) = x0`, evaluated at `t1`.
pub fn analytic_ode_solution(a: f64, b: &[f64], x0: &[f64], t0: f64, t1: f64) -> Vec<f64> {
    let dt = t1 - t0;
    x0.iter()
        .zip(b)
        .map(|(&x, &bi)| {
            if a == 0.0 {
                x + bi * dt
            } else {
                (a * dt).exp() * (x + bi / a) - bi / a
            }
        })
        .collect()
}

/// `sum_i log N(x_{i+1}; x_i - h_i v(x_i, t_i), sigma_i^2 I)` over a stored
/// SDE rollout, with the rectified-flow Euler mean and
/// `sigma_i = noise_level sqrt(h_i t_i)`.
pub fn mdp_joint_logprob<P: Predictor + ?Sized>(
    policy: &P,
    rollout: &RolloutRecord,
    cfg: &SamplerConfig,
) -> Result<f64, FlowError> {
    if cfg.kind != SamplerKind::SdeFirstOrder || cfg.noise_level == 0.0 {
        return Err(FlowError::Singular {
            what: "per-step density of a deterministic sampler",
            t: cfg.t_max,
        });
    }
    let n = cfg.steps;
    let d = rollout.output.len();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for i in 0..n {
        let t = cfg.t_max - (cfg.t_max - cfg.t_min) * i as f64 / n as f64;
        let s = if i + 1 == n {
            cfg.t_min
        } else {
            cfg.t_max - (cfg.t_max - cfg.t_min) * (i + 1) as f64 / n as f64
        };
        let h = t - s;
        let sigma = cfg.noise_level * (h * t).sqrt();
        let x = &rollout.states[i];
        let out = policy.predict(&Tensor::matrix(1, d, x.clone()), &[t], &[rollout.label])?;
        let v = rf_v_from_head(policy.head(), out.data(), x, t);
        let se: f64 = (0..d)
            .map(|k| {
                let r = rollout.states[i + 1][k] - (x[k] - h * v[k]);
                r * r
            })
            .sum();
        total += -0.5 * d as f64 * (ln2pi + 2.0 * sigma.ln()) - se / (2.0 * sigma * sigma);
    }
    Ok(total)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            let avg = (k + e) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=e] {
                r[i] = avg;
            }
            k = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}
