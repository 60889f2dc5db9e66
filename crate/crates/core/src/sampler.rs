//! Rollout generation: first-order ODE/SDE stepping, a second-order multistep
//! ODE sampler, and hybrid rollouts that hand over from the trained policy to
//! a reference policy part-way through the schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{conversion, FlowError, PredictionKind, Predictor, ScheduleKind};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("time grid must be strictly decreasing: {from} -> {to}")]
    NonMonotone { from: f64, to: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    EulerOde,
    SdeFirstOrder,
    SecondOrderOde,
}

impl SamplerKind {
    pub fn is_stochastic(self) -> bool {
        matches!(self, SamplerKind::SdeFirstOrder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub t_max: f64,
    pub t_min: f64,
    /// SDE only: `sigma_i = noise_level * sqrt(h_i * t_i)`
    pub noise_level: f64,
    /// Fraction of steps run by the current policy in hybrid rollouts.
    pub p_mix: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::EulerOde,
            steps: 16,
            t_max: 1.0,
            t_min: 0.0,
            noise_level: 0.5,
            p_mix: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.t_min)
            || !(0.0..=1.0).contains(&self.t_max)
            || self.t_max <= self.t_min
        {
            return Err(SamplerError::Config(format!(
                "need 0 <= t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_mix) {
            return Err(SamplerError::Config(format!("p_mix {} outside [0, 1]", self.p_mix)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(SamplerError::Config("noise_level must be finite and >= 0".into()));
        }
        if self.kind.is_stochastic() && self.noise_level == 0.0 {
            log::warn!("SDE sampler with noise_level 0 behaves as the Euler ODE");
        }
        Ok(())
    }

    /// `steps + 1` times from `t_max` down to `t_min`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps;
        (0..=n)
            .map(|i| {
                if i == n {
                    self.t_min
                } else {
                    self.t_max - (self.t_max - self.t_min) * i as f64 / n as f64
                }
            })
            .collect()
    }

    /// Noise scale of step `i` (from `grid[i]` to `grid[i + 1]`); zero for ODEs.
    pub fn sigma(&self, grid: &[f64], i: usize) -> f64 {
        if !self.kind.is_stochastic() {
            return 0.0;
        }
        let h = grid[i] - grid[i + 1];
        self.noise_level * (h * grid[i]).sqrt()
    }

    /// Number of leading steps taken by the current policy.
    pub fn current_policy_steps(&self) -> usize {
        let k = (self.p_mix * self.steps as f64 - 1e-9).ceil();
        (k.max(0.0) as usize).min(self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub label: u32,
    pub seed: u64,
    pub initial_noise: Vec<f64>,
    /// `steps + 1` states, starting with the initial noise.
    pub states: Vec<Vec<f64>>,
    /// Injected noise per step; empty for ODE samplers.
    pub noises: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    pub nfe: usize,
}

fn head_as<P: Predictor + ?Sized>(
    policy: &P,
    to: PredictionKind,
    z: &Tensor,
    t: f64,
    labels: &[u32],
) -> Result<Tensor, SamplerError> {
    let n = z.rows();
    let out = policy.predict(z, &vec![t; n], labels)?;
    let (p, q) = conversion(policy.head(), to, t, &policy.schedule())?;
    if p == 0.0 && q == 1.0 {
        return Ok(out);
    }
    let data = z
        .data()
        .iter()
        .zip(out.data())
        .map(|(&zi, &oi)| p * zi + q * oi)
        .collect();
    Ok(Tensor::matrix(n, z.cols(), data))
}

/// Velocity `dz/dt` predicted at `(z, t)`.
pub fn velocity<P: Predictor + ?Sized>(
    policy: &P,
    z: &Tensor,
    t: f64,
    labels: &[u32],
) -> Result<Tensor, SamplerError> {
    head_as(policy, PredictionKind::V, z, t, labels)
}

pub fn x_prediction<P: Predictor + ?Sized>(
    policy: &P,
    z: &Tensor,
    t: f64,
    labels: &[u32],
) -> Result<Tensor, SamplerError> {
    head_as(policy, PredictionKind::X, z, t, labels)
}

/// Mean of the first-order transition: the Euler update `x - h * v`.
pub fn transition_mean<P: Predictor + ?Sized>(
    policy: &P,
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    labels: &[u32],
) -> Result<Tensor, SamplerError> {
    if !(t_to < t_from) {
        return Err(SamplerError::NonMonotone {
            from: t_from,
            to: t_to,
        });
    }
    let v = velocity(policy, x, t_from, labels)?;
    let h = t_from - t_to;
    let data = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&xi, &vi)| xi - h * vi)
        .collect();
    Ok(Tensor::matrix(x.rows(), x.cols(), data))
}

/// One first-order step `x_{t_to} = x - h v(x, t_from) + sigma * noise`.
pub fn sde_step<P: Predictor + ?Sized>(
    policy: &P,
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    noise: Option<&Tensor>,
    sigma: f64,
    labels: &[u32],
) -> Result<Tensor, SamplerError> {
    let mut out = transition_mean(policy, x, t_from, t_to, labels)?;
    if let Some(noise) = noise {
        if sigma != 0.0 {
            for (o, &e) in out.data_mut().iter_mut().zip(noise.data()) {
                *o += sigma * e;
            }
        }
    }
    Ok(out)
}

/// Previous x-prediction kept by the multistep sampler.
#[derive(Clone, Debug)]
pub struct History {
    pub t: f64,
    pub x_pred: Tensor,
}

/// One step of the second-order multistep ODE sampler.
///
/// The x-prediction is extrapolated linearly in time through the current and
/// previous grid points and the rectified-flow ODE `dz/dt = (z - x_hat) / t`
/// is integrated exactly under that extrapolation:
///
/// `z_s = (s/t) z_t + (1 - s/t) x_t + k s (ln(t/s) - t/s + 1)`,
/// `k = (x_t - x_prev) / (t - t_prev)`.
///
/// Without history the step is a plain Euler step. Returns the new state and
/// the x-prediction to carry forward.
pub fn second_order_step<P: Predictor + ?Sized>(
    policy: &P,
    history: Option<&History>,
    x: &Tensor,
    t_from: f64,
    t_to: f64,
    labels: &[u32],
) -> Result<(Tensor, History), SamplerError> {
    if !(t_to < t_from) {
        return Err(SamplerError::NonMonotone {
            from: t_from,
            to: t_to,
        });
    }
    let ScheduleKind::RectifiedFlow = policy.schedule().kind;
    let x_pred = x_prediction(policy, x, t_from, labels)?;
    let Some(prev) = history else {
        let next = sde_step(policy, x, t_from, t_to, None, 0.0, labels)?;
        return Ok((
            next,
            History {
                t: t_from,
                x_pred,
            },
        ));
    };
    let (t, s) = (t_from, t_to);
    let ratio = s / t;
    let corr = if s == 0.0 {
        -t
    } else {
        s * ((t / s).ln() - t / s + 1.0)
    };
    let dt = t - prev.t;
    let data = x
        .data()
        .iter()
        .zip(x_pred.data())
        .zip(prev.x_pred.data())
        .map(|((&z, &xc), &xp)| {
            let k = (xc - xp) / dt;
            ratio * z + (1.0 - ratio) * xc + k * corr
        })
        .collect();
    Ok((
        Tensor::matrix(x.rows(), x.cols(), data),
        History {
            t: t_from,
            x_pred,
        },
    ))
}

fn check_pair<P: Predictor + ?Sized, Q: Predictor + ?Sized>(
    a: &P,
    b: &Q,
) -> Result<(), SamplerError> {
    if a.dim() != b.dim() || a.schedule() != b.schedule() {
        return Err(SamplerError::Config(format!(
            "policies disagree on dim/schedule ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Rollouts of `policy` for each `(label, seed)`. Noise is drawn per record
/// from its own seed, so a record does not depend on the rest of the batch.
pub fn sample_batch<P: Predictor + ?Sized>(
    policy: &P,
    labels: &[u32],
    seeds: &[u64],
    config: &SamplerConfig,
) -> Result<Vec<RolloutRecord>, SamplerError> {
    mixed_policy_sample_batch(policy, policy, labels, seeds, &SamplerConfig { p_mix: 1.0, ..*config })
}

pub fn sample<P: Predictor + ?Sized>(
    policy: &P,
    label: u32,
    config: &SamplerConfig,
    seed: u64,
) -> Result<RolloutRecord, SamplerError> {
    Ok(sample_batch(policy, &[label], &[seed], config)?.remove(0))
}

/// Hybrid rollouts: the first `ceil(p_mix * steps)` steps use `current`,
/// the rest use `reference`.
pub fn mixed_policy_sample_batch<P: Predictor + ?Sized, Q: Predictor + ?Sized>(
    current: &P,
    reference: &Q,
    labels: &[u32],
    seeds: &[u64],
    config: &SamplerConfig,
) -> Result<Vec<RolloutRecord>, SamplerError> {
    config.validate()?;
    check_pair(current, reference)?;
    assert_eq!(labels.len(), seeds.len());
    let n = labels.len();
    let d = current.dim();
    let grid = config.grid();
    let switch = config.current_policy_steps();
    let stochastic = config.kind.is_stochastic();

    let mut rngs: Vec<_> = seeds.iter().map(|&s| seed::rng(s)).collect();
    let mut x0 = Vec::with_capacity(n * d);
    for rng in &mut rngs {
        for _ in 0..d {
            x0.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    let mut x = Tensor::matrix(n, d, x0);
    let mut states: Vec<Vec<Vec<f64>>> = (0..n).map(|i| vec![x.row(i).to_vec()]).collect();
    let mut noises: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    let mut history: Option<History> = None;

    for i in 0..config.steps {
        let (t_from, t_to) = (grid[i], grid[i + 1]);
        let use_current = i < switch;
        x = match config.kind {
            SamplerKind::EulerOde => {
                if use_current {
                    sde_step(current, &x, t_from, t_to, None, 0.0, labels)?
                } else {
                    sde_step(reference, &x, t_from, t_to, None, 0.0, labels)?
                }
            }
            SamplerKind::SdeFirstOrder => {
                let mut eps = Vec::with_capacity(n * d);
                for (r, rng) in rngs.iter_mut().enumerate() {
                    let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    eps.extend_from_slice(&row);
                    noises[r].push(row);
                }
                let eps = Tensor::matrix(n, d, eps);
                let sigma = config.sigma(&grid, i);
                if use_current {
                    sde_step(current, &x, t_from, t_to, Some(&eps), sigma, labels)?
                } else {
                    sde_step(reference, &x, t_from, t_to, Some(&eps), sigma, labels)?
                }
            }
            SamplerKind::SecondOrderOde => {
                let (next, h) = if use_current {
                    second_order_step(current, history.as_ref(), &x, t_from, t_to, labels)?
                } else {
                    second_order_step(reference, history.as_ref(), &x, t_from, t_to, labels)?
                };
                history = Some(h);
                next
            }
        };
        for (r, st) in states.iter_mut().enumerate() {
            st.push(x.row(r).to_vec());
        }
    }
    debug_assert!(stochastic || noises.iter().all(Vec::is_empty));

    Ok(states
        .into_iter()
        .zip(noises)
        .enumerate()
        .map(|(r, (states, noises))| RolloutRecord {
            label: labels[r],
            seed: seeds[r],
            initial_noise: states[0].clone(),
            output: states.last().unwrap().clone(),
            states,
            noises,
            nfe: config.steps,
        })
        .collect())
}

pub fn mixed_policy_sample<P: Predictor + ?Sized, Q: Predictor + ?Sized>(
    current: &P,
    reference: &Q,
    label: u32,
    config: &SamplerConfig,
    seed: u64,
) -> Result<RolloutRecord, SamplerError> {
    Ok(mixed_policy_sample_batch(current, reference, &[label], &[seed], config)?.remove(0))
}
