//! Group-relative policy optimization over whole rollouts (surrogate ratio)
//! and over individual sampler transitions (per-step Gaussian ratio).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::flow::{affine_rows, conversion, interior_grid, Denoiser, FlowError, PredictionKind, Predictor};
use crate::rewards::{self, ConditionSpace, RewardError, RewardSpec};
use crate::sampler::{self, RolloutRecord, SamplerConfig, SamplerError, SamplerKind};
use crate::seed::{self, stream};
use crate::surrogate::{
    self, SharedPairs, StoredOldSurrogate, SurrogateConfig, SurrogateError, RATIO_MAX, RATIO_MIN,
};
use crate::tensor::{adamw_step, AdamWConfig, AdamWState, ParamGrads, Tape, Tensor, TensorError, Var};

/// Floor on the group standard deviation in the advantage denominator.
pub const ADV_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl GrpoError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            GrpoError::NonFinite(_)
                | GrpoError::Surrogate(SurrogateError::NonFinite(_))
                | GrpoError::Tensor(TensorError::NonFiniteGradient(_))
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Normalize each reward function within the group, then average.
    #[default]
    AdvThenAvg,
    /// Average raw rewards, then normalize once.
    AvgThenAdv,
}

fn normalize_group(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(ADV_EPS);
    r.iter().map(|v| (v - mean) / denom).collect()
}

/// Group-normalized advantages from per-function rewards (`rewards[k][i]` is
/// function `k` on member `i`), combined with `weights`.
pub fn group_advantages(
    rewards: &[Vec<f64>],
    weights: &[f64],
    mode: Aggregation,
) -> Result<Vec<f64>, GrpoError> {
    let Some(first) = rewards.first() else {
        return Err(GrpoError::Config("no reward functions".into()));
    };
    let g = first.len();
    if g < 2 {
        return Err(GrpoError::Config(format!("group size {g} < 2")));
    }
    if rewards.iter().any(|r| r.len() != g) || weights.len() != rewards.len() {
        return Err(GrpoError::Config("ragged rewards or weights".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(GrpoError::Config("reward weights must sum to a positive value".into()));
    }
    Ok(match mode {
        Aggregation::AdvThenAvg => {
            let mut out = vec![0.0; g];
            for (r, &w) in rewards.iter().zip(weights) {
                for (o, a) in out.iter_mut().zip(normalize_group(r)) {
                    *o += w * a / wsum;
                }
            }
            out
        }
        Aggregation::AvgThenAdv => {
            let avg: Vec<f64> = (0..g)
                .map(|i| rewards.iter().zip(weights).map(|(r, w)| w * r[i]).sum::<f64>() / wsum)
                .collect();
            normalize_group(&avg)
        }
    })
}

/// `eta * tanh(a / eta)`.
pub fn soft_clip(a: f64, eta: f64) -> Result<f64, GrpoError> {
    if !(eta > 0.0) {
        return Err(GrpoError::Config(format!("soft-clip range {eta} must be positive")));
    }
    Ok(eta * (a / eta).tanh())
}

/// `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
pub fn grpo_objective(rho: f64, a: f64, eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    (rho * a).min(clipped * a)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regulation {
    #[default]
    RatioClip,
    KlPenalty,
    AdvSoftClip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Whole-rollout ratio from the regression-loss surrogate.
    #[default]
    Vgrpo,
    /// Per-transition Gaussian ratios of an SDE sampler.
    Mdp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    /// Drop the gradient step and keep going.
    #[default]
    Skip,
    Abort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Outer iterations `M`.
    pub iterations: usize,
    /// Gradient steps per iteration `N`, each on its own sub-batch.
    pub grad_steps: usize,
    /// Prompts per gradient step.
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub preset: Regulation,
    /// Ratio clip range; `<= 0` disables clipping.
    pub clip_eps: Option<f64>,
    pub kl_beta: Option<f64>,
    /// Advantage soft-clip range; `0` disables it.
    pub soft_clip_eta: Option<f64>,
    pub aggregation: Aggregation,
    /// Transitions optimized per rollout by the per-step baseline; all when unset.
    pub mdp_timesteps: Option<usize>,
    pub nan_policy: NanPolicy,
    pub sampler: SamplerConfig,
    pub surrogate: SurrogateConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Vgrpo,
            iterations: 100,
            grad_steps: 2,
            prompts_per_batch: 4,
            group_size: 12,
            preset: Regulation::RatioClip,
            clip_eps: None,
            kl_beta: None,
            soft_clip_eta: None,
            aggregation: Aggregation::AdvThenAvg,
            mdp_timesteps: None,
            nan_policy: NanPolicy::Skip,
            sampler: SamplerConfig::default(),
            surrogate: SurrogateConfig::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Effective regulation after applying the preset and overrides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resolved {
    /// `None` when ratio clipping is off.
    pub clip_eps: Option<f64>,
    pub beta: f64,
    pub eta: Option<f64>,
}

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const DEFAULT_KL_BETA: f64 = 0.1;
pub const DEFAULT_ETA: f64 = 1.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<Resolved, GrpoError> {
        if self.grad_steps == 0 {
            return Err(GrpoError::Config("grad_steps must be at least 1".into()));
        }
        if self.group_size < 2 {
            return Err(GrpoError::Config("group_size must be at least 2".into()));
        }
        if self.prompts_per_batch == 0 {
            return Err(GrpoError::Config("prompts_per_batch must be at least 1".into()));
        }
        self.sampler.validate()?;
        self.surrogate.validate()?;
        if self.algorithm == Algorithm::Mdp && self.sampler.kind != SamplerKind::SdeFirstOrder {
            return Err(GrpoError::Config(
                "the per-step baseline needs sde_first_order rollouts".into(),
            ));
        }
        if self.algorithm == Algorithm::Mdp && self.sampler.noise_level <= 0.0 {
            return Err(GrpoError::Config("the per-step baseline needs noise_level > 0".into()));
        }
        if let Some(k) = self.mdp_timesteps {
            if k == 0 || k > self.sampler.steps {
                return Err(GrpoError::Config(format!(
                    "mdp_timesteps {k} outside 1..={}",
                    self.sampler.steps
                )));
            }
        }
        self.resolve()
    }

    pub fn resolve(&self) -> Result<Resolved, GrpoError> {
        let clip = |v: Option<f64>, default: Option<f64>| match v {
            Some(e) if e > 0.0 => Some(e),
            Some(_) => None,
            None => default,
        };
        let beta = |v: Option<f64>, default: f64| -> Result<f64, GrpoError> {
            let b = v.unwrap_or(default);
            if !(b >= 0.0 && b.is_finite()) {
                return Err(GrpoError::Config(format!("kl_beta {b} must be finite and >= 0")));
            }
            Ok(b)
        };
        let eta = |v: Option<f64>| match v {
            Some(e) if e > 0.0 => Some(e),
            _ => None,
        };
        let r = match self.preset {
            Regulation::RatioClip => Resolved {
                clip_eps: clip(self.clip_eps, Some(DEFAULT_CLIP_EPS)),
                beta: beta(self.kl_beta, 0.0)?,
                eta: eta(self.soft_clip_eta),
            },
            Regulation::KlPenalty => {
                let b = beta(self.kl_beta, DEFAULT_KL_BETA)?;
                if b <= 0.0 {
                    return Err(GrpoError::Config("kl_penalty preset needs kl_beta > 0".into()));
                }
                Resolved {
                    clip_eps: clip(self.clip_eps, None),
                    beta: b,
                    eta: eta(self.soft_clip_eta),
                }
            }
            Regulation::AdvSoftClip => {
                let e = self.soft_clip_eta.unwrap_or(DEFAULT_ETA);
                if !(e > 0.0) {
                    return Err(GrpoError::Config(format!(
                        "adv_soft_clip preset needs soft_clip_eta > 0, got {e}"
                    )));
                }
                Resolved {
                    clip_eps: clip(self.clip_eps, None),
                    beta: beta(self.kl_beta, 0.0)?,
                    eta: Some(e),
                }
            }
        };
        let enabled = r.clip_eps.is_some() as u8 + (r.beta > 0.0) as u8 + r.eta.is_some() as u8;
        if enabled > 1 {
            log::warn!("preset {:?} resolved to a mixed regulation {r:?}", self.preset);
        }
        Ok(r)
    }

    pub fn pool_size(&self) -> usize {
        self.grad_steps * self.prompts_per_batch
    }
}

/// One prompt's rollouts and everything derived from them at the start of an
/// iteration.
#[derive(Clone, Debug)]
pub struct GroupBatch {
    pub prompt: usize,
    pub label: u32,
    pub rollouts: Vec<RolloutRecord>,
    /// Raw rewards per function: `rewards[k][i]`.
    pub rewards: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    /// Advantages actually used by the objective (soft-clipped when enabled).
    pub used_advantages: Vec<f64>,
    /// Pair set of each member; one shared allocation when pairs are shared.
    pub pairs: Vec<SharedPairs>,
    pub old: Option<StoredOldSurrogate>,
    pub mdp_old: Option<MdpOld>,
    pub floored: usize,
}

impl GroupBatch {
    pub fn outputs(&self) -> Tensor {
        Tensor::from_rows(&self.rollouts.iter().map(|r| r.output.clone()).collect::<Vec<_>>())
    }

    pub fn labels(&self) -> Vec<u32> {
        vec![self.label; self.rollouts.len()]
    }

    /// Every member holds the very same pair set.
    pub fn shares_pairs(&self) -> bool {
        self.pairs.windows(2).all(|w| Arc::ptr_eq(&w[0], &w[1]))
    }
}

/// Old-policy transition data for the per-step baseline.
#[derive(Clone, Debug)]
pub struct MdpOld {
    /// Selected step indices, shared by the group members.
    pub steps: Vec<usize>,
    pub rows: MdpRows,
    /// `|| x_next - mu_old ||^2 / (2 sigma^2)` per row.
    pub neg_logp_core: Vec<f64>,
    pub mu_old: Tensor,
}

/// Member-major rows `(member, selected step)`.
#[derive(Clone, Debug)]
pub struct MdpRows {
    pub x: Tensor,
    pub x_next: Tensor,
    pub t: Vec<f64>,
    pub h: Vec<f64>,
    pub sigma: Vec<f64>,
    pub labels: Vec<u32>,
    pub k: usize,
}

fn mdp_rows(
    rollouts: &[RolloutRecord],
    label: u32,
    steps: &[usize],
    cfg: &SamplerConfig,
) -> MdpRows {
    let grid = cfg.grid();
    let d = rollouts[0].output.len();
    let (mut x, mut xn) = (Vec::new(), Vec::new());
    let (mut t, mut h, mut sigma, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in rollouts {
        for &i in steps {
            x.extend_from_slice(&r.states[i]);
            xn.extend_from_slice(&r.states[i + 1]);
            t.push(grid[i]);
            h.push(grid[i] - grid[i + 1]);
            sigma.push(cfg.sigma(&grid, i));
            labels.push(label);
        }
    }
    let n = t.len();
    MdpRows {
        x: Tensor::matrix(n, d, x),
        x_next: Tensor::matrix(n, d, xn),
        t,
        h,
        sigma,
        labels,
        k: steps.len(),
    }
}

/// Per-row `(p, q)` with transition mean `p x + q NN(x)`.
fn mean_coeffs<P: Predictor + ?Sized>(den: &P, rows: &MdpRows) -> Result<Vec<(f64, f64)>, FlowError> {
    rows.t
        .iter()
        .zip(&rows.h)
        .map(|(&t, &h)| {
            let (p, q) = conversion(den.head(), PredictionKind::V, t, &den.schedule())?;
            Ok((1.0 - h * p, -h * q))
        })
        .collect()
}

/// Transition means of `rows` under `den`, without a tape.
pub fn transition_means<P: Predictor + ?Sized>(den: &P, rows: &MdpRows) -> Result<Tensor, GrpoError> {
    let out = den.predict(&rows.x, &rows.t, &rows.labels)?;
    let c = mean_coeffs(den, rows)?;
    let d = rows.x.cols();
    let data = rows
        .x
        .data()
        .iter()
        .zip(out.data())
        .enumerate()
        .map(|(k, (&x, &o))| c[k / d].0 * x + c[k / d].1 * o)
        .collect();
    Ok(Tensor::matrix(rows.x.rows(), d, data))
}

/// `log N(x_next; mu, sigma^2 I)` of every transition of a rollout under `den`.
pub fn transition_logprobs<P: Predictor + ?Sized>(
    den: &P,
    rollout: &RolloutRecord,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>, GrpoError> {
    let steps: Vec<usize> = (0..cfg.steps).collect();
    let rows = mdp_rows(std::slice::from_ref(rollout), rollout.label, &steps, cfg);
    let mu = transition_means(den, &rows)?;
    let d = rows.x.cols() as f64;
    (0..rows.t.len())
        .map(|k| {
            let s2 = rows.sigma[k] * rows.sigma[k];
            if s2 == 0.0 {
                return Err(GrpoError::Config(format!("zero noise at step {k}")));
            }
            let se: f64 = rows
                .x_next
                .row(k)
                .iter()
                .zip(mu.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(-0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() - se / (2.0 * s2))
        })
        .collect()
}

/// Inputs of one iteration beyond the policy itself.
pub struct IterationContext<'a> {
    pub config: &'a TrainConfig,
    pub conditions: &'a ConditionSpace,
    pub reward: &'a RewardSpec,
    /// Policy finishing hybrid rollouts when `p_mix < 1`.
    pub reference: Option<&'a Denoiser>,
    pub global_seed: u64,
    pub iteration: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub max_ratio_dev: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupSummary {
    pub label: u32,
    pub rewards: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub old_surrogate: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationReport {
    pub groups: Vec<GroupSummary>,
    pub steps: Vec<StepStats>,
    /// Network evaluations per output attributed to the old policy
    /// (rollout plus old likelihood terms) and to the updated policy.
    pub nfe_old: usize,
    pub nfe_new: usize,
    pub degenerate: usize,
    pub floored: usize,
    pub incidents: Vec<String>,
}

fn prompt_labels(ctx: &IterationContext) -> Vec<u32> {
    let mut rng = seed::derived_rng(ctx.global_seed, &[stream::PROMPTS, ctx.iteration]);
    (0..ctx.config.pool_size())
        .map(|_| rng.gen_range(0..ctx.conditions.num_labels))
        .collect()
}

/// Rollouts, rewards and advantages of every prompt in the pool.
pub fn collect_groups(den: &Denoiser, ctx: &IterationContext) -> Result<Vec<GroupBatch>, GrpoError> {
    let cfg = ctx.config;
    let reg = cfg.resolve()?;
    let labels = prompt_labels(ctx);
    let g = cfg.group_size;
    let d = den.dim;
    let grid = interior_grid(cfg.surrogate.grid_steps);
    let weights = ctx.reward.weights();
    if cfg.sampler.current_policy_steps() < cfg.sampler.steps && ctx.reference.is_none() {
        return Err(GrpoError::Config("p_mix < 1 needs a reference policy".into()));
    }
    let groups = exec::map_ordered(&labels, |p, &label| -> Result<GroupBatch, GrpoError> {
        let seeds: Vec<u64> = (0..g as u64)
            .map(|m| seed::derive(ctx.global_seed, &[stream::ROLLOUT, ctx.iteration, p as u64, m]))
            .collect();
        let member_labels = vec![label; g];
        let rollouts = match ctx.reference {
            Some(r) => sampler::mixed_policy_sample_batch(den, r, &member_labels, &seeds, &cfg.sampler)?,
            None => sampler::sample_batch(den, &member_labels, &seeds, &cfg.sampler)?,
        };
        let cond = ctx.conditions.condition(label, d)?;
        let nk = ctx.reward.terms.len();
        let mut raw = vec![Vec::with_capacity(g); nk];
        let mut norm = vec![Vec::with_capacity(g); nk];
        let mut floored = 0;
        for r in &rollouts {
            let v = rewards::evaluate(&r.output, &cond, ctx.reward);
            floored += v.floored as usize;
            let n = rewards::normalize(&v.values, ctx.reward)?;
            for k in 0..nk {
                raw[k].push(v.values[k]);
                norm[k].push(n[k]);
            }
        }
        let advantages = group_advantages(&norm, &weights, cfg.aggregation)?;
        let used_advantages = match reg.eta {
            Some(eta) => advantages.iter().map(|&a| soft_clip(a, eta)).collect::<Result<_, _>>()?,
            None => advantages.clone(),
        };
        let pairs = if cfg.surrogate.shared {
            let s = seed::derive(ctx.global_seed, &[stream::PAIRS, ctx.iteration, p as u64]);
            let mut set = cfg.surrogate.draw(&grid, d, s)?;
            set.iteration = ctx.iteration;
            set.prompt = p as u64;
            vec![Arc::new(set); g]
        } else {
            (0..g as u64)
                .map(|m| {
                    let s = seed::derive(ctx.global_seed, &[stream::PAIRS, ctx.iteration, p as u64, m + 1]);
                    let mut set = cfg.surrogate.draw(&grid, d, s)?;
                    set.iteration = ctx.iteration;
                    set.prompt = p as u64;
                    Ok(Arc::new(set))
                })
                .collect::<Result<_, SurrogateError>>()?
        };
        Ok(GroupBatch {
            prompt: p,
            label,
            rollouts,
            rewards: raw,
            advantages,
            used_advantages,
            pairs,
            old: None,
            mdp_old: None,
            floored,
        })
    });
    groups.into_iter().collect()
}

/// Stores the old-policy surrogate of every group.
pub fn store_old_surrogates(
    den: &Denoiser,
    groups: &mut [GroupBatch],
    cfg: &SurrogateConfig,
) -> Result<usize, GrpoError> {
    let evals = exec::map_ordered(groups, |_, gb| -> Result<(StoredOldSurrogate, usize), GrpoError> {
        let sets: Vec<&surrogate::TimestepNoiseSet> = gb.pairs.iter().map(|p| p.as_ref()).collect();
        let ev = surrogate::evaluate_batch(den, &gb.outputs(), &gb.labels(), &sets, cfg.weighting, cfg.kl_space)?;
        let deg = ev.degenerate;
        Ok((StoredOldSurrogate::from_eval(ev)?, deg))
    });
    let mut degenerate = 0;
    for (gb, ev) in groups.iter_mut().zip(evals) {
        let (old, deg) = ev?;
        degenerate += deg;
        gb.old = Some(old);
    }
    Ok(degenerate)
}

/// Contribution of one group to a gradient step.
struct GroupTerm {
    loss: f64,
    grads: ParamGrads,
    clipped: usize,
    kl_sum: f64,
    max_ratio_dev: f64,
}

/// Records the clipped ratio objective of `rho` (`[G, 1]`) and returns the
/// summed objective Var and the clipped count.
fn clipped_objective(tape: &mut Tape, rho: Var, adv: &[f64], clip_eps: Option<f64>) -> (Var, usize) {
    let a = tape.constant(Tensor::column(adv.to_vec()));
    let unclipped = tape.mul(rho, a);
    let Some(eps) = clip_eps else {
        return (unclipped, 0);
    };
    let clipped_count = tape
        .value(rho)
        .data()
        .iter()
        .filter(|&&r| r < 1.0 - eps || r > 1.0 + eps)
        .count();
    let rc = tape.clamp(rho, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(rc, a);
    (tape.minimum(unclipped, clipped), clipped_count)
}

fn vgrpo_group_term(
    den: &Denoiser,
    gb: &GroupBatch,
    cfg: &TrainConfig,
    reg: &Resolved,
    norm: f64,
) -> Result<GroupTerm, GrpoError> {
    let old = gb.old.as_ref().expect("old surrogate stored");
    let mut tape = Tape::new();
    let bound = den.params.bind(&mut tape);
    let sets: Vec<&surrogate::TimestepNoiseSet> = gb.pairs.iter().map(|p| p.as_ref()).collect();
    let s = surrogate::surrogate_on_tape(
        &mut tape,
        den,
        &bound,
        &gb.outputs(),
        &gb.labels(),
        &sets,
        cfg.surrogate.weighting,
        cfg.surrogate.kl_space,
    )?;
    let l_old = tape.constant(Tensor::column(old.per_output.clone()));
    let diff = tape.sub(l_old, s.per_output);
    let e = tape.exp(diff);
    let rho = tape.clamp(e, RATIO_MIN, RATIO_MAX);
    let max_ratio_dev = tape
        .value(rho)
        .data()
        .iter()
        .map(|r| (r - 1.0).abs())
        .fold(0.0, f64::max);
    let (j, clipped) = clipped_objective(&mut tape, rho, &gb.used_advantages, reg.clip_eps);
    let old_preds = tape.constant(old.kl_preds.clone());
    let dk = tape.sub(s.kl_preds, old_preds);
    let sq = tape.square(dk);
    let rs = tape.row_sum(sq);
    let kl = tape.segment_mean(rs, s.n_mc);
    let kl_sum = tape.value(kl).data().iter().sum();
    let objective = if reg.beta > 0.0 {
        let pen = tape.scale(kl, reg.beta);
        tape.sub(j, pen)
    } else {
        j
    };
    let total = tape.sum(objective);
    let loss = tape.scale(total, -1.0 / norm);
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    Ok(GroupTerm {
        loss: value,
        grads: bound.grads(&g),
        clipped,
        kl_sum,
        max_ratio_dev,
    })
}

fn mdp_group_term(
    den: &Denoiser,
    gb: &GroupBatch,
    reg: &Resolved,
    norm: f64,
) -> Result<GroupTerm, GrpoError> {
    let old = gb.mdp_old.as_ref().expect("old transitions stored");
    let rows = &old.rows;
    let mut tape = Tape::new();
    let bound = den.params.bind(&mut tape);
    let out = den.forward(&mut tape, &bound, &rows.x, &rows.t, &rows.labels)?;
    let c = mean_coeffs(den, rows)?;
    let mu = affine_rows(&mut tape, &rows.x, out, &c);
    let xn = tape.constant(rows.x_next.clone());
    let r = tape.sub(xn, mu);
    let sq = tape.square(r);
    let se = tape.row_sum(sq);
    let inv2s2: Vec<f64> = rows.sigma.iter().map(|s| -0.5 / (s * s)).collect();
    let inv = tape.constant(Tensor::column(inv2s2.clone()));
    let neg = tape.mul_col(se, inv);
    let core_old = tape.constant(Tensor::column(old.neg_logp_core.clone()));
    let log_ratio = tape.add(neg, core_old);
    let e = tape.exp(log_ratio);
    let rho = tape.clamp(e, RATIO_MIN, RATIO_MAX);
    let max_ratio_dev = tape
        .value(rho)
        .data()
        .iter()
        .map(|r| (r - 1.0).abs())
        .fold(0.0, f64::max);
    let adv: Vec<f64> = gb
        .used_advantages
        .iter()
        .flat_map(|&a| std::iter::repeat_n(a, rows.k))
        .collect();
    let (j_steps, clipped) = clipped_objective(&mut tape, rho, &adv, reg.clip_eps);
    let j = tape.segment_mean(j_steps, rows.k);
    let muo = tape.constant(old.mu_old.clone());
    let dm = tape.sub(mu, muo);
    let dsq = tape.square(dm);
    let drs = tape.row_sum(dsq);
    let half: Vec<f64> = inv2s2.iter().map(|v| -v).collect();
    let half = tape.constant(Tensor::column(half));
    let kl_steps = tape.mul_col(drs, half);
    let kl = tape.segment_mean(kl_steps, rows.k);
    let kl_sum = tape.value(kl).data().iter().sum();
    let objective = if reg.beta > 0.0 {
        let pen = tape.scale(kl, reg.beta);
        tape.sub(j, pen)
    } else {
        j
    };
    let total = tape.sum(objective);
    let loss = tape.scale(total, -1.0 / norm);
    let value = tape.value(loss).item();
    let g = tape.backward(loss)?;
    Ok(GroupTerm {
        loss: value,
        grads: bound.grads(&g),
        clipped,
        kl_sum,
        max_ratio_dev,
    })
}

/// Negated objective and its gradient over a sub-batch of groups.
pub fn step_loss_and_grad(
    den: &Denoiser,
    groups: &[&GroupBatch],
    cfg: &TrainConfig,
) -> Result<(f64, ParamGrads, StepStats), GrpoError> {
    let reg = cfg.resolve()?;
    let members: usize = groups.iter().map(|g| g.rollouts.len()).sum();
    let norm = members as f64;
    let terms = exec::map_ordered(groups, |_, gb| match cfg.algorithm {
        Algorithm::Vgrpo => vgrpo_group_term(den, gb, cfg, &reg, norm),
        Algorithm::Mdp => mdp_group_term(den, gb, &reg, norm),
    });
    let mut loss = 0.0;
    let mut grads = ParamGrads::zeros_like(&den.params);
    let mut stats = StepStats::default();
    let mut clipped = 0;
    let mut ratio_count = 0;
    for (gb, t) in groups.iter().zip(terms) {
        let t = t?;
        loss += t.loss;
        grads.add_assign(&t.grads);
        clipped += t.clipped;
        ratio_count += match (&gb.mdp_old, cfg.algorithm) {
            (Some(m), Algorithm::Mdp) => m.rows.t.len(),
            _ => gb.rollouts.len(),
        };
        stats.kl += t.kl_sum;
        stats.max_ratio_dev = stats.max_ratio_dev.max(t.max_ratio_dev);
    }
    stats.loss = loss;
    stats.grad_norm = grads.norm();
    stats.clip_fraction = clipped as f64 / ratio_count.max(1) as f64;
    stats.kl /= norm;
    Ok((loss, grads, stats))
}

fn store_mdp_old(den: &Denoiser, groups: &mut [GroupBatch], ctx: &IterationContext) -> Result<(), GrpoError> {
    let cfg = ctx.config;
    let k = cfg.mdp_timesteps.unwrap_or(cfg.sampler.steps);
    let olds = exec::map_ordered(groups, |_, gb| -> Result<MdpOld, GrpoError> {
        let mut steps: Vec<usize> = (0..cfg.sampler.steps).collect();
        if k < steps.len() {
            let mut rng = seed::derived_rng(
                ctx.global_seed,
                &[stream::TIMESTEP_SUBSET, ctx.iteration, gb.prompt as u64],
            );
            steps.shuffle(&mut rng);
            steps.truncate(k);
            steps.sort_unstable();
        }
        let rows = mdp_rows(&gb.rollouts, gb.label, &steps, &cfg.sampler);
        let mu_old = transition_means(den, &rows)?;
        let neg_logp_core = (0..rows.t.len())
            .map(|r| {
                let se: f64 = rows
                    .x_next
                    .row(r)
                    .iter()
                    .zip(mu_old.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                se / (2.0 * rows.sigma[r] * rows.sigma[r])
            })
            .collect();
        Ok(MdpOld {
            steps,
            rows,
            neg_logp_core,
            mu_old,
        })
    });
    for (gb, o) in groups.iter_mut().zip(olds) {
        gb.mdp_old = Some(o?);
    }
    Ok(())
}

/// Seeded partition of the prompt pool into `grad_steps` sub-batches.
pub fn partition(ctx: &IterationContext) -> Vec<Vec<usize>> {
    let cfg = ctx.config;
    let mut idx: Vec<usize> = (0..cfg.pool_size()).collect();
    let mut rng = seed::derived_rng(ctx.global_seed, &[stream::PARTITION, ctx.iteration]);
    idx.shuffle(&mut rng);
    idx.chunks(cfg.prompts_per_batch).map(|c| c.to_vec()).collect()
}

/// One outer iteration: roll out with the current policy, store old-policy
/// likelihood terms, then take `grad_steps` optimizer steps on disjoint
/// sub-batches. Dispatches on the configured algorithm.
pub fn run_iteration(
    den: &mut Denoiser,
    opt: &mut AdamWState,
    ctx: &IterationContext,
) -> Result<IterationReport, GrpoError> {
    run_iteration_inspect(den, opt, ctx, |_, _| Ok(()))
}

/// [`run_iteration`] with `inspect` called on the groups once the old-policy
/// terms are stored, before the first gradient step.
pub fn run_iteration_inspect<F>(
    den: &mut Denoiser,
    opt: &mut AdamWState,
    ctx: &IterationContext,
    mut inspect: F,
) -> Result<IterationReport, GrpoError>
where
    F: FnMut(&Denoiser, &[GroupBatch]) -> Result<(), GrpoError>,
{
    let cfg = ctx.config;
    cfg.validate()?;
    if !den.params.is_finite() {
        return Err(GrpoError::NonFinite("policy parameters".into()));
    }
    let mut groups = collect_groups(den, ctx)?;
    let mut report = IterationReport::default();
    match cfg.algorithm {
        Algorithm::Vgrpo => {
            report.degenerate = store_old_surrogates(den, &mut groups, &cfg.surrogate)?;
            report.nfe_old = cfg.sampler.steps + cfg.surrogate.n_mc;
            report.nfe_new = cfg.surrogate.n_mc;
        }
        Algorithm::Mdp => {
            store_mdp_old(den, &mut groups, ctx)?;
            let k = cfg.mdp_timesteps.unwrap_or(cfg.sampler.steps);
            report.nfe_old = cfg.sampler.steps + k;
            report.nfe_new = k;
        }
    }
    for gb in &groups {
        debug_assert!(!cfg.surrogate.shared || gb.shares_pairs());
        report.floored += gb.floored;
        report.groups.push(GroupSummary {
            label: gb.label,
            rewards: gb.rewards.clone(),
            advantages: gb.advantages.clone(),
            old_surrogate: gb.old.as_ref().map(|o| o.per_output.clone()).unwrap_or_default(),
        });
    }
    inspect(den, &groups)?;
    for (s, sub) in partition(ctx).into_iter().enumerate() {
        let batch: Vec<&GroupBatch> = sub.iter().map(|&i| &groups[i]).collect();
        let outcome = step_loss_and_grad(den, &batch, cfg).and_then(|(loss, grads, stats)| {
            if !loss.is_finite() || !grads.is_finite() {
                return Err(GrpoError::NonFinite(format!("loss {loss} at step {s}")));
            }
            adamw_step(&mut den.params, &grads, opt)?;
            Ok(stats)
        });
        match outcome {
            Ok(stats) => report.steps.push(stats),
            Err(e) if e.is_numeric() && cfg.nan_policy == NanPolicy::Skip => {
                let msg = format!("iteration {} step {s}: {e}", ctx.iteration);
                log::warn!("skipping step: {msg}");
                report.incidents.push(msg);
                report.steps.push(StepStats {
                    skipped: true,
                    ..Default::default()
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Per-output `(surrogate magnitude, || grad of rho_i ||)` at the current
/// parameters, without clipping. At `theta = theta_old` the ratio gradient is
/// minus the surrogate gradient.
pub fn ratio_gradient_norms(den: &Denoiser, gb: &GroupBatch, cfg: &SurrogateConfig) -> Result<Vec<(f64, f64)>, GrpoError> {
    let outputs = gb.outputs();
    let labels = gb.labels();
    (0..outputs.rows())
        .map(|i| {
            let o = Tensor::matrix(1, outputs.cols(), outputs.row(i).to_vec());
            let mut tape = Tape::new();
            let bound = den.params.bind(&mut tape);
            let s = surrogate::surrogate_on_tape(
                &mut tape,
                den,
                &bound,
                &o,
                &labels[i..=i],
                &[gb.pairs[i].as_ref()],
                cfg.weighting,
                cfg.kl_space,
            )?;
            let l = tape.value(s.per_output).item();
            let total = tape.sum(s.per_output);
            let g = tape.backward(total)?;
            Ok((l, bound.grads(&g).norm()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_of_one_two_three() {
        let a = group_advantages(&[vec![1.0, 2.0, 3.0]], &[1.0], Aggregation::AdvThenAvg).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!((a[0] + 1.0 / s).abs() < 1e-12 && a[1] == 0.0 && (a[2] - 1.0 / s).abs() < 1e-12);
        assert!((a[2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_rewards_give_zero_advantages() {
        let a = group_advantages(&[vec![0.4; 5]], &[1.0], Aggregation::AvgThenAdv).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
        assert!(group_advantages(&[vec![1.0]], &[1.0], Aggregation::AdvThenAvg).is_err());
    }

    #[test]
    fn identical_functions_match_single() {
        let r = vec![0.3, -1.0, 2.5, 0.0];
        let one = group_advantages(std::slice::from_ref(&r), &[1.0], Aggregation::AdvThenAvg).unwrap();
        let two = group_advantages(&[r.clone(), r], &[1.0, 1.0], Aggregation::AdvThenAvg).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregation_modes_differ_for_mixed_scales() {
        let r1 = vec![0.0, 1.0, 2.0];
        let r2 = vec![0.0, 100.0, -100.0];
        let a = group_advantages(&[r1.clone(), r2.clone()], &[1.0, 1.0], Aggregation::AdvThenAvg).unwrap();
        let b = group_advantages(&[r1, r2], &[1.0, 1.0], Aggregation::AvgThenAdv).unwrap();
        assert!((a[2] - b[2]).abs() > 0.1);
        let var: f64 = b.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_clip_values() {
        assert_eq!(soft_clip(0.0, 2.0).unwrap(), 0.0);
        assert!((soft_clip(2.0, 2.0).unwrap() - 2.0 * 0.7615941559557649).abs() < 1e-15);
        assert!(soft_clip(1e6, 0.5).unwrap() <= 0.5);
        assert!(soft_clip(1.0, 0.0).is_err());
    }

    #[test]
    fn objective_branches() {
        let eps = 0.2;
        assert_eq!(grpo_objective(1.0, 0.7, eps), 0.7);
        assert!((grpo_objective(1.0 + 2.0 * eps, 1.0, eps) - 1.2).abs() < 1e-15);
        assert!((grpo_objective(1.0 + 2.0 * eps, -1.0, eps) + 1.4).abs() < 1e-15);
    }

    #[test]
    fn presets_resolve() {
        let base = TrainConfig::default();
        let r = base.resolve().unwrap();
        assert_eq!(r.clip_eps, Some(DEFAULT_CLIP_EPS));
        assert_eq!((r.beta, r.eta), (0.0, None));
        let kl = TrainConfig {
            preset: Regulation::KlPenalty,
            ..base.clone()
        }
        .resolve()
        .unwrap();
        assert_eq!((kl.clip_eps, kl.beta), (None, DEFAULT_KL_BETA));
        let sc = TrainConfig {
            preset: Regulation::AdvSoftClip,
            soft_clip_eta: Some(0.5),
            ..base.clone()
        }
        .resolve()
        .unwrap();
        assert_eq!(sc.eta, Some(0.5));
        let bad = TrainConfig {
            preset: Regulation::AdvSoftClip,
            soft_clip_eta: Some(0.0),
            ..base.clone()
        };
        assert!(matches!(bad.resolve(), Err(GrpoError::Config(_))));
        let off = TrainConfig {
            clip_eps: Some(0.0),
            ..base
        };
        assert_eq!(off.resolve().unwrap().clip_eps, None);
    }

    #[test]
    fn mdp_needs_sde() {
        let cfg = TrainConfig {
            algorithm: Algorithm::Mdp,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(GrpoError::Config(_))));
    }
}
