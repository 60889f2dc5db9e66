//! Per-sample likelihood surrogates from the denoising regression loss.
//!
//! For an output `o` and a set of timestep-noise pairs `(t_j, eps_j)` the
//! surrogate is the mean regression loss `L = 1/N sum_j l(t_j, eps_j)` with
//! `z_j = a(t_j) o + b(t_j) eps_j`. Lower `L` means higher likelihood, so the
//! importance ratio between two policies is `exp(L_old - L_new)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{
    affine_rows, conversion, interpolate, regression_target, Denoiser, FlowError, LossWeight,
    PredictionKind, Predictor, Schedule,
};
use crate::seed;
use crate::tensor::{BoundMlp, Tape, Tensor, TensorError, Var};

pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("invalid surrogate config: {0}")]
    Config(String),
    #[error("non-finite surrogate value: {0}")]
    NonFinite(String),
    #[error("pair count mismatch: {left} vs {right}")]
    PairMismatch { left: usize, right: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Timestep-noise pairs for one (iteration, prompt). Shared by reference
/// between all group members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepNoiseSet {
    pub iteration: u64,
    pub prompt: u64,
    pub times: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
}

pub type SharedPairs = Arc<TimestepNoiseSet>;

impl TimestepNoiseSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One grid point drawn uniformly from each of `n_mc` contiguous equal blocks
/// of `grid`, plus one standard normal noise vector per pair.
pub fn draw_stratified_pairs(
    grid: &[f64],
    n_mc: usize,
    dim: usize,
    seed: u64,
) -> Result<TimestepNoiseSet, SurrogateError> {
    if n_mc == 0 || !grid.len().is_multiple_of(n_mc) || grid.is_empty() {
        return Err(SurrogateError::Config(format!(
            "grid of {} points cannot be split into {n_mc} equal strata",
            grid.len()
        )));
    }
    let block = grid.len() / n_mc;
    let mut rng = seed::rng(seed);
    let mut times = Vec::with_capacity(n_mc);
    let mut noises = Vec::with_capacity(n_mc);
    for j in 0..n_mc {
        times.push(grid[j * block + rng.gen_range(0..block)]);
        noises.push((0..dim).map(|_| rng.sample(StandardNormal)).collect());
    }
    Ok(TimestepNoiseSet {
        iteration: 0,
        prompt: 0,
        times,
        noises,
    })
}

/// `n_mc` independent uniform draws from the whole grid.
pub fn draw_uniform_pairs(
    grid: &[f64],
    n_mc: usize,
    dim: usize,
    seed: u64,
) -> Result<TimestepNoiseSet, SurrogateError> {
    if n_mc == 0 || grid.is_empty() {
        return Err(SurrogateError::Config("empty grid or zero pairs".into()));
    }
    let mut rng = seed::rng(seed);
    let mut times = Vec::with_capacity(n_mc);
    let mut noises = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        times.push(grid[rng.gen_range(0..grid.len())]);
        noises.push((0..dim).map(|_| rng.sample(StandardNormal)).collect());
    }
    Ok(TimestepNoiseSet {
        iteration: 0,
        prompt: 0,
        times,
        noises,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "weight")]
#[derive(Default)]
pub enum Weighting {
    /// `w_t || NN(z_t) - r_t ||^2` in the head's own space.
    Generic(LossWeight),
    /// `|| x(z_t) - o ||^2 / sg(mean | x(z_t) - o |)`.
    #[default]
    Adaptive,
}


#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub n_mc: usize,
    /// Length of the interior time grid the pairs are drawn from.
    pub grid_steps: usize,
    pub weighting: Weighting,
    /// One pair set per prompt shared by the whole group.
    pub shared: bool,
    pub stratified: bool,
    /// Space of the KL penalty: `x` or `v`.
    pub kl_space: PredictionKind,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            n_mc: 4,
            grid_steps: 32,
            weighting: Weighting::Adaptive,
            shared: true,
            stratified: true,
            kl_space: PredictionKind::X,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        if self.n_mc == 0 {
            return Err(SurrogateError::Config("n_mc must be at least 1".into()));
        }
        if self.grid_steps == 0 {
            return Err(SurrogateError::Config("grid_steps must be at least 1".into()));
        }
        if self.stratified && !self.grid_steps.is_multiple_of(self.n_mc) {
            return Err(SurrogateError::Config(format!(
                "grid_steps {} not divisible by n_mc {}",
                self.grid_steps, self.n_mc
            )));
        }
        if self.kl_space == PredictionKind::Eps {
            return Err(SurrogateError::Config("kl_space must be `x` or `v`".into()));
        }
        Ok(())
    }

    pub fn draw(&self, grid: &[f64], dim: usize, seed: u64) -> Result<TimestepNoiseSet, SurrogateError> {
        if self.stratified {
            draw_stratified_pairs(grid, self.n_mc, dim, seed)
        } else {
            draw_uniform_pairs(grid, self.n_mc, dim, seed)
        }
    }
}

/// Rows `(output i, pair j)` laid out output-major.
struct PairRows {
    z: Tensor,
    o: Tensor,
    target: Tensor,
    t: Vec<f64>,
    labels: Vec<u32>,
    n_mc: usize,
}

fn pair_rows<P: Predictor + ?Sized>(
    den: &P,
    outputs: &Tensor,
    labels: &[u32],
    sets: &[&TimestepNoiseSet],
) -> Result<PairRows, SurrogateError> {
    let n = outputs.rows();
    let d = den.dim();
    if n == 0 || sets.len() != n || labels.len() != n {
        return Err(SurrogateError::PairMismatch {
            left: n,
            right: sets.len(),
        });
    }
    if outputs.cols() != d {
        return Err(FlowError::DimMismatch {
            expected: d,
            got: outputs.cols(),
        }
        .into());
    }
    let n_mc = sets[0].len();
    if n_mc == 0 {
        return Err(SurrogateError::Config("empty pair set".into()));
    }
    let s = den.schedule();
    let rows = n * n_mc;
    let (mut z, mut o, mut target) = (
        Vec::with_capacity(rows * d),
        Vec::with_capacity(rows * d),
        Vec::with_capacity(rows * d),
    );
    let mut t = Vec::with_capacity(rows);
    let mut lab = Vec::with_capacity(rows);
    for (i, set) in sets.iter().enumerate() {
        if set.len() != n_mc {
            return Err(SurrogateError::PairMismatch {
                left: n_mc,
                right: set.len(),
            });
        }
        let oi = outputs.row(i);
        for (&tj, ej) in set.times.iter().zip(&set.noises) {
            z.extend(interpolate(oi, ej, tj, &s)?);
            target.extend(regression_target(oi, ej, tj, den.head(), &s));
            o.extend_from_slice(oi);
            t.push(tj);
            lab.push(labels[i]);
        }
    }
    Ok(PairRows {
        z: Tensor::matrix(rows, d, z),
        o: Tensor::matrix(rows, d, o),
        target: Tensor::matrix(rows, d, target),
        t,
        labels: lab,
        n_mc,
    })
}

fn coeffs(head: PredictionKind, to: PredictionKind, t: &[f64], s: &Schedule) -> Result<Vec<(f64, f64)>, FlowError> {
    t.iter().map(|&ti| conversion(head, to, ti, s)).collect()
}

fn apply(z: &Tensor, out: &Tensor, c: &[(f64, f64)]) -> Tensor {
    let d = z.cols();
    let data = z
        .data()
        .iter()
        .zip(out.data())
        .enumerate()
        .map(|(k, (&zi, &oi))| {
            let (p, q) = c[k / d];
            p * zi + q * oi
        })
        .collect();
    Tensor::matrix(z.rows(), d, data)
}

/// Adaptive loss of one residual row; `None` when it is exactly zero.
fn adaptive_value(r: &[f64]) -> Option<f64> {
    let l1: f64 = r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64;
    if l1 == 0.0 {
        return None;
    }
    // same rounding as the tape path: multiply by the reciprocal
    Some(r.iter().map(|v| v * v).sum::<f64>() * (1.0 / l1))
}

/// Surrogate values of a batch of outputs under a frozen predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateEval {
    pub n_mc: usize,
    /// `[n * n_mc]`, output-major
    pub per_pair: Vec<f64>,
    /// `[n]`
    pub per_output: Vec<f64>,
    /// Predictions in the KL space, `[n * n_mc, d]`.
    pub kl_preds: Tensor,
    pub degenerate: usize,
}

pub fn evaluate_batch<P: Predictor + ?Sized>(
    den: &P,
    outputs: &Tensor,
    labels: &[u32],
    sets: &[&TimestepNoiseSet],
    weighting: Weighting,
    kl_space: PredictionKind,
) -> Result<SurrogateEval, SurrogateError> {
    let rows = pair_rows(den, outputs, labels, sets)?;
    let s = den.schedule();
    let out = den.predict(&rows.z, &rows.t, &rows.labels)?;
    let mut degenerate = 0;
    let per_pair: Vec<f64> = match weighting {
        Weighting::Generic(w) => (0..rows.t.len())
            .map(|k| {
                let se: f64 = out
                    .row(k)
                    .iter()
                    .zip(rows.target.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Ok(w.at(rows.t[k], &s)? * se)
            })
            .collect::<Result<_, FlowError>>()?,
        Weighting::Adaptive => {
            let x = apply(&rows.z, &out, &coeffs(den.head(), PredictionKind::X, &rows.t, &s)?);
            (0..rows.t.len())
                .map(|k| {
                    let r: Vec<f64> = x.row(k).iter().zip(rows.o.row(k)).map(|(a, b)| a - b).collect();
                    adaptive_value(&r).unwrap_or_else(|| {
                        degenerate += 1;
                        0.0
                    })
                })
                .collect()
        }
    };
    let kl_preds = apply(&rows.z, &out, &coeffs(den.head(), kl_space, &rows.t, &s)?);
    let per_output = per_pair
        .chunks(rows.n_mc)
        .map(|c| c.iter().sum::<f64>() / rows.n_mc as f64)
        .collect();
    Ok(SurrogateEval {
        n_mc: rows.n_mc,
        per_pair,
        per_output,
        kl_preds,
        degenerate,
    })
}

/// Loss of a single `(t, eps)` pair and whether its adaptive residual was
/// exactly zero.
pub fn per_sample_loss<P: Predictor + ?Sized>(
    den: &P,
    o: &[f64],
    label: u32,
    t: f64,
    eps: &[f64],
    weighting: Weighting,
) -> Result<(f64, bool), SurrogateError> {
    let set = TimestepNoiseSet {
        iteration: 0,
        prompt: 0,
        times: vec![t],
        noises: vec![eps.to_vec()],
    };
    let ev = evaluate_batch(
        den,
        &Tensor::matrix(1, o.len(), o.to_vec()),
        &[label],
        &[&set],
        weighting,
        PredictionKind::X,
    )?;
    Ok((ev.per_pair[0], ev.degenerate > 0))
}

/// `1/N sum_j l(t_j, eps_j)` for one output.
pub fn estimate_surrogate<P: Predictor + ?Sized>(
    den: &P,
    o: &[f64],
    label: u32,
    set: &TimestepNoiseSet,
    weighting: Weighting,
) -> Result<f64, SurrogateError> {
    let ev = evaluate_batch(
        den,
        &Tensor::matrix(1, o.len(), o.to_vec()),
        &[label],
        &[set],
        weighting,
        PredictionKind::X,
    )?;
    Ok(ev.per_output[0])
}

/// Surrogate terms recorded on a tape.
pub struct TapeSurrogate {
    /// `[n, 1]`
    pub per_output: Var,
    /// `[n * n_mc, d]`
    pub kl_preds: Var,
    pub n_mc: usize,
    pub degenerate: usize,
}

/// Differentiable version of [`evaluate_batch`] through `bound`.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_on_tape(
    tape: &mut Tape,
    den: &Denoiser,
    bound: &BoundMlp,
    outputs: &Tensor,
    labels: &[u32],
    sets: &[&TimestepNoiseSet],
    weighting: Weighting,
    kl_space: PredictionKind,
) -> Result<TapeSurrogate, SurrogateError> {
    let rows = pair_rows(den, outputs, labels, sets)?;
    let s = den.schedule;
    let out = den.forward(tape, bound, &rows.z, &rows.t, &rows.labels)?;
    let mut degenerate = 0;
    let per_pair = match weighting {
        Weighting::Generic(w) => {
            let target = tape.constant(rows.target.clone());
            let r = tape.sub(out, target);
            let sq = tape.square(r);
            let se = tape.row_sum(sq);
            let ws: Vec<f64> = rows.t.iter().map(|&t| w.at(t, &s)).collect::<Result<_, _>>()?;
            let ws = tape.constant(Tensor::column(ws));
            tape.mul_col(se, ws)
        }
        Weighting::Adaptive => {
            let c = coeffs(den.head, PredictionKind::X, &rows.t, &s)?;
            let x = affine_rows(tape, &rows.z, out, &c);
            let o = tape.constant(rows.o.clone());
            let r = tape.sub(x, o);
            let d = rows.o.cols() as f64;
            // stop-gradient scale, taken from the current values
            let inv: Vec<f64> = tape
                .value(r)
                .data()
                .chunks(rows.o.cols())
                .map(|row| {
                    let l1 = row.iter().map(|v| v.abs()).sum::<f64>() / d;
                    if l1 == 0.0 {
                        degenerate += 1;
                        0.0
                    } else {
                        1.0 / l1
                    }
                })
                .collect();
            let sq = tape.square(r);
            let num = tape.row_sum(sq);
            let inv = tape.constant(Tensor::column(inv));
            tape.mul_col(num, inv)
        }
    };
    let per_output = tape.segment_mean(per_pair, rows.n_mc);
    let kl_preds = if kl_space == den.head {
        out
    } else {
        let c = coeffs(den.head, kl_space, &rows.t, &s)?;
        affine_rows(tape, &rows.z, out, &c)
    };
    Ok(TapeSurrogate {
        per_output,
        kl_preds,
        n_mc: rows.n_mc,
        degenerate,
    })
}

/// `exp(L_old - L_new)` clamped to `[RATIO_MIN, RATIO_MAX]`.
pub fn importance_ratio(l_new: f64, l_old: f64) -> Result<f64, SurrogateError> {
    if !l_new.is_finite() || !l_old.is_finite() {
        return Err(SurrogateError::NonFinite(format!(
            "ratio inputs L_new = {l_new}, L_old = {l_old}"
        )));
    }
    Ok((l_old - l_new).exp().clamp(RATIO_MIN, RATIO_MAX))
}

/// Mean over pairs of the squared prediction difference.
pub fn kl_simple(new: &Tensor, old: &Tensor) -> Result<f64, SurrogateError> {
    if new.rows() != old.rows() || new.cols() != old.cols() {
        return Err(SurrogateError::PairMismatch {
            left: new.rows(),
            right: old.rows(),
        });
    }
    if new.rows() == 0 {
        return Err(SurrogateError::Config("no pairs".into()));
    }
    let total: f64 = new
        .data()
        .iter()
        .zip(old.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / new.rows() as f64)
}

/// Old-policy surrogate values of one group, computed once per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredOldSurrogate {
    pub n_mc: usize,
    pub per_pair: Vec<f64>,
    pub per_output: Vec<f64>,
    pub kl_preds: Tensor,
}

impl StoredOldSurrogate {
    pub fn from_eval(ev: SurrogateEval) -> Result<Self, SurrogateError> {
        if !ev.per_pair.iter().all(|v| v.is_finite()) || !ev.kl_preds.is_finite() {
            return Err(SurrogateError::NonFinite("old-policy surrogate".into()));
        }
        Ok(Self {
            n_mc: ev.n_mc,
            per_pair: ev.per_pair,
            per_output: ev.per_output,
            kl_preds: ev.kl_preds,
        })
    }

    /// Rows of the stored predictions belonging to output `i`.
    pub fn kl_rows(&self, i: usize) -> Tensor {
        let d = self.kl_preds.cols();
        let s = i * self.n_mc * d;
        Tensor::matrix(self.n_mc, d, self.kl_preds.data()[s..s + self.n_mc * d].to_vec())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_mc": self.n_mc,
            "per_pair": self.per_pair,
            "per_output": self.per_output,
        })
    }
}
