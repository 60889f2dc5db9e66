//! Interpolation schedules, prediction parameterizations and the conditional
//! MLP denoiser.
//!
//! The forward process is `z_t = a(t) x + b(t) eps`. A network head predicts one
//! of `x`, `eps` or `v = a'(t) x + b'(t) eps`; any head can be converted to any
//! other because, for fixed `(z_t, t)`, every prediction is an affine function
//! of the head output. [`conversion`] returns those affine coefficients so the
//! same code serves tape and tape-free evaluation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::seed;
use crate::tensor::{Activation, BoundMlp, MlpParams, ParamGrads, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("{what} is singular at t = {t}")]
    Singular { what: &'static str, t: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `a = 1 - t`, `b = t`
    #[default]
    RectifiedFlow,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
}

impl Schedule {
    pub fn rectified_flow() -> Self {
        Self {
            kind: ScheduleKind::RectifiedFlow,
        }
    }

    pub fn a(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => 1.0 - t,
        }
    }

    pub fn b(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => t,
        }
    }

    pub fn da(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => -1.0,
        }
    }

    pub fn db(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedFlow => 1.0,
        }
    }

    /// `(c, d)` with regression target `r_t = c x + d eps` for `kind`.
    pub fn target_coeffs(&self, kind: PredictionKind, t: f64) -> (f64, f64) {
        match kind {
            PredictionKind::X => (1.0, 0.0),
            PredictionKind::Eps => (0.0, 1.0),
            PredictionKind::V => (self.da(t), self.db(t)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    X,
    Eps,
    #[default]
    V,
}

fn check_time(t: f64) -> Result<(), FlowError> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(FlowError::TimeOutOfRange(t));
    }
    Ok(())
}

pub fn interpolate(x: &[f64], eps: &[f64], t: f64, s: &Schedule) -> Result<Vec<f64>, FlowError> {
    check_time(t)?;
    if x.len() != eps.len() {
        return Err(FlowError::DimMismatch {
            expected: x.len(),
            got: eps.len(),
        });
    }
    let (a, b) = (s.a(t), s.b(t));
    Ok(x.iter().zip(eps).map(|(&xi, &ei)| a * xi + b * ei).collect())
}

pub fn regression_target(
    x: &[f64],
    eps: &[f64],
    t: f64,
    kind: PredictionKind,
    s: &Schedule,
) -> Vec<f64> {
    let (c, d) = s.target_coeffs(kind, t);
    x.iter().zip(eps).map(|(&xi, &ei)| c * xi + d * ei).collect()
}

/// Affine coefficients `(p, q)` such that the `to` prediction equals
/// `p * z_t + q * out` when `out` is a `from` head output at time `t`.
pub fn conversion(
    from: PredictionKind,
    to: PredictionKind,
    t: f64,
    s: &Schedule,
) -> Result<(f64, f64), FlowError> {
    check_time(t)?;
    if from == to {
        return Ok((0.0, 1.0));
    }
    let (a, b, da, db) = (s.a(t), s.b(t), s.da(t), s.db(t));
    // x and eps as affine functions of the head output
    let (x, e) = match from {
        PredictionKind::X => {
            if b == 0.0 {
                return Err(FlowError::Singular {
                    what: "x-to-eps conversion",
                    t,
                });
            }
            ((0.0, 1.0), (1.0 / b, -a / b))
        }
        PredictionKind::Eps => {
            if a == 0.0 {
                return Err(FlowError::Singular {
                    what: "eps-to-x conversion",
                    t,
                });
            }
            ((1.0 / a, -b / a), (0.0, 1.0))
        }
        PredictionKind::V => {
            let det = a * db - b * da;
            if det == 0.0 {
                return Err(FlowError::Singular {
                    what: "v conversion",
                    t,
                });
            }
            ((db / det, -b / det), (-da / det, a / det))
        }
    };
    Ok(match to {
        PredictionKind::X => x,
        PredictionKind::Eps => e,
        PredictionKind::V => (da * x.0 + db * e.0, da * x.1 + db * e.1),
    })
}

/// x-prediction from a head output.
pub fn to_x_prediction(
    nn_out: &[f64],
    z: &[f64],
    t: f64,
    head: PredictionKind,
    s: &Schedule,
) -> Result<Vec<f64>, FlowError> {
    let (p, q) = conversion(head, PredictionKind::X, t, s)?;
    Ok(z.iter().zip(nn_out).map(|(&zi, &ni)| p * zi + q * ni).collect())
}

/// `log(a^2 / b^2)`, defined on the open interval.
pub fn log_snr(t: f64, s: &Schedule) -> Result<f64, FlowError> {
    check_time(t)?;
    let (a, b) = (s.a(t), s.b(t));
    if a == 0.0 || b == 0.0 {
        return Err(FlowError::Singular { what: "log-SNR", t });
    }
    Ok((a * a / (b * b)).ln())
}

/// `-d(lambda)/dt`.
pub fn neg_dlog_snr(t: f64, s: &Schedule) -> Result<f64, FlowError> {
    check_time(t)?;
    let (a, b) = (s.a(t), s.b(t));
    if a == 0.0 || b == 0.0 {
        return Err(FlowError::Singular { what: "log-SNR", t });
    }
    Ok(-2.0 * (s.da(t) / a - s.db(t) / b))
}

/// Time grid for `steps` points strictly inside (0, 1): `(k + 1/2) / steps`.
pub fn interior_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| (k as f64 + 0.5) / steps as f64).collect()
}

/// Loss weighting `w_t` for the generic regression loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    #[default]
    Uniform,
    /// `-1/2 dlambda/dt`, the ELBO weighting for an eps-space loss.
    Elbo,
}

impl LossWeight {
    pub fn at(self, t: f64, s: &Schedule) -> Result<f64, FlowError> {
        match self {
            LossWeight::Uniform => Ok(1.0),
            LossWeight::Elbo => Ok(0.5 * neg_dlog_snr(t, s)?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// sin/cos pairs for time, at frequencies `pi * 2^k`
    pub time_freqs: usize,
    /// sin/cos pairs for the condition label; 0 makes the model unconditional
    pub cond_freqs: usize,
    pub num_labels: u32,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            time_freqs: 4,
            cond_freqs: 2,
            num_labels: 2,
        }
    }
}

impl EmbeddingConfig {
    pub fn width(&self) -> usize {
        2 * (self.time_freqs + self.cond_freqs)
    }

    fn push_features(&self, t: f64, label: u32, out: &mut Vec<f64>) {
        let mut f = std::f64::consts::PI;
        for _ in 0..self.time_freqs {
            out.push((f * t).sin());
            out.push((f * t).cos());
            f *= 2.0;
        }
        let u = (label as f64 + 0.5) / self.num_labels.max(1) as f64;
        let mut f = 2.0 * std::f64::consts::PI;
        for _ in 0..self.cond_freqs {
            out.push((f * u).sin());
            out.push((f * u).cos());
            f *= 2.0;
        }
    }
}

/// Anything that maps `(z_t, t, label)` batches to head outputs.
pub trait Predictor: Sync {
    fn dim(&self) -> usize;
    fn schedule(&self) -> Schedule;
    fn head(&self) -> PredictionKind;
    /// `z` is `[n, d]`; returns `[n, d]`.
    fn predict(&self, z: &Tensor, t: &[f64], labels: &[u32]) -> Result<Tensor, FlowError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub params: MlpParams,
    pub schedule: Schedule,
    pub head: PredictionKind,
    pub dim: usize,
    pub embedding: EmbeddingConfig,
}

impl Denoiser {
    pub fn widths(dim: usize, hidden: &[usize], embedding: &EmbeddingConfig) -> Vec<usize> {
        let mut w = vec![dim + embedding.width()];
        w.extend_from_slice(hidden);
        w.push(dim);
        w
    }

    pub fn new<R: Rng>(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        head: PredictionKind,
        schedule: Schedule,
        embedding: EmbeddingConfig,
        rng: &mut R,
    ) -> Self {
        let widths = Self::widths(dim, hidden, &embedding);
        Self {
            params: MlpParams::init(&widths, activation, rng),
            schedule,
            head,
            dim,
            embedding,
        }
    }

    /// Network input rows `[z | time embedding | label embedding]`.
    pub fn features(&self, z: &Tensor, t: &[f64], labels: &[u32]) -> Result<Tensor, FlowError> {
        let n = z.rows();
        if z.cols() != self.dim {
            return Err(FlowError::DimMismatch {
                expected: self.dim,
                got: z.cols(),
            });
        }
        assert_eq!(t.len(), n, "one time per row");
        assert_eq!(labels.len(), n, "one label per row");
        let width = self.dim + self.embedding.width();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(z.row(i));
            self.embedding.push_features(t[i], labels[i], &mut data);
        }
        Ok(Tensor::matrix(n, width, data))
    }

    /// Head output recorded on `tape` through the bound parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        z: &Tensor,
        t: &[f64],
        labels: &[u32],
    ) -> Result<Var, FlowError> {
        let x = self.features(z, t, labels)?;
        let input = tape.constant(x);
        Ok(bound.forward(tape, input)?)
    }
}

impl Predictor for Denoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn head(&self) -> PredictionKind {
        self.head
    }

    fn predict(&self, z: &Tensor, t: &[f64], labels: &[u32]) -> Result<Tensor, FlowError> {
        let x = self.features(z, t, labels)?;
        Ok(self.params.infer(&x)?)
    }
}

/// Records `p_i * z_i + q_i * out_i` row by row on the tape.
pub fn affine_rows(tape: &mut Tape, z: &Tensor, out: Var, coeffs: &[(f64, f64)]) -> Var {
    let zp: Vec<f64> = z
        .data()
        .chunks(z.cols())
        .zip(coeffs)
        .flat_map(|(row, &(p, _))| row.iter().map(move |&v| p * v))
        .collect();
    let zp = tape.constant(Tensor::matrix(z.rows(), z.cols(), zp));
    let q = tape.constant(Tensor::column(coeffs.iter().map(|c| c.1).collect()));
    let scaled = tape.mul_col(out, q);
    tape.add(zp, scaled)
}

/// Rows per private tape when a batch loss is split for fan-out.
pub const LOSS_CHUNK: usize = 64;

struct PretrainDraws {
    z: Tensor,
    target: Tensor,
    t: Vec<f64>,
    weight: Vec<f64>,
}

fn pretrain_draws<P: Predictor + ?Sized>(
    den: &P,
    batch: &Tensor,
    weight: LossWeight,
    seed: u64,
) -> Result<PretrainDraws, FlowError> {
    let n = batch.rows();
    if n == 0 {
        return Err(FlowError::EmptyBatch);
    }
    if batch.cols() != den.dim() {
        return Err(FlowError::DimMismatch {
            expected: den.dim(),
            got: batch.cols(),
        });
    }
    let mut rng = seed::rng(seed);
    let d = den.dim();
    let schedule = den.schedule();
    let mut z = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    let mut ws = Vec::with_capacity(n);
    for i in 0..n {
        // open interval keeps every head finite
        let t = loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let x = batch.row(i);
        z.extend(interpolate(x, &eps, t, &schedule)?);
        target.extend(regression_target(x, &eps, t, den.head(), &schedule));
        ts.push(t);
        ws.push(weight.at(t, &schedule)?);
    }
    Ok(PretrainDraws {
        z: Tensor::matrix(n, d, z),
        target: Tensor::matrix(n, d, target),
        t: ts,
        weight: ws,
    })
}

/// Mean over the batch of `w_t || NN(z_t) - r_t ||^2`, with `t ~ U(0, 1)` and
/// `eps ~ N(0, I)` drawn from `seed`.
pub fn pretrain_loss<P: Predictor + ?Sized>(
    den: &P,
    batch: &Tensor,
    labels: &[u32],
    weight: LossWeight,
    seed: u64,
) -> Result<f64, FlowError> {
    let dr = pretrain_draws(den, batch, weight, seed)?;
    let out = den.predict(&dr.z, &dr.t, labels)?;
    let d = den.dim();
    let total: f64 = (0..batch.rows())
        .map(|i| {
            let se: f64 = out
                .row(i)
                .iter()
                .zip(dr.target.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dr.weight[i] * se
        })
        .sum();
    debug_assert_eq!(out.cols(), d);
    Ok(total / batch.rows() as f64)
}

/// [`pretrain_loss`] and its parameter gradient.
pub fn pretrain_loss_and_grad(
    den: &Denoiser,
    batch: &Tensor,
    labels: &[u32],
    weight: LossWeight,
    seed: u64,
) -> Result<(f64, ParamGrads), FlowError> {
    let dr = pretrain_draws(den, batch, weight, seed)?;
    let n = batch.rows();
    let d = den.dim;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(LOSS_CHUNK)
        .map(|s| (s, (s + LOSS_CHUNK).min(n)))
        .collect();
    let parts = exec::map_ordered(&chunks, |_, &(s, e)| -> Result<(f64, ParamGrads), FlowError> {
        let rows = e - s;
        let z = Tensor::matrix(rows, d, dr.z.data()[s * d..e * d].to_vec());
        let target = Tensor::matrix(rows, d, dr.target.data()[s * d..e * d].to_vec());
        let mut tape = Tape::new();
        let bound = den.params.bind(&mut tape);
        let out = den.forward(&mut tape, &bound, &z, &dr.t[s..e], &labels[s..e])?;
        let tv = tape.constant(target);
        let r = tape.sub(out, tv);
        let sq = tape.square(r);
        let se = tape.row_sum(sq);
        let w = tape.constant(Tensor::column(dr.weight[s..e].to_vec()));
        let wse = tape.mul(se, w);
        let total = tape.sum(wse);
        let value = tape.value(total).item();
        let grads = tape.backward(total)?;
        Ok((value, bound.grads(&grads)))
    });
    let mut loss = 0.0;
    let mut grad = ParamGrads::zeros_like(&den.params);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.add_assign(&g);
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    const RF: Schedule = Schedule {
        kind: ScheduleKind::RectifiedFlow,
    };
    const KINDS: [PredictionKind; 3] = [PredictionKind::X, PredictionKind::Eps, PredictionKind::V];

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x = [1.5, -2.0];
        let e = [0.3, 0.7];
        assert_eq!(interpolate(&x, &e, 0.0, &RF).unwrap(), x.to_vec());
        assert_eq!(interpolate(&x, &e, 1.0, &RF).unwrap(), e.to_vec());
        assert_eq!(interpolate(&[2.0], &[0.0], 0.5, &RF).unwrap(), vec![1.0]);
        assert!(matches!(
            interpolate(&x, &e, 1.5, &RF),
            Err(FlowError::TimeOutOfRange(_))
        ));
    }

    #[test]
    fn targets_by_kind() {
        assert_eq!(regression_target(&[1.0], &[3.0], 0.4, PredictionKind::V, &RF), vec![2.0]);
        assert_eq!(regression_target(&[1.0], &[3.0], 0.9, PredictionKind::X, &RF), vec![1.0]);
        assert_eq!(regression_target(&[1.0], &[3.0], 0.1, PredictionKind::Eps, &RF), vec![3.0]);
    }

    #[test]
    fn x_prediction_from_each_head() {
        let (x, e, t) = ([0.8, -1.1], [0.2, 1.4], 0.3);
        let z = interpolate(&x, &e, t, &RF).unwrap();
        let v: Vec<f64> = e.iter().zip(&x).map(|(a, b)| a - b).collect();
        let xh = to_x_prediction(&v, &z, t, PredictionKind::V, &RF).unwrap();
        for (a, b) in xh.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
        let xh = to_x_prediction(&[5.0, 6.0], &z, t, PredictionKind::X, &RF).unwrap();
        assert_eq!(xh, vec![5.0, 6.0]);
        // (z - 0.5 eps) / 0.5 with z = 0.5 x + 0.5 eps
        let z = interpolate(&x, &e, 0.5, &RF).unwrap();
        let xh = to_x_prediction(&e, &z, 0.5, PredictionKind::Eps, &RF).unwrap();
        for (a, b) in xh.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            to_x_prediction(&e, &z, 1.0, PredictionKind::Eps, &RF),
            Err(FlowError::Singular { .. })
        ));
    }

    #[test]
    fn log_snr_values() {
        assert_eq!(log_snr(0.5, &RF).unwrap(), 0.0);
        assert!((log_snr(0.25, &RF).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((log_snr(0.25, &RF).unwrap() - 2.1972).abs() < 1e-4);
        assert!(log_snr(0.0, &RF).is_err());
        assert!(log_snr(1.0, &RF).is_err());
        let g = interior_grid(32);
        let l: Vec<f64> = g.iter().map(|&t| log_snr(t, &RF).unwrap()).collect();
        assert!(l.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn neg_dlog_snr_matches_finite_difference() {
        for &t in &[0.1, 0.37, 0.8] {
            let h = 1e-6;
            let fd = -(log_snr(t + h, &RF).unwrap() - log_snr(t - h, &RF).unwrap()) / (2.0 * h);
            assert!((neg_dlog_snr(t, &RF).unwrap() - fd).abs() < 1e-5);
        }
    }

    #[test]
    fn interior_grid_excludes_endpoints() {
        let g = interior_grid(4);
        assert_eq!(g, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn single_point_pretrain_loss_is_its_squared_error() {
        let mut rng = seed::rng(0);
        let den = Denoiser::new(
            2,
            &[8],
            Activation::Tanh,
            PredictionKind::V,
            RF,
            EmbeddingConfig::default(),
            &mut rng,
        );
        let batch = Tensor::matrix(1, 2, vec![0.4, -0.9]);
        let loss = pretrain_loss(&den, &batch, &[1], LossWeight::Uniform, 11).unwrap();
        // replay the same draws by hand
        let mut r = seed::rng(11);
        let t: f64 = r.gen();
        let e: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
        let z = interpolate(batch.row(0), &e, t, &RF).unwrap();
        let out = den.predict(&Tensor::matrix(1, 2, z), &[t], &[1]).unwrap();
        let target = regression_target(batch.row(0), &e, t, PredictionKind::V, &RF);
        let se: f64 = out.data().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(loss, se);
        let (l2, _) = pretrain_loss_and_grad(&den, &batch, &[1], LossWeight::Uniform, 11).unwrap();
        assert!((l2 - se).abs() < 1e-14);
        assert!(matches!(
            pretrain_loss(&den, &Tensor::zeros(&[0, 2]), &[], LossWeight::Uniform, 1),
            Err(FlowError::EmptyBatch)
        ));
    }

    proptest! {
        #[test]
        fn conversion_round_trips(
            x in prop::collection::vec(-3.0f64..3.0, 3),
            e in prop::collection::vec(-3.0f64..3.0, 3),
            t in 0.01f64..0.99,
            i in 0usize..3,
            j in 0usize..3,
        ) {
            let z = interpolate(&x, &e, t, &RF).unwrap();
            let (from, to) = (KINDS[i], KINDS[j]);
            let src = regression_target(&x, &e, t, from, &RF);
            let (p, q) = conversion(from, to, t, &RF).unwrap();
            let there: Vec<f64> = z.iter().zip(&src).map(|(a, b)| p * a + q * b).collect();
            let (p2, q2) = conversion(to, from, t, &RF).unwrap();
            let back: Vec<f64> = z.iter().zip(&there).map(|(a, b)| p2 * a + q2 * b).collect();
            let want = regression_target(&x, &e, t, to, &RF);
            for k in 0..3 {
                prop_assert!((there[k] - want[k]).abs() < 1e-12);
                prop_assert!((back[k] - src[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn interpolate_is_linear(
            x1 in prop::collection::vec(-3.0f64..3.0, 2),
            x2 in prop::collection::vec(-3.0f64..3.0, 2),
            e1 in prop::collection::vec(-3.0f64..3.0, 2),
            e2 in prop::collection::vec(-3.0f64..3.0, 2),
            k in -2.0f64..2.0,
            t in 0.0f64..1.0,
        ) {
            let xs: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + k * b).collect();
            let es: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + k * b).collect();
            let lhs = interpolate(&xs, &es, t, &RF).unwrap();
            let z1 = interpolate(&x1, &e1, t, &RF).unwrap();
            let z2 = interpolate(&x2, &e2, t, &RF).unwrap();
            for i in 0..2 {
                prop_assert!((lhs[i] - (z1[i] + k * z2[i])).abs() < 1e-12);
            }
        }
    }
}
