//! Tape gradients of every loss path against central differences of the
//! straight-line references in [`crate::oracle`], on random small networks.
//!
//! Each case returns the worst coordinate mismatch; a case passes when
//! `|auto - fd| <= REL * max(|auto|, |fd|) + ABS` holds everywhere.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::flow::{interior_grid, pretrain_loss_and_grad, Denoiser, EmbeddingConfig, LossWeight, PredictionKind, Schedule};
use crate::oracle::{self, finite_diff_gradient, flatten, unflatten};
use crate::seed;
use crate::surrogate::{self, draw_stratified_pairs, TimestepNoiseSet, Weighting};
use crate::tensor::{Activation, Tape, Tensor};

pub const STEP: f64 = 1e-5;
pub const REL: f64 = 1e-4;
pub const ABS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPath {
    Pretrain,
    GenericSurrogate,
    AdaptiveSurrogate,
    Kl,
}

impl LossPath {
    pub const ALL: [LossPath; 4] = [
        LossPath::Pretrain,
        LossPath::GenericSurrogate,
        LossPath::AdaptiveSurrogate,
        LossPath::Kl,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub coordinates: usize,
    /// Worst `|auto - fd| / (REL * max(|auto|, |fd|) + ABS)`; at most 1 when
    /// the case passes.
    pub worst: f64,
    pub worst_index: usize,
}

impl Mismatch {
    pub fn passed(&self) -> bool {
        self.worst <= 1.0
    }
}

pub fn compare(auto: &[f64], fd: &[f64]) -> Mismatch {
    assert_eq!(auto.len(), fd.len());
    let mut m = Mismatch {
        coordinates: auto.len(),
        worst: 0.0,
        worst_index: 0,
    };
    for (i, (a, f)) in auto.iter().zip(fd).enumerate() {
        let r = (a - f).abs() / (REL * a.abs().max(f.abs()) + ABS);
        if !(r <= m.worst) {
            m.worst = r;
            m.worst_index = i;
        }
    }
    m
}

/// Network with one or two narrow hidden layers, varying activation and head.
pub fn random_net(case: u64) -> Denoiser {
    let mut rng = seed::rng(1000 + case);
    let hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(3..=6)).collect();
    let activation = if case.is_multiple_of(2) { Activation::Silu } else { Activation::Tanh };
    let head = [PredictionKind::V, PredictionKind::X, PredictionKind::Eps][(case % 3) as usize];
    let mut den = Denoiser::new(
        2,
        &hidden,
        activation,
        head,
        Schedule::rectified_flow(),
        EmbeddingConfig {
            time_freqs: 2,
            cond_freqs: 1,
            num_labels: 2,
        },
        &mut rng,
    );
    // lift the small output gain so every layer matters
    for t in den.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    den
}

pub fn random_rows(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

pub fn with_params(den: &Denoiser, flat: &[f64]) -> Denoiser {
    let mut d = den.clone();
    unflatten(&mut d.params, flat);
    d
}

fn elbo_or_one(weight: LossWeight, t: f64) -> f64 {
    match weight {
        LossWeight::Uniform => 1.0,
        LossWeight::Elbo => 1.0 / (t * (1.0 - t)),
    }
}

pub fn surrogate_grad(den: &Denoiser, o: &Tensor, labels: &[u32], set: &TimestepNoiseSet, w: Weighting) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = den.params.bind(&mut tape);
    let sets = vec![set; o.rows()];
    let s = surrogate::surrogate_on_tape(&mut tape, den, &bound, o, labels, &sets, w, PredictionKind::X).unwrap();
    let total = tape.sum(s.per_output);
    let g = tape.backward(total).unwrap();
    bound.grads(&g).0.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn pretrain_case(case: u64) -> Mismatch {
    let den = random_net(case);
    let mut rng = seed::rng(case);
    let batch = random_rows(&mut rng, 3);
    let labels = [0, 1, 1];
    let weight = if case.is_multiple_of(4) { LossWeight::Elbo } else { LossWeight::Uniform };
    let draw_seed = 77 + case;
    let (_, grads) = pretrain_loss_and_grad(&den, &batch, &labels, weight, draw_seed).unwrap();
    let auto: Vec<f64> = grads.0.iter().flat_map(|t| t.data().to_vec()).collect();

    // replay the documented draw order: t in (0, 1), then d normals
    let mut r = seed::rng(draw_seed);
    let draws: Vec<(f64, Vec<f64>)> = (0..3)
        .map(|_| {
            let t = loop {
                let u: f64 = r.gen();
                if u > 0.0 {
                    break u;
                }
            };
            (t, (0..2).map(|_| r.sample(StandardNormal)).collect())
        })
        .collect();
    let fd = finite_diff_gradient(
        |p| {
            let d = with_params(&den, p);
            draws
                .iter()
                .enumerate()
                .map(|(i, (t, e))| {
                    oracle::reference_regression_loss(&d, batch.row(i), e, *t, labels[i], elbo_or_one(weight, *t))
                })
                .sum::<f64>()
                / 3.0
        },
        &flatten(&den.params),
        STEP,
    );
    compare(&auto, &fd)
}

fn generic_case(case: u64) -> Mismatch {
    let grid = interior_grid(8);
    let den = random_net(case);
    let mut rng = seed::rng(500 + case);
    let o = random_rows(&mut rng, 2);
    let labels = [1, 0];
    let set = draw_stratified_pairs(&grid, 4, 2, case).unwrap();
    let weight = if case.is_multiple_of(2) { LossWeight::Elbo } else { LossWeight::Uniform };
    let auto = surrogate_grad(&den, &o, &labels, &set, Weighting::Generic(weight));
    let fd = finite_diff_gradient(
        |p| {
            let d = with_params(&den, p);
            let mut total = 0.0;
            for i in 0..2 {
                for (t, e) in set.times.iter().zip(&set.noises) {
                    total += oracle::reference_regression_loss(&d, o.row(i), e, *t, labels[i], elbo_or_one(weight, *t)) / 4.0;
                }
            }
            total
        },
        &flatten(&den.params),
        STEP,
    );
    compare(&auto, &fd)
}

fn adaptive_case(case: u64) -> Mismatch {
    let grid = interior_grid(8);
    let den = random_net(case);
    let mut rng = seed::rng(900 + case);
    let o = random_rows(&mut rng, 2);
    let labels = [0, 1];
    let set = draw_stratified_pairs(&grid, 4, 2, 31 + case).unwrap();
    let auto = surrogate_grad(&den, &o, &labels, &set, Weighting::Adaptive);
    // the detached scale is frozen at the base parameters
    let scales: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            set.times
                .iter()
                .zip(&set.noises)
                .map(|(t, e)| oracle::reference_adaptive_scale(&den, o.row(i), e, *t, labels[i]))
                .collect()
        })
        .collect();
    let fd = finite_diff_gradient(
        |p| {
            let d = with_params(&den, p);
            let mut total = 0.0;
            for i in 0..2 {
                for (j, (t, e)) in set.times.iter().zip(&set.noises).enumerate() {
                    total += oracle::reference_adaptive_loss(&d, o.row(i), e, *t, labels[i], Some(scales[i][j])) / 4.0;
                }
            }
            total
        },
        &flatten(&den.params),
        STEP,
    );
    compare(&auto, &fd)
}

fn kl_case(case: u64) -> Mismatch {
    let grid = interior_grid(8);
    let old = random_net(case);
    let mut den = old.clone();
    let mut rng = seed::rng(1300 + case);
    for t in den.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let o = random_rows(&mut rng, 2);
    let labels = [1, 1];
    let set = draw_stratified_pairs(&grid, 4, 2, 7 + case).unwrap();
    let sets = vec![&set; 2];
    let stored = surrogate::evaluate_batch(&old, &o, &labels, &sets, Weighting::Adaptive, PredictionKind::X).unwrap();
    let mut tape = Tape::new();
    let bound = den.params.bind(&mut tape);
    let s = surrogate::surrogate_on_tape(&mut tape, &den, &bound, &o, &labels, &sets, Weighting::Adaptive, PredictionKind::X)
        .unwrap();
    let old_preds = tape.constant(stored.kl_preds.clone());
    let diff = tape.sub(s.kl_preds, old_preds);
    let sq = tape.square(diff);
    let rs = tape.row_sum(sq);
    let kl = tape.segment_mean(rs, 4);
    let total = tape.sum(kl);
    let g = tape.backward(total).unwrap();
    let auto: Vec<f64> = bound.grads(&g).0.iter().flat_map(|t| t.data().to_vec()).collect();
    let fd = finite_diff_gradient(
        |p| {
            let d = with_params(&den, p);
            let mut total = 0.0;
            for i in 0..2 {
                for (t, e) in set.times.iter().zip(&set.noises) {
                    total += oracle::reference_kl_term(&d, &old, o.row(i), e, *t, labels[i]) / 4.0;
                }
            }
            total
        },
        &flatten(&den.params),
        STEP,
    );
    compare(&auto, &fd)
}

/// One random network and input for `path`, numbered by `case`.
pub fn check(path: LossPath, case: u64) -> Mismatch {
    match path {
        LossPath::Pretrain => pretrain_case(case),
        LossPath::GenericSurrogate => generic_case(case),
        LossPath::AdaptiveSurrogate => adaptive_case(case),
        LossPath::Kl => kl_case(case),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_flags_the_worst_coordinate() {
        let m = compare(&[1.0, 2.0, 3.0], &[1.0, 2.001, 3.0]);
        assert_eq!(m.worst_index, 1);
        assert!(!m.passed());
        assert!(compare(&[0.0, 1.0], &[1e-9, 1.0 + 1e-5]).passed());
        assert!(!compare(&[f64::NAN], &[0.0]).passed());
    }
}
