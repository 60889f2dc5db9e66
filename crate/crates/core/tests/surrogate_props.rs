use std::sync::Arc;

use proptest::prelude::{prop, prop_assert, proptest};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vgrpo_core::flow::{interior_grid, LossWeight, PredictionKind, Predictor, Schedule};
use vgrpo_core::oracle::{spearman, AnalyticDenoiser, GaussianProblem};
use vgrpo_core::seed;
use vgrpo_core::surrogate::{
    draw_stratified_pairs, draw_uniform_pairs, estimate_surrogate, evaluate_batch, per_sample_loss, TimestepNoiseSet,
    Weighting,
};
use vgrpo_core::tensor::Tensor;

fn problem() -> GaussianProblem {
    GaussianProblem::new(vec![0.5, -0.3], vec![0.6, 0.9])
}

#[test]
fn stratum_draws_are_uniform_within_each_block() {
    let grid = interior_grid(40);
    let block = 10;
    let mut counts = vec![vec![0usize; block]; 4];
    for s in 0..10_000u64 {
        let set = draw_stratified_pairs(&grid, 4, 2, s).unwrap();
        assert_eq!(set.len(), 4);
        for (j, &t) in set.times.iter().enumerate() {
            let k = grid.iter().position(|&g| g == t).unwrap();
            assert_eq!(k / block, j, "pair {j} left its stratum");
            counts[j][k % block] += 1;
        }
    }
    let chi = ChiSquared::new((block - 1) as f64).unwrap();
    let expected = 10_000.0 / block as f64;
    for (j, c) in counts.iter().enumerate() {
        let stat: f64 = c.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.01, "stratum {j}: chi2 {stat} p {p}");
    }
}

#[test]
fn full_stratification_visits_every_point_once() {
    let grid = interior_grid(8);
    let set = draw_stratified_pairs(&grid, 8, 3, 7).unwrap();
    assert_eq!(set.times, grid);
    assert!(draw_stratified_pairs(&grid, 3, 3, 7).is_err());
}

#[test]
fn group_members_share_one_pair_set() {
    let den = AnalyticDenoiser { problem: problem() };
    let set: Arc<TimestepNoiseSet> = Arc::new(draw_stratified_pairs(&interior_grid(32), 4, 2, 3).unwrap());
    let members: Vec<Arc<TimestepNoiseSet>> = (0..12).map(|_| Arc::clone(&set)).collect();
    assert!(members.iter().all(|m| Arc::ptr_eq(m, &set)));
    let outputs = Tensor::from_rows(&(0..12).map(|i| vec![0.1 * i as f64, -0.2]).collect::<Vec<_>>());
    let refs: Vec<&TimestepNoiseSet> = members.iter().map(|m| m.as_ref()).collect();
    let ev = evaluate_batch(&den, &outputs, &[0; 12], &refs, Weighting::Adaptive, PredictionKind::X).unwrap();
    for i in 0..12 {
        let single = estimate_surrogate(&den, outputs.row(i), 0, &set, Weighting::Adaptive).unwrap();
        assert_eq!(ev.per_output[i], single);
    }
}

#[test]
fn mc_spread_shrinks_as_inverse_root_n() {
    let den = AnalyticDenoiser { problem: problem() };
    let grid = interior_grid(32);
    let o = [0.9, 0.4];
    let scaled: Vec<f64> = [2usize, 4, 8, 16]
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = (0..400u64)
                .map(|r| {
                    let set = draw_uniform_pairs(&grid, n, 2, seed::derive(11, &[n as u64, r])).unwrap();
                    estimate_surrogate(&den, &o, 0, &set, Weighting::Adaptive).unwrap()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            sd * (n as f64).sqrt()
        })
        .collect();
    let hi = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let lo = scaled.iter().cloned().fold(f64::MAX, f64::min);
    assert!(hi / lo <= 1.5, "sd * sqrt(n) = {scaled:?}");
}

#[test]
fn generic_loss_matches_closed_form_expectation() {
    let g = problem();
    let den = AnalyticDenoiser { problem: g.clone() };
    let grid = interior_grid(32);
    let o = [1.1, -0.7];
    let set = draw_uniform_pairs(&grid, 100_000, 2, 5).unwrap();
    let ev = evaluate_batch(
        &den,
        &Tensor::matrix(1, 2, o.to_vec()),
        &[0],
        &[&set],
        Weighting::Generic(LossWeight::Uniform),
        PredictionKind::X,
    )
    .unwrap();
    let n = ev.per_pair.len() as f64;
    let mean = ev.per_output[0];
    let var = ev.per_pair.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let want = grid.iter().map(|&t| g.expected_v_residual(&o, t)).sum::<f64>() / grid.len() as f64;
    assert!((mean - want).abs() <= 3.0 * se, "mc {mean} analytic {want} se {se}");
}

#[test]
fn negative_surrogate_ranks_like_log_density() {
    let g = problem();
    let den = AnalyticDenoiser { problem: g.clone() };
    let grid = interior_grid(32);
    let mut rng = seed::rng(21);
    let points: Vec<Vec<f64>> = (0..200).map(|_| g.sample(&mut rng)).collect();
    let neg: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let set = draw_uniform_pairs(&grid, 10_000, 2, seed::derive(21, &[i as u64])).unwrap();
            -estimate_surrogate(&den, o, 0, &set, Weighting::Adaptive).unwrap()
        })
        .collect();
    let exact: Vec<f64> = points.iter().map(|o| g.exact_logpdf(o)).collect();
    let rho = spearman(&neg, &exact);
    assert!(rho >= 0.9, "spearman {rho}");
}

/// x-prediction that is constant in `z`, so the residual is known in advance.
struct ConstX(Vec<f64>);

impl Predictor for ConstX {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn schedule(&self) -> Schedule {
        Schedule::rectified_flow()
    }
    fn head(&self) -> PredictionKind {
        PredictionKind::X
    }
    fn predict(&self, z: &Tensor, _t: &[f64], _labels: &[u32]) -> Result<Tensor, vgrpo_core::flow::FlowError> {
        let data = (0..z.rows()).flat_map(|_| self.0.iter().copied()).collect();
        Ok(Tensor::matrix(z.rows(), self.0.len(), data))
    }
}

#[test]
fn adaptive_loss_edge_values() {
    let o = [0.3, -0.2, 1.0];
    let (l, flag) = per_sample_loss(&ConstX(o.to_vec()), &o, 0, 0.5, &[0.1, 0.2, 0.3], Weighting::Adaptive).unwrap();
    assert_eq!((l, flag), (0.0, true));
    let k = 0.7;
    let shifted: Vec<f64> = o.iter().map(|v| v + k).collect();
    let (l, flag) = per_sample_loss(&ConstX(shifted), &o, 0, 0.5, &[0.1, 0.2, 0.3], Weighting::Adaptive).unwrap();
    assert!(!flag);
    assert!((l - 3.0 * k).abs() < 1e-12);
}

proptest! {
    #[test]
    fn adaptive_loss_is_linear_in_residual_scale(
        r in prop::collection::vec(-2.0f64..2.0, 2),
        k in 0.01f64..50.0,
        t in 0.05f64..0.95,
    ) {
        prop_assume_nonzero(&r)?;
        let o = [0.4, -1.2];
        let pred = |s: f64| ConstX(o.iter().zip(&r).map(|(a, b)| a + s * b).collect());
        let eps = [0.3, -0.5];
        let (base, _) = per_sample_loss(&pred(1.0), &o, 0, t, &eps, Weighting::Adaptive).unwrap();
        let (scaled, _) = per_sample_loss(&pred(k), &o, 0, t, &eps, Weighting::Adaptive).unwrap();
        prop_assert!((scaled - k * base).abs() <= 1e-9 * (1.0 + k * base));
    }

    #[test]
    fn surrogate_is_symmetric_in_pair_order(seed_value in 0u64..1000, shift in 1usize..4) {
        let den = AnalyticDenoiser { problem: problem() };
        let set = draw_uniform_pairs(&interior_grid(16), 4, 2, seed_value).unwrap();
        let mut rotated = set.clone();
        rotated.times.rotate_left(shift);
        rotated.noises.rotate_left(shift);
        let mut rng = seed::rng(seed_value);
        let o = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let a = estimate_surrogate(&den, &o, 0, &set, Weighting::Adaptive).unwrap();
        let b = estimate_surrogate(&den, &o, 0, &rotated, Weighting::Adaptive).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

fn prop_assume_nonzero(r: &[f64]) -> Result<(), proptest::test_runner::TestCaseError> {
    if r.iter().map(|v| v.abs()).sum::<f64>() < 1e-3 {
        return Err(proptest::test_runner::TestCaseError::reject("zero residual"));
    }
    Ok(())
}
