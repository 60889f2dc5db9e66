//! Tape gradients against central differences of the straight-line
//! reference implementations, over many random small networks.

use proptest::prelude::*;
use vgrpo_core::flow::interior_grid;
use vgrpo_core::gradcheck::{check, random_net, random_rows, surrogate_grad, with_params, LossPath, REL, STEP};
use vgrpo_core::oracle::{self, finite_diff_gradient, flatten};
use vgrpo_core::seed;
use vgrpo_core::surrogate::{draw_stratified_pairs, Weighting};
use vgrpo_core::tensor::{Tape, Tensor};

fn assert_close(auto: &[f64], fd: &[f64], what: &str) {
    let m = vgrpo_core::gradcheck::compare(auto, fd);
    assert!(m.passed(), "{what}: coordinate {}: autodiff {} vs fd {}", m.worst_index, auto[m.worst_index], fd[m.worst_index]);
}

fn all_cases(path: LossPath) {
    for case in 0..100 {
        let m = check(path, case);
        assert!(m.passed(), "{path:?} case {case}: {m:?}");
    }
}

#[test]
fn pretraining_loss_gradients() {
    all_cases(LossPath::Pretrain);
}

#[test]
fn generic_surrogate_gradients() {
    all_cases(LossPath::GenericSurrogate);
}

#[test]
fn adaptive_surrogate_gradients_hold_the_scale_fixed() {
    all_cases(LossPath::AdaptiveSurrogate);
}

#[test]
fn kl_gradients() {
    all_cases(LossPath::Kl);
}

#[test]
fn removing_the_stop_gradient_changes_the_gradient_only() {
    let den = random_net(4);
    let grid = interior_grid(8);
    let mut rng = seed::rng(3);
    let o = random_rows(&mut rng, 1);
    let set = draw_stratified_pairs(&grid, 1, 2, 2).unwrap();
    let (t, e) = (set.times[0], &set.noises[0]);
    let flat = flatten(&den.params);
    let scale = oracle::reference_adaptive_scale(&den, o.row(0), e, t, 0);
    let with_sg = finite_diff_gradient(
        |p| oracle::reference_adaptive_loss(&with_params(&den, p), o.row(0), e, t, 0, Some(scale)),
        &flat,
        STEP,
    );
    let without = finite_diff_gradient(
        |p| oracle::reference_adaptive_loss(&with_params(&den, p), o.row(0), e, t, 0, None),
        &flat,
        STEP,
    );
    let fixed = oracle::reference_adaptive_loss(&den, o.row(0), e, t, 0, Some(scale));
    let free = oracle::reference_adaptive_loss(&den, o.row(0), e, t, 0, None);
    assert_eq!(fixed, free);
    let gap: f64 = with_sg.iter().zip(&without).map(|(a, b)| (a - b).abs()).sum();
    assert!(gap > 1e-6, "gradients should differ, gap {gap}");
    let auto = surrogate_grad(&den, &o, &[0], &set, Weighting::Adaptive);
    assert_close(&auto, &with_sg, "stop-gradient branch");
}

fn unary_case(op: &str, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f = |v: &[f64]| -> f64 {
        v.iter()
            .map(|&a| match op {
                "tanh" => a.tanh(),
                "silu" => a / (1.0 + (-a).exp()),
                "exp" => a.exp(),
                "square" => a * a,
                "abs" => a.abs(),
                _ => unreachable!(),
            })
            .enumerate()
            .map(|(i, y)| (i as f64 + 1.0) * y)
            .sum()
    };
    let mut tape = Tape::new();
    let v = tape.param(Tensor::matrix(1, x.len(), x.to_vec()));
    let y = match op {
        "tanh" => tape.tanh(v),
        "silu" => tape.silu(v),
        "exp" => tape.exp(v),
        "square" => tape.square(v),
        "abs" => tape.abs(v),
        _ => unreachable!(),
    };
    let w = tape.constant(Tensor::matrix(1, x.len(), (1..=x.len()).map(|i| i as f64).collect()));
    let wy = tape.mul(y, w);
    let s = tape.sum(wy);
    let g = tape.backward(s).unwrap();
    (g.get(v).unwrap().data().to_vec(), finite_diff_gradient(f, x, STEP))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_ops_match_finite_differences(
        x in prop::collection::vec(-2.0f64..2.0, 1..6),
        k in 0usize..5,
    ) {
        let op = ["tanh", "silu", "exp", "square", "abs"][k];
        // |x| is not differentiable at 0
        prop_assume!(op != "abs" || x.iter().all(|v| v.abs() > 1e-3));
        let (auto, fd) = unary_case(op, &x);
        for (a, f) in auto.iter().zip(&fd) {
            prop_assert!((a - f).abs() <= REL * a.abs().max(f.abs()) + 1e-8, "{op}: {a} vs {f}");
        }
    }

    #[test]
    fn matmul_and_row_ops_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
        c in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let f = |p: &[f64]| -> f64 {
            // [2,3] x [3,2] + row, tanh, row sums, mean over 2 rows, divided
            let (a, b, c) = (&p[..6], &p[6..12], &p[12..14]);
            let mut total = 0.0;
            for i in 0..2 {
                let mut rs = 0.0;
                for j in 0..2 {
                    let mut acc = c[j];
                    for k in 0..3 {
                        acc += a[i * 3 + k] * b[k * 2 + j];
                    }
                    rs += acc.tanh();
                }
                total += rs / (2.0 + p[i].powi(2));
            }
            total / 2.0
        };
        let flat: Vec<f64> = a.iter().chain(&b).chain(&c).copied().collect();
        let mut tape = Tape::new();
        let va = tape.param(Tensor::matrix(2, 3, a.clone()));
        let vb = tape.param(Tensor::matrix(3, 2, b.clone()));
        let vc = tape.param(Tensor::matrix(1, 2, c.clone()));
        let m = tape.matmul(va, vb).unwrap();
        let m = tape.add_row(m, vc).unwrap();
        let h = tape.tanh(m);
        let rs = tape.row_sum(h);
        let den = tape.constant(Tensor::column(vec![2.0, 2.0]));
        // the denominator reads a[0], a[1] through a second leaf
        let a01 = tape.param(Tensor::column(vec![a[0], a[1]]));
        let a01sq = tape.square(a01);
        let dd = tape.add(den, a01sq);
        let q = tape.div(rs, dd);
        let loss = tape.mean(q);
        let g = tape.backward(loss).unwrap();
        let mut auto: Vec<f64> = g.get(va).unwrap().data().to_vec();
        let ga01 = g.get(a01).unwrap().data().to_vec();
        auto[0] += ga01[0];
        auto[1] += ga01[1];
        auto.extend_from_slice(g.get(vb).unwrap().data());
        auto.extend_from_slice(g.get(vc).unwrap().data());
        let fd = finite_diff_gradient(f, &flat, STEP);
        for (x, y) in auto.iter().zip(&fd) {
            prop_assert!((x - y).abs() <= REL * x.abs().max(y.abs()) + 1e-8, "{x} vs {y}");
        }
    }
}

#[test]
fn batched_and_single_rows_agree_bitwise() {
    let den = random_net(10);
    let mut rng = seed::rng(8);
    let z = random_rows(&mut rng, 5);
    let t = [0.1, 0.3, 0.5, 0.7, 0.9];
    let labels = [0, 1, 0, 1, 1];
    use vgrpo_core::flow::Predictor;
    let all = den.predict(&z, &t, &labels).unwrap();
    for i in 0..5 {
        let one = den
            .predict(&Tensor::matrix(1, 2, z.row(i).to_vec()), &t[i..=i], &labels[i..=i])
            .unwrap();
        assert_eq!(one.data(), all.row(i));
        let reference = oracle::reference_denoiser(&den, z.row(i), t[i], labels[i]);
        for (a, b) in reference.iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
