//! Held-out evaluation of a checkpoint, the surrogate variance probe and the
//! oracle checks behind `eval --oracle`.

use std::path::Path;

use rand::Rng;
use serde::Serialize;
use vgrpo_core::flow::{interior_grid, pretrain_loss, pretrain_loss_and_grad, Denoiser};
use vgrpo_core::grpo::{collect_groups, store_old_surrogates, IterationContext};
use vgrpo_core::oracle::{self, AnalyticDenoiser, GaussianProblem};
use vgrpo_core::sampler::{sample_batch, SamplerConfig, SamplerKind};
use vgrpo_core::seed;
use vgrpo_core::surrogate::{draw_uniform_pairs, estimate_surrogate, SurrogateConfig, Weighting};

use crate::ablate::naive_surrogate;
use crate::config::{RunConfig, METRICS_SCHEMA};
use crate::error::{LabError, Result};
use crate::model;
use crate::posttrain::{evaluate_heldout, Heldout, RewardReport};
use crate::pretrain::sample_quality;
use crate::stats;

/// Stream part for the evaluation-only draws below, well away from the
/// training streams.
const EVAL_STREAM: u64 = 0xE7A1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceProbe {
    pub groups: usize,
    pub n_mc: usize,
    /// Shared, stratified, adaptive.
    pub full_cv: f64,
    /// Independent uniform pairs, uniform weights.
    pub naive_cv: f64,
    pub ratio: f64,
}

fn within_cv_under(cfg: &RunConfig, den: &Denoiser, groups: usize, surrogate: SurrogateConfig) -> Result<f64> {
    let st = &cfg.stages[0];
    let mut tc = st.train.clone();
    tc.grad_steps = 1;
    tc.prompts_per_batch = groups;
    tc.surrogate = surrogate;
    tc.sampler.p_mix = 1.0;
    let ctx = IterationContext {
        config: &tc,
        conditions: &cfg.conditions,
        reward: &st.reward,
        reference: None,
        global_seed: seed::derive(cfg.seed, &[EVAL_STREAM]),
        iteration: 0,
    };
    let mut gb = collect_groups(den, &ctx)?;
    store_old_surrogates(den, &mut gb, &tc.surrogate)?;
    let vals: Vec<Vec<f64>> = gb.iter().map(|g| g.old.as_ref().unwrap().per_output.clone()).collect();
    stats::within_group_cv(&vals).ok_or_else(|| LabError::Numeric("within-group CV undefined".into()))
}

/// Mean within-group CV of the surrogate on one batch of groups from a
/// frozen policy, for the full estimator and the naive one. Both see the same
/// rollouts.
pub fn variance_probe(cfg: &RunConfig, den: &Denoiser, groups: usize, n_mc: usize) -> Result<VarianceProbe> {
    let base = SurrogateConfig {
        n_mc,
        ..cfg.stages[0].train.surrogate
    };
    let full = SurrogateConfig {
        shared: true,
        stratified: true,
        weighting: Weighting::Adaptive,
        ..base
    };
    let full_cv = within_cv_under(cfg, den, groups, full)?;
    let naive_cv = within_cv_under(cfg, den, groups, naive_surrogate(base))?;
    Ok(VarianceProbe {
        groups,
        n_mc,
        full_cv,
        naive_cv,
        ratio: full_cv / naive_cv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Pretraining-loss gradient of `den` against central differences on a
/// random subset of parameters.
pub fn gradient_check(cfg: &RunConfig, den: &Denoiser, coordinates: usize) -> Result<GradientCheck> {
    let (x, labels) = cfg
        .data
        .sample(4, cfg.conditions.num_labels, seed::derive(cfg.seed, &[EVAL_STREAM, 1]));
    let draw = seed::derive(cfg.seed, &[EVAL_STREAM, 2]);
    let w = cfg.pretrain.weight;
    let (_, grads) = pretrain_loss_and_grad(den, &x, &labels, w, draw)?;
    let auto: Vec<f64> = grads.0.iter().flat_map(|t| t.data().to_vec()).collect();
    let flat = oracle::flatten(&den.params);
    let mut rng = seed::derived_rng(cfg.seed, &[EVAL_STREAM, 3]);
    let picks: Vec<usize> = (0..coordinates.min(flat.len())).map(|_| rng.gen_range(0..flat.len())).collect();
    let step = 1e-5;
    let mut probe = den.clone();
    let (mut max_rel, mut ok): (f64, bool) = (0.0, true);
    for &i in &picks {
        let mut at = |v: f64| -> Result<f64> {
            let mut p = flat.clone();
            p[i] = v;
            oracle::unflatten(&mut probe.params, &p);
            Ok(pretrain_loss(&probe, &x, &labels, w, draw)?)
        };
        let fd = (at(flat[i] + step)? - at(flat[i] - step)?) / (2.0 * step);
        let a = auto[i];
        let scale = a.abs().max(fd.abs());
        ok &= (a - fd).abs() <= 1e-4 * scale + 1e-8;
        max_rel = max_rel.max((a - fd).abs() / scale.max(1e-4));
    }
    Ok(GradientCheck {
        coordinates: picks.len(),
        max_rel_error: max_rel,
        passed: ok,
    })
}

/// Spearman correlation between `-L` of the analytic denoiser and the exact
/// log-density on `points` draws from the Gaussian problem.
pub fn gaussian_fidelity(problem: &GaussianProblem, points: usize, n_mc: usize, seed_value: u64) -> Result<f64> {
    let den = AnalyticDenoiser {
        problem: problem.clone(),
    };
    let grid = interior_grid(32);
    let mut rng = seed::rng(seed_value);
    let xs: Vec<Vec<f64>> = (0..points).map(|_| problem.sample(&mut rng)).collect();
    let neg: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let set = draw_uniform_pairs(&grid, n_mc, problem.dim(), seed::derive(seed_value, &[i as u64]))?;
            Ok(-estimate_surrogate(&den, o, 0, &set, Weighting::Adaptive)?)
        })
        .collect::<Result<_>>()?;
    let exact: Vec<f64> = xs.iter().map(|o| problem.exact_logpdf(o)).collect();
    Ok(stats::spearman(&neg, &exact))
}

/// Same ranking check for a trained model against the data mixture density,
/// conditioned on label 0. Reported only: the model's conditional need not
/// match the unconditional data density.
pub fn model_fidelity(cfg: &RunConfig, den: &Denoiser, points: usize, n_mc: usize) -> Result<f64> {
    let grid = interior_grid(32);
    let (x, _) = cfg
        .data
        .sample(points, cfg.conditions.num_labels, seed::derive(cfg.seed, &[EVAL_STREAM, 4]));
    let neg: Vec<f64> = (0..points)
        .map(|i| {
            let set = draw_uniform_pairs(&grid, n_mc, cfg.dim(), seed::derive(cfg.seed, &[EVAL_STREAM, 5, i as u64]))?;
            Ok(-estimate_surrogate(den, x.row(i), 0, &set, Weighting::Adaptive)?)
        })
        .collect::<Result<_>>()?;
    let exact: Vec<f64> = (0..points).map(|i| cfg.data.logpdf(x.row(i))).collect();
    Ok(stats::spearman(&neg, &exact))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplerOrders {
    /// Error ratios between step counts 16/32 and 32/64.
    pub euler: Vec<f64>,
    pub second_order: Vec<f64>,
    pub sde_zero_noise_matches_ode: bool,
    pub passed: bool,
}

fn terminal_error(p: &AnalyticDenoiser, kind: SamplerKind, steps: usize) -> Result<f64> {
    let seeds: Vec<u64> = (0..8).collect();
    let sc = SamplerConfig {
        kind,
        steps,
        ..Default::default()
    };
    let recs = sample_batch(p, &[0; 8], &seeds, &sc)?;
    Ok(recs
        .iter()
        .map(|r| {
            let want = p.problem.transport(&r.initial_noise, 0.0);
            r.output.iter().zip(&want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max))
}

/// Terminal-error halving ratios on the analytic Gaussian problem.
pub fn sampler_orders() -> Result<SamplerOrders> {
    let p = AnalyticDenoiser {
        problem: GaussianProblem::new(vec![1.0, -0.5], vec![0.4, 0.8]),
    };
    let ratios = |kind| -> Result<Vec<f64>> {
        let e = [16, 32, 64]
            .iter()
            .map(|&t| terminal_error(&p, kind, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![e[0] / e[1], e[1] / e[2]])
    };
    let euler = ratios(SamplerKind::EulerOde)?;
    let second_order = ratios(SamplerKind::SecondOrderOde)?;
    let seeds: Vec<u64> = (0..8).collect();
    let ode = sample_batch(&p, &[0; 8], &seeds, &SamplerConfig::default())?;
    let sde = sample_batch(
        &p,
        &[0; 8],
        &seeds,
        &SamplerConfig {
            kind: SamplerKind::SdeFirstOrder,
            noise_level: 0.0,
            ..Default::default()
        },
    )?;
    let same = ode.iter().zip(&sde).all(|(a, b)| a.output == b.output);
    let passed = euler.iter().all(|r| (1.7..=2.3).contains(r))
        && second_order.iter().all(|r| (3.4..=4.6).contains(r))
        && same;
    Ok(SamplerOrders {
        euler,
        second_order,
        sde_zero_noise_matches_ode: same,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub gradient: GradientCheck,
    pub gaussian_spearman: f64,
    pub sampler_orders: SamplerOrders,
    pub model_spearman: f64,
    pub variance_probe: VarianceProbe,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub metrics_schema: u32,
    pub checkpoint: String,
    /// Held-out rewards under each stage's reward spec.
    pub heldout: Vec<(String, RewardReport)>,
    pub energy_distance: f64,
    pub oracle: Option<OracleReport>,
}

pub fn oracle_report(cfg: &RunConfig, den: &Denoiser) -> Result<OracleReport> {
    let e = &cfg.eval;
    let gradient = gradient_check(cfg, den, 64)?;
    let problem = GaussianProblem::new(vec![0.5, -0.3], vec![0.6, 0.9]);
    let gaussian_spearman = gaussian_fidelity(&problem, e.oracle_points, e.oracle_n_mc, cfg.seed)?;
    let sampler_orders = sampler_orders()?;
    let model_spearman = model_fidelity(cfg, den, e.oracle_points, e.oracle_n_mc.min(1000))?;
    let variance_probe = variance_probe(cfg, den, 64, 4)?;
    let passed = gradient.passed && gaussian_spearman >= 0.9 && sampler_orders.passed;
    Ok(OracleReport {
        gradient,
        gaussian_spearman,
        sampler_orders,
        model_spearman,
        variance_probe,
        passed,
    })
}

/// Evaluates the checkpoint and writes `summary.json` into `dir`. Failed
/// oracle checks are numeric failures, reported after the summary is written.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path, with_oracle: bool, dir: &Path) -> Result<EvalSummary> {
    let den = model::load(cfg, ckpt)?;
    model::write_file(&dir.join("config.toml"), cfg.snapshot()?.as_bytes())?;
    let set = Heldout::new(cfg);
    let heldout = cfg
        .stages
        .iter()
        .map(|s| Ok((s.name.clone(), evaluate_heldout(&den, cfg, &s.reward, &set)?)))
        .collect::<Result<Vec<_>>>()?;
    let energy_distance = sample_quality(cfg, &den)?;
    let oracle = with_oracle.then(|| oracle_report(cfg, &den)).transpose()?;
    let summary = EvalSummary {
        metrics_schema: METRICS_SCHEMA,
        checkpoint: ckpt.display().to_string(),
        heldout,
        energy_distance,
        oracle,
    };
    model::write_json(&dir.join("summary.json"), &summary)?;
    if let Some(o) = &summary.oracle {
        if !o.passed {
            return Err(LabError::Numeric(format!(
                "oracle checks failed: gradient {:?}, gaussian spearman {}, sampler orders {:?}",
                o.gradient, o.gaussian_spearman, o.sampler_orders
            )));
        }
    }
    Ok(summary)
}

/// Checkpoint `eval` reads: `--resume`, then the post-training output, then
/// the pretraining output.
pub fn input_checkpoint(cfg: &RunConfig, resume: Option<&Path>) -> std::path::PathBuf {
    if let Some(p) = resume {
        return p.to_path_buf();
    }
    let post = cfg.out_dir.join("posttrain").join("final.ckpt");
    if post.exists() {
        post
    } else {
        cfg.out_dir.join("pretrain").join("final.ckpt")
    }
}
