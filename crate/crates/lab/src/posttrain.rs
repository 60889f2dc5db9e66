//! Staged GRPO post-training with held-out evaluation and per-iteration
//! metrics.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vgrpo_core::flow::Denoiser;
use vgrpo_core::grpo::{ratio_gradient_norms, run_iteration_inspect, Algorithm, IterationContext, IterationReport};
use vgrpo_core::rewards::{self, RewardSpec};
use vgrpo_core::sampler::{sample_batch, SamplerConfig, SamplerKind};
use vgrpo_core::seed::{self, stream};
use vgrpo_core::tensor::AdamWState;

use crate::config::{RunConfig, METRICS_SCHEMA};
use crate::error::{LabError, Result};
use crate::model;
use crate::stats;

/// Held-out conditions drawn from their own stream, each with fixed sample
/// seeds, so every evaluation sees the same draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Heldout {
    pub labels: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl Heldout {
    pub fn new(cfg: &RunConfig) -> Self {
        let e = &cfg.eval;
        let mut rng = seed::derived_rng(cfg.seed, &[stream::HELDOUT]);
        let mut labels = Vec::with_capacity(e.conditions * e.samples);
        let mut seeds = Vec::with_capacity(e.conditions * e.samples);
        for c in 0..e.conditions {
            let label = rand::Rng::gen_range(&mut rng, 0..cfg.conditions.num_labels);
            for j in 0..e.samples {
                labels.push(label);
                seeds.push(seed::derive(cfg.seed, &[stream::HELDOUT, c as u64, j as u64]));
            }
        }
        Self { labels, seeds }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TermStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl TermStats {
    fn of(v: &[f64]) -> Self {
        Self {
            mean: stats::mean(v),
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardReport {
    pub terms: Vec<TermStats>,
    /// Weighted mean of the term means.
    pub score: f64,
    pub floored: usize,
}

fn weighted_score(terms: &[TermStats], spec: &RewardSpec) -> f64 {
    let w = spec.weights();
    let total: f64 = w.iter().sum();
    terms.iter().zip(&w).map(|(t, w)| w * t.mean).sum::<f64>() / total
}

/// Raw rewards of held-out Euler samples under `spec`.
pub fn evaluate_heldout(den: &Denoiser, cfg: &RunConfig, spec: &RewardSpec, set: &Heldout) -> Result<RewardReport> {
    let sc = SamplerConfig {
        kind: SamplerKind::EulerOde,
        steps: cfg.eval.steps,
        ..Default::default()
    };
    let recs = sample_batch(den, &set.labels, &set.seeds, &sc)?;
    let mut per_term = vec![Vec::with_capacity(recs.len()); spec.terms.len()];
    let mut floored = 0;
    for r in &recs {
        let cond = cfg.conditions.condition(r.label, cfg.dim())?;
        let v = rewards::evaluate(&r.output, &cond, spec);
        floored += v.floored as usize;
        for (k, x) in v.values.into_iter().enumerate() {
            per_term[k].push(x);
        }
    }
    let terms: Vec<TermStats> = per_term.iter().map(|v| TermStats::of(v)).collect();
    Ok(RewardReport {
        score: weighted_score(&terms, spec),
        terms,
        floored,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: u64,
    /// Gradient steps taken so far.
    pub grad_steps: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub name: String,
    pub iterations: usize,
    pub checkpoint: PathBuf,
    pub final_heldout: Option<RewardReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PosttrainSummary {
    pub metrics_schema: u32,
    pub seed: u64,
    pub initial_heldout: RewardReport,
    pub final_heldout: RewardReport,
    /// Mean held-out score over the last `final_window` evaluations.
    pub final_score: f64,
    pub relative_improvement: Option<f64>,
    /// Initial point first, then every held-out evaluation.
    pub heldout_curve: Vec<CurvePoint>,
    pub threshold: f64,
    pub steps_to_threshold: Option<u64>,
    /// Indices into `heldout_curve` where the score fell by more than half
    /// of its running maximum.
    pub collapse_events: Vec<usize>,
    pub incidents: Vec<String>,
    pub mean_within_group_cv: Option<f64>,
    pub mean_surrogate_cv: Option<f64>,
    pub mean_gradnorm_r2: Option<f64>,
    pub grad_steps: u64,
    pub nfe_old_total: u64,
    pub nfe_new_total: u64,
    pub stages: Vec<StageSummary>,
}

pub struct PosttrainOutcome {
    pub model: Denoiser,
    pub summary: PosttrainSummary,
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn metrics_header(max_terms: usize) -> String {
    let mut h = String::from("iteration,stage,stage_iteration");
    for split in ["train", "heldout"] {
        for k in 0..max_terms {
            for s in ["mean", "min", "max"] {
                write!(h, ",{split}_r{k}_{s}").unwrap();
            }
        }
        write!(h, ",{split}_score").unwrap();
    }
    h.push_str(
        ",surrogate_mean,surrogate_cv,within_group_cv,grad_norm,clip_fraction,kl,max_ratio_dev,\
         gradnorm_r2,nfe_old,nfe_new,nfe_old_total,nfe_new_total,grad_steps,skipped,incidents,degenerate,floored",
    );
    h
}

struct Row<'a> {
    iteration: u64,
    stage: &'a str,
    stage_iteration: usize,
    train: Vec<TermStats>,
    train_score: f64,
    heldout: Option<&'a RewardReport>,
    surrogate_mean: Option<f64>,
    surrogate: Option<stats::SurrogateStats>,
    report: &'a IterationReport,
    gradnorm_r2: Option<f64>,
    nfe_old_total: u64,
    nfe_new_total: u64,
    grad_steps: u64,
}

fn metrics_line(r: &Row, max_terms: usize) -> String {
    let mut s = format!("{},{},{}", r.iteration, r.stage, r.stage_iteration);
    let cells = |s: &mut String, terms: Option<&[TermStats]>, score: Option<f64>| {
        for k in 0..max_terms {
            let t = terms.and_then(|t| t.get(k));
            write!(
                s,
                ",{},{},{}",
                num(t.map(|t| t.mean)),
                num(t.map(|t| t.min)),
                num(t.map(|t| t.max))
            )
            .unwrap();
        }
        write!(s, ",{}", num(score)).unwrap();
    };
    cells(&mut s, Some(&r.train), Some(r.train_score));
    cells(&mut s, r.heldout.map(|h| h.terms.as_slice()), r.heldout.map(|h| h.score));
    let taken: Vec<_> = r.report.steps.iter().filter(|s| !s.skipped).collect();
    let avg = |f: fn(&vgrpo_core::grpo::StepStats) -> f64| -> Option<f64> {
        if taken.is_empty() {
            None
        } else {
            Some(taken.iter().map(|s| f(s)).sum::<f64>() / taken.len() as f64)
        }
    };
    let skipped = r.report.steps.len() - taken.len();
    write!(
        s,
        ",{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        num(r.surrogate_mean),
        num(r.surrogate.and_then(|x| x.overall_cv)),
        num(r.surrogate.and_then(|x| x.within_group_cv)),
        num(avg(|s| s.grad_norm)),
        num(avg(|s| s.clip_fraction)),
        num(avg(|s| s.kl)),
        num(taken.iter().map(|s| s.max_ratio_dev).reduce(f64::max)),
        num(r.gradnorm_r2),
        r.report.nfe_old,
        r.report.nfe_new,
        r.nfe_old_total,
        r.nfe_new_total,
        r.grad_steps,
        skipped,
        r.report.incidents.len(),
        r.report.degenerate,
        r.report.floored,
    )
    .unwrap();
    s
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| LabError::io(path, e))?))
}

fn put(w: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| LabError::io(path, e))
}

fn mean_of(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(stats::mean(v))
    }
}

/// Runs every stage from `init`, writing `metrics.csv`, `timing.csv`,
/// per-stage checkpoints, `final.ckpt` and `summary.json` into `dir`.
pub fn posttrain(cfg: &RunConfig, init: Denoiser, dir: &Path) -> Result<PosttrainOutcome> {
    let max_terms = cfg.max_terms();
    let metrics_path = dir.join("metrics.csv");
    let timing_path = dir.join("timing.csv");
    let mut metrics = create(&metrics_path)?;
    let mut timing = create(&timing_path)?;
    put(&mut metrics, &metrics_path, &metrics_header(max_terms))?;
    put(&mut timing, &timing_path, "iteration,stage,seconds")?;

    let reference = init.clone();
    let mut den = init;
    let heldout = Heldout::new(cfg);
    let first_reward = &cfg.stages[0].reward;
    let initial = evaluate_heldout(&den, cfg, first_reward, &heldout)?;
    let mut curve = vec![CurvePoint {
        iteration: 0,
        grad_steps: 0,
        score: initial.score,
    }];
    let mut last_report = initial.clone();
    let mut incidents = Vec::new();
    let (mut wcv, mut scv, mut r2s) = (Vec::new(), Vec::new(), Vec::new());
    let (mut grad_steps, mut nfe_old_total, mut nfe_new_total) = (0u64, 0u64, 0u64);
    let mut global = 0u64;
    let mut stages = Vec::new();

    for (si, stage) in cfg.stages.iter().enumerate() {
        let tc = &stage.train;
        let mut opt = AdamWState::new(&den.params, tc.optimizer);
        let mut stage_report = None;
        for it in 0..tc.iterations {
            let start = Instant::now();
            let ctx = IterationContext {
                config: tc,
                conditions: &cfg.conditions,
                reward: &stage.reward,
                reference: (tc.sampler.current_policy_steps() < tc.sampler.steps).then_some(&reference),
                global_seed: cfg.seed,
                iteration: global,
            };
            let mut points = Vec::new();
            let want_fit = cfg.eval.gradnorm_fit && tc.algorithm == Algorithm::Vgrpo;
            let report = run_iteration_inspect(&mut den, &mut opt, &ctx, |d, groups| {
                if want_fit {
                    for g in groups {
                        points.extend(ratio_gradient_norms(d, g, &tc.surrogate)?);
                    }
                }
                Ok(())
            })?;
            global += 1;
            let taken = report.steps.iter().filter(|s| !s.skipped).count() as u64;
            grad_steps += taken;
            let outputs = (tc.pool_size() * tc.group_size) as u64;
            nfe_old_total += outputs * report.nfe_old as u64;
            nfe_new_total += outputs * report.nfe_new as u64 * taken.min(1);
            incidents.extend(report.incidents.iter().cloned());

            let nk = stage.reward.terms.len();
            let train: Vec<TermStats> = (0..nk)
                .map(|k| {
                    let v: Vec<f64> = report.groups.iter().flat_map(|g| g.rewards[k].iter().copied()).collect();
                    TermStats::of(&v)
                })
                .collect();
            let train_score = weighted_score(&train, &stage.reward);
            let surr: Vec<Vec<f64>> = report
                .groups
                .iter()
                .filter(|g| !g.old_surrogate.is_empty())
                .map(|g| g.old_surrogate.clone())
                .collect();
            let surrogate = stats::surrogate_statistics(&surr).ok();
            let surrogate_mean = mean_of(&surr.concat());
            if let Some(s) = surrogate {
                wcv.extend(s.within_group_cv);
                scv.extend(s.overall_cv);
            }
            let gradnorm_r2 = if want_fit { stats::quadratic_fit_r2(&points).ok() } else { None };
            r2s.extend(gradnorm_r2);

            let last_of_stage = it + 1 == tc.iterations;
            let due = cfg.eval.every > 0 && (it + 1) % cfg.eval.every == 0;
            let held = if due || last_of_stage {
                let h = evaluate_heldout(&den, cfg, &stage.reward, &heldout)?;
                curve.push(CurvePoint {
                    iteration: global,
                    grad_steps,
                    score: h.score,
                });
                last_report = h.clone();
                Some(h)
            } else {
                None
            };
            let line = metrics_line(
                &Row {
                    iteration: global,
                    stage: &stage.name,
                    stage_iteration: it + 1,
                    train,
                    train_score,
                    heldout: held.as_ref(),
                    surrogate_mean,
                    surrogate,
                    report: &report,
                    gradnorm_r2,
                    nfe_old_total,
                    nfe_new_total,
                    grad_steps,
                },
                max_terms,
            );
            put(&mut metrics, &metrics_path, &line)?;
            put(
                &mut timing,
                &timing_path,
                &format!("{global},{},{:.6}", stage.name, start.elapsed().as_secs_f64()),
            )?;
            if let Some(h) = &held {
                log::info!("{} iteration {} held-out score {:.5}", stage.name, it + 1, h.score);
            }
            stage_report = held;
        }
        let ckpt = dir.join(format!("stage{si}_{}.ckpt", stage.name));
        model::save(&den, &ckpt)?;
        stages.push(StageSummary {
            name: stage.name.clone(),
            iterations: tc.iterations,
            checkpoint: ckpt,
            final_heldout: stage_report,
        });
    }
    metrics.flush().map_err(|e| LabError::io(&metrics_path, e))?;
    timing.flush().map_err(|e| LabError::io(&timing_path, e))?;
    model::save(&den, &dir.join("final.ckpt"))?;

    let scores: Vec<f64> = curve.iter().map(|c| c.score).collect();
    let window = cfg.eval.final_window.min(curve.len() - 1).max(1);
    let final_score = stats::mean(&scores[scores.len() - window.min(scores.len())..]);
    let threshold = cfg.eval.threshold_ratio * initial.score;
    let tail: Vec<(u64, f64)> = curve[1..].iter().map(|c| (c.grad_steps, c.score)).collect();
    let summary = PosttrainSummary {
        metrics_schema: METRICS_SCHEMA,
        seed: cfg.seed,
        relative_improvement: (initial.score != 0.0).then(|| final_score / initial.score - 1.0),
        steps_to_threshold: stats::steps_to_threshold(&tail, threshold),
        threshold,
        collapse_events: stats::collapse_events(&scores, 0.5),
        initial_heldout: initial,
        final_heldout: last_report,
        final_score,
        heldout_curve: curve,
        incidents,
        mean_within_group_cv: mean_of(&wcv),
        mean_surrogate_cv: mean_of(&scv),
        mean_gradnorm_r2: mean_of(&r2s),
        grad_steps,
        nfe_old_total,
        nfe_new_total,
        stages,
    };
    model::write_json(&dir.join("summary.json"), &summary)?;
    Ok(PosttrainOutcome { model: den, summary })
}

/// Checkpoint a posttrain run starts from: `--resume`, then the config's
/// `init_checkpoint`, then the pretraining output under the run root.
pub fn input_checkpoint(cfg: &RunConfig, resume: Option<&Path>) -> PathBuf {
    resume
        .map(Path::to_path_buf)
        .or_else(|| cfg.init_checkpoint.clone())
        .unwrap_or_else(|| cfg.out_dir.join("pretrain").join("final.ckpt"))
}

pub fn run_posttrain(cfg: &RunConfig, resume: Option<&Path>, dir: &Path) -> Result<PosttrainOutcome> {
    let init = model::load(cfg, &input_checkpoint(cfg, resume))?;
    model::write_file(&dir.join("config.toml"), cfg.snapshot()?.as_bytes())?;
    posttrain(cfg, init, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_stable() {
        let h = metrics_header(1);
        assert!(h.starts_with("iteration,stage,stage_iteration,train_r0_mean,train_r0_min,train_r0_max,train_score,"));
        assert!(h.ends_with(",incidents,degenerate,floored"));
        assert_eq!(h.split(',').count(), 3 + 2 * 4 + 17);
    }

    #[test]
    fn heldout_set_is_seeded_and_sized() {
        let cfg = RunConfig::from_toml("[eval]\nconditions = 5\nsamples = 3\n").unwrap();
        let a = Heldout::new(&cfg);
        assert_eq!(a.labels.len(), 15);
        assert_eq!(a, Heldout::new(&cfg));
        assert!(a.labels.chunks(3).all(|c| c.iter().all(|&l| l == c[0])));
        let mut seeds = a.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 15);
    }

    #[test]
    fn numbers_print_plainly() {
        assert_eq!(num(Some(0.25)), "0.25");
        assert_eq!(num(Some(1e-7)), "0.0000001");
        assert_eq!(num(None), "");
    }
}
