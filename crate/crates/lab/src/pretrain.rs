//! Flow-matching pretraining on the configured mixture.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use vgrpo_core::flow::{pretrain_loss_and_grad, Denoiser};
use vgrpo_core::sampler::{sample_batch, SamplerConfig, SamplerKind};
use vgrpo_core::seed::{self, stream};
use vgrpo_core::tensor::{adamw_step, AdamWConfig, AdamWState};

use crate::config::RunConfig;
use crate::error::{LabError, Result};
use crate::model;
use crate::stats;

/// Part index reserved for evaluation draws in the data stream.
const EVAL_PART: u64 = u64::MAX;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct PretrainSummary {
    pub steps: usize,
    pub num_params: usize,
    pub final_loss: f64,
    pub energy_distance: f64,
}

pub struct PretrainOutcome {
    pub model: Denoiser,
    /// `(step, mean loss since the previous row, lr)`
    pub log: Vec<(usize, f64, f64)>,
    pub summary: PretrainSummary,
}

fn cosine_lr(cfg: &RunConfig, step: usize) -> f64 {
    let p = &cfg.pretrain;
    let frac = if p.steps > 1 { step as f64 / (p.steps - 1) as f64 } else { 1.0 };
    p.lr_final + 0.5 * (p.lr - p.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Energy distance between model samples (Euler) and fresh data.
pub fn sample_quality(cfg: &RunConfig, den: &Denoiser) -> Result<f64> {
    let p = &cfg.pretrain;
    let n = p.eval_samples;
    let (target, labels) = cfg
        .data
        .sample(n, cfg.conditions.num_labels, seed::derive(cfg.seed, &[stream::DATA, EVAL_PART]));
    let seeds: Vec<u64> = (0..n as u64)
        .map(|i| seed::derive(cfg.seed, &[stream::DATA, EVAL_PART, i]))
        .collect();
    let sc = SamplerConfig {
        kind: SamplerKind::EulerOde,
        steps: p.eval_steps,
        ..Default::default()
    };
    let recs = sample_batch(den, &labels, &seeds, &sc)?;
    let gen: Vec<Vec<f64>> = recs.into_iter().map(|r| r.output).collect();
    if gen.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::Numeric("non-finite model samples".into()));
    }
    let data: Vec<Vec<f64>> = (0..n).map(|i| target.row(i).to_vec()).collect();
    stats::energy_distance(&gen, &data).map_err(|e| LabError::Config(e.to_string()))
}

/// Trains `init` (or a fresh network) for `cfg.pretrain.steps` steps.
pub fn pretrain(cfg: &RunConfig, init: Option<Denoiser>) -> Result<PretrainOutcome> {
    let p = &cfg.pretrain;
    let mut den = init.unwrap_or_else(|| model::build(cfg));
    let mut opt = AdamWState::new(
        &den.params,
        AdamWConfig {
            lr: p.lr,
            weight_decay: p.weight_decay,
            ..Default::default()
        },
    );
    let mut log = Vec::new();
    let (mut acc, mut count) = (0.0, 0usize);
    let mut last = f64::NAN;
    for step in 0..p.steps {
        let (x, labels) = cfg.data.sample(
            p.batch_size,
            cfg.conditions.num_labels,
            seed::derive(cfg.seed, &[stream::DATA, step as u64]),
        );
        let (loss, grads) = pretrain_loss_and_grad(
            &den,
            &x,
            &labels,
            p.weight,
            seed::derive(cfg.seed, &[stream::PRETRAIN, step as u64]),
        )?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(LabError::Numeric(format!("pretraining loss {loss} at step {step}")));
        }
        opt.config.lr = cosine_lr(cfg, step);
        adamw_step(&mut den.params, &grads, &mut opt)?;
        acc += loss;
        count += 1;
        last = loss;
        if p.log_every > 0 && ((step + 1) % p.log_every == 0 || step + 1 == p.steps) {
            log.push((step + 1, acc / count as f64, opt.config.lr));
            acc = 0.0;
            count = 0;
            log::info!("pretrain step {} loss {:.5}", step + 1, log.last().unwrap().1);
        }
    }
    let energy_distance = sample_quality(cfg, &den)?;
    let summary = PretrainSummary {
        steps: p.steps,
        num_params: den.params.num_params(),
        final_loss: last,
        energy_distance,
    };
    Ok(PretrainOutcome {
        model: den,
        log,
        summary,
    })
}

pub fn metrics_csv(log: &[(usize, f64, f64)]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for (step, loss, lr) in log {
        writeln!(s, "{step},{loss},{lr}").unwrap();
    }
    s
}

/// Runs pretraining and writes its artifacts into `dir`.
pub fn run_pretrain(cfg: &RunConfig, resume: Option<&Path>, dir: &Path) -> Result<PretrainOutcome> {
    let init = resume.map(|p| model::load(cfg, p)).transpose()?;
    model::write_file(&dir.join("config.toml"), cfg.snapshot()?.as_bytes())?;
    let out = pretrain(cfg, init)?;
    model::write_file(&dir.join("metrics.csv"), metrics_csv(&out.log).as_bytes())?;
    model::save(&out.model, &dir.join("final.ckpt"))?;
    model::write_json(&dir.join("summary.json"), &out.summary)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_toml(
            "[model]\nhidden = [16]\n[pretrain]\nsteps = 30\nbatch_size = 32\nlog_every = 10\neval_samples = 64\neval_steps = 4\n",
        )
        .unwrap()
    }

    #[test]
    fn lr_follows_the_cosine() {
        let c = tiny();
        assert_eq!(cosine_lr(&c, 0), c.pretrain.lr);
        assert!((cosine_lr(&c, 29) - c.pretrain.lr_final).abs() < 1e-15);
    }

    #[test]
    fn short_run_logs_and_is_repeatable() {
        let c = tiny();
        let a = pretrain(&c, None).unwrap();
        assert_eq!(a.log.len(), 3);
        assert!(a.summary.energy_distance.is_finite());
        let b = pretrain(&c, None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log));
        assert!(metrics_csv(&a.log).starts_with("step,loss,lr\n10,"));
    }
}
