//! Named ablation grids. Every variant post-trains the same input model into
//! its own directory, once per seed.

use std::path::Path;

use serde::Serialize;
use vgrpo_core::flow::{Denoiser, LossWeight};
use vgrpo_core::grpo::{Algorithm, Regulation};
use vgrpo_core::sampler::SamplerKind;
use vgrpo_core::surrogate::Weighting;

use crate::config::{Grid, RunConfig, METRICS_SCHEMA};
use crate::error::{LabError, Result};
use crate::model;
use crate::posttrain::{posttrain, CurvePoint};
use crate::stats;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

fn each_stage(cfg: &RunConfig, f: impl Fn(&mut vgrpo_core::grpo::TrainConfig)) -> RunConfig {
    let mut c = cfg.clone();
    for st in &mut c.stages {
        f(&mut st.train);
    }
    c
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Variants of the configured grid, in a fixed order.
pub fn variants(cfg: &RunConfig) -> Result<Vec<Variant>> {
    let a = &cfg.ablate;
    let v = match a.grid {
        Grid::VarianceReduction => {
            let mut out = Vec::new();
            for shared in [true, false] {
                for stratified in [true, false] {
                    out.push(Variant {
                        name: format!("shared-{}_stratified-{}", on_off(shared), on_off(stratified)),
                        config: each_stage(cfg, |t| {
                            t.surrogate.shared = shared;
                            t.surrogate.stratified = stratified;
                        }),
                    });
                }
            }
            out
        }
        Grid::NMc => {
            if a.values.is_empty() {
                return Err(LabError::Config("ablate.values: the n_mc grid needs values".into()));
            }
            a.values
                .iter()
                .map(|&v| {
                    if !(v >= 1.0 && v.fract() == 0.0) {
                        return Err(LabError::Config(format!("ablate.values: n_mc {v} is not a positive integer")));
                    }
                    let n = v as usize;
                    Ok(Variant {
                        name: format!("n_mc-{n}"),
                        config: each_stage(cfg, |t| t.surrogate.n_mc = n),
                    })
                })
                .collect::<Result<_>>()?
        }
        // both on-policy with a single gradient step per iteration
        Grid::SoftClip => vec![
            Variant {
                name: "adv_soft_clip".into(),
                config: each_stage(cfg, |t| {
                    t.grad_steps = 1;
                    t.preset = Regulation::AdvSoftClip;
                    t.clip_eps = None;
                    t.kl_beta = None;
                }),
            },
            Variant {
                name: "unregulated".into(),
                config: each_stage(cfg, |t| {
                    t.grad_steps = 1;
                    t.preset = Regulation::RatioClip;
                    t.clip_eps = Some(0.0);
                    t.kl_beta = Some(0.0);
                    t.soft_clip_eta = None;
                }),
            },
        ],
        Grid::Baseline => vec![
            Variant {
                name: "vgrpo".into(),
                config: each_stage(cfg, |t| t.algorithm = Algorithm::Vgrpo),
            },
            Variant {
                name: "mdp".into(),
                config: each_stage(cfg, |t| {
                    t.algorithm = Algorithm::Mdp;
                    t.sampler.kind = SamplerKind::SdeFirstOrder;
                    t.sampler.noise_level = a.mdp_noise_level;
                }),
            },
        ],
    };
    for var in &v {
        var.config
            .validate()
            .map_err(|e| LabError::Config(format!("ablate variant {}: {e}", var.name)))?;
    }
    Ok(v)
}

/// Surrogate settings of the naive estimator: independent uniform pairs with
/// uniform weights in the head's own space.
pub fn naive_surrogate(mut s: vgrpo_core::surrogate::SurrogateConfig) -> vgrpo_core::surrogate::SurrogateConfig {
    s.shared = false;
    s.stratified = false;
    s.weighting = Weighting::Generic(LossWeight::Uniform);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_score: f64,
    pub relative_improvement: Option<f64>,
    pub mean_within_group_cv: Option<f64>,
    pub collapse_events: usize,
    pub incidents: usize,
    pub steps_to_threshold: Option<u64>,
    pub heldout_curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub runs: Vec<SeedResult>,
    pub mean_final_score: f64,
    pub mean_within_group_cv: Option<f64>,
    pub collapse_events: usize,
    pub incidents: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblateSummary {
    pub metrics_schema: u32,
    pub grid: Grid,
    pub variants: Vec<VariantSummary>,
    /// Baseline grid only: V-GRPO steps to threshold over the baseline's,
    /// per seed.
    pub steps_to_threshold_ratio: Vec<Option<f64>>,
}

impl AblateSummary {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Runs every variant of the grid from `init` and writes one directory per
/// variant and seed plus `summary.json` into `dir`.
pub fn ablate(cfg: &RunConfig, init: &Denoiser, dir: &Path) -> Result<AblateSummary> {
    let seeds = if cfg.ablate.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.ablate.seeds.clone()
    };
    let mut out = Vec::new();
    for var in variants(cfg)? {
        let mut runs = Vec::new();
        for &s in &seeds {
            let mut c = var.config.clone();
            c.apply_overrides(Some(s), None);
            let run_dir = dir.join(&var.name).join(format!("seed{s}"));
            model::write_file(&run_dir.join("config.toml"), c.snapshot()?.as_bytes())?;
            log::info!("ablate {} seed {s}", var.name);
            let res = posttrain(&c, init.clone(), &run_dir)?.summary;
            runs.push(SeedResult {
                seed: s,
                final_score: res.final_score,
                relative_improvement: res.relative_improvement,
                mean_within_group_cv: res.mean_within_group_cv,
                collapse_events: res.collapse_events.len(),
                incidents: res.incidents.len(),
                steps_to_threshold: res.steps_to_threshold,
                heldout_curve: res.heldout_curve,
            });
        }
        let scores: Vec<f64> = runs.iter().map(|r| r.final_score).collect();
        let cvs: Vec<f64> = runs.iter().filter_map(|r| r.mean_within_group_cv).collect();
        out.push(VariantSummary {
            name: var.name,
            mean_final_score: stats::mean(&scores),
            mean_within_group_cv: (!cvs.is_empty()).then(|| stats::mean(&cvs)),
            collapse_events: runs.iter().map(|r| r.collapse_events).sum(),
            incidents: runs.iter().map(|r| r.incidents).sum(),
            runs,
        });
    }
    let steps_to_threshold_ratio = if cfg.ablate.grid == Grid::Baseline {
        out[0]
            .runs
            .iter()
            .zip(&out[1].runs)
            .map(|(v, m)| match (v.steps_to_threshold, m.steps_to_threshold) {
                (Some(a), Some(b)) if b > 0 => Some(a as f64 / b as f64),
                _ => None,
            })
            .collect()
    } else {
        Vec::new()
    };
    let summary = AblateSummary {
        metrics_schema: METRICS_SCHEMA,
        grid: cfg.ablate.grid,
        variants: out,
        steps_to_threshold_ratio,
    };
    model::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(text: &str) -> Vec<String> {
        let c = RunConfig::from_toml(text).unwrap();
        variants(&c).unwrap().into_iter().map(|v| v.name).collect()
    }

    #[test]
    fn grids_enumerate_in_order() {
        assert_eq!(
            names(""),
            [
                "shared-on_stratified-on",
                "shared-on_stratified-off",
                "shared-off_stratified-on",
                "shared-off_stratified-off"
            ]
        );
        assert_eq!(names("[ablate]\ngrid = \"n_mc\"\nvalues = [2, 4, 8]"), ["n_mc-2", "n_mc-4", "n_mc-8"]);
        assert_eq!(names("[ablate]\ngrid = \"soft_clip\""), ["adv_soft_clip", "unregulated"]);
        assert_eq!(names("[ablate]\ngrid = \"baseline\""), ["vgrpo", "mdp"]);
    }

    #[test]
    fn unregulated_variant_has_no_regulation() {
        let c = RunConfig::from_toml("[ablate]\ngrid = \"soft_clip\"").unwrap();
        let v = variants(&c).unwrap();
        let r = v[1].config.stages[0].train.resolve().unwrap();
        assert_eq!((r.clip_eps, r.beta, r.eta), (None, 0.0, None));
        let s = v[0].config.stages[0].train.resolve().unwrap();
        assert_eq!((s.clip_eps, s.beta), (None, 0.0));
        assert!(s.eta.is_some());
        assert!(v.iter().all(|v| v.config.stages[0].train.grad_steps == 1));
    }

    #[test]
    fn bad_sweep_values_are_config_errors() {
        let c = RunConfig::from_toml("[ablate]\ngrid = \"n_mc\"\nvalues = [2.5]").unwrap();
        assert!(matches!(variants(&c), Err(LabError::Config(_))));
    }
}
