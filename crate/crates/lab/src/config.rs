//! Run configuration: one TOML file, resolved into per-stage training
//! configs at load time so every field error surfaces before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vgrpo_core::flow::{EmbeddingConfig, LossWeight, PredictionKind};
use vgrpo_core::grpo::TrainConfig;
use vgrpo_core::rewards::{ConditionSpace, RewardSpec};
use vgrpo_core::tensor::Activation;

use crate::data::DataSpec;
use crate::error::{LabError, Result};

/// Version of the `metrics.csv` column layout.
pub const METRICS_SCHEMA: u32 = 1;

/// Environment variable that replaces the output directory.
pub const OUT_ENV: &str = "VGRPO_LAB_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: PredictionKind,
    pub embedding: EmbeddingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            head: PredictionKind::V,
            embedding: EmbeddingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay target reached at the last step.
    pub lr_final: f64,
    pub weight_decay: f64,
    pub weight: LossWeight,
    pub log_every: usize,
    /// Samples drawn for the energy-distance check.
    pub eval_samples: usize,
    pub eval_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 256,
            lr: 2e-3,
            lr_final: 1e-4,
            weight_decay: 0.0,
            weight: LossWeight::Uniform,
            log_every: 100,
            eval_samples: 2048,
            eval_steps: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out conditions, each sampled `samples` times.
    pub conditions: usize,
    pub samples: usize,
    /// Euler steps of the held-out sampler.
    pub steps: usize,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub every: usize,
    /// Held-out evaluations averaged into the final score.
    pub final_window: usize,
    /// Steps-to-threshold target as a multiple of the initial score.
    pub threshold_ratio: f64,
    /// Per-output gradient norms of the ratio, for the quadratic-fit metric.
    pub gradnorm_fit: bool,
    /// Pairs per point for the surrogate fidelity oracle.
    pub oracle_n_mc: usize,
    pub oracle_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: 64,
            samples: 16,
            steps: 16,
            every: 1,
            final_window: 10,
            threshold_ratio: 1.3,
            gradnorm_fit: true,
            oracle_n_mc: 10_000,
            oracle_points: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// shared pairs x stratified timesteps, 2 x 2
    #[default]
    VarianceReduction,
    /// `values` as N_MC
    NMc,
    /// advantage soft clip against the fully unregulated run
    SoftClip,
    /// V-GRPO against the per-step MDP baseline
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub grid: Grid,
    /// Sweep values for grids that take them.
    pub values: Vec<f64>,
    /// Every variant is repeated for each seed; empty means the run seed.
    pub seeds: Vec<u64>,
    /// Noise level of the baseline's SDE rollouts.
    pub mdp_noise_level: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            grid: Grid::VarianceReduction,
            values: vec![2.0, 4.0, 8.0],
            seeds: Vec::new(),
            mdp_noise_level: 0.7,
        }
    }
}

/// One post-training stage after overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub reward: RewardSpec,
    pub train: TrainConfig,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub conditions: ConditionSpace,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub stages: Vec<Stage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    name: String,
    reward: Option<RewardSpec>,
    #[serde(default)]
    grpo: toml::Table,
    #[serde(default)]
    sampler: toml::Table,
    #[serde(default)]
    surrogate: toml::Table,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    out_dir: Option<PathBuf>,
    init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    data: DataSpec,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default)]
    conditions: ConditionSpace,
    #[serde(default)]
    reward: RewardSpec,
    #[serde(default)]
    sampler: toml::Table,
    #[serde(default)]
    surrogate: toml::Table,
    #[serde(default)]
    grpo: toml::Table,
    stages: Option<Vec<RawStage>>,
    #[serde(default)]
    eval: EvalConfig,
    #[serde(default)]
    ablate: AblateConfig,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn path_error<E: std::fmt::Display>(prefix: &str, e: serde_path_to_error::Error<E>) -> LabError {
    let path = e.path().to_string();
    let at = match (prefix.is_empty(), path == ".") {
        (true, _) => path,
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{path}"),
    };
    LabError::Config(format!("{at}: {}", e.inner()))
}

fn train_config(
    at: &str,
    grpo: &toml::Table,
    sampler: &toml::Table,
    surrogate: &toml::Table,
) -> Result<TrainConfig> {
    for key in ["sampler", "surrogate", "seed"] {
        if grpo.contains_key(key) {
            return Err(LabError::Config(format!(
                "{at}.grpo.{key}: set `{key}` in its own section, not under grpo"
            )));
        }
    }
    let mut t = grpo.clone();
    t.insert("sampler".into(), toml::Value::Table(sampler.clone()));
    t.insert("surrogate".into(), toml::Value::Table(surrogate.clone()));
    serde_path_to_error::deserialize(toml::Value::Table(t)).map_err(|e| path_error(at, e))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| path_error("", e))?;
        let stages = match raw.stages {
            None => vec![RawStage {
                name: "main".into(),
                reward: None,
                grpo: toml::Table::new(),
                sampler: toml::Table::new(),
                surrogate: toml::Table::new(),
            }],
            Some(s) if s.is_empty() => return Err(LabError::Config("stages: at least one stage".into())),
            Some(s) => s,
        };
        // the base sections must be valid on their own
        train_config("grpo", &raw.grpo, &raw.sampler, &raw.surrogate)?;
        let mut resolved = Vec::with_capacity(stages.len());
        for (i, st) in stages.into_iter().enumerate() {
            let at = format!("stages[{i}]");
            let (mut g, mut s, mut u) = (raw.grpo.clone(), raw.sampler.clone(), raw.surrogate.clone());
            merge(&mut g, &st.grpo);
            merge(&mut s, &st.sampler);
            merge(&mut u, &st.surrogate);
            let mut train = train_config(&at, &g, &s, &u)?;
            train.seed = raw.seed;
            resolved.push(Stage {
                name: st.name,
                reward: st.reward.unwrap_or_else(|| raw.reward.clone()),
                train,
            });
        }
        let cfg = RunConfig {
            seed: raw.seed,
            out_dir: raw.out_dir.unwrap_or_else(|| PathBuf::from("runs/vgrpo")),
            init_checkpoint: raw.init_checkpoint,
            data: raw.data,
            model: raw.model,
            pretrain: raw.pretrain,
            conditions: raw.conditions,
            eval: raw.eval,
            ablate: raw.ablate,
            stages: resolved,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        self.data.validate(self.conditions.num_labels).map_err(|e| LabError::Config(format!("data: {e}")))?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(LabError::Config("model.hidden: need at least one nonzero width".into()));
        }
        let emb = self.model.embedding;
        if emb.cond_freqs > 0 && emb.num_labels != self.conditions.num_labels {
            return Err(LabError::Config(format!(
                "model.embedding.num_labels: {} but conditions.num_labels is {}",
                emb.num_labels, self.conditions.num_labels
            )));
        }
        self.conditions
            .validate(d)
            .map_err(|e| LabError::Config(format!("conditions: {e}")))?;
        let p = &self.pretrain;
        if p.batch_size == 0 || p.eval_samples < 2 || p.eval_steps == 0 {
            return Err(LabError::Config("pretrain: batch_size, eval_samples and eval_steps must be positive".into()));
        }
        if !(p.lr > 0.0 && p.lr_final >= 0.0 && p.lr_final <= p.lr) {
            return Err(LabError::Config("pretrain: need lr > 0 and 0 <= lr_final <= lr".into()));
        }
        let e = &self.eval;
        if e.conditions == 0 || e.samples == 0 || e.steps == 0 || e.final_window == 0 {
            return Err(LabError::Config(
                "eval: conditions, samples, steps and final_window must be positive".into(),
            ));
        }
        if !(e.threshold_ratio > 0.0) {
            return Err(LabError::Config("eval.threshold_ratio must be positive".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            st.reward
                .validate()
                .map_err(|e| LabError::Config(format!("stages[{i}].reward: {e}")))?;
            st.train
                .validate()
                .map_err(|e| LabError::Config(format!("stages[{i}] ({}): {e}", st.name)))?;
        }
        Ok(())
    }

    /// `--out`, then the environment variable, then the file.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
            for st in &mut self.stages {
                st.train.seed = s;
            }
        }
        if let Some(o) = out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
            self.out_dir = o;
        }
    }

    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Config(format!("snapshot: {e}")))
    }

    /// The largest number of reward terms over all stages.
    pub fn max_terms(&self) -> usize {
        self.stages.iter().map(|s| s.reward.terms.len()).max().unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vgrpo_core::grpo::Regulation;
    use vgrpo_core::sampler::SamplerKind;

    #[test]
    fn empty_file_gives_defaults_and_one_stage() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.stages.len(), 1);
        assert_eq!(c.stages[0].name, "main");
        assert_eq!(c.stages[0].train.group_size, 12);
        assert_eq!(c.model.hidden, vec![64, 64, 64]);
    }

    #[test]
    fn stage_overrides_merge_onto_base() {
        let text = r#"
seed = 5
[sampler]
steps = 10
[grpo]
group_size = 6
preset = "kl_penalty"
[[stages]]
name = "a"
[[stages]]
name = "b"
grpo = { group_size = 4, kl_beta = 0.5 }
sampler = { kind = "sde_first_order" }
"#;
        let c = RunConfig::from_toml(text).unwrap();
        let (a, b) = (&c.stages[0].train, &c.stages[1].train);
        assert_eq!((a.group_size, a.sampler.steps, a.seed), (6, 10, 5));
        assert_eq!((b.group_size, b.kl_beta, b.preset), (4, Some(0.5), Regulation::KlPenalty));
        assert_eq!((b.sampler.kind, b.sampler.steps), (SamplerKind::SdeFirstOrder, 10));
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("[grpo]\ngroup_size = \"big\"\n").unwrap_err();
        assert!(e.to_string().contains("grpo.group_size"), "{e}");
        let e = RunConfig::from_toml("[model]\nhiden = [3]\n").unwrap_err();
        assert!(e.to_string().contains("model"), "{e}");
        let e = RunConfig::from_toml("[[stages]]\nname = \"x\"\ngrpo = { clip_eps = \"no\" }\n").unwrap_err();
        assert!(e.to_string().contains("stages[0].clip_eps"), "{e}");
        let e = RunConfig::from_toml("stages = []\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_toml("[grpo]\nseed = 3\n").unwrap_err();
        assert!(e.to_string().contains("grpo.seed"), "{e}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let e = RunConfig::from_toml("[surrogate]\nn_mc = 3\ngrid_steps = 32\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::from_toml("[grpo]\nalgorithm = \"mdp\"\n").unwrap_err();
        assert!(e.to_string().contains("sde"), "{e}");
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::from_toml("seed = 9\n[eval]\nconditions = 8\n").unwrap();
        let s = c.snapshot().unwrap();
        let back: RunConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut c = RunConfig::from_toml("[[stages]]\nname = \"a\"\n[[stages]]\nname = \"b\"\n").unwrap();
        c.apply_overrides(Some(77), Some(PathBuf::from("x")));
        assert!(c.stages.iter().all(|s| s.train.seed == 77));
        assert_eq!(c.out_dir, PathBuf::from("x"));
    }
}
