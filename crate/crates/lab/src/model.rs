//! Building, saving and loading the policy network.

use std::path::Path;

use vgrpo_core::flow::{Denoiser, Schedule};
use vgrpo_core::seed::{self, stream};
use vgrpo_core::tensor::{checkpoint, MlpParams};

use crate::config::RunConfig;
use crate::error::{LabError, Result};

/// Freshly initialized network for `cfg`.
pub fn build(cfg: &RunConfig) -> Denoiser {
    let m = &cfg.model;
    Denoiser::new(
        cfg.dim(),
        &m.hidden,
        m.activation,
        m.head,
        Schedule::rectified_flow(),
        m.embedding,
        &mut seed::derived_rng(cfg.seed, &[stream::INIT]),
    )
}

pub fn save(den: &Denoiser, path: &Path) -> Result<()> {
    checkpoint::save(path, &den.params.to_named()).map_err(|e| match e {
        vgrpo_core::tensor::TensorError::Io(io) => LabError::io(path, io),
        other => other.into(),
    })
}

/// Network of `cfg`'s architecture with parameters read from `path`.
pub fn load(cfg: &RunConfig, path: &Path) -> Result<Denoiser> {
    if !path.exists() {
        return Err(LabError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let named = checkpoint::load(path)
        .map_err(|e| LabError::Config(format!("checkpoint {}: {e}", path.display())))?;
    let mut den = build(cfg);
    den.params = MlpParams::from_named(&den.params.widths, den.params.activation, &named)
        .map_err(|e| LabError::Config(format!("checkpoint {} does not fit the model: {e}", path.display())))?;
    if !den.params.is_finite() {
        return Err(LabError::Numeric(format!("checkpoint {} holds non-finite values", path.display())));
    }
    Ok(den)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| LabError::Config(e.to_string()))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}
