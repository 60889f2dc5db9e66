//! Closed-form rewards on 2D outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("invalid reward spec: {0}")]
    Config(String),
    #[error("label {label} outside 0..{num_labels}")]
    Label { label: u32, num_labels: u32 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Target is the configured point for the label.
    #[default]
    TargetMode,
    /// Target sits at angle `2 pi label / num_labels` on the circle of `radius`.
    TargetAngle,
    /// Target is the origin.
    Unconditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSpace {
    pub kind: ConditionKind,
    pub num_labels: u32,
    pub targets: Vec<Vec<f64>>,
    pub radius: f64,
}

impl Default for ConditionSpace {
    fn default() -> Self {
        Self {
            kind: ConditionKind::TargetMode,
            num_labels: 2,
            targets: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            radius: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub kind: ConditionKind,
    pub label: u32,
    pub target: Vec<f64>,
}

impl ConditionSpace {
    pub fn validate(&self, dim: usize) -> Result<(), RewardError> {
        if self.num_labels == 0 {
            return Err(RewardError::Config("num_labels must be positive".into()));
        }
        match self.kind {
            ConditionKind::TargetMode => {
                if self.targets.len() != self.num_labels as usize {
                    return Err(RewardError::Config(format!(
                        "{} targets for {} labels",
                        self.targets.len(),
                        self.num_labels
                    )));
                }
                if self.targets.iter().any(|t| t.len() != dim || t.iter().any(|v| !v.is_finite())) {
                    return Err(RewardError::Config(format!("targets must be finite {dim}-vectors")));
                }
            }
            ConditionKind::TargetAngle if dim != 2 => {
                return Err(RewardError::Config("target_angle needs 2D outputs".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn condition(&self, label: u32, dim: usize) -> Result<Condition, RewardError> {
        if label >= self.num_labels {
            return Err(RewardError::Label {
                label,
                num_labels: self.num_labels,
            });
        }
        let target = match self.kind {
            ConditionKind::TargetMode => self.targets[label as usize].clone(),
            ConditionKind::TargetAngle => {
                let a = 2.0 * std::f64::consts::PI * label as f64 / self.num_labels as f64;
                vec![self.radius * a.cos(), self.radius * a.sin()]
            }
            ConditionKind::Unconditional => vec![0.0; dim],
        };
        Ok(Condition {
            kind: self.kind,
            label,
            target,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// `-|| o - target ||`
    NegDistance,
    /// `exp(-|| o - target ||^2 / (2 s^2))`
    GaussianBump { s: f64 },
    /// `-| ||o|| - r0 |`
    RingRadius { r0: f64 },
    /// 1 when the angle between `o` and the target direction is at most
    /// `half_angle` (radians; pi/2 is the half-plane), else 0.
    RegionIndicator {
        #[serde(default = "half_plane")]
        half_angle: f64,
    },
}

fn half_plane() -> f64 {
    std::f64::consts::FRAC_PI_2
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTerm {
    #[serde(flatten)]
    pub kind: RewardKind,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub center: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

impl RewardTerm {
    pub fn new(kind: RewardKind) -> Self {
        Self {
            kind,
            weight: 1.0,
            center: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub terms: Vec<RewardTerm>,
    /// Reward assigned to non-finite outputs.
    pub floor: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            terms: vec![RewardTerm::new(RewardKind::GaussianBump { s: 0.5 })],
            floor: 0.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.terms.is_empty() {
            return Err(RewardError::Config("at least one reward term".into()));
        }
        for term in &self.terms {
            if !term.weight.is_finite() || !term.center.is_finite() || !term.scale.is_finite() {
                return Err(RewardError::Config("weights and constants must be finite".into()));
            }
            if term.scale == 0.0 {
                return Err(RewardError::Config("normalization scale is zero".into()));
            }
            match term.kind {
                RewardKind::GaussianBump { s } if !(s > 0.0) => {
                    return Err(RewardError::Config("gaussian_bump needs s > 0".into()));
                }
                RewardKind::RingRadius { r0 } if !(r0 >= 0.0) => {
                    return Err(RewardError::Config("ring_radius needs r0 >= 0".into()));
                }
                RewardKind::RegionIndicator { half_angle } if !(half_angle > 0.0) => {
                    return Err(RewardError::Config("region_indicator needs half_angle > 0".into()));
                }
                _ => {}
            }
        }
        if !self.floor.is_finite() {
            return Err(RewardError::Config("floor must be finite".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.weight).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardValues {
    pub values: Vec<f64>,
    /// The output was non-finite and every value is the floor.
    pub floored: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn in_region(o: &[f64], target: &[f64], half_angle: f64) -> bool {
    let (no, nt) = (norm(o), norm(target));
    // unconditional: measure against the first axis
    let dir: Vec<f64> = if nt == 0.0 {
        (0..o.len()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
    } else {
        target.iter().map(|t| t / nt).collect()
    };
    if no == 0.0 {
        return false;
    }
    let cos = o.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / no;
    if half_angle == std::f64::consts::FRAC_PI_2 {
        return cos > 0.0;
    }
    cos.clamp(-1.0, 1.0).acos() <= half_angle
}

pub fn evaluate_kind(kind: RewardKind, o: &[f64], target: &[f64]) -> f64 {
    let dist_sq: f64 = o.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    match kind {
        RewardKind::NegDistance => -dist_sq.sqrt(),
        RewardKind::GaussianBump { s } => (-dist_sq / (2.0 * s * s)).exp(),
        RewardKind::RingRadius { r0 } => -(norm(o) - r0).abs(),
        RewardKind::RegionIndicator { half_angle } => in_region(o, target, half_angle) as u8 as f64,
    }
}

/// Raw per-term rewards of one output.
pub fn evaluate(o: &[f64], c: &Condition, spec: &RewardSpec) -> RewardValues {
    if !o.iter().all(|v| v.is_finite()) {
        return RewardValues {
            values: vec![spec.floor; spec.terms.len()],
            floored: true,
        };
    }
    RewardValues {
        values: spec
            .terms
            .iter()
            .map(|t| evaluate_kind(t.kind, o, &c.target))
            .collect(),
        floored: false,
    }
}

/// `(R - center) / scale` per term.
pub fn normalize(raw: &[f64], spec: &RewardSpec) -> Result<Vec<f64>, RewardError> {
    if raw.len() != spec.terms.len() {
        return Err(RewardError::Config(format!(
            "{} rewards for {} terms",
            raw.len(),
            spec.terms.len()
        )));
    }
    raw.iter()
        .zip(&spec.terms)
        .map(|(&r, t)| {
            if t.scale == 0.0 {
                Err(RewardError::Config("normalization scale is zero".into()))
            } else {
                Ok((r - t.center) / t.scale)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond(target: Vec<f64>) -> Condition {
        Condition {
            kind: ConditionKind::TargetMode,
            label: 0,
            target,
        }
    }

    #[test]
    fn rewards_at_target() {
        let c = cond(vec![1.0, 0.0]);
        assert_eq!(evaluate_kind(RewardKind::NegDistance, &[1.0, 0.0], &c.target), 0.0);
        assert_eq!(evaluate_kind(RewardKind::GaussianBump { s: 0.5 }, &[1.0, 0.0], &c.target), 1.0);
        assert_eq!(evaluate_kind(RewardKind::NegDistance, &[1.0, 2.0], &c.target), -2.0);
        let b = evaluate_kind(RewardKind::GaussianBump { s: 0.5 }, &[1.5, 0.0], &c.target);
        assert!((b - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn ring_and_region() {
        let r = RewardKind::RingRadius { r0: 2.0 };
        assert_eq!(evaluate_kind(r, &[0.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(evaluate_kind(r, &[0.0, 3.0], &[0.0, 0.0]), -1.0);
        let ind = RewardKind::RegionIndicator { half_angle: half_plane() };
        assert_eq!(evaluate_kind(ind, &[0.4, 0.9], &[1.0, 0.0]), 1.0);
        assert_eq!(evaluate_kind(ind, &[-0.4, -0.9], &[1.0, 0.0]), 0.0);
        let narrow = RewardKind::RegionIndicator { half_angle: 0.3 };
        assert_eq!(evaluate_kind(narrow, &[1.0, 0.2], &[1.0, 0.0]), 1.0);
        assert_eq!(evaluate_kind(narrow, &[0.4, 0.9], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn non_finite_output_gets_floor() {
        let spec = RewardSpec {
            floor: -5.0,
            ..Default::default()
        };
        let v = evaluate(&[f64::NAN, 0.0], &cond(vec![0.0, 0.0]), &spec);
        assert!(v.floored);
        assert_eq!(v.values, vec![-5.0]);
    }

    #[test]
    fn normalization() {
        let mut spec = RewardSpec::default();
        assert_eq!(normalize(&[0.7], &spec).unwrap(), vec![0.7]);
        spec.terms[0].center = 5.0;
        spec.terms[0].scale = 2.0;
        assert_eq!(normalize(&[5.0], &spec).unwrap(), vec![0.0]);
        assert_eq!(normalize(&[9.0], &spec).unwrap(), vec![2.0]);
        spec.terms[0].scale = 0.0;
        assert!(normalize(&[1.0], &spec).is_err());
        assert!(spec.validate().is_err());
    }

    #[test]
    fn condition_targets() {
        let space = ConditionSpace::default();
        assert_eq!(space.condition(1, 2).unwrap().target, vec![1.0, 0.0]);
        assert!(space.condition(2, 2).is_err());
        let ang = ConditionSpace {
            kind: ConditionKind::TargetAngle,
            num_labels: 4,
            radius: 2.0,
            ..Default::default()
        };
        let t = ang.condition(1, 2).unwrap().target;
        assert!(t[0].abs() < 1e-15 && (t[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn term_parses_from_toml_style_json() {
        let t: RewardTerm =
            serde_json::from_str(r#"{"kind":"gaussian_bump","s":0.5,"weight":2.0}"#).unwrap();
        assert_eq!(t.kind, RewardKind::GaussianBump { s: 0.5 });
        assert_eq!(t.weight, 2.0);
        assert_eq!(t.scale, 1.0);
    }
}
