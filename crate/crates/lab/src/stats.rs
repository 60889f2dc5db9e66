//! Diagnostic statistics over surrogate values, gradient norms, samples and
//! reward curves.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use vgrpo_core::oracle::spearman;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("all x values are equal")]
    DegenerateX,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `std / mean`; `None` for an empty slice or a zero mean.
pub fn cv(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let m = mean(v);
    if m == 0.0 || !m.is_finite() {
        return None;
    }
    Some(pop_std(v) / m.abs())
}

/// CV within each group, averaged over the groups where it is defined.
pub fn within_group_cv(groups: &[Vec<f64>]) -> Option<f64> {
    let cvs: Vec<f64> = groups.iter().filter_map(|g| cv(g)).collect();
    if cvs.is_empty() {
        None
    } else {
        Some(mean(&cvs))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateStats {
    pub overall_cv: Option<f64>,
    pub within_group_cv: Option<f64>,
}

pub fn surrogate_statistics(groups: &[Vec<f64>]) -> Result<SurrogateStats, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFew {
            what: "groups",
            need: 2,
            got: groups.len(),
        });
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(StatsError::TooFew {
            what: "values per group",
            need: 2,
            got: g.len(),
        });
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    Ok(SurrogateStats {
        overall_cv: cv(&all),
        within_group_cv: within_group_cv(groups),
    })
}

/// R^2 of the least-squares fit `y = a + b x + c x^2`.
pub fn quadratic_fit_r2(points: &[(f64, f64)]) -> Result<f64, StatsError> {
    if points.len() < 3 {
        return Err(StatsError::TooFew {
            what: "points",
            need: 3,
            got: points.len(),
        });
    }
    let x0 = points[0].0;
    if points.iter().all(|p| p.0 == x0) {
        return Err(StatsError::DegenerateX);
    }
    let n = points.len();
    let design = DMatrix::from_fn(n, 3, |i, j| points[i].0.powi(j as i32));
    let y = DVector::from_iterator(n, points.iter().map(|p| p.1));
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|_| StatsError::DegenerateX)?;
    let fit = &design * coef;
    let ym = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - ym) * (v - ym)).sum();
    let ss_res: f64 = y.iter().zip(fit.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_within(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dist(&a[i], &a[j]);
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|`, within-sample terms over distinct
/// pairs.
pub fn energy_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64, StatsError> {
    for (what, s) in [("x samples", x), ("y samples", y)] {
        if s.len() < 2 {
            return Err(StatsError::TooFew { what, need: 2, got: s.len() });
        }
    }
    let cross: f64 = x.iter().map(|a| y.iter().map(|b| dist(a, b)).sum::<f64>()).sum::<f64>()
        / (x.len() * y.len()) as f64;
    Ok(2.0 * cross - mean_within(x) - mean_within(y))
}

/// Indices `i` where `curve[i-1] - curve[i]` exceeds `frac` times the running
/// maximum of `curve[..i]`.
pub fn collapse_events(curve: &[f64], frac: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut top = f64::NEG_INFINITY;
    for i in 1..curve.len() {
        top = top.max(curve[i - 1]);
        let drop = curve[i - 1] - curve[i];
        if top > 0.0 && (drop > frac * top || !curve[i].is_finite()) {
            out.push(i);
        }
    }
    out
}

/// First entry of `steps` whose paired value reaches `threshold`.
pub fn steps_to_threshold(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, v)| *v >= threshold).map(|(s, _)| *s)
}
