//! Synthetic training data: an isotropic Gaussian mixture.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vgrpo_core::seed;
use vgrpo_core::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Labels independent of the data; the condition carries no information
    /// until post-training teaches the model to use it.
    #[default]
    Random,
    /// Label = mixture component.
    Component,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    /// Mixture weights, uniform when empty.
    pub weights: Vec<f64>,
    pub labels: LabelMode,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            std: 0.3,
            weights: Vec::new(),
            labels: LabelMode::Random,
        }
    }
}

impl DataSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn validate(&self, num_labels: u32) -> Result<(), String> {
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err("means must be nonempty finite vectors of one dimension".into());
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(format!("std must be positive, got {}", self.std));
        }
        if !self.weights.is_empty()
            && (self.weights.len() != self.means.len()
                || self.weights.iter().any(|w| !(*w >= 0.0))
                || !(self.weights.iter().sum::<f64>() > 0.0))
        {
            return Err("weights must be one nonnegative value per component with a positive sum".into());
        }
        if self.labels == LabelMode::Component && self.means.len() != num_labels as usize {
            return Err(format!(
                "component labels need num_labels = {} components",
                self.means.len()
            ));
        }
        Ok(())
    }

    fn component<R: Rng>(&self, rng: &mut R) -> usize {
        if self.weights.is_empty() {
            return rng.gen_range(0..self.means.len());
        }
        let total: f64 = self.weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (k, w) in self.weights.iter().enumerate() {
            if u < *w {
                return k;
            }
            u -= w;
        }
        self.means.len() - 1
    }

    /// `n` points and their labels from one seeded stream.
    pub fn sample(&self, n: usize, num_labels: u32, seed_value: u64) -> (Tensor, Vec<u32>) {
        let mut rng = seed::rng(seed_value);
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = self.component(&mut rng);
            for m in &self.means[k] {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + self.std * z);
            }
            labels.push(match self.labels {
                LabelMode::Random => rng.gen_range(0..num_labels),
                LabelMode::Component => k as u32,
            });
        }
        (Tensor::matrix(n, d, data), labels)
    }

    /// Mixture log-density.
    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let k = self.means.len();
        let w: Vec<f64> = if self.weights.is_empty() {
            vec![1.0 / k as f64; k]
        } else {
            let s: f64 = self.weights.iter().sum();
            self.weights.iter().map(|v| v / s).collect()
        };
        let s2 = self.std * self.std;
        let logs: Vec<f64> = self
            .means
            .iter()
            .zip(&w)
            .map(|(m, wk)| {
                let q: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                wk.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() - q / (2.0 * s2)
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
    }
}
