use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{silu, Gradients, Tape, Var};
use super::{matmul_into, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// `x * sigmoid(x)`
    #[default]
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => silu(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

/// Fully connected network: hidden layers use `activation`, the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Linear>,
}

impl MlpParams {
    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            activation,
            layers,
        }
    }

    /// Gaussian init with variance `1/fan_in`; the output layer is scaled down.
    pub fn init<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut p = Self::zeros(widths, activation);
        let last = p.layers.len() - 1;
        for (li, layer) in p.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.rows() as f64;
            let gain = if li == last { 0.1 } else { 1.0 };
            let std = gain / fan_in.sqrt();
            for w in layer.weight.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = z * std;
            }
        }
        p
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: weight then bias, layer by layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`MlpParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(
        widths: &[usize],
        activation: Activation,
        named: &[(String, Tensor)],
    ) -> Result<Self, TensorError> {
        let mut p = Self::zeros(widths, activation);
        let names = p.names();
        if named.len() != names.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((slot, name), (got_name, t)) in p.tensors_mut().into_iter().zip(&names).zip(named) {
            if name != got_name {
                return Err(TensorError::Checkpoint(format!(
                    "expected tensor `{name}`, found `{got_name}`"
                )));
            }
            slot.same_shape(t, "checkpoint")?;
            *slot = t.clone();
        }
        Ok(p)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect()
    }

    /// Records every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, true)
    }

    /// Records parameters as constants (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone(), requires_grad),
                    tape.leaf(l.bias.clone(), requires_grad),
                )
            })
            .collect();
        BoundMlp {
            vars,
            activation: self.activation,
            widths: self.widths.clone(),
        }
    }

    /// Tape-free forward pass for inference.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        if input.cols() != self.input_width() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp input",
                lhs: input.shape().to_vec(),
                rhs: vec![self.input_width()],
            });
        }
        let n = input.rows();
        let last = self.layers.len() - 1;
        let mut h = input.data().to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.weight.rows(), layer.weight.cols());
            let mut out = vec![0.0; n * m];
            matmul_into(&h, layer.weight.data(), &mut out, n, k, m);
            for row in out.chunks_mut(m) {
                for (x, &b) in row.iter_mut().zip(layer.bias.data()) {
                    *x += b;
                    if li != last {
                        *x = self.activation.apply(*x);
                    }
                }
            }
            h = out;
        }
        Ok(Tensor::matrix(n, self.output_width(), h))
    }
}

/// Parameters of an [`MlpParams`] recorded on a particular tape.
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    activation: Activation,
    widths: Vec<usize>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, TensorError> {
        let width = tape.value(input).cols();
        if width != self.widths[0] {
            return Err(TensorError::ShapeMismatch {
                op: "mlp input",
                lhs: tape.value(input).shape().to_vec(),
                rhs: vec![self.widths[0]],
            });
        }
        let last = self.vars.len() - 1;
        let mut h = input;
        for (li, &(w, b)) in self.vars.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if li != last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Silu => tape.silu(h),
                };
            }
        }
        Ok(h)
    }

    /// Collects parameter gradients in [`MlpParams::tensors`] order.
    pub fn grads(&self, grads: &Gradients) -> ParamGrads {
        let tensors = self
            .vars
            .iter()
            .enumerate()
            .flat_map(|(i, &(w, b))| {
                let (k, m) = (self.widths[i], self.widths[i + 1]);
                [
                    grads.get_or_zeros(w, &[k, m]),
                    grads.get_or_zeros(b, &[1, m]),
                ]
            })
            .collect();
        ParamGrads(tensors)
    }
}

/// Gradients aligned with [`MlpParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        ParamGrads(p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.0 {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}
