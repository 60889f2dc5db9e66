use serde::{Deserialize, Serialize};

use super::{MlpParams, ParamGrads, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamWState {
    pub fn new(params: &MlpParams, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update. Parameters are left untouched
/// when any gradient entry is non-finite.
pub fn adamw_step(
    params: &mut MlpParams,
    grads: &ParamGrads,
    state: &mut AdamWState,
) -> Result<(), TensorError> {
    let names = params.names();
    let tensors = params.tensors_mut();
    if grads.0.len() != tensors.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw",
            lhs: vec![tensors.len()],
            rhs: vec![grads.0.len()],
        });
    }
    for ((p, g), name) in tensors.iter().zip(&grads.0).zip(&names) {
        p.same_shape(g, "adamw")?;
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient(name.clone()));
        }
    }

    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in tensors.into_iter().enumerate() {
        let g = grads.0[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((w, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *w -= c.lr * c.weight_decay * *w;
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    fn net() -> MlpParams {
        let mut p = MlpParams::zeros(&[2, 2], Activation::Tanh);
        p.layers[0]
            .weight
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        p.layers[0].bias.data_mut().copy_from_slice(&[0.1, -0.2]);
        p
    }

    fn grads_of(p: &MlpParams, vals: [f64; 6]) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(p);
        g.0[0].data_mut().copy_from_slice(&vals[..4]);
        g.0[1].data_mut().copy_from_slice(&vals[4..]);
        g
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = net();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        adamw_step(&mut p, &ParamGrads::zeros_like(&before), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = net();
        let before = p.clone();
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        let g = grads_of(&p, [0.3, -2.0, 1e-3, 5.0, -0.7, 0.01]);
        adamw_step(&mut p, &g, &mut st).unwrap();
        // m_hat = g, v_hat = g^2 at step 1: delta = -lr * g / (|g| + eps)
        for ((a, b), gt) in p.tensors().iter().zip(before.tensors()).zip(&g.0) {
            for ((&x, &y), &gj) in a.data().iter().zip(b.data()).zip(gt.data()) {
                let expected = -1e-2 * gj / (gj.abs() + 1e-8);
                assert!((x - y - expected).abs() < 1e-15);
                assert!(((x - y) + 1e-2 * gj.signum()).abs() < 1e-2 * 1e-5);
            }
        }
    }

    #[test]
    fn decay_alone_shrinks_by_one_minus_lr_lambda() {
        let mut p = net();
        let before = p.clone();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg);
        adamw_step(&mut p, &ParamGrads::zeros_like(&before), &mut st).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((x - y * (1.0 - 0.05)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = net();
        let before = p.clone();
        let mut st = AdamWState::new(&p, AdamWConfig::default());
        let g = grads_of(&p, [0.0, 0.0, 0.0, 0.0, f64::NAN, 0.0]);
        let err = adamw_step(&mut p, &g, &mut st).unwrap_err();
        assert!(err.to_string().contains("layers.0.bias"), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 0);
    }
}
