//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// First and second moment buffers, one per trainable tensor in
/// parameter order, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    /// Zeroed moments shaped like the trainable tensors of `params`.
    pub fn for_params<P: Parameters<F>>(params: &P) -> Self {
        let zeros: Vec<Tensor<F>> = params
            .named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One in-place Adam update of every trainable tensor, followed by the
/// parameters' `post_update` hook.
pub fn adam_step<F: Real, P: Parameters<F>>(
    params: &mut P,
    state: &mut OptimizerState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut tensors: Vec<&mut Tensor<F>> = params
        .named_tensors_mut()
        .into_iter()
        .map(|(_, t)| t)
        .filter(|t| t.requires_grad())
        .collect();
    if tensors.is_empty() {
        return Err(Error::contract("adam_step: no parameter carries a gradient"));
    }
    if tensors.len() != state.m.len()
        || tensors.iter().zip(&state.m).any(|(t, m)| t.shape() != m.shape())
    {
        return Err(Error::contract(
            "adam_step: optimizer state does not match the parameters",
        ));
    }

    let clip = match cfg.max_grad_norm {
        Some(max) => {
            let sq: f64 = tensors
                .iter()
                .flat_map(|t| t.grad().unwrap_or(&[]))
                .map(|g| g.as_f64() * g.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                F::of(max / norm)
            } else {
                F::one()
            }
        }
        None => F::one(),
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let bc1 = F::of(1.0 - cfg.beta1.powi(t));
    let bc2 = F::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    let one = F::one();

    for ((p, m), v) in tensors.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (data, grad) = p.data_and_grad_mut();
        let grad = grad.expect("filtered on requires_grad");
        for (((x, &g), mi), vi) in data
            .iter_mut()
            .zip(grad.iter())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g * clip;
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    drop(tensors);
    params.post_update();
    Ok(())
}
