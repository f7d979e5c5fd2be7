//! AdamW with decoupled weight decay and pluggable learning-rate schedules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update of `params` in place. `step` is 1-based (the count of
/// updates including this one) and drives bias correction.
pub fn adamw_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    step: u64,
    hp: &AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "params {} grads {} state {}/{}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    let step = step.max(1) as i32;
    let bc1 = 1.0 - hp.beta1.powi(step);
    let bc2 = 1.0 - hp.beta2.powi(step);
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2, lr, eps) = (c(hp.beta1), c(hp.beta2), c(hp.lr), c(hp.eps));
    let (bc1, bc2) = (c(bc1), c(bc2));
    let decay = c(1.0 - hp.lr * hp.weight_decay);
    let one = T::one();
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning rate as a function of the 0-based step index.
pub trait LrSchedule: Send + Sync {
    fn lr(&self, step: usize) -> f64;
}

/// Constant rate after an optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupConstant {
    pub base_lr: f64,
    pub warmup_steps: usize,
}

impl LrSchedule for WarmupConstant {
    fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.base_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.base_lr
        }
    }
}

impl<F: Fn(usize) -> f64 + Send + Sync> LrSchedule for F {
    fn lr(&self, step: usize) -> f64 {
        self(step)
    }
}

/// AdamW over an ordered list of parameter tensors.
#[derive(Debug)]
pub struct AdamW<T: Scalar> {
    pub hp: AdamWParams,
    pub step: u64,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Tensor<T>], hp: AdamWParams) -> Self {
        Self {
            hp,
            step: 0,
            states: params.iter().map(|p| AdamState::zeros(p.numel())).collect(),
        }
    }

    /// Applies one update using explicit gradients (one slice per
    /// parameter; `None` is treated as zero).
    pub fn step_with(&mut self, params: &[Tensor<T>], grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "AdamW::step_with",
                format!(
                    "{} params, {} grads, {} states",
                    params.len(),
                    grads.len(),
                    self.states.len()
                ),
            ));
        }
        self.step += 1;
        let hp = AdamWParams { lr, ..self.hp };
        for ((p, g), state) in params.iter().zip(grads).zip(&mut self.states) {
            let zeros;
            let g = match g {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![T::zero(); p.numel()];
                    &zeros
                }
            };
            let mut data = p.to_vec();
            adamw_step(&mut data, g, state, self.step, &hp)?;
            p.set_data(data)?;
        }
        Ok(())
    }

    /// Applies one update from the accumulated `grad` slots and clears them.
    pub fn step(&mut self, params: &[Tensor<T>], lr: f64) -> Result<()> {
        let grads: Vec<_> = params.iter().map(|p| p.grad()).collect();
        self.step_with(params, &grads, lr)?;
        params.iter().for_each(|p| p.zero_grad());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut w = vec![1.5f64, -2.0];
        let mut s = AdamState::zeros(2);
        let hp = AdamWParams {
            lr: 0.0,
            ..Default::default()
        };
        adamw_step(&mut w, &[0.3, -0.7], &mut s, 1, &hp).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_hand_value() {
        // m_hat = 2, v_hat = 4 => step = 0.1 * 2 / (2 + 1e-8)
        let mut w = vec![1.0f64];
        let mut s = AdamState::zeros(1);
        let hp = AdamWParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adamw_step(&mut w, &[2.0], &mut s, 1, &hp).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut w = vec![2.0f64, -4.0];
        let mut s = AdamState::zeros(2);
        let hp = AdamWParams {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut w, &[0.0, 0.0], &mut s, 1, &hp).unwrap();
        assert_eq!(w, vec![2.0 * 0.95, -4.0 * 0.95]);
        assert_eq!(s.m, vec![0.0, 0.0]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut w = vec![1.0f64, 2.0];
        let mut s = AdamState::zeros(2);
        assert!(adamw_step(&mut w, &[1.0], &mut s, 1, &AdamWParams::default()).is_err());
    }

    #[test]
    fn warmup_ramps_linearly() {
        let s = WarmupConstant {
            base_lr: 1.0,
            warmup_steps: 4,
        };
        assert_eq!(
            (0..6).map(|i| s.lr(i)).collect::<Vec<_>>(),
            vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
        );
        let cosine = |step: usize| 0.5 * (1.0 + (step as f64).cos());
        assert_eq!(cosine.lr(0), 1.0);
    }
}
