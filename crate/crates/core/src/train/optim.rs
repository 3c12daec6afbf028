use std::f64::consts::PI;

use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> OptimizerState {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay applied to the pre-update
/// parameter: `p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)`.
/// Non-finite gradients abort without touching the parameters.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    hp: AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for '{name}'")));
        }
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape() {
            return Err(Error::shape(
                "adamw",
                format!("gradient {:?} for parameter {:?}", g.shape(), params.tensors()[i].shape()),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = &params.tensors()[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut out = p.to_vec();
        for (k, (&gk, pk)) in g.data().iter().zip(out.iter_mut()).enumerate() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * gk;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *pk -= lr * weight_decay * *pk + lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        let updated = Tensor::new(p.shape().to_vec(), out)?;
        params.set(i, updated)?;
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    #[test]
    fn decay_only_step() {
        let mut p = store(&[1.0]);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[Tensor::vector(vec![0.0])], &mut st, 0.1, 0.05, AdamHyper::default()).unwrap();
        assert_relative_eq!(p.tensors()[0].data()[0], 0.995, epsilon = 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.5, -0.5]);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[Tensor::vector(vec![3.0, -0.2])], &mut st, 0.01, 0.0, AdamHyper::default()).unwrap();
        let d = p.tensors()[0].data();
        assert_relative_eq!(d[0], 0.5 - 0.01, epsilon = 1e-9);
        assert_relative_eq!(d[1], -0.5 + 0.01, epsilon = 1e-9);
    }

    #[test]
    fn zero_beta2_is_sign_like() {
        let hp = AdamHyper {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut p = store(&[0.0]);
        let mut st = OptimizerState::new(&p);
        let mut expected = 0.0;
        for g in [2.0, -0.5, 7.0] {
            adamw_step(&mut p, &[Tensor::vector(vec![g])], &mut st, 0.1, 0.0, hp).unwrap();
            expected -= 0.1 * g / (f64::abs(g) + 1e-8);
            assert_relative_eq!(p.tensors()[0].data()[0], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = store(&[1.0]);
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st, 0.1, 0.0, AdamHyper::default())
            .unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(p.tensors()[0].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let (total, warm, peak) = (100, 10, 1e-3);
        assert_eq!(lr_at(0, total, warm, peak), 0.0);
        assert_relative_eq!(lr_at(5, total, warm, peak), 5e-4);
        assert_relative_eq!(lr_at(10, total, warm, peak), peak);
        assert_relative_eq!(lr_at(55, total, warm, peak), 5e-4, epsilon = 1e-15);
        assert!(lr_at(100, total, warm, peak).abs() < 1e-18);
        let mut prev = peak;
        for s in 11..=100 {
            let lr = lr_at(s, total, warm, peak);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
