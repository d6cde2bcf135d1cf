use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` from their accumulated gradients.
/// Parameters without a gradient buffer are skipped.
pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::lit(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = T::lit(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
        if g.len() != m.len() {
            return Err(Error::Shape("adam moment size mismatch".into()));
        }
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (0.0002, 0.5, 0.999, 1e-8));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0f64, -2.0, 3.0]).unwrap().with_grad()];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(&[4], vec![0.0f64; 4]).unwrap().with_grad()];
        p[0].accumulate_grad(&[3.0, -0.5, 10.0, 1e-3]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &mut s).unwrap();
        for (&w, g) in p[0].data().iter().zip([3.0f64, -0.5, 10.0, 1e-3]) {
            let expected = -0.0002 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
    }
}
