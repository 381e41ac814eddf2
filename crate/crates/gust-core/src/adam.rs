//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::tape::Parameter;

/// Optimizer state: one pair of moment matrices per parameter, in the same
/// order as the parameter slice passed to [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<DenseMatrix>,
    second_moment: Vec<DenseMatrix>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// State with the conventional defaults: beta1 = 0.9, beta2 = 0.999,
    /// epsilon = 1e-8.
    pub fn new(params: &[&Parameter], lr: f64) -> Self {
        let zeros: Vec<DenseMatrix> = params
            .iter()
            .map(|p| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update over all parameters.
///
/// If any gradient contains a non-finite value the step is aborted before
/// touching any parameter, and the error names the offending parameter.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::InvalidConfig(format!(
            "adam state tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter '{}'",
                p.name
            )));
        }
    }

    for (idx, p) in params.iter().enumerate() {
        if state.first_moment[idx].shape() != p.value.shape() {
            return Err(Error::InvalidConfig(format!(
                "adam moment shape {:?} does not match parameter '{}' shape {:?}",
                state.first_moment[idx].shape(),
                p.name,
                p.value.shape()
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count;
    let (lr, beta1, beta2, eps) = (state.lr, state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - libm::pow(beta1, t as f64);
    let bc2 = 1.0 - libm::pow(beta2, t as f64);

    for (idx, p) in params.iter_mut().enumerate() {
        let ms = state.first_moment[idx].as_mut_slice();
        let vs = state.second_moment[idx].as_mut_slice();
        let grads = p.grad.as_slice();
        for (k, (val, &g)) in p.value.as_mut_slice().iter_mut().zip(grads).enumerate() {
            ms[k] = beta1 * ms[k] + (1.0 - beta1) * g;
            vs[k] = beta2 * vs[k] + (1.0 - beta2) * g * g;
            let m_hat = ms[k] / bc1;
            let v_hat = vs[k] / bc2;
            *val -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(name: &str, v: f64) -> Parameter {
        Parameter::new(name, DenseMatrix::filled(1, 1, v))
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_param("w", 1.5);
        let mut state = AdamState::new(&[&p], 0.001);
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.value.get(0, 0), 1.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_the_learning_rate() {
        let mut p = scalar_param("w", 1.0);
        p.grad.set(0, 0, 1.0);
        let mut state = AdamState::new(&[&p], 0.001);
        adam_step(&mut [&mut p], &mut state).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps) = ~lr.
        assert!((p.value.get(0, 0) - (1.0 - 0.001)).abs() < 1e-9);
    }

    #[test]
    fn two_hundred_steps_optimize_a_scalar_quadratic() {
        // f(w) = (w - 3)^2 from w = 0; the run itself is the oracle.
        let mut p = scalar_param("w", 0.0);
        let mut state = AdamState::new(&[&p], 0.1);
        for _ in 0..200 {
            let w = p.value.get(0, 0);
            p.zero_grad();
            p.grad.set(0, 0, 2.0 * (w - 3.0));
            adam_step(&mut [&mut p], &mut state).unwrap();
        }
        let w = p.value.get(0, 0);
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
        assert_eq!(state.step_count(), 200);
    }

    #[test]
    fn non_finite_gradient_aborts_and_names_the_parameter() {
        let mut a = scalar_param("w_hidden", 1.0);
        let mut b = scalar_param("w_cls", 1.0);
        b.grad.set(0, 0, f64::NAN);
        let mut state = AdamState::new(&[&a, &b], 0.001);
        let err = adam_step(&mut [&mut a, &mut b], &mut state).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("w_cls"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
        // Nothing moved and the step does not count.
        assert_eq!(a.value.get(0, 0), 1.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn update_is_deterministic_for_fixed_inputs() {
        let run = || {
            let mut p = scalar_param("w", 0.7);
            p.grad.set(0, 0, -0.3);
            let mut state = AdamState::new(&[&p], 0.01);
            adam_step(&mut [&mut p], &mut state).unwrap();
            p.value.get(0, 0).to_bits()
        };
        assert_eq!(run(), run());
    }
}
