//! Adam with bias correction, one moment pair per parameter tensor.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

/// Optimizer state: first/second moment estimates aligned with the parameter
/// order, plus the step counter and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    /// Fresh state with the standard constants: lr 1e-3, betas (0.9, 0.999),
    /// eps 1e-8.
    pub fn new(params: &ParamSet<f32>) -> Self {
        AdamState {
            t: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn matches(&self, params: &ParamSet<f32>) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(params.params())
                .all(|(m, p)| m.shape() == p.value.shape())
    }
}

/// One Adam update over every parameter; gradients are verified present and
/// finite first (the step aborts untouched otherwise) and cleared after.
pub fn adam_step(params: &mut ParamSet<f32>, state: &mut AdamState) -> Result<()> {
    if !state.matches(params) {
        return Err(Error::invalid("optimizer state does not match parameter set"));
    }
    for p in params.params() {
        if !p.grad_set {
            return Err(Error::invalid(format!(
                "parameter `{}` has no gradient; it was not reached by the backward pass",
                p.name
            )));
        }
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for k in 0..g.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.zero_gradients();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Init, ParamSpec};

    fn small_set(n: usize) -> ParamSet<f32> {
        let specs = vec![ParamSpec {
            name: "w".into(),
            shape: vec![n],
            init: Init::Zero,
        }];
        ParamSet::initialize(&specs, &[], 0).unwrap()
    }

    fn set_grad(params: &mut ParamSet<f32>, g: f32) {
        let p = &mut params.params_mut()[0];
        p.grad.fill(g);
        p.grad_set = true;
    }

    #[test]
    fn first_step_with_unit_gradient() {
        // m_hat = v_hat = 1, update = lr / (1 + eps).
        let mut params = small_set(4);
        let mut st = AdamState::new(&params);
        set_grad(&mut params, 1.0);
        adam_step(&mut params, &mut st).unwrap();
        let expect = 1e-3f64 / (1.0 + 1e-8);
        for &w in params.params()[0].value.data() {
            assert!((w as f64 + expect).abs() < 1e-9, "{w}");
        }
        assert_eq!(st.t, 1);
        // Gradients cleared afterwards.
        assert!(!params.params()[0].grad_set);
    }

    #[test]
    fn zero_gradient_leaves_values_exactly_unchanged() {
        let mut params = small_set(3);
        params.params_mut()[0].value.fill(0.75);
        let mut st = AdamState::new(&params);
        set_grad(&mut params, 0.0);
        adam_step(&mut params, &mut st).unwrap();
        for &w in params.params()[0].value.data() {
            assert_eq!(w, 0.75);
        }
    }

    #[test]
    fn first_step_update_sign_follows_gradient() {
        for g in [3.7f32, -0.02, 1e-4, -250.0] {
            let mut params = small_set(1);
            let mut st = AdamState::new(&params);
            set_grad(&mut params, g);
            adam_step(&mut params, &mut st).unwrap();
            let w = params.params()[0].value.data()[0];
            assert_eq!(w < 0.0, g > 0.0, "g={g} w={w}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_naming_parameter() {
        let mut params = small_set(2);
        set_grad(&mut params, f32::NAN);
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &mut st).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(st.t, 0);
        for &w in params.params()[0].value.data() {
            assert_eq!(w, 0.0);
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut params = small_set(2);
        let mut st = AdamState::new(&params);
        let err = adam_step(&mut params, &mut st).unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }
}
