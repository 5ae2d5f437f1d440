use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("non-finite gradient entry at index {index}")]
pub struct NonFiniteGradient {
    pub index: usize,
}

/// One bias-corrected adaptive-moment update, in place. The gradient is
/// clipped to `clip_norm` first; non-finite gradients leave both the
/// parameters and the state untouched.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, hyper: &AdamConfig) -> Result<(), NonFiniteGradient> {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(NonFiniteGradient { index });
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if hyper.clip_norm > 0.0 && norm > hyper.clip_norm {
        hyper.clip_norm / norm
    } else {
        1.0
    };

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i] * scale;
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= hyper.step_size * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut th = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut th, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(th, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_gives_sign_steps() {
        let hyper = AdamConfig {
            step_size: 0.01,
            ..Default::default()
        };
        let mut th = vec![0.0];
        let mut st = AdamState::new(1);
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&mut th, &[3.7], &mut st, &hyper).unwrap();
            let step = prev - th[0];
            prev = th[0];
            assert!((step - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn descends_a_quadratic_and_rejects_nan() {
        let mut th = vec![1.0];
        let mut st = AdamState::new(1);
        let hyper = AdamConfig {
            step_size: 0.1,
            ..Default::default()
        };
        let grad = [2.0 * th[0]];
        adam_step(&mut th, &grad, &mut st, &hyper).unwrap();
        assert!(th[0] < 1.0);
        let before = (th.clone(), st.clone());
        assert!(adam_step(&mut th, &[f64::NAN], &mut st, &hyper).is_err());
        assert_eq!((th, st), before);
    }

    #[test]
    fn clipping_bounds_the_first_moment() {
        let hyper = AdamConfig {
            clip_norm: 1.0,
            ..Default::default()
        };
        let mut th = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut th, &[300.0, 400.0], &mut st, &hyper).unwrap();
        assert!((st.m[0] - 0.1 * 0.6).abs() < 1e-12 && (st.m[1] - 0.1 * 0.8).abs() < 1e-12);
    }
}
