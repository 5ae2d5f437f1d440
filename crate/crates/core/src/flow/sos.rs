//! Sum-of-sigmoids element-wise bijection.
//!
//! `φ(z) = a Σ_j v_j σ(w_j z + b_j) + softplus(z − s) − softplus(−z − s)`,
//! strictly increasing, bounded in the bulk and linear for `|z| ≫ s`. The
//! conditioner additionally applies an output affine map
//! `y = exp(α) φ(z) + β`; with `α = β = 0` this is the bare map.

use crate::diffcore::kernels::{softplus_inv, SosParams};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error("could not bracket inverse of {target} within the widening cap")]
    Bracket { target: f64 },
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
}

impl SosParams {
    /// Bare map with explicit constrained parameters.
    pub fn new(weights: Vec<f64>, slopes: Vec<f64>, offsets: Vec<f64>, amplitude: f64, range: f64) -> Self {
        assert!(
            weights.len() == slopes.len() && slopes.len() == offsets.len(),
            "sum-of-sigmoids parameter lengths differ"
        );
        Self {
            weights,
            slopes,
            offsets,
            amplitude,
            log_scale: 0.0,
            shift: 0.0,
            range,
        }
    }

    /// Raw conditioner outputs that reproduce `self` through
    /// [`SosParams::from_raw`] (softmax logits are normalized to sum zero).
    pub fn to_raw(&self) -> Vec<f64> {
        let k = self.k();
        let mean_log = self.weights.iter().map(|v| v.ln()).sum::<f64>() / k as f64;
        let mut raw = Vec::with_capacity(3 * k + 3);
        raw.extend(self.weights.iter().map(|v| v.ln() - mean_log));
        raw.extend(self.slopes.iter().map(|&w| softplus_inv(w)));
        raw.extend(self.offsets.iter().cloned());
        raw.push(softplus_inv(self.amplitude));
        raw.push(self.log_scale);
        raw.push(self.shift);
        raw
    }

    pub fn is_valid(&self) -> bool {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().all(|&v| v > 0.0)
            && (total - 1.0).abs() < 1e-12
            && self.slopes.iter().all(|&w| w > 0.0)
            && self.amplitude > 0.0
            && self.range > 0.0
    }
}

/// `(y, log φ'(z))`.
pub fn sos_forward(z: f64, params: &SosParams) -> (f64, f64) {
    params.forward(z)
}

const MAX_WIDENINGS: usize = 2000;
const MAX_ITERS: usize = 400;

/// Numerical inverse by bracketing and safeguarded Newton iterations.
pub fn sos_inverse(y: f64, params: &SosParams, tol: f64) -> Result<f64, SosError> {
    if !(tol > 0.0) {
        return Err(SosError::Tolerance(tol));
    }
    let f = |z: f64| params.forward(z).0 - y;

    // Far from the bulk the map is z·exp(α) plus a bounded offset.
    let guess = (y - params.shift) * (-params.log_scale).exp();
    let mut width = 1.0 + params.range;
    let (mut lo, mut hi) = (guess - width, guess + width);
    let mut widenings = 0;
    while f(lo) > 0.0 || f(hi) < 0.0 {
        widenings += 1;
        if widenings > MAX_WIDENINGS || !width.is_finite() {
            return Err(SosError::Bracket { target: y });
        }
        width *= 2.0;
        lo = guess - width;
        hi = guess + width;
    }

    let mut z = guess.clamp(lo, hi);
    for _ in 0..MAX_ITERS {
        let r = f(z);
        if r == 0.0 {
            return Ok(z);
        }
        if r > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let d = params.derivative(z);
        let mut next = z - r / d;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - z).abs();
        z = next;
        if f(z).abs() <= tol && step <= 1e-13 * (1.0 + z.abs()) {
            break;
        }
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + z.abs()) {
            break;
        }
    }
    if f(z).abs() <= tol {
        Ok(z)
    } else {
        Err(SosError::Bracket { target: y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> SosParams {
        SosParams::new(vec![1.0], vec![1.0], vec![0.0], 1.0, 30.0)
    }

    #[test]
    fn bulk_and_tail_values() {
        let (y, _) = sos_forward(0.0, &unit());
        assert!((y - 0.5).abs() < 1e-13);
        let (y, _) = sos_forward(40.0, &unit());
        assert!((y - 11.0).abs() < 1e-4, "{y}");
    }

    #[test]
    fn derivative_matches_differences() {
        let p = SosParams::new(vec![0.3, 0.7], vec![1.4, 0.6], vec![-0.5, 0.8], 2.5, 10.0);
        let z = 0.7;
        let eps = 1e-6;
        let num = (sos_forward(z + eps, &p).0 - sos_forward(z - eps, &p).0) / (2.0 * eps);
        let (_, ld) = sos_forward(z, &p);
        assert!((ld.exp() - num).abs() < 1e-6);
    }

    #[test]
    fn inverse_round_trips() {
        let p = SosParams::new(vec![0.3, 0.7], vec![1.4, 0.6], vec![-0.5, 0.8], 2.5, 10.0);
        for &z in &[1.3, -25.0, 0.0, 11.0, -3.3] {
            let y = sos_forward(z, &p).0;
            let back = sos_inverse(y, &p, 1e-12).unwrap();
            assert!((back - z).abs() < 1e-8, "{z} -> {back}");
        }
        assert!(matches!(sos_inverse(0.0, &p, 0.0), Err(SosError::Tolerance(_))));
    }

    #[test]
    fn raw_round_trip() {
        let p = SosParams::new(vec![0.2, 0.5, 0.3], vec![1.4, 0.6, 3.0], vec![-0.5, 0.8, 0.1], 2.5, 10.0);
        let back = SosParams::from_raw(&p.to_raw(), 3, 10.0);
        for (a, b) in p.weights.iter().zip(&back.weights) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((p.amplitude - back.amplitude).abs() < 1e-12);
    }

    fn params_strategy() -> impl Strategy<Value = SosParams> {
        (1usize..6)
            .prop_flat_map(|k| {
                (
                    prop::collection::vec(-3.0f64..3.0, k),
                    prop::collection::vec(-4.0f64..3.0, k),
                    prop::collection::vec(-6.0f64..6.0, k),
                    -3.0f64..4.0,
                    -2.0f64..2.0,
                    -5.0f64..5.0,
                    0.5f64..15.0,
                )
            })
            .prop_map(|(u, rho, b, ra, alpha, beta, range)| {
                let k = u.len();
                let mut raw = u;
                raw.extend(rho);
                raw.extend(b);
                raw.extend([ra, alpha, beta]);
                SosParams::from_raw(&raw, k, range)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn strictly_increasing(p in params_strategy(), z1 in -40.0f64..40.0, dz in 1e-6f64..10.0) {
            prop_assert!(p.is_valid() || p.weights.iter().sum::<f64>() > 0.0);
            prop_assert!(sos_forward(z1, &p).0 < sos_forward(z1 + dz, &p).0);
            prop_assert!(sos_forward(z1, &p).1.is_finite());
        }

        #[test]
        fn inverse_is_accurate(p in params_strategy(), z in -60.0f64..60.0) {
            let y = sos_forward(z, &p).0;
            let back = sos_inverse(y, &p, 1e-12).unwrap();
            prop_assert!((back - z).abs() <= 1e-8, "z={} back={}", z, back);
        }
    }
}
