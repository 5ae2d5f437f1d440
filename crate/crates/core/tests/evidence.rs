//! Marginal-likelihood estimates on the one-dimensional conjugate toy,
//! where the evidence is a one-dimensional integral.

use cmflow::flow::{Flow, FlowConfig, FlowParameters, PrecisionSample, Range};
use cmflow::target::{unnorm_log_posterior, Condition, GGMTarget};
use cmflow::train::{estimate_marginal_loglik, train, AnnealingSchedule, TrainConfig};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

const S: f64 = 6.0;
const N: usize = 10;

/// `log ∫ p(S | ω) p(ω | λ) dω` by the trapezoid rule on a fine grid.
fn quadrature_evidence(target: &GGMTarget, lambda: f64) -> f64 {
    let cond = Condition::new(lambda, 1.0, 1.0).unwrap();
    let (hi, points) = (40.0, 200_000);
    let h = hi / points as f64;
    let logs: Vec<f64> = (1..=points)
        .map(|i| {
            let sample = PrecisionSample {
                omega: DMatrix::from_element(1, 1, i as f64 * h),
                cross: None,
                log_q: 0.0,
                z: Vec::new(),
            };
            unnorm_log_posterior(&sample, target, &cond).unwrap()
        })
        .collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs
        .iter()
        .enumerate()
        .map(|(i, l)| if i + 1 == points { 0.5 } else { 1.0 } * (l - peak).exp())
        .sum();
    peak + (sum * h).ln()
}

#[test]
fn quadrature_matches_closed_form() {
    let target = GGMTarget::full(DMatrix::from_element(1, 1, S), N).unwrap();
    for lambda in [0.3, 1.0, 5.0] {
        let a = N as f64 / 2.0 + 1.0;
        let exact = (lambda / 2.0f64).ln() + ln_gamma(a) - a * ((S + lambda) / 2.0).ln();
        let quad = quadrature_evidence(&target, lambda);
        assert!((quad - exact).abs() < 1e-6, "λ={lambda}: {quad} vs {exact}");
    }
}

#[test]
fn trained_flow_recovers_the_evidence() {
    let lambda = Range::new(0.3, 5.0);
    let q = Range::new(1.0, 1.0);
    let mut fc = FlowConfig::full(1, lambda, q);
    fc.hidden_width = 16;
    let params = FlowParameters::init(fc, &mut ChaCha8Rng::seed_from_u64(1));
    let target = GGMTarget::full(DMatrix::from_element(1, 1, S), N).unwrap();
    let mut cfg = TrainConfig::new(lambda, q);
    cfg.schedule = AnnealingSchedule {
        t0: 1.0,
        tn: 1.0,
        n_steps: 0,
        epochs_total: 1500,
    };
    cfg.adam.step_size = 5e-3;
    cfg.log_every = 0;
    let flow = Flow::new(train(params, &target, &cfg).unwrap().map.params).unwrap();
    for l in [0.3, 1.0, 2.0, 5.0] {
        let quad = quadrature_evidence(&target, l);
        let big = estimate_marginal_loglik(&flow, &target, l, 1.0, 10_000, 3).unwrap();
        let small = estimate_marginal_loglik(&flow, &target, l, 1.0, 1_000, 4).unwrap();
        assert!((big.value - quad).abs() <= 0.05, "λ={l}: {} vs {quad}", big.value);
        // the loss is a KL divergence plus the negative evidence
        assert!(-big.value + quad >= -0.05, "λ={l}: negative KL proxy");
        let se = (big.std_err.powi(2) + small.std_err.powi(2)).sqrt();
        assert!((big.value - small.value).abs() <= 3.0 * se, "λ={l}: M=1e4 vs 1e3 disagree");
    }
}
