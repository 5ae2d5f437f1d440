//! Unnormalized log-posteriors of the Gaussian graphical model with a
//! generalized-Normal sparsity prior and a Wishart diagonal prior.
//!
//! Up to Ω-independent constants that do not depend on `(λ, q)`, the full
//! log-posterior is
//!
//! ```text
//! (n/2) log det Ω − ½ Tr(ΩS)
//!   + Σ_{i<j} [log(q λ^{1/q} / (2Γ(1/q))) − λ|ω_ij|^q]
//!   − (λ/2) Tr Ω + (d(d+1)/2) log(λ/2) − log Γ_d((d+1)/2)
//! ```
//!
//! The last two terms normalize the `W_d(d+1, λ⁻¹I)` factor; they depend
//! on λ only and make the converged training loss comparable across λ.
//! The truncation constant of the SPD indicator is not accounted for.

use crate::diffcore::{Graph, Tensor, Var};
use crate::flow::config::{LAMBDA_MAX, Q_BOUNDS};
use crate::flow::{Generated, PrecisionSample};
use crate::linalg::{cholesky_lower, diag_index, is_symmetric, tri_index, tri_len};
use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("condition out of range: {0}")]
    Condition(String),
    #[error("scatter matrix must be square and symmetric")]
    Scatter,
    #[error("block size {s} does not fit a {d}-dimensional scatter matrix")]
    Block { s: usize, d: usize },
    #[error("sample does not match the target mode")]
    Mode,
    #[error("precision matrix is not positive definite")]
    NotSpd,
}

/// Shrinkage, exponent and temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub lambda: f64,
    pub q: f64,
    pub temperature: f64,
}

impl Condition {
    pub fn new(lambda: f64, q: f64, temperature: f64) -> Result<Self, TargetError> {
        check_condition(lambda, q)?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TargetError::Condition(format!("temperature {temperature} must be positive")));
        }
        Ok(Self {
            lambda,
            q,
            temperature,
        })
    }
}

/// Guards on `(λ, q)`; values outside are rejected rather than clamped.
pub fn check_condition(lambda: f64, q: f64) -> Result<(), TargetError> {
    if !(lambda > 0.0 && lambda <= LAMBDA_MAX) {
        return Err(TargetError::Condition(format!("λ={lambda} must lie in (0, {LAMBDA_MAX}]")));
    }
    if !(q >= Q_BOUNDS.0 && q <= Q_BOUNDS.1) {
        return Err(TargetError::Condition(format!(
            "q={q} must lie in [{}, {}]",
            Q_BOUNDS.0, Q_BOUNDS.1
        )));
    }
    Ok(())
}

/// Scatter blocks for the query/remainder partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScatter {
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s22: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GGMTarget {
    pub scatter: DMatrix<f64>,
    pub n: usize,
    pub blocks: Option<BlockScatter>,
}

impl GGMTarget {
    pub fn full(scatter: DMatrix<f64>, n: usize) -> Result<Self, TargetError> {
        if !scatter.is_square() || !is_symmetric(&scatter, 1e-9 * scatter.amax().max(1.0)) {
            return Err(TargetError::Scatter);
        }
        Ok(Self {
            scatter,
            n,
            blocks: None,
        })
    }

    /// Block target where the first `s` variables are the queries.
    pub fn block(scatter: DMatrix<f64>, n: usize, s: usize) -> Result<Self, TargetError> {
        let mut t = Self::full(scatter, n)?;
        let d = t.scatter.nrows();
        if s == 0 || s > d {
            return Err(TargetError::Block { s, d });
        }
        let m = &t.scatter;
        t.blocks = Some(BlockScatter {
            s11: m.view((0, 0), (s, s)).into_owned(),
            s12: m.view((0, s), (s, d - s)).into_owned(),
            s22: m.view((s, s), (d - s, d - s)).into_owned(),
        });
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.scatter.nrows()
    }

    /// `(s, t)` in block mode.
    pub fn block_dims(&self) -> Option<(usize, usize)> {
        self.blocks.as_ref().map(|b| (b.s11.nrows(), b.s22.nrows()))
    }
}

/// `log(q λ^{1/q} / (2Γ(1/q)))`, the log normalizer of `exp(−λ|x|^q)`.
pub fn gen_normal_log_const(lambda: f64, q: f64) -> f64 {
    q.ln() + lambda.ln() / q - std::f64::consts::LN_2 - ln_gamma(1.0 / q)
}

/// Log-density of the zero-centered generalized Normal.
pub fn gen_normal_log_density(x: f64, lambda: f64, q: f64) -> f64 {
    gen_normal_log_const(lambda, q) - lambda * x.abs().powf(q)
}

/// `log Γ_d(a)`.
pub fn ln_multigamma(d: usize, a: f64) -> f64 {
    let d = d as f64;
    let mut acc = d * (d - 1.0) / 4.0 * std::f64::consts::PI.ln();
    let mut j = 1.0;
    while j <= d {
        acc += ln_gamma(a + (1.0 - j) / 2.0);
        j += 1.0;
    }
    acc
}

/// Log normalizer of the `W_d(d+1, λ⁻¹I)` density.
pub fn wishart_prior_log_norm(d: usize, lambda: f64) -> f64 {
    let df = d as f64 + 1.0;
    (d as f64) * df / 2.0 * (lambda / 2.0).ln() - ln_multigamma(d, df / 2.0)
}

/// Ω-independent part of the log-prior for `pairs` penalized entries in a
/// `d`-dimensional model.
pub fn prior_constant(d: usize, pairs: usize, lambda: f64, q: f64) -> f64 {
    pairs as f64 * gen_normal_log_const(lambda, q) + wishart_prior_log_norm(d, lambda)
}

/// `(n/2) log det Ω − ½ Tr(ΩS)` with `log det Ω = 2 Σ log L_ii`.
pub fn wishart_loglik(factor: &DMatrix<f64>, target: &GGMTarget) -> f64 {
    let omega = factor * factor.transpose();
    let log_det: f64 = 2.0 * factor.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    0.5 * target.n as f64 * log_det - 0.5 * (&omega * &target.scatter).trace()
}

/// `Σ_{i<j}|ω_ij|^q` over the strict upper triangle.
pub fn off_diagonal_power(omega: &DMatrix<f64>, q: f64) -> f64 {
    let d = omega.nrows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in i + 1..d {
            acc += omega[(i, j)].abs().powf(q);
        }
    }
    acc
}

/// Generalized-Normal off-diagonal prior plus the Wishart diagonal prior.
pub fn gen_normal_logprior(omega: &DMatrix<f64>, cond: &Condition) -> f64 {
    let d = omega.nrows();
    let pairs = d * (d - 1) / 2;
    prior_constant(d, pairs, cond.lambda, cond.q)
        - cond.lambda * off_diagonal_power(omega, cond.q)
        - 0.5 * cond.lambda * omega.trace()
}

/// Full-mode log-posterior of a sample (its Cholesky factor is recomputed
/// from Ω).
pub fn unnorm_log_posterior(sample: &PrecisionSample, target: &GGMTarget, cond: &Condition) -> Result<f64, TargetError> {
    match (&sample.cross, target.blocks.as_ref()) {
        (None, None) => {
            let l = cholesky_lower(&sample.omega).ok_or(TargetError::NotSpd)?;
            Ok(wishart_loglik(&l, target) + gen_normal_logprior(&sample.omega, cond))
        }
        (cross, Some(b)) => {
            let s = b.s11.nrows();
            let empty = DMatrix::zeros(s, 0);
            block_unnorm_log_posterior(&sample.omega, cross.as_ref().unwrap_or(&empty), target, cond)
        }
        _ => Err(TargetError::Mode),
    }
}

/// `logp / T`.
pub fn tempered_log_posterior(logp: f64, temperature: f64) -> f64 {
    logp / temperature
}

/// Log-posterior of the `(Ω11, Ω12)` block pair with `Ω22.1` integrated out.
pub fn block_unnorm_log_posterior(
    omega11: &DMatrix<f64>,
    omega12: &DMatrix<f64>,
    target: &GGMTarget,
    cond: &Condition,
) -> Result<f64, TargetError> {
    let b = target.blocks.as_ref().ok_or(TargetError::Mode)?;
    let (s, t) = (b.s11.nrows(), b.s22.nrows());
    if omega11.shape() != (s, s) || omega12.shape() != (s, t) {
        return Err(TargetError::Mode);
    }
    let lam = cond.lambda;
    let l = cholesky_lower(omega11).ok_or(TargetError::Mode)?;
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let y = l.solve_lower_triangular(omega12).ok_or(TargetError::Mode)?;
    let s22l = &b.s22 + DMatrix::identity(t, t) * lam;
    let s11l = &b.s11 + DMatrix::identity(s, s) * lam;
    let trace = (omega11 * s11l).trace()
        + 2.0 * (omega12.transpose() * &b.s12).trace()
        + (&y * s22l * y.transpose()).trace();
    let cross_pen: f64 = omega12.iter().map(|v| v.abs().powf(cond.q)).sum();
    let pairs = s * (s - 1) / 2 + s * t;
    Ok(0.5 * target.n as f64 * log_det - 0.5 * trace - lam * off_diagonal_power(omega11, cond.q) - lam * cross_pen
        + prior_constant(s + t, pairs, lam, cond.q))
}

/// Records the per-row log-posterior of a generated batch (`B×1`) at one
/// `(λ, q)`.
pub fn log_posterior_graph(g: &mut Graph, gen: &Generated, target: &GGMTarget, lambda: f64, q: f64) -> Var {
    let n = target.n as f64;
    let (scatter11, s, t) = match &target.blocks {
        Some(b) => (&b.s11, b.s11.nrows(), b.s22.nrows()),
        None => (&target.scatter, target.dim(), 0),
    };
    let tri = tri_len(s);

    let log_det = g.sum_rows(gen.log_diag);
    let mut total = g.scale(log_det, n);

    // −½ Tr(Ω11 (S11 + λI)) as a dot product with packed weights
    let mut w = vec![0.0; tri];
    for i in 0..s {
        for j in 0..=i {
            w[tri_index(i, j)] = if i == j {
                scatter11[(i, i)] + lambda
            } else {
                2.0 * scatter11[(i, j)]
            };
        }
    }
    let wv = g.constant(Tensor::column(&w));
    let tr = g.matmul(gen.omega, wv);
    let tr = g.scale(tr, -0.5);
    total = g.add(total, tr);

    let qv = g.scalar(q);
    if s > 1 {
        let off: Vec<usize> = (0..tri).filter(|p| !(0..s).any(|i| diag_index(i) == *p)).collect();
        let o = g.select_cols(gen.omega, off);
        let pw = g.abs_pow(o, qv);
        let pen = g.sum_rows(pw);
        let pen = g.scale(pen, -lambda);
        total = g.add(total, pen);
    }

    if let (Some(cross), Some(b)) = (gen.cross, &target.blocks) {
        let s12: Vec<f64> = (0..s * t).map(|p| b.s12[(p / t, p % t)]).collect();
        let s12v = g.constant(Tensor::column(&s12));
        let lin = g.matmul(cross, s12v);
        total = g.sub(total, lin);

        let y = g.tri_solve(gen.factor, cross, s, t);
        let s22 = g.constant(Tensor::from_fn(t, t, |i, j| b.s22[(i, j)]));
        let quad = g.quad_trace(y, s22, s, t);
        let yy = g.mul(y, y);
        let yy = g.sum_rows(yy);
        let yy = g.scale(yy, lambda);
        let quad = g.add(quad, yy);
        let quad = g.scale(quad, -0.5);
        total = g.add(total, quad);

        let pw = g.abs_pow(cross, qv);
        let pen = g.sum_rows(pw);
        let pen = g.scale(pen, -lambda);
        total = g.add(total, pen);
    }

    let pairs = s * (s - 1) / 2 + s * t;
    g.offset(total, prior_constant(s + t, pairs, lambda, q))
}
