//! Reference graphical-lasso solver.
//!
//! Minimizes `−log det Ω + Tr(S̃Ω) + ρ Σ_{i<j}|ω_ij|` by proximal gradient
//! with Barzilai-Borwein steps. Each trial step is accepted only if its
//! Cholesky factorization succeeds and the smooth part satisfies the usual
//! quadratic upper bound, so iterates stay SPD.
//!
//! The zero-temperature limit of the Bayesian target with shrinkage `λ` is
//! this problem with `S̃ = (S + λI)/n` and `ρ = 2λ/n`; see
//! [`map_reference_path`].

use super::{check_grid, entry_labels, EvalError, SolutionPath};
use crate::data::{center_columns, scatter_matrix};
use crate::linalg::{cholesky_lower, pack_lower};
use crate::parallel::map_indexed;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GlassoError {
    #[error("no convergence after {iterations} iterations (KKT residual {kkt:e})")]
    NotConverged { iterations: usize, kkt: f64 },
    #[error("line search failed to find an SPD step")]
    LineSearch,
    #[error("covariance estimate needs a positive diagonal")]
    Diagonal,
    #[error("penalty must be finite and non-negative")]
    Penalty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlassoOptions {
    pub max_iter: usize,
    /// Relative objective change threshold.
    pub rel_tol: f64,
    /// Largest admissible KKT violation.
    pub kkt_tol: f64,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            rel_tol: 1e-8,
            kkt_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoFit {
    pub omega: DMatrix<f64>,
    pub objective: f64,
    pub kkt: f64,
    pub iterations: usize,
}

struct Point {
    omega: DMatrix<f64>,
    /// `S̃ − Ω⁻¹`.
    grad: DMatrix<f64>,
    smooth: f64,
}

fn evaluate(s: &DMatrix<f64>, omega: DMatrix<f64>) -> Option<Point> {
    let l = cholesky_lower(&omega)?;
    let log_det = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let inv = nalgebra::Cholesky::new(omega.clone())?.inverse();
    let smooth = -log_det + s.component_mul(&omega).sum();
    let grad = s - inv;
    smooth.is_finite().then_some(Point { omega, grad, smooth })
}

fn penalty(omega: &DMatrix<f64>, rho: f64) -> f64 {
    let d = omega.nrows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in i + 1..d {
            acc += omega[(i, j)].abs();
        }
    }
    rho * acc
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Largest subgradient-condition violation at `(Ω, S̃ − Ω⁻¹)`.
fn kkt_residual(p: &Point, rho: f64) -> f64 {
    let d = p.omega.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        worst = worst.max(p.grad[(i, i)].abs());
        for j in i + 1..d {
            let g = 2.0 * p.grad[(i, j)];
            let w = p.omega[(i, j)];
            let r = if w != 0.0 { (g + rho * w.signum()).abs() } else { (g.abs() - rho).max(0.0) };
            worst = worst.max(r);
        }
    }
    worst
}

/// Smallest ρ at which the solution is diagonal: `2 max_{i<j}|S̃_ij|`.
pub fn glasso_lambda_max(s: &DMatrix<f64>) -> f64 {
    let d = s.nrows();
    let mut m: f64 = 0.0;
    for i in 0..d {
        for j in i + 1..d {
            m = m.max(s[(i, j)].abs());
        }
    }
    2.0 * m
}

/// Solves one penalized problem, optionally warm-started.
pub fn solve_glasso(
    s: &DMatrix<f64>,
    rho: f64,
    warm: Option<&DMatrix<f64>>,
    opts: &GlassoOptions,
) -> Result<GlassoFit, GlassoError> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(GlassoError::Penalty);
    }
    let d = s.nrows();
    if (0..d).any(|i| !(s[(i, i)] > 0.0)) {
        return Err(GlassoError::Diagonal);
    }
    let diag_start = || DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 });
    let start = warm.cloned().filter(|w| cholesky_lower(w).is_some()).unwrap_or_else(diag_start);
    let mut cur = evaluate(s, start).ok_or(GlassoError::LineSearch)?;
    let mut objective = cur.smooth + penalty(&cur.omega, rho);
    let min_eig = cur.omega.symmetric_eigenvalues().min();
    let mut step = (min_eig * min_eig).clamp(1e-10, 1.0);

    for it in 1..=opts.max_iter {
        let mut trial = step;
        let next = loop {
            let mut cand = &cur.omega - &cur.grad * trial;
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        cand[(i, j)] = soft(cand[(i, j)], 0.5 * trial * rho);
                    }
                }
            }
            if let Some(p) = evaluate(s, cand) {
                let diff = &p.omega - &cur.omega;
                let bound = cur.smooth + cur.grad.dot(&diff) + diff.norm_squared() / (2.0 * trial);
                if p.smooth <= bound + 1e-12 * cur.smooth.abs().max(1.0) {
                    break p;
                }
            }
            trial *= 0.5;
            if trial < 1e-20 {
                return Err(GlassoError::LineSearch);
            }
        };
        let next_obj = next.smooth + penalty(&next.omega, rho);
        let rel = (objective - next_obj).abs() / next_obj.abs().max(1.0);
        let kkt = kkt_residual(&next, rho);

        let ds = &next.omega - &cur.omega;
        let dg = &next.grad - &cur.grad;
        let curv = ds.dot(&dg);
        step = if curv > 0.0 { (ds.norm_squared() / curv).clamp(1e-12, 1e6) } else { trial };

        cur = next;
        objective = next_obj;
        if rel < opts.rel_tol && kkt < opts.kkt_tol {
            return Ok(GlassoFit {
                omega: cur.omega,
                objective,
                kkt,
                iterations: it,
            });
        }
    }
    Err(GlassoError::NotConverged {
        iterations: opts.max_iter,
        kkt: kkt_residual(&cur, rho),
    })
}

/// Solves along `problems` (ordered by decreasing penalty), warm-starting
/// each from the previous solution.
fn warm_path(problems: &[(DMatrix<f64>, f64)], opts: &GlassoOptions) -> Result<Vec<DMatrix<f64>>, GlassoError> {
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(problems.len());
    for (s, rho) in problems {
        let fit = solve_glasso(s, *rho, out.last(), opts)?;
        out.push(fit.omega);
    }
    Ok(out)
}

fn path_from(grid: &[f64], d: usize, problems: Vec<(DMatrix<f64>, f64)>) -> Result<SolutionPath, EvalError> {
    // solve from the sparsest end, then restore ascending order
    let mut rev = problems;
    rev.reverse();
    let mut sols = warm_path(&rev, &GlassoOptions::default())?;
    sols.reverse();
    Ok(SolutionPath {
        lambdas: grid.to_vec(),
        q: 1.0,
        temperature: 0.0,
        entries: entry_labels(d, 0),
        estimates: sols.iter().map(pack_lower).collect(),
    })
}

/// Frequentist path with `S̃ = S/n` and `ρ` taken from `grid` directly.
pub fn reference_glasso_path(scatter: &DMatrix<f64>, n: usize, grid: &[f64]) -> Result<SolutionPath, EvalError> {
    check_grid(grid)?;
    let s = scatter / n as f64;
    let problems = grid.iter().map(|&r| (s.clone(), r)).collect();
    path_from(grid, scatter.nrows(), problems)
}

/// Zero-temperature limit of the Bayesian target on a grid of Bayesian
/// shrinkages `λ`: `S̃ = (S + λI)/n`, `ρ = 2λ/n`.
pub fn map_reference_path(scatter: &DMatrix<f64>, n: usize, grid: &[f64]) -> Result<SolutionPath, EvalError> {
    check_grid(grid)?;
    let d = scatter.nrows();
    let nf = n as f64;
    let problems = grid
        .iter()
        .map(|&l| ((scatter + DMatrix::identity(d, d) * l) / nf, 2.0 * l / nf))
        .collect();
    path_from(grid, d, problems)
}

/// Held-out log-likelihood curve of a `k`-fold cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvCurve {
    pub penalties: Vec<f64>,
    pub scores: Vec<f64>,
    pub best: f64,
}

/// `k`-fold cross-validation of the penalty over `grid` on the rows of
/// `x`. Folds are contiguous row blocks; each training fold is centered on
/// its own mean, which is also subtracted from the held-out rows. The score
/// is the mean held-out `log det Ω − Tr(S_test Ω)`.
pub fn cross_validate_glasso(x: &DMatrix<f64>, grid: &[f64], folds: usize) -> Result<CvCurve, EvalError> {
    check_grid(grid)?;
    let n = x.nrows();
    assert!(folds >= 2 && folds <= n, "need 2 <= folds <= rows");
    let per_fold = map_indexed(folds, |f| {
        let lo = f * n / folds;
        let hi = (f + 1) * n / folds;
        let train_rows: Vec<usize> = (0..n).filter(|r| *r < lo || *r >= hi).collect();
        let train = x.select_rows(&train_rows);
        let mean = train.row_mean();
        let s_train = scatter_matrix(&center_columns(&train)) / train.nrows() as f64;
        let mut test = x.rows(lo, hi - lo).into_owned();
        for mut row in test.row_iter_mut() {
            row -= &mean;
        }
        let s_test = test.transpose() * &test / (hi - lo) as f64;
        let problems: Vec<_> = grid.iter().rev().map(|&r| (s_train.clone(), r)).collect();
        let sols = warm_path(&problems, &GlassoOptions::default())?;
        let scores: Vec<f64> = sols
            .iter()
            .rev()
            .map(|o| {
                let ld = crate::linalg::log_det_spd(o).unwrap_or(f64::NEG_INFINITY);
                ld - s_test.component_mul(o).sum()
            })
            .collect();
        Ok::<_, GlassoError>(scores)
    });
    let mut scores = vec![0.0; grid.len()];
    for fold in per_fold {
        let fold = fold?;
        for (acc, s) in scores.iter_mut().zip(fold) {
            *acc += s / folds as f64;
        }
    }
    let best = grid[super::argmax_first(&scores)];
    Ok(CvCurve {
        penalties: grid.to_vec(),
        scores,
        best,
    })
}
