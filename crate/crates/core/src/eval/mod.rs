//! Posterior summaries, edge recovery, solution paths, evidence-based model
//! selection and the two validation oracles.
//!
//! Entries are labelled by their position in the full `d×d` precision
//! matrix. In full mode the entry order is the packed lower triangle
//! (row-major, `row ≥ col`); in block mode the `Ω11` lower triangle is
//! followed by the `Ω12` block in row-major order, labelled `(i, s + c)`.
//! Quantiles are nearest-rank order statistics: the `p`-quantile of `N`
//! sorted values is the one at rank `max(1, ⌈pN⌉)`.

mod glasso;
mod oracle;

pub use glasso::{
    cross_validate_glasso, glasso_lambda_max, map_reference_path, reference_glasso_path, solve_glasso,
    CvCurve, GlassoError, GlassoFit, GlassoOptions,
};
pub use oracle::{grid_oracle_posterior, GridSpec, OracleError, OracleTable};

use crate::data::Edge;
use crate::flow::{Flow, FlowError, PrecisionSample};
use crate::parallel::map_indexed;
use crate::target::GGMTarget;
use crate::train::{estimate_marginal_loglik, stream_seed, LossEstimate, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use thiserror::Error;

/// Low-temperature samples per grid point for the MAP median.
pub const DEFAULT_N_MAP: usize = 256;
/// Grid density used when a path grid is derived from a trained range.
pub const POINTS_PER_DECADE: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("grid must be strictly increasing and positive")]
    Grid,
    #[error("paths differ in grid or entries")]
    Mismatch,
    #[error("credible level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples disagree in shape")]
    Shape,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Glasso(#[from] GlassoError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Matrix positions of the flow-space coordinates of an `s`-dimensional SPD
/// block followed by an `s×t` cross block.
pub fn entry_labels(s: usize, t: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(s * (s + 1) / 2 + s * t);
    for i in 0..s {
        for j in 0..=i {
            out.push((i, j));
        }
    }
    for i in 0..s {
        for c in 0..t {
            out.push((i, s + c));
        }
    }
    out
}

fn labels_for(sample: &PrecisionSample) -> Vec<(usize, usize)> {
    let s = sample.omega.nrows();
    let t = sample.cross.as_ref().map_or(0, |c| c.ncols());
    entry_labels(s, t)
}

/// `N` independent generator passes at `(λ, q)`, reproducible per seed.
pub fn posterior_samples(flow: &Flow, lambda: f64, q: f64, n: usize, seed: u64) -> Result<Vec<PrecisionSample>, EvalError> {
    flow.check_condition(lambda, q)?;
    const BLOCK: usize = 1024;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let m = BLOCK.min(n - out.len());
        out.extend(flow.sample(m, lambda, q, &mut rng)?);
    }
    Ok(out)
}

/// Nearest-rank quantile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Per-entry interval summary of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleSummary {
    pub entries: Vec<(usize, usize)>,
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub median: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
    pub samples: usize,
    pub lambda: f64,
    pub q: f64,
    pub temperature: f64,
}

/// Nearest-rank quantiles at `(1−γ)/2` and `(1+γ)/2` for each entry of
/// `samples`, drawn at condition `(λ, q, T)`.
pub fn credible_intervals(
    samples: &[PrecisionSample],
    level: f64,
    condition: (f64, f64, f64),
) -> Result<CredibleSummary, EvalError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::Level(level));
    }
    if samples.len() < 2 {
        return Err(EvalError::TooFewSamples { needed: 2, got: samples.len() });
    }
    let entries = labels_for(&samples[0]);
    let rows: Vec<Vec<f64>> = samples.iter().map(PrecisionSample::packed).collect();
    if rows.iter().any(|r| r.len() != entries.len()) {
        return Err(EvalError::Shape);
    }
    Ok(summarize(&rows, entries, level, condition))
}

fn summarize(rows: &[Vec<f64>], entries: Vec<(usize, usize)>, level: f64, condition: (f64, f64, f64)) -> CredibleSummary {
    let n = rows.len();
    let e = entries.len();
    let (mut lower, mut upper, mut median, mut mean, mut std_dev) =
        (vec![0.0; e], vec![0.0; e], vec![0.0; e], vec![0.0; e], vec![0.0; e]);
    let mut column = vec![0.0; n];
    for k in 0..e {
        for (c, r) in column.iter_mut().zip(rows) {
            *c = r[k];
        }
        let m = column.iter().sum::<f64>() / n as f64;
        let var = column.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        column.sort_by(f64::total_cmp);
        lower[k] = nearest_rank(&column, 0.5 * (1.0 - level));
        upper[k] = nearest_rank(&column, 0.5 * (1.0 + level));
        median[k] = nearest_rank(&column, 0.5);
        mean[k] = m;
        std_dev[k] = var.sqrt();
    }
    CredibleSummary {
        entries,
        level,
        lower,
        upper,
        median,
        mean,
        std_dev,
        samples: n,
        lambda: condition.0,
        q: condition.1,
        temperature: condition.2,
    }
}

impl CredibleSummary {
    /// Writes `i,j,lower,median,upper,mean,std` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["i", "j", "lower", "median", "upper", "mean", "std"])?;
        for (k, &(i, j)) in self.entries.iter().enumerate() {
            wr.write_record([
                i.to_string(),
                j.to_string(),
                fmt(self.lower[k]),
                fmt(self.median[k]),
                fmt(self.upper[k]),
                fmt(self.mean[k]),
                fmt(self.std_dev[k]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeSign {
    Positive,
    Negative,
}

/// An off-diagonal entry whose credible interval excludes zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCall {
    /// Unordered pair, `i < j`.
    pub pair: Edge,
    pub sign: EdgeSign,
    pub lower: f64,
    pub upper: f64,
}

/// Off-diagonal entries with `lower > 0` or `upper < 0`.
pub fn edge_set(summary: &CredibleSummary) -> Vec<EdgeCall> {
    let mut out = Vec::new();
    for (k, &(i, j)) in summary.entries.iter().enumerate() {
        if i == j {
            continue;
        }
        let (lo, hi) = (summary.lower[k], summary.upper[k]);
        let sign = if lo > 0.0 {
            EdgeSign::Positive
        } else if hi < 0.0 {
            EdgeSign::Negative
        } else {
            continue;
        };
        out.push(EdgeCall {
            pair: (i.min(j), i.max(j)),
            sign,
            lower: lo,
            upper: hi,
        });
    }
    out
}

pub fn edge_pairs(calls: &[EdgeCall]) -> BTreeSet<Edge> {
    calls.iter().map(|c| c.pair).collect()
}

/// Writes `i,j,sign,lower,upper` rows.
pub fn write_edges<W: Write>(calls: &[EdgeCall], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["i", "j", "sign", "lower", "upper"])?;
    for c in calls {
        let sign = match c.sign {
            EdgeSign::Positive => "+",
            EdgeSign::Negative => "-",
        };
        wr.write_record([c.pair.0.to_string(), c.pair.1.to_string(), sign.to_string(), fmt(c.lower), fmt(c.upper)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Harmonic mean of precision and recall. Both sets empty counts as a
/// perfect recovery; exactly one empty scores zero.
pub fn f1_score(predicted: &BTreeSet<Edge>, truth: &BTreeSet<Edge>) -> f64 {
    match (predicted.is_empty(), truth.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hits = predicted.intersection(truth).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let precision = hits / predicted.len() as f64;
    let recall = hits / truth.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `n` log-spaced points from `min` to `max` inclusive.
pub fn log_grid(min: f64, max: f64, n: usize) -> Vec<f64> {
    assert!(min > 0.0 && max >= min && n >= 1);
    if n == 1 {
        return vec![min];
    }
    let (a, b) = (min.ln(), max.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Log-spaced grid with `per_decade` points per factor of ten, covering
/// `[min, max]` with both endpoints included.
pub fn decade_grid(min: f64, max: f64, per_decade: usize) -> Vec<f64> {
    let decades = (max / min).log10();
    let n = ((decades * per_decade as f64).ceil() as usize + 1).max(2);
    if max == min {
        return vec![min];
    }
    log_grid(min, max, n)
}

/// Point estimates of every entry along a λ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub lambdas: Vec<f64>,
    pub q: f64,
    pub temperature: f64,
    pub entries: Vec<(usize, usize)>,
    /// `estimates[g][e]`: entry `e` at grid point `g`.
    pub estimates: Vec<Vec<f64>>,
}

impl SolutionPath {
    pub fn validate(&self) -> Result<(), EvalError> {
        check_grid(&self.lambdas)?;
        if self.estimates.len() != self.lambdas.len()
            || self.estimates.iter().any(|r| r.len() != self.entries.len() || r.iter().any(|x| !x.is_finite()))
        {
            return Err(EvalError::Shape);
        }
        Ok(())
    }

    /// Number of nonzero off-diagonal estimates (`|x| > tol`) per grid point.
    pub fn edge_counts(&self, tol: f64) -> Vec<usize> {
        self.estimates
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.entries)
                    .filter(|(x, (i, j))| i != j && x.abs() > tol)
                    .count()
            })
            .collect()
    }

    /// Writes a `lambda` column followed by one `i_j` column per entry.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["lambda".to_string()];
        header.extend(self.entries.iter().map(|(i, j)| format!("{i}_{j}")));
        wr.write_record(&header)?;
        for (l, row) in self.lambdas.iter().zip(&self.estimates) {
            let mut rec = vec![fmt(*l)];
            rec.extend(row.iter().map(|x| fmt(*x)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn check_grid(grid: &[f64]) -> Result<(), EvalError> {
    if grid.is_empty() || grid[0] <= 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EvalError::Grid);
    }
    Ok(())
}

/// Component-wise median of `samples`.
pub fn componentwise_median(samples: &[PrecisionSample]) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = samples.iter().map(PrecisionSample::packed).collect();
    let e = rows.first().map_or(0, Vec::len);
    (0..e)
        .map(|k| {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            crate::train::median(&col)
        })
        .collect()
}

/// MAP path from a low-temperature flow: the component-wise median of
/// `n_map` samples at each grid point. Grid points draw from independent
/// seed streams, so the result does not depend on evaluation order.
pub fn solution_path(
    flow: &Flow,
    temperature: f64,
    lambdas: &[f64],
    q: f64,
    n_map: usize,
    seed: u64,
) -> Result<SolutionPath, EvalError> {
    check_grid(lambdas)?;
    if n_map == 0 {
        return Err(EvalError::TooFewSamples { needed: 1, got: 0 });
    }
    let rows = map_indexed(lambdas.len(), |g| {
        let samples = posterior_samples(flow, lambdas[g], q, n_map, stream_seed(seed, 0x5041, g as u64))?;
        Ok::<_, EvalError>(componentwise_median(&samples))
    });
    let estimates = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let c = flow.config();
    let (s, t) = match c.mode {
        crate::flow::FlowMode::Full { d } => (d, 0),
        crate::flow::FlowMode::Block { s, t } => (s, t),
    };
    let path = SolutionPath {
        lambdas: lambdas.to_vec(),
        q,
        temperature,
        entries: entry_labels(s, t),
        estimates,
    };
    path.validate()?;
    Ok(path)
}

/// Mean squared difference over all entries and grid points.
pub fn path_mse(a: &SolutionPath, b: &SolutionPath) -> Result<f64, EvalError> {
    let same_grid = a.lambdas.len() == b.lambdas.len()
        && a.lambdas.iter().zip(&b.lambdas).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0));
    if !same_grid || a.entries != b.entries {
        return Err(EvalError::Mismatch);
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.estimates.iter().zip(&b.estimates) {
        for (x, y) in ra.iter().zip(rb) {
            acc += (x - y).powi(2);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

/// Evidence curve over a λ grid and its maximizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub lambdas: Vec<f64>,
    pub evidence: Vec<LossEstimate>,
    pub best: f64,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `λ* = argmax_λ log p(S | λ, q)` with the evidence approximated by the
/// negative T=1 loss. Every grid point uses the same base-sample seed,
/// which keeps the curve smooth in λ.
pub fn select_lambda(
    flow: &Flow,
    target: &GGMTarget,
    lambdas: &[f64],
    q: f64,
    samples: usize,
    seed: u64,
) -> Result<Selection, EvalError> {
    check_grid(lambdas)?;
    let evidence = map_indexed(lambdas.len(), |g| estimate_marginal_loglik(flow, target, lambdas[g], q, samples, seed))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = evidence.iter().map(|e| e.value).collect();
    let best = lambdas[argmax_first(&values)];
    Ok(Selection {
        lambdas: lambdas.to_vec(),
        evidence,
        best,
    })
}

impl Selection {
    /// Writes `lambda,log_evidence,std_err` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["lambda", "log_evidence", "std_err"])?;
        for (l, e) in self.lambdas.iter().zip(&self.evidence) {
            wr.write_record([fmt(*l), fmt(e.value), fmt(e.std_err)])?;
        }
        wr.flush()?;
        Ok(())
    }
}
