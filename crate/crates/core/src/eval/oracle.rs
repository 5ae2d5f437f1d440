//! Brute-force posterior on a rectangular grid for `d ≤ 2`.
//!
//! The grid runs over the packed coordinates (`ω11` for `d = 1`;
//! `ω11, ω21, ω22` for `d = 2`). Points outside the SPD cone get zero
//! density. Normalization and marginals use the trapezoid rule; marginal
//! quantiles invert the piecewise-linear CDF.

use super::entry_labels;
use crate::flow::PrecisionSample;
use crate::parallel::map_indexed;
use crate::target::{unnorm_log_posterior, Condition, GGMTarget, TargetError};
use nalgebra::DMatrix;
use thiserror::Error;

/// Largest marginal mass allowed in the outermost grid cells.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid oracle supports d in {{1, 2}}, got {0}")]
    Dimension(usize),
    #[error("grid needs one range per coordinate and at least 3 points")]
    Spec,
    #[error("boundary mass {0:e} exceeds the limit; enlarge the grid")]
    EnlargeGrid(f64),
    #[error("posterior has no mass on the grid")]
    Empty,
    #[error(transparent)]
    Target(#[from] TargetError),
}

/// Axis ranges in packed order and the per-axis point count.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

impl GridSpec {
    /// A generous box from the conjugate diagonal scale `n / (S_ii + λ)`.
    pub fn auto(target: &GGMTarget, lambda: f64, points: usize) -> Result<Self, OracleError> {
        let d = target.dim();
        let n = target.n as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| (n + 2.0) / (target.scatter[(i, i)] + lambda))
            .collect();
        let top: Vec<f64> = scale.iter().map(|m| m * (1.0 + 12.0 * (2.0 / (n + 2.0)).sqrt())).collect();
        match d {
            1 => Ok(Self {
                lo: vec![0.0],
                hi: vec![top[0]],
                points,
            }),
            2 => {
                let off = (top[0] * top[1]).sqrt();
                Ok(Self {
                    lo: vec![0.0, -off, 0.0],
                    hi: vec![top[0], off, top[1]],
                    points,
                })
            }
            _ => Err(OracleError::Dimension(d)),
        }
    }

    fn axes(&self) -> Vec<Vec<f64>> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| (0..self.points).map(|i| a + (b - a) * i as f64 / (self.points - 1) as f64).collect())
            .collect()
    }
}

/// Normalized marginals of the gridded posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTable {
    pub entries: Vec<(usize, usize)>,
    pub axes: Vec<Vec<f64>>,
    /// Marginal densities on `axes`, each integrating to one.
    pub marginals: Vec<Vec<f64>>,
    /// Trapezoid mass of the normalized joint table.
    pub mass: f64,
    pub boundary_mass: f64,
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let h = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

fn log_post(omega: DMatrix<f64>, target: &GGMTarget, cond: &Condition) -> Result<f64, TargetError> {
    let sample = PrecisionSample {
        omega,
        cross: None,
        log_q: 0.0,
        z: Vec::new(),
    };
    match unnorm_log_posterior(&sample, target, cond) {
        Err(TargetError::NotSpd) => Ok(f64::NEG_INFINITY),
        other => other,
    }
}

/// Evaluates the posterior at `(λ, q)` on `spec` and returns its marginals.
pub fn grid_oracle_posterior(target: &GGMTarget, lambda: f64, q: f64, spec: &GridSpec) -> Result<OracleTable, OracleError> {
    let d = target.dim();
    let coords = match d {
        1 => 1,
        2 => 3,
        _ => return Err(OracleError::Dimension(d)),
    };
    if spec.lo.len() != coords || spec.hi.len() != coords || spec.points < 3 {
        return Err(OracleError::Spec);
    }
    let cond = Condition::new(lambda, q, 1.0)?;
    let axes = spec.axes();
    let n = spec.points;

    // log density on the grid, NEG_INFINITY off the SPD cone
    let logp: Vec<f64> = if d == 1 {
        axes[0]
            .iter()
            .map(|&w| {
                if w > 0.0 {
                    log_post(DMatrix::from_element(1, 1, w), target, &cond)
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            })
            .collect::<Result<_, _>>()?
    } else {
        let slabs = map_indexed(n, |a| {
            let w11 = axes[0][a];
            let mut out = Vec::with_capacity(n * n);
            for &w21 in &axes[1] {
                for &w22 in &axes[2] {
                    if w11 > 0.0 && w22 > 0.0 && w11 * w22 - w21 * w21 > 0.0 {
                        let m = DMatrix::from_row_slice(2, 2, &[w11, w21, w21, w22]);
                        out.push(log_post(m, target, &cond)?);
                    } else {
                        out.push(f64::NEG_INFINITY);
                    }
                }
            }
            Ok::<_, TargetError>(out)
        });
        let mut all = Vec::with_capacity(n * n * n);
        for s in slabs {
            all.extend(s?);
        }
        all
    };

    let peak = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(OracleError::Empty);
    }
    let weights: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let mut marginals = vec![vec![0.0; n]; coords];
    let mut total = 0.0;
    for (idx, lp) in logp.iter().enumerate() {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        let p = (lp - peak).exp();
        let mut rem = idx;
        let mut pos = vec![0; coords];
        for c in (0..coords).rev() {
            pos[c] = rem % n;
            rem /= n;
        }
        let w_all: f64 = (0..coords).map(|c| weights[c][pos[c]]).product();
        total += p * w_all;
        for c in 0..coords {
            marginals[c][pos[c]] += p * w_all / weights[c][pos[c]];
        }
    }
    for m in &mut marginals {
        for v in m.iter_mut() {
            *v /= total;
        }
    }
    let mass: f64 = marginals[0].iter().zip(&weights[0]).map(|(m, w)| m * w).sum();

    // mass in the outermost cell on each side; a lower diagonal face at 0
    // is the natural edge of the support and does not count
    let diagonal = |c: usize| d == 1 || c != 1;
    let mut boundary: f64 = 0.0;
    for c in 0..coords {
        let m = &marginals[c];
        let a = &axes[c];
        let cell = |i: usize| 0.5 * (m[i] + m[i + 1]) * (a[i + 1] - a[i]);
        if !(diagonal(c) && spec.lo[c] <= 0.0) {
            boundary = boundary.max(cell(0));
        }
        boundary = boundary.max(cell(n - 2));
    }
    if boundary > BOUNDARY_MASS_LIMIT {
        return Err(OracleError::EnlargeGrid(boundary));
    }
    Ok(OracleTable {
        entries: entry_labels(d, 0),
        axes,
        marginals,
        mass,
        boundary_mass: boundary,
    })
}

impl OracleTable {
    /// `p`-quantile of entry `e` from the piecewise-linear marginal CDF.
    pub fn quantile(&self, e: usize, p: f64) -> f64 {
        let (a, m) = (&self.axes[e], &self.marginals[e]);
        let mut cdf = 0.0;
        for i in 0..a.len() - 1 {
            let seg = 0.5 * (m[i] + m[i + 1]) * (a[i + 1] - a[i]);
            if cdf + seg >= p && seg > 0.0 {
                return a[i] + (a[i + 1] - a[i]) * (p - cdf) / seg;
            }
            cdf += seg;
        }
        a[a.len() - 1]
    }

    /// Central interval at `level`.
    pub fn interval(&self, e: usize, level: f64) -> (f64, f64) {
        (self.quantile(e, 0.5 * (1.0 - level)), self.quantile(e, 0.5 * (1.0 + level)))
    }

    /// A tighter grid spanning the `1e-7` tails of every marginal, padded
    /// by a fifth of the span on each side.
    pub fn refined(&self, points: usize) -> GridSpec {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for e in 0..self.axes.len() {
            let (a, b) = (self.quantile(e, 1e-7), self.quantile(e, 1.0 - 1e-7));
            let pad = 0.2 * (b - a);
            let diag = self.entries[e].0 == self.entries[e].1;
            lo.push(if diag { (a - pad).max(0.0) } else { a - pad });
            hi.push(b + pad);
        }
        GridSpec { lo, hi, points }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Gamma};

    #[test]
    fn scalar_case_is_a_gamma() {
        // (n/2) log ω − ω(s + λ)/2 is a Gamma(n/2 + 1, (s + λ)/2) log-density
        let (s, n, lambda) = (3.0, 8usize, 1.5);
        let target = GGMTarget::full(DMatrix::from_element(1, 1, s), n).unwrap();
        let coarse = grid_oracle_posterior(&target, lambda, 1.0, &GridSpec::auto(&target, lambda, 401).unwrap()).unwrap();
        let table = grid_oracle_posterior(&target, lambda, 1.0, &coarse.refined(4001)).unwrap();
        let gamma = Gamma::new(n as f64 / 2.0 + 1.0, (s + lambda) / 2.0).unwrap();
        for p in [0.05, 0.25, 0.5, 0.75, 0.95] {
            let want = gamma.inverse_cdf(p);
            let got = table.quantile(0, p);
            assert!((got - want).abs() < 1e-4 * want, "p={p}: {got} vs {want}");
        }
        assert!((table.mass - 1.0).abs() < 1e-8);
    }

    #[test]
    fn two_dim_mass_and_symmetry() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 4.0]);
        let target = GGMTarget::full(s, 10).unwrap();
        let spec = GridSpec::auto(&target, 1.0, 61).unwrap();
        let table = grid_oracle_posterior(&target, 1.0, 1.0, &spec).unwrap();
        assert!((table.mass - 1.0).abs() < 1e-8);
        // S has no correlation, so ω21 is symmetric about zero
        assert!(table.quantile(1, 0.5).abs() < 1e-6);
        let (lo, hi) = table.interval(1, 0.9);
        assert!((lo + hi).abs() < 1e-6);
        // diagonal marginals agree by exchangeability
        assert!((table.quantile(0, 0.3) - table.quantile(2, 0.3)).abs() < 1e-9);
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let target = GGMTarget::full(DMatrix::from_element(1, 1, 2.0), 10).unwrap();
        let spec = GridSpec {
            lo: vec![0.0],
            hi: vec![2.0],
            points: 101,
        };
        assert!(matches!(
            grid_oracle_posterior(&target, 1.0, 1.0, &spec),
            Err(OracleError::EnlargeGrid(_))
        ));
        let wide = GridSpec::auto(&target, 1.0, 101).unwrap();
        assert!(grid_oracle_posterior(&target, 1.0, 1.0, &wide).is_ok());
    }

    #[test]
    fn rejects_larger_dimensions() {
        let target = GGMTarget::full(DMatrix::identity(3, 3), 5).unwrap();
        assert!(matches!(GridSpec::auto(&target, 1.0, 11), Err(OracleError::Dimension(3))));
    }
}
