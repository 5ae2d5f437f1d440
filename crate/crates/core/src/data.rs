//! Synthetic sparse precision matrices, Gaussian sampling, scatter matrices
//! and CSV ingestion.

use crate::linalg::cholesky_lower;
use crate::target::{GGMTarget, TargetError};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use thiserror::Error;

/// Magnitude range of the nonzero factor entries.
pub const FACTOR_MAGNITUDE: (f64, f64) = (0.3, 0.9);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-numeric cell {value:?} in column {column:?} (row {row})")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("unknown query column {0:?}")]
    UnknownColumn(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Target(#[from] TargetError),
}

/// Unordered off-diagonal pair with `i < j`.
pub type Edge = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub omega: DMatrix<f64>,
    pub edges: BTreeSet<Edge>,
    pub alpha: f64,
}

impl GroundTruth {
    pub fn from_omega(omega: DMatrix<f64>, alpha: f64) -> Self {
        let edges = edge_support(&omega, 0.0);
        Self { omega, edges, alpha }
    }

    /// Fraction of off-diagonal pairs that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let d = self.omega.nrows();
        let pairs = d * (d - 1) / 2;
        if pairs == 0 {
            return 1.0;
        }
        1.0 - self.edges.len() as f64 / pairs as f64
    }
}

/// Pairs `i < j` with `|ω_ij| > tol`.
pub fn edge_support(omega: &DMatrix<f64>, tol: f64) -> BTreeSet<Edge> {
    let d = omega.nrows();
    let mut e = BTreeSet::new();
    for i in 0..d {
        for j in i + 1..d {
            if omega[(i, j)].abs() > tol {
                e.insert((i, j));
            }
        }
    }
    e
}

/// `Ω = A Aᵀ` for a unit-diagonal lower factor `A` whose strictly lower
/// entries are active with probability `1 − α`, magnitude uniform on
/// `[0.3, 0.9]` and random sign.
pub fn generate_sparse_precision(d: usize, alpha: f64, seed: u64) -> GroundTruth {
    assert!(d >= 1, "dimension must be positive");
    assert!((0.0..1.0).contains(&alpha) || alpha == 1.0, "sparsity must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::identity(d, d);
    for i in 0..d {
        for j in 0..i {
            if rng.random::<f64>() < 1.0 - alpha {
                let mag = rng.random_range(FACTOR_MAGNITUDE.0..FACTOR_MAGNITUDE.1);
                a[(i, j)] = if rng.random::<bool>() { mag } else { -mag };
            }
        }
    }
    let omega = &a * a.transpose();
    GroundTruth::from_omega((&omega + omega.transpose()) * 0.5, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Centered observations, `n×d`.
    pub x: DMatrix<f64>,
    pub scatter: DMatrix<f64>,
    pub names: Vec<String>,
    /// Number of leading query columns in block mode.
    pub queries: Option<usize>,
}

impl Dataset {
    /// Centers `x` and builds the scatter matrix.
    pub fn new(x: DMatrix<f64>, names: Vec<String>) -> Self {
        assert_eq!(names.len(), x.ncols());
        let x = center_columns(&x);
        let scatter = scatter_matrix(&x);
        Self {
            x,
            scatter,
            names,
            queries: None,
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// `(S11, S12, S22)` for the leading `s` columns.
    pub fn block_parts(&self, s: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let d = self.d();
        let m = &self.scatter;
        (
            m.view((0, 0), (s, s)).into_owned(),
            m.view((0, s), (s, d - s)).into_owned(),
            m.view((s, s), (d - s, d - s)).into_owned(),
        )
    }

    pub fn target(&self) -> Result<GGMTarget, TargetError> {
        match self.queries {
            Some(s) => GGMTarget::block(self.scatter.clone(), self.n(), s),
            None => GGMTarget::full(self.scatter.clone(), self.n()),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for r in 0..self.n() {
            w.write_record(self.x.row(r).iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Subtracts column means.
pub fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    if x.nrows() == 0 {
        return out;
    }
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// `XᵀX`, symmetrized.
pub fn scatter_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let s = x.transpose() * x;
    (&s + s.transpose()) * 0.5
}

/// `n` rows from `N(0, Ω⁻¹)` via a triangular solve against the Cholesky
/// factor of `Ω`, then centered.
pub fn sample_gaussian(gt: &GroundTruth, n: usize, seed: u64) -> Dataset {
    let d = gt.omega.nrows();
    let l = cholesky_lower(&gt.omega).expect("ground truth must be positive definite");
    let lt = l.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    // x = L⁻ᵀ ε has covariance (L Lᵀ)⁻¹
    let x = lt
        .solve_upper_triangular(&eps)
        .expect("factor has a positive diagonal");
    let names = (0..d).map(|i| format!("x{i}")).collect();
    Dataset::new(x.transpose(), names)
}

/// Reads a numeric CSV with a header row. Rows with an empty cell are
/// dropped. With `queries`, those columns are moved to the front.
pub fn load_csv(path: &Path, queries: Option<&[String]>) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    let d = header.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(DataError::Malformed(format!("row {} has {} cells, expected {d}", r + 1, record.len())));
        }
        let cells: Vec<&str> = record.iter().map(str::trim).collect();
        if cells.iter().any(|c| c.is_empty() || c.eq_ignore_ascii_case("na")) {
            continue;
        }
        let mut row = Vec::with_capacity(d);
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                row: r + 1,
                column: header[c].clone(),
                value: cell.to_string(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }

    let mut order: Vec<usize> = Vec::with_capacity(d);
    let mut n_queries = None;
    if let Some(qs) = queries {
        for q in qs {
            let idx = header
                .iter()
                .position(|h| h == q)
                .ok_or_else(|| DataError::UnknownColumn(q.clone()))?;
            if order.contains(&idx) {
                return Err(DataError::DuplicateColumn(q.clone()));
            }
            order.push(idx);
        }
        n_queries = Some(qs.len());
    }
    let rest: Vec<usize> = (0..d).filter(|i| !order.contains(i)).collect();
    order.extend(rest);

    let x = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][order[c]]);
    let names = order.iter().map(|&i| header[i].clone()).collect();
    let mut ds = Dataset::new(x, names);
    ds.queries = n_queries;
    Ok(ds)
}

/// Writes the nonzero upper-triangle entries (diagonal included) of the
/// ground truth as `i,j,value`.
pub fn write_ground_truth(gt: &GroundTruth, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "j", "value"])?;
    let d = gt.omega.nrows();
    for i in 0..d {
        for j in i..d {
            let v = gt.omega[(i, j)];
            if v != 0.0 {
                w.write_record([i.to_string(), j.to_string(), format!("{v:e}")])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut entries = Vec::new();
    let mut d = 0;
    for rec in reader.records() {
        let rec = rec?;
        let parse_idx = |k: usize| -> Result<usize, DataError> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| DataError::Malformed(format!("bad index in {rec:?}")))
        };
        let (i, j) = (parse_idx(0)?, parse_idx(1)?);
        let v: f64 = rec
            .get(2)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DataError::Malformed(format!("bad value in {rec:?}")))?;
        d = d.max(i + 1).max(j + 1);
        entries.push((i, j, v));
    }
    let mut omega = DMatrix::zeros(d, d);
    for (i, j, v) in entries {
        omega[(i, j)] = v;
        omega[(j, i)] = v;
    }
    Ok(GroundTruth::from_omega(omega, f64::NAN))
}
