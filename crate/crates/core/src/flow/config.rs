use crate::diffcore::kernels::MAX_SOS_K;
use crate::linalg::tri_len;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest and largest admissible norm exponent.
pub const Q_BOUNDS: (f64, f64) = (0.05, 5.0);
/// Largest admissible shrinkage.
pub const LAMBDA_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid flow configuration: {0}")]
    Invalid(String),
}

/// Which part of the precision matrix the flow models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FlowMode {
    /// Full `d×d` precision matrix.
    Full { d: usize },
    /// Query block `Ω11` (s×s) and cross block `Ω12` (s×t).
    Block { s: usize, t: usize },
}

impl FlowMode {
    /// Flow (base-space) dimension.
    pub fn dim(&self) -> usize {
        match *self {
            FlowMode::Full { d } => tri_len(d),
            FlowMode::Block { s, t } => tri_len(s) + s * t,
        }
    }

    /// Size of the SPD block produced by the Cholesky head.
    pub fn spd_dim(&self) -> usize {
        match *self {
            FlowMode::Full { d } => d,
            FlowMode::Block { s, .. } => s,
        }
    }

    pub fn cross_dims(&self) -> (usize, usize) {
        match *self {
            FlowMode::Full { .. } => (0, 0),
            FlowMode::Block { s, t } => (s, t),
        }
    }
}

/// Closed interval used for conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, x: f64) -> bool {
        // tolerate round-off at the ends of log-spaced grids
        let tol = 1e-12 * self.max.abs().max(1.0);
        x >= self.min - tol && x <= self.max + tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub mode: FlowMode,
    pub n_layers: usize,
    /// Sigmoids per dimension.
    pub k: usize,
    /// Linear-range constant of the softplus tails.
    pub tail_range: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub lambda_range: Range,
    pub q_range: Range,
}

impl FlowConfig {
    pub fn full(d: usize, lambda_range: Range, q_range: Range) -> Self {
        Self {
            mode: FlowMode::Full { d },
            n_layers: 4,
            k: 8,
            tail_range: 10.0,
            hidden_width: 64,
            hidden_layers: 2,
            lambda_range,
            q_range,
        }
    }

    pub fn block(s: usize, t: usize, lambda_range: Range, q_range: Range) -> Self {
        Self {
            mode: FlowMode::Block { s, t },
            ..Self::full(s, lambda_range, q_range)
        }
    }

    pub fn dim(&self) -> usize {
        self.mode.dim()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.mode.spd_dim() == 0 {
            return bad("matrix dimension must be at least 1");
        }
        if self.n_layers == 0 || self.k == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return bad("layer count, k, hidden width and hidden layers must be positive");
        }
        if self.k > MAX_SOS_K {
            return bad("k must not exceed 64");
        }
        if !(self.tail_range > 0.0) {
            return bad("tail range must be positive");
        }
        let (l, q) = (self.lambda_range, self.q_range);
        if !(l.min > 0.0 && l.min <= l.max && l.max <= LAMBDA_MAX) {
            return bad("lambda range must satisfy 0 < min <= max <= 1000");
        }
        if !(q.min >= Q_BOUNDS.0 && q.min <= q.max && q.max <= Q_BOUNDS.1) {
            return bad("q range must lie in [0.05, 5] with min <= max");
        }
        Ok(())
    }

    /// `(log λ, q)` affinely mapped onto `[-1, 1]` over the training ranges.
    pub fn embed_condition(&self, lambda: f64, q: f64) -> [f64; 2] {
        let scale = |x: f64, lo: f64, hi: f64| {
            if hi > lo {
                2.0 * (x - lo) / (hi - lo) - 1.0
            } else {
                0.0
            }
        };
        [
            scale(lambda.ln(), self.lambda_range.min.ln(), self.lambda_range.max.ln()),
            scale(q, self.q_range.min, self.q_range.max),
        ]
    }
}
