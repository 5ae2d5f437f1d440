//! Conditional matrix flow: masked sum-of-sigmoids layers conditioned on
//! `(λ, q)` followed by a Cholesky head that lands on SPD matrices.
//!
//! The generator is expressed on the autodiff tape ([`Flow::build`]) so the
//! same code path serves sampling (parameters as constants) and training
//! (parameters as differentiable inputs).

pub mod config;
pub mod head;
pub mod made;
pub mod params;
pub mod sos;

pub use config::{ConfigError, FlowConfig, FlowMode, Range};
pub use params::{CheckpointError, FlowParameters};

use crate::diffcore::kernels::{softplus_inv, SosParams};
use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::linalg::{diag_index, pack_lower, tri_len, unpack_symmetric};
use made::{layer_masks, order_position, ParamLayout};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("condition (λ={lambda}, q={q}) outside the trained ranges")]
    Condition { lambda: f64, q: f64 },
    #[error("base sample has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Numeric(#[from] DiffError),
    #[error(transparent)]
    Head(#[from] head::HeadError),
    #[error(transparent)]
    Inverse(#[from] sos::SosError),
}

/// A generated precision matrix (or block pair) with its flow log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSample {
    /// Full `Ω` in full mode, `Ω11` in block mode.
    pub omega: DMatrix<f64>,
    /// `Ω12` (s×t) in block mode.
    pub cross: Option<DMatrix<f64>>,
    pub log_q: f64,
    pub z: Vec<f64>,
}

impl PrecisionSample {
    /// Flow-space coordinates of the sample: packed lower triangle of the
    /// SPD block followed by the row-major cross block.
    pub fn packed(&self) -> Vec<f64> {
        let mut v = pack_lower(&self.omega);
        if let Some(c) = &self.cross {
            for i in 0..c.nrows() {
                for j in 0..c.ncols() {
                    v.push(c[(i, j)]);
                }
            }
        }
        v
    }
}

/// Tape handles produced by [`Flow::build`].
#[derive(Debug, Clone, Copy)]
pub struct Generated {
    /// Packed positive-diagonal factor of the SPD block, `B×tri(s)`.
    pub factor: Var,
    /// `log L_ii`, `B×s`.
    pub log_diag: Var,
    /// Packed SPD block, `B×tri(s)`.
    pub omega: Var,
    /// Row-major cross block `B×(s·t)` in block mode.
    pub cross: Option<Var>,
    /// Flow log-density of each row, `B×1`.
    pub log_q: Var,
}

#[derive(Debug, Clone)]
pub struct Flow {
    params: FlowParameters,
    layout: ParamLayout,
    masks: Vec<Vec<Tensor>>,
}

impl Flow {
    pub fn new(params: FlowParameters) -> Result<Self, FlowError> {
        params.config.validate()?;
        let layout = ParamLayout::new(&params.config);
        if layout.total != params.values.len() {
            return Err(ConfigError::Invalid(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.values.len()
            ))
            .into());
        }
        let masks = (0..params.config.n_layers)
            .map(|l| layer_masks(&params.config, l))
            .collect();
        Ok(Self { params, layout, masks })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.params.config
    }

    pub fn params(&self) -> &FlowParameters {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.config.dim()
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Replaces the parameter values (same layout).
    pub fn set_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.layout.total);
        self.params.values.copy_from_slice(values);
    }

    pub fn check_condition(&self, lambda: f64, q: f64) -> Result<(), FlowError> {
        let c = self.config();
        if c.lambda_range.contains(lambda) && c.q_range.contains(q) {
            Ok(())
        } else {
            Err(FlowError::Condition { lambda, q })
        }
    }

    /// Parameter tensors in layout order (weights and biases interleaved).
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let v = &self.params.values;
        self.layout
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().zip(&l.biases).flat_map(|(w, b)| [*w, *b]))
            .map(|s| Tensor::from_vec(s.rows, s.cols, v[s.range()].to_vec()))
            .collect()
    }

    /// Puts the parameters on the tape, differentiable or not.
    pub fn bind(&self, g: &mut Graph, differentiable: bool) -> Vec<Var> {
        self.param_tensors()
            .into_iter()
            .map(|t| if differentiable { g.input(t) } else { g.constant(t) })
            .collect()
    }

    /// Flattens per-tensor gradients (in [`Flow::bind`] order) into the flat
    /// parameter layout.
    pub fn flatten(&self, grads: &[Tensor]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout.total);
        for t in grads {
            out.extend_from_slice(t.as_slice());
        }
        debug_assert_eq!(out.len(), self.layout.total);
        out
    }

    fn condition_rows(&self, rows: usize, lambda: f64, q: f64) -> Tensor {
        let e = self.config().embed_condition(lambda, q);
        Tensor::from_fn(rows, 2, |_, c| e[c])
    }

    /// Raw sum-of-sigmoids parameters of layer `l` for inputs `x`.
    fn conditioner(&self, g: &mut Graph, params: &[Var], l: usize, x: Var, cond: Var) -> Var {
        let per_layer = 2 * (self.config().hidden_layers + 1);
        let pv = &params[l * per_layer..(l + 1) * per_layer];
        let mut h = g.concat_cols(&[x, cond]);
        let last = self.masks[l].len() - 1;
        for (i, mask) in self.masks[l].iter().enumerate() {
            let m = g.constant(mask.clone());
            let w = g.mul(pv[2 * i], m);
            let a = g.matmul(h, w);
            let a = g.add(a, pv[2 * i + 1]);
            h = if i < last { g.tanh(a) } else { a };
        }
        h
    }

    /// Records the generator for base samples `z` (`B×D`) and embedded
    /// conditions `cond` (`B×2`).
    pub fn build(&self, g: &mut Graph, params: &[Var], z: Var, cond: Var) -> Generated {
        let cfg = self.config();
        let dim = cfg.dim();
        let s = cfg.mode.spd_dim();
        let tri = tri_len(s);

        // log p_base(z)
        let zz = g.mul(z, z);
        let zz = g.sum_rows(zz);
        let zz = g.scale(zz, -0.5);
        let log_base = g.offset(zz, -0.5 * dim as f64 * LN_2PI);

        let mut x = z;
        let mut logdet: Option<Var> = None;
        let mut acc = |g: &mut Graph, term: Var| {
            logdet = Some(match logdet {
                Some(prev) => g.add(prev, term),
                None => term,
            });
        };
        for l in 0..cfg.n_layers {
            let raw = self.conditioner(g, params, l, x, cond);
            let out = g.sum_of_sigmoids(x, raw, cfg.k, cfg.tail_range);
            let ld = g.select_cols(out, (dim..2 * dim).collect());
            let ld = g.sum_rows(ld);
            acc(g, ld);
            x = g.select_cols(out, (0..dim).collect());
        }

        // positive diagonal
        let diag_cols: Vec<usize> = (0..s).map(diag_index).collect();
        let diag_raw = g.select_cols(x, diag_cols.clone());
        let diag = g.softplus(diag_raw);
        let neg = g.neg(diag_raw);
        let sp = g.softplus(neg);
        let sp = g.sum_rows(sp);
        let log_sig = g.neg(sp);
        acc(g, log_sig);
        let joined = g.concat_cols(&[x, diag]);
        let perm: Vec<usize> = (0..tri)
            .map(|p| match diag_cols.iter().position(|&c| c == p) {
                Some(i) => dim + i,
                None => p,
            })
            .collect();
        let factor = g.select_cols(joined, perm);

        // Cholesky product
        let log_diag = g.log(diag);
        let weights = g.constant(Tensor::column(
            &(0..s).map(|i| (s - i) as f64).collect::<Vec<_>>(),
        ));
        let chol_ld = g.matmul(log_diag, weights);
        let chol_ld = g.offset(chol_ld, s as f64 * std::f64::consts::LN_2);
        acc(g, chol_ld);
        let omega = g.chol_product(factor, s);

        let cross = match cfg.mode {
            FlowMode::Block { t, .. } if t > 0 => Some(g.select_cols(x, (tri..dim).collect())),
            _ => None,
        };

        let logdet = logdet.expect("at least the head contributes");
        let log_q = g.sub(log_base, logdet);
        Generated {
            factor,
            log_diag,
            omega,
            cross,
            log_q,
        }
    }

    /// Pushes base samples (`B×D`) through the flow at one condition.
    pub fn generate_batch(&self, z: &Tensor, lambda: f64, q: f64) -> Result<Vec<PrecisionSample>, FlowError> {
        self.check_condition(lambda, q)?;
        if z.cols() != self.dim() {
            return Err(FlowError::Length {
                got: z.cols(),
                expected: self.dim(),
            });
        }
        if z.rows() == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let cv = g.constant(self.condition_rows(z.rows(), lambda, q));
        let out = self.build(&mut g, &pv, zv, cv);
        g.status()?;

        let s = self.config().mode.spd_dim();
        let (_, t) = self.config().mode.cross_dims();
        let omega = g.value(out.omega);
        let log_q = g.value(out.log_q);
        Ok((0..z.rows())
            .map(|r| PrecisionSample {
                omega: unpack_symmetric(omega.row(r), s),
                cross: out
                    .cross
                    .map(|c| DMatrix::from_row_slice(s, t, g.value(c).row(r))),
                log_q: log_q.get(r, 0),
                z: z.row(r).to_vec(),
            })
            .collect())
    }

    pub fn generate(&self, z: &[f64], lambda: f64, q: f64) -> Result<PrecisionSample, FlowError> {
        let z = Tensor::row_vector(z);
        Ok(self.generate_batch(&z, lambda, q)?.remove(0))
    }

    /// Draws `n` base samples and generates them.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        lambda: f64,
        q: f64,
        rng: &mut R,
    ) -> Result<Vec<PrecisionSample>, FlowError> {
        let z = standard_normal(n, self.dim(), rng);
        self.generate_batch(&z, lambda, q)
    }

    /// One masked layer applied to a single vector: `(z', Σ log φ')`.
    pub fn transform_layer(&self, l: usize, z: &[f64], lambda: f64, q: f64) -> (Vec<f64>, f64) {
        let dim = self.dim();
        let cfg = self.config();
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let zv = g.constant(Tensor::row_vector(z));
        let cv = g.constant(self.condition_rows(1, lambda, q));
        let raw = self.conditioner(&mut g, &pv, l, zv, cv);
        let out = g.sum_of_sigmoids(zv, raw, cfg.k, cfg.tail_range);
        let row = g.value(out).row(0);
        (row[..dim].to_vec(), row[dim..].iter().sum())
    }

    /// Raw conditioner output of layer `l` for a single vector.
    fn layer_raw(&self, l: usize, z: &[f64], cond: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let pv = self.bind(&mut g, false);
        let zv = g.constant(Tensor::row_vector(z));
        let cv = g.constant(cond.clone());
        let raw = self.conditioner(&mut g, &pv, l, zv, cv);
        g.value(raw).row(0).to_vec()
    }

    /// Recovers the base sample of `sample` by inverting the head and then
    /// each layer, one coordinate at a time in autoregressive order.
    pub fn invert(&self, sample: &PrecisionSample, lambda: f64, q: f64, tol: f64) -> Result<Vec<f64>, FlowError> {
        let cfg = self.config();
        let dim = cfg.dim();
        let p = crate::diffcore::kernels::sos_param_count(cfg.k);
        let factor = head::cholesky_factor(&sample.omega)?;
        let mut y = pack_lower(&head::positive_diagonal_inverse(&factor));
        if let Some(c) = &sample.cross {
            for i in 0..c.nrows() {
                for j in 0..c.ncols() {
                    y.push(c[(i, j)]);
                }
            }
        }
        if y.len() != dim {
            return Err(FlowError::Length {
                got: y.len(),
                expected: dim,
            });
        }
        let cond = self.condition_rows(1, lambda, q);
        for l in (0..cfg.n_layers).rev() {
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by_key(|&i| order_position(l, i, dim));
            let mut z = vec![0.0; dim];
            for &i in &order {
                let raw = self.layer_raw(l, &z, &cond);
                let params = SosParams::from_raw(&raw[i * p..(i + 1) * p], cfg.k, cfg.tail_range);
                z[i] = sos::sos_inverse(y[i], &params, tol)?;
            }
            y = z;
        }
        Ok(y)
    }

    /// Flow-space map `z ↦ packed(Ω)` used for Jacobian checks, with the
    /// accumulated log-determinant.
    pub fn composite(&self, z: &[f64], lambda: f64, q: f64) -> Result<(Vec<f64>, f64), FlowError> {
        let s = self.generate(z, lambda, q)?;
        let log_base = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI;
        Ok((s.packed(), log_base - s.log_q))
    }
}

/// `n×dim` matrix of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(n, dim, |_, _| rng.sample(StandardNormal))
}

/// Base sample that maps to `target` through the head alone (used when all
/// layers are the identity).
pub fn head_preimage(target: &DMatrix<f64>) -> Result<Vec<f64>, FlowError> {
    let l = head::cholesky_factor(target)?;
    let mut raw = l.clone();
    for i in 0..l.nrows() {
        raw[(i, i)] = softplus_inv(l[(i, i)]);
    }
    Ok(pack_lower(&raw))
}
