//! Monte-Carlo reverse-KL training with geometric annealing.
//!
//! One epoch is one optimizer step on `conditions_per_batch` conditions
//! with `samples` base draws each. Every condition is an independent chunk
//! with its own tape and RNG stream; chunk results are reduced in index
//! order so traces are bit-identical for any worker count.

mod adam;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState, NonFiniteGradient};
pub use schedule::AnnealingSchedule;

use crate::diffcore::{DiffError, Graph, Tensor};
use crate::flow::{standard_normal, Flow, FlowError, FlowParameters, Range};
use crate::parallel::map_indexed;
use crate::target::{log_posterior_graph, GGMTarget};
use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Loss level treated as divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Consecutive divergent or non-finite epochs before aborting.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at λ={lambda}, q={q}: {source}")]
    NonFinite { lambda: f64, q: f64, source: DiffError },
    #[error("training diverged at epoch {epoch} (loss {loss:e}, temperature {temperature})")]
    Divergence { epoch: usize, loss: f64, temperature: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_range: Range,
    pub q_range: Range,
    /// Monte-Carlo samples per condition.
    pub samples: usize,
    pub conditions_per_batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub schedule: AnnealingSchedule,
    /// Progress log cadence in epochs (0 silences progress lines).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(lambda_range: Range, q_range: Range) -> Self {
        Self {
            lambda_range,
            q_range,
            samples: 64,
            conditions_per_batch: 8,
            adam: AdamConfig::default(),
            seed: 0,
            schedule: AnnealingSchedule::default(),
            log_every: 500,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let (l, q) = (self.lambda_range, self.q_range);
        if !(l.min > 0.0 && l.min <= l.max && q.min > 0.0 && q.min <= q.max) {
            return bad("λ and q ranges must be positive with min <= max".into());
        }
        if self.samples == 0 || self.conditions_per_batch == 0 {
            return bad("samples and conditions per batch must be at least 1".into());
        }
        if !(self.adam.step_size > 0.0) {
            return bad("step size must be positive".into());
        }
        self.schedule.validate().map_err(TrainError::Config)
    }
}

/// λ log-uniform on its range, q uniform on its range.
pub fn sample_conditions<R: Rng + ?Sized>(lambda: Range, q: Range, count: usize, rng: &mut R) -> Vec<(f64, f64)> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let lam = if lambda.max > lambda.min {
                (lambda.min.ln() + u * (lambda.max.ln() - lambda.min.ln())).exp()
            } else {
                lambda.min
            };
            let qq = if q.max > q.min { q.min + v * (q.max - q.min) } else { q.min };
            (lam, qq)
        })
        .collect()
}

/// Seed of an independent stream derived from `(seed, a, b)`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Conditions plus their fixed base draws.
#[derive(Debug, Clone)]
pub struct KlBatch {
    pub conditions: Vec<(f64, f64)>,
    pub base: Vec<Tensor>,
}

impl KlBatch {
    pub fn draw(dim: usize, conditions: Vec<(f64, f64)>, samples: usize, seed: u64, epoch: u64) -> Self {
        let base = (0..conditions.len())
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, c as u64));
                standard_normal(samples, dim, &mut rng)
            })
            .collect();
        Self { conditions, base }
    }
}

/// Mean of `log q − log p / T` over one condition's samples, with the
/// gradient in flat parameter layout when requested.
pub fn kl_chunk(
    flow: &Flow,
    z: &Tensor,
    lambda: f64,
    q: f64,
    target: &GGMTarget,
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>), TrainError> {
    let mut g = Graph::new();
    let pv = flow.bind(&mut g, want_grad);
    let zv = g.constant(z.clone());
    let e = flow.config().embed_condition(lambda, q);
    let cv = g.constant(Tensor::from_fn(z.rows(), 2, |_, c| e[c]));
    let gen = flow.build(&mut g, &pv, zv, cv);
    let logp = log_posterior_graph(&mut g, &gen, target, lambda, q);
    let tempered = g.scale(logp, -1.0 / temperature);
    let per_row = g.add(gen.log_q, tempered);
    let loss = g.mean_all(per_row);
    let nonfinite = |source| TrainError::NonFinite { lambda, q, source };
    g.status().map_err(nonfinite)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(nonfinite(DiffError::Domain { op: "loss", value }));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let grads = g.backward(loss).map_err(nonfinite)?;
    let per_tensor: Vec<Tensor> = pv.iter().map(|v| grads.get(*v)).collect();
    Ok((value, Some(flow.flatten(&per_tensor))))
}

/// Monte-Carlo reverse-KL loss over a batch and its gradient, averaged over
/// conditions in index order.
pub fn kl_loss(flow: &Flow, batch: &KlBatch, target: &GGMTarget, temperature: f64) -> Result<(f64, Vec<f64>), TrainError> {
    let results = map_indexed(batch.conditions.len(), |c| {
        let (lam, q) = batch.conditions[c];
        kl_chunk(flow, &batch.base[c], lam, q, target, temperature, true)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; flow.num_params()];
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g.expect("gradient requested")) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.conditions.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Monte-Carlo estimate of the loss at one condition with its standard
/// error, evaluated in blocks of at most 1024 samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub value: f64,
    pub std_err: f64,
}

pub fn estimate_loss(
    flow: &Flow,
    target: &GGMTarget,
    lambda: f64,
    q: f64,
    temperature: f64,
    samples: usize,
    seed: u64,
) -> Result<LossEstimate, TrainError> {
    assert!(samples >= 2, "need at least two samples for a standard error");
    flow.check_condition(lambda, q)?;
    const BLOCK: usize = 1024;
    let blocks = samples.div_ceil(BLOCK);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::with_capacity(samples);
    for b in 0..blocks {
        let m = BLOCK.min(samples - b * BLOCK);
        let z = standard_normal(m, flow.dim(), &mut rng);
        let mut g = Graph::new();
        let pv = flow.bind(&mut g, false);
        let zv = g.constant(z);
        let e = flow.config().embed_condition(lambda, q);
        let cv = g.constant(Tensor::from_fn(m, 2, |_, c| e[c]));
        let gen = flow.build(&mut g, &pv, zv, cv);
        let logp = log_posterior_graph(&mut g, &gen, target, lambda, q);
        g.status().map_err(|source| TrainError::NonFinite { lambda, q, source })?;
        let (lq, lp) = (g.value(gen.log_q), g.value(logp));
        terms.extend((0..m).map(|r| lq.get(r, 0) - lp.get(r, 0) / temperature));
    }
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(LossEstimate {
        value: mean,
        std_err: (var / n).sqrt(),
    })
}

/// `−loss` at `T = 1`: approximate `log p(S | λ, q)` (biased low by the
/// residual KL).
pub fn estimate_marginal_loglik(
    flow: &Flow,
    target: &GGMTarget,
    lambda: f64,
    q: f64,
    samples: usize,
    seed: u64,
) -> Result<LossEstimate, TrainError> {
    let e = estimate_loss(flow, target, lambda, q, 1.0, samples, seed)?;
    Ok(LossEstimate {
        value: -e.value,
        std_err: e.std_err,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub temperature: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: FlowParameters,
    pub temperature: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters after the first stage with `T ≤ 1`.
    pub bayes: Option<Snapshot>,
    /// Parameters at the end of the final (`Tn`) stage.
    pub map: Snapshot,
    pub trace: Vec<TraceRow>,
    pub skipped_steps: usize,
}

/// Runs the annealed optimization starting from `params`.
pub fn train(params: FlowParameters, target: &GGMTarget, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let mut flow = Flow::new(params)?;
    {
        let fc = flow.config();
        let inside = |r: Range, outer: Range| outer.contains(r.min) && outer.contains(r.max);
        if !inside(cfg.lambda_range, fc.lambda_range) || !inside(cfg.q_range, fc.q_range) {
            return Err(TrainError::Config("training ranges exceed the flow's conditioning ranges".into()));
        }
    }
    let sched = cfg.schedule;
    let bayes_stage = sched.bayes_stage();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = flow.params().values.clone();
    let mut state = AdamState::new(theta.len());
    let mut trace = Vec::with_capacity(sched.epochs_total);
    let mut bayes = None;
    let mut bad_run = 0usize;
    let mut skipped = 0usize;

    for epoch in 0..sched.epochs_total {
        let stage = sched.stage_of(epoch);
        let temperature = sched.temperature(stage);
        let conditions = sample_conditions(cfg.lambda_range, cfg.q_range, cfg.conditions_per_batch, &mut rng);
        let batch = KlBatch::draw(flow.dim(), conditions, cfg.samples, cfg.seed, epoch as u64);

        let loss = match kl_loss(&flow, &batch, target, temperature) {
            Ok((loss, grad)) => match adam_step(&mut theta, &grad, &mut state, &cfg.adam) {
                Ok(()) => {
                    flow.set_values(&theta);
                    loss
                }
                Err(e) => {
                    warn!("epoch {epoch}: {e}; update skipped");
                    skipped += 1;
                    f64::NAN
                }
            },
            Err(TrainError::NonFinite { lambda, q, source }) => {
                warn!("epoch {epoch}: non-finite loss at λ={lambda:.4}, q={q:.3} ({source}); update skipped");
                skipped += 1;
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        trace.push(TraceRow {
            epoch,
            temperature,
            loss,
        });

        if !(loss <= DIVERGENCE_LOSS) {
            bad_run += 1;
            if bad_run >= DIVERGENCE_PATIENCE {
                return Err(TrainError::Divergence {
                    epoch,
                    loss,
                    temperature,
                });
            }
        } else {
            bad_run = 0;
        }

        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch + 1 == sched.epochs_total) {
            info!("epoch {epoch:>6}  T={temperature:<9.4}  loss={loss:.5}");
        } else {
            debug!("epoch {epoch} T={temperature} loss={loss}");
        }

        if Some(stage) == bayes_stage && epoch == sched.stage_end(stage) {
            bayes = Some(Snapshot {
                params: flow.params().clone(),
                temperature,
                epoch: epoch + 1,
            });
        }
    }

    Ok(TrainOutput {
        bayes,
        map: Snapshot {
            params: flow.params().clone(),
            temperature: sched.tn,
            epoch: sched.epochs_total,
        },
        trace,
        skipped_steps: skipped,
    })
}

/// Writes `epoch,temperature,loss` rows.
pub fn write_trace<W: Write>(trace: &[TraceRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "temperature", "loss"])?;
    for r in trace {
        wr.write_record([r.epoch.to_string(), format!("{:e}", r.temperature), format!("{:e}", r.loss)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Median of a slice (NaN entries ignored).
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
