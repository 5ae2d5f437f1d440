//! Trainable weights and the binary checkpoint format.
//!
//! Checkpoint layout, all fields little-endian:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 8    | magic `CMFLOWCK`                        |
//! | 8      | 4    | u32 format version (1)                  |
//! | 12     | 4    | u32 mode (0 full, 1 block)              |
//! | 16     | 4    | u32 `d` (full) or `s` (block)           |
//! | 20     | 4    | u32 `t` (0 in full mode)                |
//! | 24     | 4    | u32 layer count                         |
//! | 28     | 4    | u32 sigmoids per dimension `k`          |
//! | 32     | 4    | u32 hidden width                        |
//! | 36     | 4    | u32 hidden layers                       |
//! | 40     | 8    | f64 tail range constant                 |
//! | 48     | 32   | f64 λ min, λ max, q min, q max          |
//! | 80     | 8    | f64 temperature at save time            |
//! | 88     | 8    | u64 epoch at save time                  |
//! | 96     | 8    | u64 parameter count `N`                 |
//! | 104    | 8·N  | f64 parameters in layout order          |

use super::config::{FlowConfig, FlowMode, Range};
use super::made::ParamLayout;
use crate::diffcore::kernels::{sos_param_count, softplus_inv};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMFLOWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 104;

/// Standard deviation of the conditioner output weights at initialization.
const OUTPUT_INIT_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParameters {
    pub config: FlowConfig,
    pub values: Vec<f64>,
}

/// Raw per-dimension parameters of a near-identity sum-of-sigmoids map on
/// `[-s, s]`: evenly spaced ramps whose sum tracks the line `y = z`.
pub fn identity_raw(k: usize, range: f64) -> Vec<f64> {
    let spacing = 2.0 * range / k as f64;
    let slope = 1.5 / spacing;
    let mut raw = vec![0.0; sos_param_count(k)];
    for j in 0..k {
        let center = -range + (j as f64 + 0.5) * spacing;
        raw[k + j] = softplus_inv(slope);
        raw[2 * k + j] = -slope * center;
    }
    raw[3 * k] = softplus_inv(2.0 * range);
    raw[3 * k + 1] = 0.0;
    raw[3 * k + 2] = -range;
    raw
}

impl FlowParameters {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    /// Random hidden weights (variance `1/fan_in`), small output weights,
    /// and output biases that make every layer start near the identity.
    pub fn init<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Self {
        let layout = ParamLayout::new(&config);
        let mut values = vec![0.0; layout.total];
        let dim = config.dim();
        let bias = identity_raw(config.k, config.tail_range);
        for layer in &layout.layers {
            let last = layer.weights.len() - 1;
            for (i, w) in layer.weights.iter().enumerate() {
                let std = if i == last {
                    OUTPUT_INIT_STD
                } else {
                    (1.0 / w.rows as f64).sqrt()
                };
                for v in &mut values[w.range()] {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let out = layer.biases[last];
            for i in 0..dim {
                let start = out.offset + i * bias.len();
                values[start..start + bias.len()].copy_from_slice(&bias);
            }
        }
        Self { config, values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, temperature: f64, epoch: u64) -> io::Result<()> {
        let c = &self.config;
        let (mode, a, b) = match c.mode {
            FlowMode::Full { d } => (0u32, d, 0),
            FlowMode::Block { s, t } => (1u32, s, t),
        };
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for x in [
            CHECKPOINT_VERSION,
            mode,
            a as u32,
            b as u32,
            c.n_layers as u32,
            c.k as u32,
            c.hidden_width as u32,
            c.hidden_layers as u32,
        ] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in [
            c.tail_range,
            c.lambda_range.min,
            c.lambda_range.max,
            c.q_range.min,
            c.q_range.max,
            temperature,
        ] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&epoch.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Returns the parameters with the saved temperature and epoch.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, f64, u64), CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let (a, b) = (u32_at(16) as usize, u32_at(20) as usize);
        let mode = match u32_at(12) {
            0 => FlowMode::Full { d: a },
            1 => FlowMode::Block { s: a, t: b },
            m => return Err(CheckpointError::Corrupt(format!("unknown mode {m}"))),
        };
        let config = FlowConfig {
            mode,
            n_layers: u32_at(24) as usize,
            k: u32_at(28) as usize,
            hidden_width: u32_at(32) as usize,
            hidden_layers: u32_at(36) as usize,
            tail_range: f64_at(40),
            lambda_range: Range::new(f64_at(48), f64_at(56)),
            q_range: Range::new(f64_at(64), f64_at(72)),
        };
        config
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let temperature = f64_at(80);
        let epoch = u64_at(88);
        let n = u64_at(96) as usize;
        if n != ParamLayout::new(&config).total {
            return Err(CheckpointError::Corrupt(format!(
                "parameter count {n} does not match the configuration"
            )));
        }
        if bytes.len() != HEADER_LEN + 8 * n {
            return Err(CheckpointError::Corrupt("length does not match parameter count".into()));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { config, values }, temperature, epoch))
    }

    pub fn save(&self, path: &Path, temperature: f64, epoch: u64) -> io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(file);
        self.write_checkpoint(&mut w, temperature, epoch)?;
        w.flush()
    }

    pub fn load(path: &Path) -> Result<(Self, f64, u64), CheckpointError> {
        Self::read_checkpoint(io::BufReader::new(std::fs::File::open(path)?))
    }
}
