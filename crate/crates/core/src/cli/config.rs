//! TOML run configuration. Unknown keys are rejected, and every default is
//! written back out when the resolved configuration is echoed.

use crate::flow::{FlowConfig, FlowMode, Range};
use crate::train::{AdamConfig, AnnealingSchedule, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; data, training and sampling use derived streams.
    pub seed: u64,
    pub data: DataSection,
    pub flow: FlowSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Observations CSV with a header row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Ground-truth `i,j,value` file for `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// Query columns; required in block mode.
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Full,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub mode: ModeName,
    pub n_layers: usize,
    pub k: usize,
    pub tail_range: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        let f = FlowConfig::full(1, Range::new(1.0, 1.0), Range::new(1.0, 1.0));
        Self {
            mode: ModeName::Full,
            n_layers: f.n_layers,
            k: f.k,
            tail_range: f.tail_range,
            hidden_width: f.hidden_width,
            hidden_layers: f.hidden_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Monte-Carlo samples per condition.
    pub samples: usize,
    pub conditions_per_batch: usize,
    pub log_every: usize,
    pub adam: AdamConfig,
    pub schedule: AnnealingSchedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(Range::new(0.1, 10.0), Range::new(0.25, 1.0));
        Self {
            lambda_min: t.lambda_range.min,
            lambda_max: t.lambda_range.max,
            q_min: t.q_range.min,
            q_max: t.q_range.max,
            samples: t.samples,
            conditions_per_batch: t.conditions_per_batch,
            log_every: t.log_every,
            adam: t.adam,
            schedule: t.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub lambda: f64,
    pub q: f64,
    /// Posterior draws for intervals and edge calls.
    pub samples: usize,
    /// Credible level of the intervals.
    pub level: f64,
    /// Low-temperature draws per path point.
    pub n_map: usize,
    /// Path and evidence grid density over the trained λ range.
    pub points_per_decade: usize,
    /// Fixed grid size; overrides `points_per_decade` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Draws per grid point of the evidence curve.
    pub evidence_samples: usize,
    /// Points per axis of the grid oracle.
    pub oracle_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            q: 1.0,
            samples: 1000,
            level: 0.9,
            n_map: crate::eval::DEFAULT_N_MAP,
            points_per_decade: crate::eval::POINTS_PER_DECADE,
            grid_points: None,
            evidence_samples: 2048,
            oracle_points: 121,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Named random streams split from the root seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Train = 3,
    Sample = 4,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    pub fn stream(&self, s: Stream) -> u64 {
        crate::train::stream_seed(self.seed, s as u64, 0)
    }

    pub fn lambda_range(&self) -> Range {
        Range::new(self.train.lambda_min, self.train.lambda_max)
    }

    pub fn q_range(&self) -> Range {
        Range::new(self.train.q_min, self.train.q_max)
    }

    /// Flow architecture for a dataset with `d` columns.
    pub fn flow_config(&self, d: usize) -> Result<FlowConfig, String> {
        let f = &self.flow;
        let mode = match f.mode {
            ModeName::Full => FlowMode::Full { d },
            ModeName::Block => {
                let s = self.data.queries.len();
                if s == 0 || s > d {
                    return Err("block mode needs between 1 and d query columns".into());
                }
                FlowMode::Block { s, t: d - s }
            }
        };
        let cfg = FlowConfig {
            mode,
            n_layers: f.n_layers,
            k: f.k,
            tail_range: f.tail_range,
            hidden_width: f.hidden_width,
            hidden_layers: f.hidden_layers,
            lambda_range: self.lambda_range(),
            q_range: self.q_range(),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let t = &self.train;
        let cfg = TrainConfig {
            lambda_range: self.lambda_range(),
            q_range: self.q_range(),
            samples: t.samples,
            conditions_per_batch: t.conditions_per_batch,
            adam: t.adam,
            seed: self.stream(Stream::Train),
            schedule: t.schedule,
            log_every: t.log_every,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// λ grid for paths and evidence curves.
    pub fn lambda_grid(&self) -> Vec<f64> {
        let r = self.lambda_range();
        match self.eval.grid_points {
            Some(n) => crate::eval::log_grid(r.min, r.max, n),
            None => crate::eval::decade_grid(r.min, r.max, self.eval.points_per_decade),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[train]\nepochs = 3").is_err());
        assert!(RunConfig::parse("[train.schedule]\nt0 = 2.0\nbogus = 1").is_err());
    }

    #[test]
    fn echo_round_trips_with_defaults_materialized() {
        let c = RunConfig::parse("seed = 9\n[train.schedule]\nepochs_total = 50\nn_steps = 4").unwrap();
        let text = c.to_toml();
        assert!(text.contains("hidden_width = 64"));
        assert!(text.contains("t0 = 5.0"));
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn block_mode_needs_queries() {
        let mut c = RunConfig::default();
        c.flow.mode = ModeName::Block;
        assert!(c.flow_config(4).is_err());
        c.data.queries = vec!["a".into()];
        assert_eq!(c.flow_config(4).unwrap().mode, FlowMode::Block { s: 1, t: 3 });
    }

    #[test]
    fn streams_differ() {
        let c = RunConfig::default();
        assert_ne!(c.stream(Stream::Data), c.stream(Stream::Train));
        assert_ne!(c.stream(Stream::Init), c.stream(Stream::Sample));
    }
}
