//! Masked autoregressive conditioner (one per flow layer).
//!
//! Inputs are the layer's flow coordinates followed by the two condition
//! features. Even layers use the natural packed order, odd layers the
//! reversed one. Output columns `i·P .. (i+1)·P` hold the raw sum-of-sigmoids
//! parameters of dimension `i`, which see only coordinates strictly earlier
//! in the layer's order.

use super::config::FlowConfig;
use crate::diffcore::kernels::sos_param_count;
use crate::diffcore::Tensor;

/// Number of condition features fed to every conditioner.
pub const COND_FEATURES: usize = 2;

/// Shape of one parameter tensor and its offset in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSlot {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight/bias pairs of one conditioner, input side first.
#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub weights: Vec<TensorSlot>,
    pub biases: Vec<TensorSlot>,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &FlowConfig) -> Self {
        let dim = cfg.dim();
        let p = sos_param_count(cfg.k);
        let h = cfg.hidden_width;
        let mut widths = vec![dim + COND_FEATURES];
        widths.extend(std::iter::repeat_n(h, cfg.hidden_layers));
        widths.push(dim * p);

        let mut offset = 0;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for pair in widths.windows(2) {
                let w = TensorSlot {
                    rows: pair[0],
                    cols: pair[1],
                    offset,
                };
                offset += w.len();
                let b = TensorSlot {
                    rows: 1,
                    cols: pair[1],
                    offset,
                };
                offset += b.len();
                weights.push(w);
                biases.push(b);
            }
            layers.push(LayerLayout { weights, biases });
        }
        Self {
            layers,
            total: offset,
        }
    }
}

/// Position (1-based) of dimension `i` in the autoregressive order of
/// `layer`.
pub fn order_position(layer: usize, i: usize, dim: usize) -> usize {
    if layer.is_multiple_of(2) {
        i + 1
    } else {
        dim - i
    }
}

fn hidden_degree(h: usize, width: usize, dim: usize) -> usize {
    if width >= dim {
        h % dim
    } else {
        h * dim / width
    }
}

/// Binary masks (as tensors) matching each weight slot of a layer.
pub fn layer_masks(cfg: &FlowConfig, layer: usize) -> Vec<Tensor> {
    let dim = cfg.dim();
    let p = sos_param_count(cfg.k);
    let h = cfg.hidden_width;
    let hidden: Vec<usize> = (0..h).map(|u| hidden_degree(u, h, dim)).collect();
    let input_degree = |r: usize| {
        if r < dim {
            order_position(layer, r, dim)
        } else {
            0
        }
    };

    let mut masks = Vec::with_capacity(cfg.hidden_layers + 1);
    masks.push(Tensor::from_fn(dim + COND_FEATURES, h, |r, c| {
        (hidden[c] >= input_degree(r)) as u8 as f64
    }));
    for _ in 1..cfg.hidden_layers {
        masks.push(Tensor::from_fn(h, h, |r, c| (hidden[c] >= hidden[r]) as u8 as f64));
    }
    masks.push(Tensor::from_fn(h, dim * p, |r, c| {
        (order_position(layer, c / p, dim) > hidden[r]) as u8 as f64
    }));
    masks
}
