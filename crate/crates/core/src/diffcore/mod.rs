//! Reverse-mode automatic differentiation.
//!
//! The tape records batched dense tensors so a whole Monte-Carlo batch of
//! flow evaluations runs through a handful of matrix products. See
//! [`Graph`] for the primitive set.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{DiffError, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Replays `graph` on `inputs` and returns the gradient of its first marked
/// output (which must be scalar) with respect to every input.
pub fn backward_grad(graph: &mut Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>, DiffError> {
    graph.forward_eval(inputs)?;
    let out = *graph
        .outputs()
        .first()
        .expect("backward_grad needs a marked output");
    let grads = graph.backward(out)?;
    Ok(graph.inputs().iter().map(|v| grads.get(*v)).collect())
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over the
/// given coordinates (all coordinates when `coords` is `None`).
///
/// `f` returns the value and the analytic gradient at a point.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], eps: f64, coords: Option<&[usize]>) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, grad) = f(point);
    assert_eq!(grad.len(), point.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let (fp, _) = f(&x);
        x[i] = orig - eps;
        let (fm, _) = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
