//! Differentiable numeric engine: dense tensors, a recorded computation graph
//! with reverse-mode and higher-order gradients, named parameter stores, and
//! the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use params::{flatten_values, flatten_vars, ParamStore, ParamVars};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("numeric overflow: primitive `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Value and gradient of a scalar function of `params`, in flattening order.
pub fn gradient<F>(params: &ParamStore, loss_fn: F) -> Result<(f64, Vec<f64>), DiffError>
where
    F: for<'g> FnOnce(&'g Graph, &ParamVars<'g>) -> Var<'g>,
{
    let graph = Graph::new();
    let vars = params.bind(&graph);
    let loss = loss_fn(&graph, &vars);
    let grads = graph.grad(loss, &vars.all(), false);
    graph.check_finite()?;
    Ok((loss.item(), flatten_values(&grads)))
}

/// Hessian-vector product `H(params) · direction` of a scalar function.
pub fn grad_of_grad<F>(
    params: &ParamStore,
    loss_fn: F,
    direction: &[f64],
) -> Result<Vec<f64>, DiffError>
where
    F: for<'g> FnOnce(&'g Graph, &ParamVars<'g>) -> Var<'g>,
{
    let n = params.num_values();
    if direction.len() != n {
        return Err(DiffError::Dimension {
            expected: n,
            got: direction.len(),
        });
    }
    let graph = Graph::new();
    let vars = params.bind(&graph);
    let all = vars.all();
    let loss = loss_fn(&graph, &vars);
    let grads = graph.grad(loss, &all, true);
    let flat = flatten_vars(&graph, &grads);
    let d = graph.constant(Tensor::vector(direction.to_vec()));
    let hvp = graph.grad(flat.dot(d), &all, false);
    graph.check_finite()?;
    Ok(flatten_values(&hvp))
}
