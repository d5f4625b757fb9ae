//! Dense tensors, reverse-mode gradients, SGD and checkpoints.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

use rayon::prelude::*;
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use graph::{log_sigmoid, sigmoid, Activation, Graph, Var};
pub use params::{check_layout, init_layout, sgd_step, Gradients, Init, Layout, ParamStore, EMBED_SCALE};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Contract(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint while reading {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mean loss and mean gradient over `examples`.
///
/// Examples are evaluated in parallel in chunks of the current rayon pool
/// size, but gradients are summed strictly in example order, so the result
/// is bitwise independent of the thread count.
pub fn batch_gradients<T, F>(
    store: &ParamStore,
    examples: &[T],
    loss_fn: F,
) -> Result<(f64, Gradients), NumericError>
where
    T: Sync,
    F: Fn(&mut Graph<'_>, &T) -> Result<Var, NumericError> + Sync,
{
    if examples.is_empty() {
        return Err(NumericError::Contract("empty batch".into()));
    }
    let chunk = rayon::current_num_threads().max(1);
    let mut total = Gradients::zeros_like(store);
    let mut loss_sum = 0.0;
    for group in examples.chunks(chunk) {
        let results: Vec<Result<(f64, Gradients), NumericError>> = group
            .par_iter()
            .map(|ex| {
                let mut g = Graph::new(store);
                let loss = loss_fn(&mut g, ex)?;
                let grads = g.gradients(loss)?;
                Ok((g.scalar(loss), grads))
            })
            .collect();
        for r in results {
            let (l, grads) = r?;
            loss_sum += l;
            total.add_assign(&grads)?;
        }
    }
    let inv = 1.0 / examples.len() as f64;
    total.scale(inv);
    Ok((loss_sum * inv, total))
}

/// Mean loss over `examples` without gradients.
pub fn batch_loss<T, F>(store: &ParamStore, examples: &[T], loss_fn: F) -> Result<f64, NumericError>
where
    T: Sync,
    F: Fn(&mut Graph<'_>, &T) -> Result<Var, NumericError> + Sync,
{
    if examples.is_empty() {
        return Err(NumericError::Contract("empty batch".into()));
    }
    let losses: Vec<Result<f64, NumericError>> = examples
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(store);
            let loss = loss_fn(&mut g, ex)?;
            Ok(g.scalar(loss))
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / examples.len() as f64)
}
