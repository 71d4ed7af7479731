//! Minimal feed-forward network engine.
//!
//! Networks are flat layer lists (dense, ReLU, BatchNorm, dropout, and a
//! final softmax or sigmoid). Everything runs in `f64`; forward passes record
//! a [`ForwardCache`] that [`Mlp::backward`] consumes to produce exact
//! gradients for every trainable tensor.

mod adam;
mod arch;
pub mod checkpoint;
mod layer;
mod loss;
mod model;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use arch::{init_model, Arch};
pub use layer::{BatchNorm, Dense, Layer};
pub use loss::{binary_cross_entropy, cross_entropy, cross_entropy_logit_grad, PROB_FLOOR};
pub use model::{Backward, BackwardFrom, ForwardCache, Gradients, Mlp, Mode, ReluRule};

/// Inputs and integer class labels for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: ndarray::Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: ndarray::Array2<f64>, labels: Vec<usize>) -> crate::Result<Self> {
        if inputs.nrows() == 0 {
            return Err(crate::Error::Empty("batch has no rows".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(crate::Error::Dimension {
                context: "batch labels",
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
