//! Building blocks for the trainable modules: named parameter storage,
//! linear / conv / attention layers on the tape, Adam, and finite-difference
//! gradient checking.

pub mod gradcheck;
mod layers;
mod optim;
mod params;

pub use layers::{
    sinusoidal_positions, sinusoidal_time_embedding, Activation, Conv1d, Embedding, EncoderConfig,
    LayerNorm, Linear, RowMlp, TransformerEncoder,
};
pub use optim::Adam;
pub use params::{ParamId, ParamSet};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Pushes every parameter onto a fresh tape, in allocation order, so that
/// `vars[id.index()]` is the leaf for `ParamId` `id`.
pub fn bind_params<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect()
}
