//! Dense float64 tensors, a reverse-mode tape, the attention block and a
//! finite-difference gradient oracle.

mod attention;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use attention::{scaled_dot_product, AttentionParams, IdentityMixer, SeqMixer};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckEntry, GradCheckReport, REL_FLOOR};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{accumulate, gaussian, hex, uniform, Param, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Mean over the sequence axis: `l x d -> 1 x d`.
pub fn pool_sequence(g: &mut Graph, features: Var) -> Result<Var> {
    if g.shape(features).0 == 0 {
        return Err(Error::EmptyInput("pool_sequence"));
    }
    g.mean_rows(features)
}
