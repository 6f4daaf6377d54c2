//! Dense tensors, the reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, CoordFailure, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{max_last_axis, Tape, Var};
pub use tensor::Tensor;

/// Guard used by every L2 normalization in the model.
pub const NORM_EPS: f64 = 1e-12;

/// Elementwise nonlinearity selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}
