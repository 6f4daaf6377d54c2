//! Knowledge-graph fused conversational recommendation.
//!
//! The crate is organized bottom-up: [`numerics`] is a small reverse-mode
//! autodiff substrate, [`kg`] holds the triple store and relational graph
//! convolution, [`dialogue`] the corpus model and the frozen text encoder,
//! [`fformer`] the query-bank fusion transformer, [`objectives`] the three
//! alignment losses and their curriculum, [`prompt`] the prefix heads over a
//! frozen decoder, and [`pipeline`] ties everything into training,
//! evaluation and experiment drivers.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{Result, StepError};
pub use numerics::{check_gradients, Activation, GradCheckReport, Tape, Tensor, Var};
pub mod dialogue;
pub mod kg;
pub mod fformer;
pub mod objectives;
pub mod prompt;
pub mod pipeline;
