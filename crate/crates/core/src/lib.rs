//! Hybrid mechanistic/data-driven modeling of controlled dynamical systems.
//!
//! The transition operator of an intervened ODE system is decomposed into a
//! parametric mechanistic core plus nonparametric correction networks, split
//! into intervention-dependent and intervention-independent parts. The crate
//! ships two case studies (a torque-driven pendulum and propofol
//! pharmacokinetics), the two-stage training procedure (encoder pretraining,
//! then frozen-encoder correction training), and the out-of-distribution
//! evaluation harness around them.

pub mod adam;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hybrid;
pub mod nn;
pub mod mechanistic;
pub mod odeint;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod textio;
pub mod training;

pub use error::{Error, Result};

/// Common imports for modules written against the evaluation engine.
pub(crate) mod engine_prelude {
    pub use crate::tape::{Engine, EvalEngine, Tape, Var};
    pub use crate::tensor::Tensor;
}
