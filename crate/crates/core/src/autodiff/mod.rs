//! Minimal reverse-mode differentiation: a tape [`Graph`] over [`Tensor`]s,
//! a named [`ParamStore`], the [`Adam`] optimizer, checkpoint persistence and
//! a finite-difference [`grad_check`].

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod suite;
mod tensor;

pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, CheckpointHeader, ParamRecord, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use suite::{op_suite, OpCheck};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
