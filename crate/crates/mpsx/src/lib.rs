//! Canonical forms for uniform matrix product states with a boundary.
//!
//! The crate analyzes the span and algebra structure of a finite set of
//! complex matrices, decides stability under blocking, checks translational
//! invariance of boundary matrices, decomposes tensors into lower/upper
//! canonical parts, converts regular-language state families to MPS form and
//! back, and decides exact equivalence of state families through weighted
//! finite automata.

pub mod block_structure;
pub mod canonical_basis;
pub mod config;
pub mod equivalence;
pub mod error;
pub mod io;
pub mod matrix_sets;
pub mod mpsx_states;
pub mod numerics;
pub mod report;
pub mod rls;
pub mod stability;
#[cfg(test)]
pub(crate) mod test_util;

pub use config::Config;
pub use error::{MpsxError, Result};
