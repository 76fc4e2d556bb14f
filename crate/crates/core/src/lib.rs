// NaN-rejecting guards like `!(x > 0.0)` are intentional
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod fock;
pub mod hamiltonian;
pub mod lattice;
pub mod observables;
pub mod readout;
pub mod spectral;

pub use error::{Error, Result};
