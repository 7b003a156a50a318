//! Allocation-only core of the `energycomp` toolkit.
//!
//! Everything here is pure computation: dense matrices and a Jacobi SVD,
//! a small trainable network (dense, conv2d and factorized dense layers),
//! the three compression procedures (low-order bit overwriting, global
//! magnitude pruning, truncated-SVD factorization) and the energy
//! integration arithmetic. File formats, clocks, threads and the CLI live
//! in the `energycomp` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod compress;
pub mod energy;
mod error;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
