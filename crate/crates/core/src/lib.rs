//! Tensor autodiff, a small causal transformer, low-rank adapters with
//! mixture-of-experts routing, synthetic multi-discipline corpora, training
//! and evaluation. Allocation only; no operating-system dependencies.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapters;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod slot;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
