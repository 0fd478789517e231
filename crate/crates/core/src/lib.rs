//! Post-training quantization for reparameterized VGG-style networks.
//!
//! The crate is `no_std` (it needs `alloc`) and performs no IO; file formats,
//! dataset ingestion and the command-line driver live in the `repapq` crate.

#![no_std]
// `!(a > b)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod calib;
pub mod dataset;
pub mod error;
pub mod fake_quant;
pub mod fusion;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod topology;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
