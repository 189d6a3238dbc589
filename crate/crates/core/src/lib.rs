// SPDX-License-Identifier: MIT OR Apache-2.0

//! Targeted angular reversal (TARS) knowledge removal on a toy transformer.
//!
//! The crate is `no_std` + `alloc`: it holds the model, the trainer, concept
//! targeting, weight-row surgery and evaluation. File formats and the CLI
//! live in the `tars` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod surgery;
pub mod targeting;
pub mod trainer;

pub use error::{Error, Result};
