//! Worst-group-robust training with embedding regularization.
//!
//! The crate has three layers:
//!
//! - generators for group-structured synthetic data ([`data`]) and a small
//!   explicit-gradient model ([`model`]),
//! - the training objective: group-reweighted classification loss
//!   ([`robust`]) plus the spurious/core embedding regularizer
//!   ([`regularizer`]), wired together by [`trainer`],
//! - closed-form Gaussian oracles for worst-group error with a Monte Carlo
//!   verifier ([`theory`]).
//!
//! The `scer` binary exposes the same functionality as subcommands
//! (`generate`, `train`, `theory`, `sweep`, `report`); see [`cli`].
//! The mdbook under `book/` walks through the concepts; its code listings
//! compile and run as doctests of this crate.

// indexed loops are the clearer idiom in the dense kernels here
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod regularizer;
pub mod robust;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};

// Book chapters double as doctests so the guide can never drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/group-robustness.md")]
    mod group_robustness {}
    #[doc = include_str!("../../../book/src/embedding-regularizer.md")]
    mod embedding_regularizer {}
    #[doc = include_str!("../../../book/src/theory-oracle.md")]
    mod theory_oracle {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}
