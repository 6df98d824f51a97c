//! Learning-rate configuration toolkit for LLM pre-training.
//!
//! Two routes to a target-scale learning rate live side by side here:
//!
//! * the fitting route: per-run `L(D) = L0 + A·D^-γ` curves, quadratic fits of
//!   loss against `ln η`, and a joint power law `η*(N, D) = C·N^-α·D^-β`
//!   assembled from the per-cell optima ([`fit`], [`lawfit`]);
//! * the transfer route: μP / Complete-P multipliers that carry proxy
//!   hyperparameters to a wider, deeper, longer-trained target ([`mutransfer`]).
//!
//! [`modsearch`] plans the greedy per-module learning-rate search,
//! [`oracle`] plants synthetic loss surfaces with known answers, and
//! [`micro`] is a small manual-gradient trainer used for coordinate checks
//! and update-RMS diagnostics.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, persistence and
//! the command line live in the `lrkit` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod digest;
pub mod fit;
pub mod ingest;
pub mod lawfit;
mod math;
pub mod micro;
pub mod modsearch;
pub mod mutransfer;
pub mod oracle;
pub mod schedule;
mod serde_float;
pub mod stats;

pub use fit::{FitOptions, PowerLawFit, QuadLogFit};
pub use ingest::{LossSample, ModelShape, RunRecord};
pub use lawfit::{LrLaw, OptimalLrPoint};
pub use modsearch::{ModuleGroup, SearchPlan};
pub use mutransfer::{BaseHParams, TransferPlan, Variant};
pub use schedule::WsdSchedule;
