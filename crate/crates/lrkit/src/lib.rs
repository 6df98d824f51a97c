//! Run store, artifacts, reports and command-line interface over
//! [`lrkit_core`].
//!
//! A workspace is a directory holding an append-only `runs.jsonl` and an
//! `artifacts/` tree of content-addressed JSON records named
//! `<kind>-<digest>.json`. Reports are CSV tables with optional SVG plots.

pub mod artifact;
pub mod cli;
pub mod error;
pub mod muptable;
pub mod records;
pub mod render;
pub mod report;
pub mod runs;
pub mod shapes;
pub mod units;
pub mod workspace;

pub use lrkit_core as core;
