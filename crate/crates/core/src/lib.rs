//! Interval-observer synthesis and run-time safety monitoring for
//! dynamical systems with embedded feedforward neural networks.
//!
//! The crate covers the full workflow:
//!
//! 1. [`nn`] — network evaluation, sign-split auxiliary networks and
//!    interval propagation through them;
//! 2. [`lp`] — a self-contained two-phase simplex engine;
//! 3. [`expr`] / [`plant`] / [`fixtures`] — a small expression language,
//!    plant models with bounding decompositions, and scenarios;
//! 4. [`synthesis`] — gain-matrix chains, observer-gain feasibility
//!    programs and stability certificates;
//! 5. [`monitor`] — closed-loop simulation, streaming estimation from
//!    measurements, bracketing checks and error metrics;
//! 6. [`format`](mod@format) — the JSON file formats consumed by the CLI.

pub mod expr;
pub mod fixtures;
pub mod format;
pub mod lp;
pub mod monitor;
pub mod nn;
pub mod plant;
pub mod synthesis;
