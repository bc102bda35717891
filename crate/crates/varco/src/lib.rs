//! Distributed full-batch GNN training with variable communication rates.
//!
//! A graph is partitioned across `Q` workers. Each worker computes GNN layers
//! for the nodes it owns; activations of boundary nodes are exchanged with
//! adjacent workers through a lossy random-subset codec whose compression
//! ratio decreases over training according to a scheduler. Every float that
//! crosses a worker boundary is counted in a communication ledger, so
//! accuracy can be plotted against exact communication volume.
//!
//! The main pieces:
//!
//! - [`graph`] — CSR graphs, stochastic-block-model generation, graph shift
//!   operators (mean-neighbor, symmetric-normalized, raw adjacency).
//! - [`partition`] — node-to-worker assignment (random, greedy BFS, or
//!   imported), halo sets, and cross-edge statistics.
//! - [`model`] — the GNN itself: multi-tap graph convolutions, forward pass,
//!   hand-rolled reverse-mode gradients, losses, SGD.
//! - [`codec`] — keep-a-keyed-random-subset compression with exact byte
//!   accounting and an analytic error estimate.
//! - [`sched`] — compression-ratio schedules (fixed, step, linear,
//!   exponential, clamped-linear).
//! - [`runtime`] — the distributed training loop: layer-synchronous halo
//!   exchange, compressed backward routing, parameter averaging, and the
//!   communication ledger.
//! - [`harness`] — experiment configuration, the four training arms
//!   (full-comm / no-comm / fixed / variable), metrics CSV, and reports.
//!
//! Run `cargo run --example train_arms` for an end-to-end tour, or use the
//! `varco` binary (`synth`, `partition`, `train`, `report` subcommands).

pub mod codec;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod mat;
pub mod model;
pub mod partition;
pub mod runtime;
pub mod sched;

pub use error::{Error, Result};
