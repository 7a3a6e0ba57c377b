//! Deterministic simulator for peer-to-peer deep learning.
//!
//! Devices hold disjoint shards of MNIST, train a 2NN classifier locally and
//! periodically average parameters with their neighbours on an undirected
//! communication graph. The same update rules cover DSGD, local DSGD, P2PL
//! and P2PL with Affinity, which adds a neighbour-displacement bias to the
//! local learning phase and an optional self bias to the consensus phase.
//!
//! Module map:
//!
//! - [`nn`]: the classifier, its loss and backpropagation, and a
//!   finite-difference oracle.
//! - [`data`]: IDX loading, IID and per-class partitioning, batch streams.
//! - [`topology`]: graph families and the mixing (`alpha`) and affinity
//!   (`beta`) weights.
//! - [`protocol`]: per-device learning and consensus updates, max-norm
//!   synchronization and algorithm presets.
//! - [`engine`]: the round scheduler, stratified evaluation and oscillation
//!   statistics.
//! - [`config`], [`report`], [`fetch`]: experiment files and presets, CSV and
//!   SVG output, and the MNIST download helper used by the `p2pl` binary.

pub mod config;
pub mod data;
pub mod engine;
pub mod fetch;
pub mod nn;
pub mod protocol;
pub mod report;
pub mod seed;
pub mod topology;
