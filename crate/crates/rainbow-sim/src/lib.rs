//! Simulator for a multi-chip shared-memory server kept coherent either by a
//! colored-token protocol ("rainbow") backed by loosely inclusive sparse
//! directories plus d-left counting Bloom filters, or by an inclusive
//! probe-filter baseline ("hta").
//!
//! The same deterministic message-handler state machines are driven by two
//! front ends: a timed discrete-event engine ([`engine`]) for trace-driven
//! performance runs, and an exhaustive interleaving explorer ([`checker`])
//! that proves the correctness invariants at desk scale.

pub mod checker;
pub mod cli;
pub mod coherence;
pub mod config;
pub mod dlcbf;
pub mod engine;
pub mod hta;
pub mod protocol;
pub mod rainbow;
pub mod sparse_dir;
pub mod workload;
