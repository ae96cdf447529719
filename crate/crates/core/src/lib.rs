//! Federated distillation of client knowledge into a prompt generator for a
//! frozen vision-language encoder.
//!
//! Clients train small classifiers on label-skewed shards and upload only
//! per-class average soft labels. The server aggregates them, tunes a prompt
//! generator against a frozen encoder, and sends back per-class global soft
//! labels that the clients distill from.

pub mod cli;
pub mod client;
pub mod error;
pub mod frozen_fm;
pub mod model;
pub mod numerics;
pub mod orchestrator;
pub mod partition;
pub mod prompt_gen;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
