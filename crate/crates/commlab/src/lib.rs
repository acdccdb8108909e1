//! commlab — a deterministic, desk-scale laboratory for studying
//! discrete vs. continuous communication between autoencoding agents.
//!
//! Populations of agents (plain autoencoders, multi-token VQ
//! autoencoders, variational autoencoders, and hybrid split/masked
//! channels) are trained on overlap-controlled datasets; communication
//! between unfamiliar agents is then scored by cross-reconstruction
//! loss, and codebook dynamics are tracked throughout.
//!
//! The crate is a library first: see the `examples/` directory for one
//! runnable program per capability, from training a single agent up to
//! full experiment protocols. The `commlab` binary exposes the same
//! pipeline as `run` / `sweep` / `compare` subcommands driven by a TOML
//! config.
//!
//! Everything is reproducible: one 64-bit seed determines every output
//! byte (timestamps aside) through named random streams.

pub mod agent;
pub mod analytics;
pub mod config;
pub mod data;
pub mod error;
pub mod numeric;
pub mod protocol;
pub mod quantizer;
pub mod runner;
pub mod seed;

pub use error::{Error, Result};
pub use seed::SeedSplitter;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
