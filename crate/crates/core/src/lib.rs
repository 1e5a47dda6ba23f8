//! Serial supply-chain simulation with interpretable PPO policies.

pub mod config;
pub mod digest;
pub mod env;
pub mod error;
pub mod evalstats;
pub mod experiments;
pub mod interpret;
pub mod netcore;
pub mod policy;
pub mod ppo;
pub mod rng;

pub use env::{SupplyChainConfig, SupplyChainEnv};
pub use error::{Error, ErrorCategory, Result};
