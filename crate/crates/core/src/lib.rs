//! Action-collapse policy-gradient laboratory.
//!
//! Frozen simplex-ETF action heads ([`etf`]), a small MLP with manual
//! backpropagation ([`net`]), discrete environments ([`envs`]), REINFORCE and
//! PPO trainers ([`pg`]), collapse diagnostics ([`metrics`]) and a
//! layer-peeled-model verifier ([`lpm`]).

pub mod etf;
pub mod metrics;
pub mod envs;
pub mod net;
pub mod lpm;
pub mod config;
pub mod pg;
pub mod sweep;

pub use etf::{generate_etf, EtfMatrix};
pub use net::PolicyNet;
