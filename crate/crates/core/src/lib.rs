//! Pareto-filtered multi-reward PPO fine-tuning for discrete autoregressive
//! sequence policies.
//!
//! The pipeline: a synthetic task supplies prompts, ground-truth sequences
//! and a hidden preference oracle ([`tasks`]); paired encoders and a
//! preference scorer are trained ([`encoders`]) and turned into a K-channel
//! normalized reward ([`rewards`]); a transformer policy ([`policy`]) is
//! pretrained with teacher forcing and then fine-tuned with PPO where only
//! the batch-wise non-dominated samples ([`pareto`]) drive the actor
//! ([`trainer`]). [`harness`] wires it all to a CLI.

pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod par;
pub mod pareto;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
