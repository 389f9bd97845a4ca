//! Per-stage adaptation-policy search for few-shot classification.
//!
//! The crate is organised bottom-up: [`tasks`] produces episodes, [`encoder`]
//! embeds them, [`policyspace`] defines how each stage adapts to a support
//! set, [`supernet`] mixes all candidate policies, [`search`] trains the
//! mixture, [`decode`] discretizes it and [`evalbench`] measures the result.
//! [`experiment`] wires the pieces into the command-line pipeline.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod experiment;
pub mod optim;
pub mod policyspace;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tasks;

pub use error::{Error, Result};
