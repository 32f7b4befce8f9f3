//! Missing-resistant multimodal video paragraph captioning at desk scale.
//!
//! The crate holds the numeric core ([`nn`]), the synthetic corpus generator
//! ([`data`]), relative time tokenization ([`timetok`]), the fusion
//! captioning network with beam search ([`model`]), the robustness training
//! strategies ([`train`]), test-time noise ([`noise`]) and caption metrics
//! ([`metrics`]).

pub mod data;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod rng;
pub mod timetok;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("gradient check failed: {0}")]
    Check(String),
    #[error("non-finite loss {loss} at step {step} (batch: {})", batch_ids.join(","))]
    NonFinite {
        step: usize,
        loss: f64,
        batch_ids: Vec<String>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
