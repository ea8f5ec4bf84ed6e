//! Device-cloud distributed retrieval-augmented generation.
//!
//! Two nodes (a device and a cloud) each retrieve from their own corpus and
//! decode draft tokens independently. An aggregator, hosted on whichever side
//! the scheduler picks, verifies the two draft streams with speculative
//! sampling so that the emitted tokens follow the interpolated distribution
//! of both sides, while transmission overlaps with decoding.
//!
//! Real language models are replaced by a deterministic document-conditioned
//! toy decoder; everything else (aggregation, scheduling, profiling, wire
//! protocol, runtime and simulator) is the real machinery.

use std::fmt;
use std::str::FromStr;

pub mod aggregator;
pub mod decoder;
pub mod dist;
pub mod profiler;
pub mod reference;
pub mod retrieval;
pub mod rng;
pub mod runtime;
pub mod scheduler;
pub mod simulator;
pub mod transport;
pub mod verify;

pub use aggregator::{aggregate, expected_acceptance, speculative_sample, AggregationDraws, AggregationOutcome};
pub use dist::{eta_log_weights, interpolate_target, lk_divergence, topp_decode, topp_encode};
pub use dist::{CompressedDist, CorrectedWeight, LogDist, Vocab};

/// One of the two collaborating nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Device,
    Cloud,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Device => Side::Cloud,
            Side::Cloud => Side::Device,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Device => 0,
            Side::Cloud => 1,
        }
    }

    pub const BOTH: [Side; 2] = [Side::Device, Side::Cloud];
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Device => "device",
            Side::Cloud => "cloud",
        })
    }
}

impl FromStr for Side {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "device" => Ok(Side::Device),
            "cloud" => Ok(Side::Cloud),
            other => Err(format!("unknown side `{other}` (expected device or cloud)")),
        }
    }
}

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dist(#[from] dist::DistError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Decoder(#[from] decoder::DecoderError),
    #[error(transparent)]
    Aggregation(#[from] aggregator::AggregationError),
    #[error(transparent)]
    Profile(#[from] profiler::ProfileError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
    #[error(transparent)]
    Runtime(#[from] runtime::RuntimeError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
