//! Federated learning for learning-outcome prediction.
//!
//! Students' grade records stay on institutional clients; only a shared
//! "global part" of each client network is uploaded and averaged by a
//! coordinator. Each client additionally trains a private local part and a
//! private classification head, with a subspace-separation penalty pushing
//! the two sub-networks apart and a feature-privacy split keeping sensitive
//! attributes out of everything that leaves the client.
//!
//! The crate ships:
//!
//! - [`nn`] — a small deterministic dense-network engine (f64, ReLU,
//!   softmax+cross-entropy, momentum SGD, finite-difference oracle);
//! - [`model`] — the split client network and its loss;
//! - [`federation`] — the round engine, aggregation, and the strategy layer
//!   (FecMap and its ablations, FedAvg, FedProx, FedPer, LG-Fed, FedRep);
//! - [`data`] — grade-record schema, encoding, binning, partitioning, a
//!   seeded synthetic generator, and CSV ingestion;
//! - [`transport`] — newline-delimited JSON over TCP for genuinely
//!   distributed runs, equivalent to the in-process simulator;
//! - [`metrics`] / [`runner`] — evaluation, representation export,
//!   experiment configs, sweeps, and machine-readable reports.
//!
//! Start with the `examples/` directory; `examples/quickstart.rs` is the
//! five-minute tour. The `fedlop` binary wraps the same entry points for
//! shell use.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod runner;
pub mod transport;

pub use config::{DataSource, ExperimentConfig, Mode};
pub use data::{EncodedSample, FeatureSchema, GradeRecord, SyntheticConfig};
pub use error::{Error, Result};
pub use federation::{
    AggregationMode, FederationConfig, RoundRecord, Strategy, TrainingHistory,
};
pub use metrics::Metrics;
pub use model::{ArchConfig, ClientNetwork, HyperParams, Wiring};
pub use nn::{seeded_rng, SeededRng};
