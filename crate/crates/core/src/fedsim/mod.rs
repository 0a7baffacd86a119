//! Federated training: HyperFL and the Local-only, FedAvg, DP-FedAvg and
//! pFedHN baselines.
//!
//! Each client gets its own random stream keyed by (seed, round, client)
//! and uploads are consumed in ascending client order, so a run's output
//! does not depend on how many threads train clients concurrently.

mod channel;
mod client;
mod config;
mod server;
mod sim;
mod snapshot;

pub use channel::{find_values, Channel, Direction, Envelope, Payload, WireRecord};
pub use client::{
    epoch_batches, hyperfl_grads, local_train_fedavg, local_train_full, local_train_hyperfl, ClientState, HyperGrads,
    LocalModel, LocalOutcome, EMBEDDING,
};
pub use config::{Algorithm, DpConfig, GradNormSource, PfedhnConfig, RoundConfig};
pub use server::{aggregate, dp_sanitize, sample_clients, WEIGHT_TOLERANCE};
pub use sim::{client_rng, derive_rng, sanitize_model, ServerState, SimConfig, Simulator};
