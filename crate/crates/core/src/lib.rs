//! Embedding-clustered federated averaging, plus the baselines and the
//! deterministic simulation harness used to compare them.
//!
//! Clients train small models locally and upload parameters together with
//! the mean embedding of their data. The server groups clients by embedding
//! proximity (DBSCAN) and averages one model per group, so clients that see
//! similar data share a model while unrelated clients stay apart. The crate
//! also ships plain federated averaging, purely local training, and a
//! centralized pooled-data baseline for comparison.
//!
//! The math modules are generic over [`scalar::Scalar`]; the system layers
//! (wire protocol, server, client, experiment driver) run at `f64` via the
//! aliases below, which is also the width reals have on the wire.

pub mod aggregation;
pub mod client;
pub mod clustering;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod metrics;
pub mod protocol;
pub mod scalar;
pub mod server;
pub mod transport;

/// Scalar used by the simulation pipeline and the wire format.
pub type Real = f64;

/// Model parameters at the pipeline scalar.
pub type Params = learner::ModelParams<Real>;

/// Client dataset at the pipeline scalar.
pub type Dataset = learner::ClientDataset<Real>;
pub type Embedding = embedding::EmbeddingVector<Real>;
