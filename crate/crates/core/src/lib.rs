//! Federated group-relative policy optimization on a desk-scale task.
//!
//! A server improves a linear-softmax policy on unlabeled questions using
//! only scalar rewards returned by clients that hold private labeled shards.
//! Per question, clients are ranked by their accuracy on the auxiliary
//! exemplars nearest to the question, and only the top-M score the sampled
//! candidate answers.
//!
//! Modules, bottom-up:
//! - [`taskgen`]: corpus generation, client partitioning, server splits
//! - [`embedding`]: hashed question encoder and exact cosine retrieval
//! - [`policy`]: sampling, exact log-probabilities and score functions
//! - [`client`]: answer-based and model-based scoring on the client
//! - [`netsim`]: metered message bus and baseline cost models
//! - [`server`]: expert selection, reward normalization, training loop

pub mod client;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod netsim;
pub mod policy;
pub mod scenario;
pub mod seed;
pub mod server;
pub mod taskgen;

pub use error::{Error, Result};
pub use exec::Execution;
pub use scenario::Scenario;
