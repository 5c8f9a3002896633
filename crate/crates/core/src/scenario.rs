//! One-stop construction of a federation from plain settings.

use crate::client::{ClientConfig, EvaluationMode, DEFAULT_NEIGHBORS};
use crate::embedding::{Encoder, TokenWeights, DEFAULT_DIM};
use crate::error::Result;
use crate::exec::Execution;
use crate::policy::{PolicyParams, DEFAULT_TEMPERATURE};
use crate::seed;
use crate::server::{build_clients, Federation, ProtocolConfig};
use crate::taskgen::{build_bundle, generate_corpus, Domain, QAItem, PartitionMode, PartitionSpec, TaskConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub task: TaskConfig,
    pub num_clients: usize,
    pub partition: PartitionMode,
    pub aux_size: usize,
    pub server_size: usize,
    pub test_size: usize,
    pub protocol: ProtocolConfig,
    pub evaluation_mode: EvaluationMode,
    pub knn_neighbors: usize,
    pub embed_dim: usize,
    pub policy_dim: usize,
    pub policy_weights: TokenWeights,
    pub temperature: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            task: TaskConfig {
                modulus: 7,
                domains: vec![(Domain::Add, 600), (Domain::Sub, 600), (Domain::Mul, 600)],
            },
            num_clients: 8,
            partition: PartitionMode::Dirichlet { beta: 0.1 },
            aux_size: 100,
            server_size: 400,
            test_size: 300,
            protocol: ProtocolConfig::default(),
            evaluation_mode: EvaluationMode::Mixed,
            knn_neighbors: DEFAULT_NEIGHBORS,
            embed_dim: DEFAULT_DIM,
            policy_dim: DEFAULT_POLICY_DIM,
            policy_weights: TokenWeights::policy(),
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

pub const DEFAULT_POLICY_DIM: usize = 512;

impl Scenario {
    pub fn seed(&self) -> u64 {
        self.protocol.seed
    }

    /// Generates the corpus, splits it, trains the clients and returns the
    /// federation with a zero-initialized policy.
    pub fn build(&self, execution: Execution) -> Result<(Federation, PolicyParams)> {
        self.build_with_items(&self.generate_items()?, execution)
    }

    pub fn generate_items(&self) -> Result<Vec<QAItem>> {
        generate_corpus(&self.task, seed::derive(self.seed(), "corpus", 0))
    }

    /// Like [`Scenario::build`] but over a fixed corpus, e.g. one loaded from
    /// a JSONL export.
    pub fn build_with_items(&self, items: &[QAItem], execution: Execution) -> Result<(Federation, PolicyParams)> {
        self.protocol.validate(self.num_clients)?;
        let master = self.seed();
        let spec = PartitionSpec {
            num_clients: self.num_clients,
            mode: self.partition,
            seed: seed::derive(master, "partition", 0),
        };
        let bundle = build_bundle(items, &spec, self.aux_size, self.server_size, self.test_size)?;
        let client_cfg = ClientConfig {
            answer_range: self.task.modulus,
            neighbors: self.knn_neighbors,
            embed_dim: self.embed_dim,
            mode: self.evaluation_mode,
        };
        let clients = build_clients(&bundle, client_cfg, seed::derive(master, "clients", 0), execution)?;
        let encoder = Encoder::new(self.embed_dim, seed::derive(master, "encoder", 0))?;
        let policy_encoder = Encoder::with_weights(
            self.policy_dim,
            seed::derive(master, "policy-features", 0),
            self.policy_weights,
        )?;
        let fed = Federation::new(self.protocol.clone(), bundle, clients, encoder, policy_encoder)?
            .with_execution(execution);
        let params = fed.initial_policy(self.task.answer_space(), self.temperature)?;
        Ok((fed, params))
    }
}
