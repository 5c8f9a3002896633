//! The training orchestrator.
//!
//! Each round picks an unlabeled server question, retrieves its auxiliary
//! neighborhood, asks every client for a competence score on it, keeps the
//! Top-M clients as experts, samples a group of candidate answers from the
//! policy, collects the experts' scalar rewards, standardizes them within
//! the group and takes one score-function ascent step. Every message goes
//! through the [`Bus`] and is metered.

mod reward;
mod select;

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::client::{ClientState, EvaluationRequest, Pathway};
use crate::embedding::{retrieve_neighborhood, Encoder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::netsim::{Bus, Direction, Message, Payload, TrafficLedger, SERVER};
use crate::policy::{GradientVector, PolicyParams};
use crate::seed;
use crate::taskgen::{canonicalize_answer, CorpusBundle, Domain, QAItem};

pub use reward::{
    combine_rewards, group_relative_normalize, GroupRewards, NormalizationAxis, NormalizedGroup,
    DEFAULT_EPSILON, DEFAULT_FORMAT_COEFF, DEFAULT_GROUP_COEFF,
};
pub use select::{random_experts, select_experts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Top-M by competence on the question's neighborhood.
    #[default]
    Competence,
    /// Uniformly random M-subset; competence is still probed and recorded.
    Random,
}

impl SelectionRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "competence" => Ok(SelectionRule::Competence),
            "random" => Ok(SelectionRule::Random),
            other => Err(Error::Config(format!(
                "unknown selection rule `{other}` (expected competence or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// L
    pub neighborhood_size: usize,
    /// M
    pub experts: usize,
    /// G
    pub group_size: usize,
    /// T
    pub rounds: u32,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub c_group: f64,
    pub c_format: f64,
    pub axis: NormalizationAxis,
    pub selection: SelectionRule,
    pub eval_every: u32,
    pub questions_per_round: usize,
    /// Smoothing factor for an exponential moving average of each client's
    /// reported competence. `None` uses the fresh per-question score.
    pub competence_ema: Option<f64>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            neighborhood_size: 20,
            experts: 2,
            group_size: 8,
            rounds: 320,
            epsilon: DEFAULT_EPSILON,
            learning_rate: 0.1,
            c_group: DEFAULT_GROUP_COEFF,
            c_format: DEFAULT_FORMAT_COEFF,
            axis: NormalizationAxis::Candidate,
            selection: SelectionRule::Competence,
            eval_every: 20,
            questions_per_round: 1,
            competence_ema: None,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if num_clients == 0 {
            return fail("at least one client is required".into());
        }
        if self.experts == 0 || self.experts > num_clients {
            return fail(format!(
                "experts per question M={} must satisfy 1 <= M <= K={num_clients}",
                self.experts
            ));
        }
        if self.neighborhood_size == 0 {
            return fail("neighborhood size L must be at least 1".into());
        }
        if self.group_size == 0 {
            return fail("group size G must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !self.learning_rate.is_finite() {
            return fail(format!("learning rate must be finite, got {}", self.learning_rate));
        }
        if self.c_group < 0.0 || self.c_format < 0.0 {
            return fail("reward coefficients must be non-negative".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if self.questions_per_round == 0 {
            return fail("questions_per_round must be at least 1".into());
        }
        if let Some(a) = self.competence_ema {
            if !(a > 0.0 && a <= 1.0) {
                return fail(format!("competence_ema must be in (0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSet {
    pub question_id: u64,
    pub members: Vec<u32>,
    pub competence: BTreeMap<u32, f64>,
}

impl ExpertSet {
    pub fn mean_member_competence(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .members
            .iter()
            .filter_map(|m| self.competence.get(m).copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Expected mean competence of a uniformly random subset of the same size,
    /// which is the mean over all clients.
    pub fn mean_all_competence(&self) -> Option<f64> {
        (!self.competence.is_empty())
            .then(|| self.competence.values().sum::<f64>() / self.competence.len() as f64)
    }
}

/// Everything that happened for one question within a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionStep {
    pub question_id: u64,
    pub neighborhood: Vec<u64>,
    pub expert_set: ExpertSet,
    pub candidates: Vec<String>,
    pub group: GroupRewards,
    /// Pathway each expert used, in member order. Simulation telemetry only:
    /// it never crosses the bus.
    pub pathways: Vec<Pathway>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub seed: u64,
    pub axis: NormalizationAxis,
    pub steps: Vec<QuestionStep>,
    /// Frobenius norm of the applied parameter change.
    pub update_norm: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub round: u32,
    pub overall: f64,
    pub per_domain: BTreeMap<Domain, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub params: PolicyParams,
    pub records: Vec<RoundRecord>,
    pub curve: Vec<EvalPoint>,
}

/// Server-side state for one federated run.
pub struct Federation {
    config: ProtocolConfig,
    clients: Vec<ClientState>,
    bundle: CorpusBundle,
    encoder: Encoder,
    policy_encoder: Encoder,
    aux_embeddings: Vec<(u64, EmbeddingVector)>,
    aux_by_id: HashMap<u64, usize>,
    bus: Bus,
    execution: Execution,
    ema: Vec<Option<f64>>,
}

impl Federation {
    /// `clients[i]` must carry id `i + 1`.
    pub fn new(
        config: ProtocolConfig,
        bundle: CorpusBundle,
        clients: Vec<ClientState>,
        encoder: Encoder,
        policy_encoder: Encoder,
    ) -> Result<Self> {
        config.validate(clients.len())?;
        for (i, c) in clients.iter().enumerate() {
            if c.client_id() as usize != i + 1 {
                return Err(Error::Config(format!(
                    "client at position {i} has id {}, expected {}",
                    c.client_id(),
                    i + 1
                )));
            }
        }
        let aux_embeddings: Vec<(u64, EmbeddingVector)> = bundle
            .auxiliary
            .iter()
            .map(|it| (it.id, encoder.embed(&it.question)))
            .collect();
        let aux_by_id = bundle
            .auxiliary
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id, i))
            .collect();
        let k = clients.len();
        Ok(Federation {
            config,
            bus: Bus::new(k as u32),
            clients,
            bundle,
            encoder,
            policy_encoder,
            aux_embeddings,
            aux_by_id,
            execution: Execution::default(),
            ema: vec![None; k],
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    /// Keep a copy of every wire frame for auditing.
    pub fn with_capture(mut self) -> Self {
        self.bus = Bus::new(self.clients.len() as u32).with_capture();
        self
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn bundle(&self) -> &CorpusBundle {
        &self.bundle
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn ledger(&self) -> &TrafficLedger {
        self.bus.ledger()
    }

    pub fn policy_features(&self, question: &str) -> EmbeddingVector {
        self.policy_encoder.embed(question)
    }

    pub fn round_seed(&self, round: u32) -> u64 {
        seed::derive(self.config.seed, "round", round as u64)
    }

    /// Fresh zero-initialized policy sized for this federation.
    pub fn initial_policy(&self, answer_space: Vec<String>, temperature: f64) -> Result<PolicyParams> {
        PolicyParams::zeros(answer_space, self.policy_encoder.dim(), temperature)
    }

    pub fn run_round(&mut self, params: &PolicyParams, round: u32) -> Result<(PolicyParams, RoundRecord)> {
        let seed = self.round_seed(round);
        self.run_round_seeded(params, round, seed)
    }

    /// One round driven entirely by `seed`; replaying a record's seed with the
    /// same starting parameters reproduces it exactly.
    pub fn run_round_seeded(
        &mut self,
        params: &PolicyParams,
        round: u32,
        seed: u64,
    ) -> Result<(PolicyParams, RoundRecord)> {
        if self.bundle.server_questions.is_empty() {
            return Err(Error::TrainingExhausted);
        }
        let mut rng = seed::rng(seed);
        let (rows, cols) = params.theta().dim();
        let mut direction = GradientVector::zeros(rows, cols);
        let mut steps = Vec::with_capacity(self.config.questions_per_round);
        for slot in 0..self.config.questions_per_round {
            let q_idx = rng.random_range(0..self.bundle.server_questions.len());
            let request_id = round
                .wrapping_mul(self.config.questions_per_round as u32)
                .wrapping_add(slot as u32);
            let cand_seed = seed::derive(seed, "candidates", slot as u64);
            let (step, contribution) =
                self.process_question(params, round, q_idx, request_id, cand_seed, &mut rng)?;
            direction.add_scaled(&contribution, 1.0);
            steps.push(step);
        }
        direction.scale(1.0 / self.config.questions_per_round as f64);
        let new_params = params.apply_update(&direction, self.config.learning_rate)?;
        let update_norm = self.config.learning_rate.abs() * direction.frobenius_norm();
        let ledger = self.bus.ledger();
        let record = RoundRecord {
            round,
            seed,
            axis: self.config.axis,
            steps,
            update_norm,
            bytes_up: ledger.round_total(round, Direction::Uplink).bytes,
            bytes_down: ledger.round_total(round, Direction::Downlink).bytes,
        };
        Ok((new_params, record))
    }

    fn process_question(
        &mut self,
        params: &PolicyParams,
        round: u32,
        q_idx: usize,
        request_id: u32,
        cand_seed: u64,
        rng: &mut seed::Rng,
    ) -> Result<(QuestionStep, GradientVector)> {
        let question = self.bundle.server_questions[q_idx].clone();
        let z = self.encoder.embed(&question.question);
        let neighborhood = retrieve_neighborhood(&z, &self.aux_embeddings, self.config.neighborhood_size)?;

        let competence = if neighborhood.is_empty() {
            BTreeMap::new()
        } else {
            let exemplars: Vec<(String, String)> = neighborhood
                .ids()
                .map(|id| {
                    let it = &self.bundle.auxiliary[self.aux_by_id[&id]];
                    (it.question.clone(), it.answer.clone())
                })
                .collect();
            self.probe_competence(round, exemplars)?
        };

        let k = self.clients.len() as u32;
        let members = if competence.is_empty() || self.config.selection == SelectionRule::Random {
            random_experts(rng, k, self.config.experts)
        } else {
            select_experts(&competence, self.config.experts)
        };

        let features = self.policy_encoder.embed(&question.question);
        let candidates = params.sample_candidates(&features, self.config.group_size, cand_seed)?;
        let answers: Vec<String> = candidates.iter().map(|c| c.answer.clone()).collect();

        let (raw, pathways) = self.collect_rewards(round, request_id, &question.question, &answers, &members)?;
        let group = GroupRewards::compute(raw, self.config.axis, self.config.epsilon)?;

        let mut contribution = GradientVector::zeros(params.theta().nrows(), params.theta().ncols());
        let g = candidates.len() as f64;
        for (cand, weight) in candidates.iter().zip(group.candidate_weights()) {
            if weight != 0.0 {
                let grad = params.grad_log_prob(&features, &cand.answer)?;
                contribution.add_scaled(&grad, weight / g);
            }
        }

        let step = QuestionStep {
            question_id: question.id,
            neighborhood: neighborhood.ids().collect(),
            expert_set: ExpertSet {
                question_id: question.id,
                members,
                competence,
            },
            candidates: answers,
            group,
            pathways,
        };
        Ok((step, contribution))
    }

    fn probe_competence(&mut self, round: u32, exemplars: Vec<(String, String)>) -> Result<BTreeMap<u32, f64>> {
        let broadcast = Payload::Neighborhood { exemplars };
        let mut delivered = Vec::with_capacity(self.clients.len());
        for client in &self.clients {
            let msg = Message {
                from: SERVER,
                to: client.client_id(),
                round,
                payload: broadcast.clone(),
            };
            delivered.push(self.bus.send(&msg)?.1);
        }
        let jobs: Vec<(&ClientState, &Message)> = self.clients.iter().zip(&delivered).collect();
        let scores = self.execution.map(&jobs, |(client, msg)| match &msg.payload {
            Payload::Neighborhood { exemplars } => client.competence_on_neighborhood(exemplars),
            _ => unreachable!("neighborhood broadcast"),
        });

        let mut competence = BTreeMap::new();
        for (client, score) in self.clients.iter().zip(scores) {
            let reply = Message {
                from: client.client_id(),
                to: SERVER,
                round,
                payload: Payload::Competence { score: score? },
            };
            let Payload::Competence { score } = self.bus.send(&reply)?.1.payload else {
                unreachable!("competence reply");
            };
            let slot = &mut self.ema[client.client_id() as usize - 1];
            let value = match (self.config.competence_ema, *slot) {
                (Some(alpha), Some(prev)) => alpha * score + (1.0 - alpha) * prev,
                _ => score,
            };
            *slot = Some(value);
            competence.insert(client.client_id(), value);
        }
        Ok(competence)
    }

    fn collect_rewards(
        &mut self,
        round: u32,
        request_id: u32,
        question: &str,
        answers: &[String],
        members: &[u32],
    ) -> Result<(Vec<Vec<f64>>, Vec<Pathway>)> {
        let mut requests = Vec::with_capacity(members.len());
        for &id in members {
            let msg = Message {
                from: SERVER,
                to: id,
                round,
                payload: Payload::Candidates {
                    request_id,
                    question: question.to_string(),
                    candidates: answers.to_vec(),
                },
            };
            let Payload::Candidates {
                request_id,
                question,
                candidates,
            } = self.bus.send(&msg)?.1.payload
            else {
                unreachable!("candidate broadcast");
            };
            requests.push((
                &self.clients[id as usize - 1],
                EvaluationRequest {
                    request_id,
                    question,
                    candidates,
                },
            ));
        }
        let signals = self.execution.map(&requests, |(client, req)| client.score_request(req));

        let (c_group, c_format) = (self.config.c_group, self.config.c_format);
        let mut raw = vec![Vec::with_capacity(members.len()); answers.len()];
        let mut pathways = Vec::with_capacity(members.len());
        for (&id, signal) in members.iter().zip(signals) {
            let signal = signal?;
            pathways.push(signal.pathway);
            let reply = Message {
                from: id,
                to: SERVER,
                round,
                payload: Payload::Rewards {
                    scores: signal
                        .per_candidate
                        .iter()
                        .map(|s| (s.correctness, s.format))
                        .collect(),
                },
            };
            let Payload::Rewards { scores } = self.bus.send(&reply)?.1.payload else {
                unreachable!("reward reply");
            };
            if scores.len() != answers.len() {
                return Err(Error::Contract(format!(
                    "client {id} returned {} scores for {} candidates",
                    scores.len(),
                    answers.len()
                )));
            }
            for (row, (correctness, format)) in raw.iter_mut().zip(scores) {
                row.push(combine_rewards(correctness, format, c_group, c_format));
            }
        }
        Ok((raw, pathways))
    }

    /// Greedy pass@1 on the test set, per domain and overall.
    pub fn evaluate(&self, params: &PolicyParams, round: u32) -> Result<EvalPoint> {
        let mut per_domain = BTreeMap::new();
        let (mut hits, mut total) = (0usize, 0usize);
        for (domain, items) in &self.bundle.test {
            let outcomes = self.execution.map(items, |it: &QAItem| {
                params
                    .greedy_decode(&self.policy_encoder.embed(&it.question))
                    .map(|a| a == canonicalize_answer(&it.answer))
            });
            let correct = outcomes
                .into_iter()
                .collect::<Result<Vec<bool>>>()?
                .into_iter()
                .filter(|&b| b)
                .count();
            per_domain.insert(*domain, correct as f64 / items.len().max(1) as f64);
            hits += correct;
            total += items.len();
        }
        Ok(EvalPoint {
            round,
            overall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            per_domain,
        })
    }

    pub fn run_training(&mut self, params: PolicyParams) -> Result<TrainingOutcome> {
        self.run_training_with(params, |_, _| Ok(()))
    }

    /// Runs T rounds, evaluating at round 0, every `eval_every` rounds and at
    /// the final round. `on_round` sees the updated parameters after each round.
    pub fn run_training_with<F>(&mut self, params: PolicyParams, mut on_round: F) -> Result<TrainingOutcome>
    where
        F: FnMut(&PolicyParams, &RoundRecord) -> Result<()>,
    {
        let mut params = params;
        let mut records = Vec::with_capacity(self.config.rounds as usize);
        let mut curve = vec![self.evaluate(&params, 0)?];
        for round in 1..=self.config.rounds {
            let (next, record) = self.run_round(&params, round)?;
            params = next;
            on_round(&params, &record)?;
            records.push(record);
            if round % self.config.eval_every == 0 || round == self.config.rounds {
                curve.push(self.evaluate(&params, round)?);
            }
        }
        Ok(TrainingOutcome {
            params,
            records,
            curve,
        })
    }
}

/// Builds one client per shard (ids `1..=K`) and trains each evaluator on its
/// own shard with a client-specific seed.
pub fn build_clients(
    bundle: &CorpusBundle,
    config: crate::client::ClientConfig,
    seed: u64,
    execution: Execution,
) -> Result<Vec<ClientState>> {
    let jobs: Vec<(u32, &Vec<QAItem>)> = bundle
        .client_shards
        .iter()
        .enumerate()
        .map(|(i, shard)| (i as u32 + 1, shard))
        .collect();
    execution
        .map(&jobs, |(id, shard)| {
            ClientState::new(*id, shard.to_vec(), config)
                .train_local_evaluator(seed::derive(seed, "evaluator", *id as u64))
        })
        .into_iter()
        .collect()
}
