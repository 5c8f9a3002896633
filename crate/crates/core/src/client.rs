//! A simulated client: its private shard, a local model-based evaluator, and
//! the dual answer-based / model-based scoring path. Everything a client
//! hands back to the server is a scalar.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, Encoder, EmbeddingVector, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::taskgen::{canonical_question, canonicalize_answer, QAItem};

/// Default number of shard neighbors consulted by the model-based evaluator.
pub const DEFAULT_NEIGHBORS: usize = 5;
/// Score returned by an evaluator that has no local data.
pub const UNINFORMATIVE_SCORE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pathway {
    /// Exact-answer check against a local ground truth.
    AE,
    /// Local evaluator score.
    ME,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    /// AE when the question is in the shard, ME otherwise.
    #[default]
    Mixed,
    /// Ground truth is treated as unavailable: ME always.
    MeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    /// Answers are well-formed iff they parse as an integer in `0..answer_range`.
    pub answer_range: u64,
    pub neighbors: usize,
    pub embed_dim: usize,
    pub mode: EvaluationMode,
}

impl ClientConfig {
    pub fn new(answer_range: u64) -> Self {
        ClientConfig {
            answer_range,
            neighbors: DEFAULT_NEIGHBORS,
            embed_dim: DEFAULT_DIM,
            mode: EvaluationMode::Mixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct IndexedExample {
    id: u64,
    vector: EmbeddingVector,
    answer: String,
}

/// Similarity-weighted k-nearest-neighbor consensus over the local shard.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluator {
    neighbors: usize,
    state: EvaluatorState,
}

#[derive(Debug, Clone, PartialEq)]
enum EvaluatorState {
    Untrained,
    /// Trained on an empty shard.
    Prior,
    Trained {
        encoder: Encoder,
        index: Vec<IndexedExample>,
    },
}

/// Model-based score; `prior_only` marks the uninformative fallback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelScore {
    pub value: f64,
    pub prior_only: bool,
}

impl Evaluator {
    fn untrained(neighbors: usize) -> Self {
        Evaluator {
            neighbors,
            state: EvaluatorState::Untrained,
        }
    }

    fn train(neighbors: usize, shard: &[QAItem], dim: usize, seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Ok(Evaluator {
                neighbors,
                state: EvaluatorState::Prior,
            });
        }
        let encoder = Encoder::new(dim, seed)?;
        let index = shard
            .iter()
            .map(|it| IndexedExample {
                id: it.id,
                vector: encoder.embed(&it.question),
                answer: canonicalize_answer(&it.answer),
            })
            .collect();
        Ok(Evaluator {
            neighbors,
            state: EvaluatorState::Trained { encoder, index },
        })
    }

    pub fn is_trained(&self) -> bool {
        !matches!(self.state, EvaluatorState::Untrained)
    }

    /// The `neighbors` most similar shard examples with their vote weights.
    fn nearest(&self, question: &str) -> Option<Vec<(&IndexedExample, f64)>> {
        let EvaluatorState::Trained { encoder, index } = &self.state else {
            return None;
        };
        let q = encoder.embed(question);
        let mut scored: Vec<(&IndexedExample, f64)> = index
            .iter()
            .map(|ex| (ex, cosine_similarity(&q, &ex.vector).unwrap_or(0.0)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        scored.truncate(self.neighbors.max(1));
        let total: f64 = scored.iter().map(|(_, s)| s.max(0.0)).sum();
        Some(
            scored
                .into_iter()
                .map(|(ex, s)| (ex, if total > 0.0 { s.max(0.0) } else { 1.0 }))
                .collect(),
        )
    }

    pub fn score(&self, question: &str, candidate: &str) -> Result<ModelScore> {
        match &self.state {
            EvaluatorState::Untrained => Err(Error::Contract("evaluator has not been trained".into())),
            EvaluatorState::Prior => Ok(ModelScore {
                value: UNINFORMATIVE_SCORE,
                prior_only: true,
            }),
            EvaluatorState::Trained { .. } => {
                let votes = self.nearest(question).expect("trained");
                let candidate = canonicalize_answer(candidate);
                let total: f64 = votes.iter().map(|(_, w)| w).sum();
                let agree: f64 = votes
                    .iter()
                    .filter(|(ex, _)| ex.answer == candidate)
                    .map(|(_, w)| w)
                    .sum();
                Ok(ModelScore {
                    value: (agree / total).clamp(0.0, 1.0),
                    prior_only: false,
                })
            }
        }
    }

    /// Answer with the largest vote weight; ties go to the answer of the
    /// more similar neighbor.
    pub fn predict(&self, question: &str) -> Option<String> {
        let votes = self.nearest(question)?;
        let mut tally: Vec<(&str, f64)> = Vec::new();
        for (ex, w) in &votes {
            match tally.iter_mut().find(|(a, _)| *a == ex.answer) {
                Some(entry) => entry.1 += w,
                None => tally.push((&ex.answer, *w)),
            }
        }
        let mut best: Option<(&str, f64)> = None;
        for (a, w) in tally {
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((a, w));
            }
        }
        best.map(|(a, _)| a.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRequest {
    pub request_id: u32,
    pub question: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub correctness: f64,
    pub format: f64,
}

/// Raw per-candidate scores from one client. The correctness and format
/// components are kept separate; the server combines them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub client_id: u32,
    pub request_id: u32,
    pub per_candidate: Vec<CandidateScore>,
    pub pathway: Pathway,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    client_id: u32,
    shard: Vec<QAItem>,
    answer_index: HashMap<String, String>,
    evaluator: Evaluator,
    config: ClientConfig,
}

impl ClientState {
    pub fn new(client_id: u32, shard: Vec<QAItem>, config: ClientConfig) -> Self {
        let answer_index = shard
            .iter()
            .map(|it| (canonical_question(&it.question), canonicalize_answer(&it.answer)))
            .collect();
        ClientState {
            client_id,
            shard,
            answer_index,
            evaluator: Evaluator::untrained(config.neighbors),
            config,
        }
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn shard(&self) -> &[QAItem] {
        &self.shard
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn set_mode(&mut self, mode: EvaluationMode) {
        self.config.mode = mode;
    }

    pub fn knows(&self, question: &str) -> bool {
        self.answer_index.contains_key(&canonical_question(question))
    }

    /// Builds the evaluator from this client's shard alone. Idempotent.
    pub fn train_local_evaluator(mut self, seed: u64) -> Result<Self> {
        self.evaluator = Evaluator::train(self.config.neighbors, &self.shard, self.config.embed_dim, seed)?;
        Ok(self)
    }

    pub fn gate(&self, question: &str) -> Pathway {
        match self.config.mode {
            EvaluationMode::Mixed if self.knows(question) => Pathway::AE,
            _ => Pathway::ME,
        }
    }

    pub fn evaluate_answer_based(&self, question: &str, candidate: &str) -> Result<f64> {
        let truth = self
            .answer_index
            .get(&canonical_question(question))
            .ok_or_else(|| Error::Contract(format!("question `{question}` is not in the local shard")))?;
        Ok(if canonicalize_answer(candidate) == *truth { 1.0 } else { 0.0 })
    }

    pub fn evaluate_model_based(&self, question: &str, candidate: &str) -> Result<ModelScore> {
        self.evaluator.score(question, candidate)
    }

    /// The client's own answer to an exemplar: a shard lookup in mixed mode
    /// when available, otherwise the evaluator's prediction.
    fn own_answer(&self, question: &str) -> Option<String> {
        if self.config.mode == EvaluationMode::Mixed {
            if let Some(a) = self.answer_index.get(&canonical_question(question)) {
                return Some(a.clone());
            }
        }
        self.evaluator.predict(question)
    }

    /// Fraction of the neighborhood exemplars the client answers correctly.
    pub fn competence_on_neighborhood(&self, exemplars: &[(String, String)]) -> Result<f64> {
        if exemplars.is_empty() {
            return Err(Error::Contract("competence probe with an empty neighborhood".into()));
        }
        let correct = exemplars
            .iter()
            .filter(|(q, y)| self.own_answer(q).is_some_and(|a| a == canonicalize_answer(y)))
            .count();
        Ok(correct as f64 / exemplars.len() as f64)
    }

    pub fn format_score(&self, candidate: &str) -> f64 {
        match canonicalize_answer(candidate).parse::<u64>() {
            Ok(v) if v < self.config.answer_range => 1.0,
            _ => 0.0,
        }
    }

    pub fn score_request(&self, req: &EvaluationRequest) -> Result<RewardSignal> {
        if req.candidates.is_empty() {
            return Err(Error::Contract("evaluation request without candidates".into()));
        }
        let pathway = self.gate(&req.question);
        let per_candidate = req
            .candidates
            .iter()
            .map(|cand| {
                let correctness = match pathway {
                    Pathway::AE => self.evaluate_answer_based(&req.question, cand)?,
                    Pathway::ME => self.evaluate_model_based(&req.question, cand)?.value,
                };
                Ok(CandidateScore {
                    correctness,
                    format: self.format_score(cand),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RewardSignal {
            client_id: self.client_id,
            request_id: req.request_id,
            per_candidate,
            pathway,
        })
    }
}
