//! Linear-softmax policy over a finite answer space.
//!
//! `pi(a | x) = softmax(theta . x / temperature)[a]` with `theta` of shape
//! `(answers, features)`. Log-probabilities are exact and the score function
//! has a closed form, so the orchestrator never needs autodiff.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
const CHECKPOINT_FORMAT: &str = "fedgrpo-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    theta: Array2<f64>,
    temperature: f64,
    answer_space: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub answer: String,
    pub index: usize,
    pub log_prob: f64,
    pub features: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub grad: Array2<f64>,
}

impl GradientVector {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        GradientVector {
            grad: Array2::zeros((rows, cols)),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        self.grad.scaled_add(scale, &other.grad);
    }

    pub fn scale(&mut self, factor: f64) {
        self.grad.mapv_inplace(|g| g * factor);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.grad.iter().all(|&g| g == 0.0)
    }
}

impl PolicyParams {
    pub fn zeros(answer_space: Vec<String>, feature_dim: usize, temperature: f64) -> Result<Self> {
        Self::from_parts(
            Array2::zeros((answer_space.len(), feature_dim)),
            temperature,
            answer_space,
        )
    }

    pub fn from_parts(theta: Array2<f64>, temperature: f64, answer_space: Vec<String>) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if answer_space.is_empty() {
            return Err(Error::Config("answer space is empty".into()));
        }
        let mut sorted = answer_space.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != answer_space.len() {
            return Err(Error::Config("answer space contains duplicates".into()));
        }
        if theta.nrows() != answer_space.len() {
            return Err(Error::Config(format!(
                "theta has {} rows for {} answers",
                theta.nrows(),
                answer_space.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("theta contains non-finite entries".into()));
        }
        Ok(PolicyParams {
            theta,
            temperature,
            answer_space,
        })
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn answer_space(&self) -> &[String] {
        &self.answer_space
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.answer_space.iter().position(|a| a == answer)
    }

    fn checked_index(&self, answer: &str) -> Result<usize> {
        self.answer_index(answer)
            .ok_or_else(|| Error::Contract(format!("answer `{answer}` is not in the answer space")))
    }

    fn features<'a>(&self, x: &'a EmbeddingVector) -> Result<ArrayView1<'a, f64>> {
        if x.dim() != self.feature_dim() {
            return Err(Error::Contract(format!(
                "feature dimension {} does not match policy dimension {}",
                x.dim(),
                self.feature_dim()
            )));
        }
        Ok(ArrayView1::from(x.values()))
    }

    /// `theta . x / temperature`
    pub fn logits(&self, x: &EmbeddingVector) -> Result<Array1<f64>> {
        let logits = self.theta.dot(&self.features(x)?) / self.temperature;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Log-softmax of the logits, stabilized by subtracting the max logit.
    pub fn log_probs(&self, x: &EmbeddingVector) -> Result<Array1<f64>> {
        let logits = self.logits(x)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits.mapv(|l| l - lse))
    }

    pub fn probabilities(&self, x: &EmbeddingVector) -> Result<Array1<f64>> {
        Ok(self.log_probs(x)?.mapv(f64::exp))
    }

    pub fn log_prob(&self, x: &EmbeddingVector, answer: &str) -> Result<f64> {
        let idx = self.checked_index(answer)?;
        Ok(self.log_probs(x)?[idx])
    }

    /// Draws `group_size` i.i.d. answers by inverse-CDF sampling.
    pub fn sample_candidates(
        &self,
        x: &EmbeddingVector,
        group_size: usize,
        seed: u64,
    ) -> Result<Vec<Candidate>> {
        if group_size == 0 {
            return Err(Error::Contract("group size must be at least 1".into()));
        }
        let log_probs = self.log_probs(x)?;
        let probs = log_probs.mapv(f64::exp);
        let mut rng = seed::rng(seed);
        let last = probs.len() - 1;
        Ok((0..group_size)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let index = probs
                    .iter()
                    .position(|p| {
                        acc += p;
                        u < acc
                    })
                    .unwrap_or(last);
                Candidate {
                    answer: self.answer_space[index].clone(),
                    index,
                    log_prob: log_probs[index],
                    features: x.clone(),
                }
            })
            .collect())
    }

    /// Score function: row `a` is `(1[a = answer] - pi(a)) * x / temperature`.
    pub fn grad_log_prob(&self, x: &EmbeddingVector, answer: &str) -> Result<GradientVector> {
        let idx = self.checked_index(answer)?;
        let features = self.features(x)?;
        let probs = self.probabilities(x)?;
        let mut grad = Array2::zeros(self.theta.raw_dim());
        for (a, mut row) in grad.rows_mut().into_iter().enumerate() {
            let coeff = (if a == idx { 1.0 } else { 0.0 } - probs[a]) / self.temperature;
            row.assign(&(&features * coeff));
        }
        Ok(GradientVector { grad })
    }

    /// `theta + step * direction`, returned as new parameters.
    pub fn apply_update(&self, direction: &GradientVector, step: f64) -> Result<PolicyParams> {
        if direction.grad.dim() != self.theta.dim() {
            return Err(Error::Contract(format!(
                "update shape {:?} does not match theta shape {:?}",
                direction.grad.dim(),
                self.theta.dim()
            )));
        }
        if !step.is_finite() {
            return Err(Error::Numerical(format!("non-finite step {step}")));
        }
        let mut theta = self.theta.clone();
        Zip::from(&mut theta)
            .and(&direction.grad)
            .for_each(|t, &d| *t += step * d);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("update produced non-finite parameters".into()));
        }
        Ok(PolicyParams {
            theta,
            temperature: self.temperature,
            answer_space: self.answer_space.clone(),
        })
    }

    /// Highest-probability answer; ties go to the lowest answer index.
    pub fn greedy_decode(&self, x: &EmbeddingVector) -> Result<String> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[best] {
                best = i;
            }
        }
        Ok(self.answer_space[best].clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            temperature: self.temperature,
            answer_space: self.answer_space.clone(),
            rows: self.theta.nrows(),
            cols: self.theta.ncols(),
            theta: self.theta.iter().copied().collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let theta = Array2::from_shape_vec((ck.rows, ck.cols), ck.theta)
            .map_err(|e| Error::Config(format!("checkpoint shape: {e}")))?;
        Self::from_parts(theta, ck.temperature, ck.answer_space)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Versioned JSON checkpoint; `theta` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub temperature: f64,
    pub answer_space: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub theta: Vec<f64>,
}
