//! Reward combination and group-relative normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_GROUP_COEFF: f64 = 8.0;
pub const DEFAULT_FORMAT_COEFF: f64 = 1.0;

/// Which set of raw rewards is standardized together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationAxis {
    /// Average the experts' scores per candidate, then standardize across the
    /// G candidates of a question.
    #[default]
    Candidate,
    /// Standardize across the M experts separately for each candidate. The
    /// normalized scores of one candidate always sum to zero, so averaging
    /// them yields no learning signal; kept for comparison.
    Expert,
}

impl NormalizationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "candidate" => Ok(NormalizationAxis::Candidate),
            "expert" => Ok(NormalizationAxis::Expert),
            other => Err(Error::Config(format!(
                "unknown normalization axis `{other}` (expected candidate or expert)"
            ))),
        }
    }
}

/// `c_group * correctness + c_format * format`, applied before normalization.
pub fn combine_rewards(correctness: f64, format: f64, c_group: f64, c_format: f64) -> f64 {
    c_group * correctness + c_format * format
}

/// One standardized group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedGroup {
    pub mu: f64,
    /// Population (1/n) standard deviation.
    pub sigma: f64,
    pub values: Vec<f64>,
}

/// `(raw - mu) / (sigma + epsilon)` over the whole slice.
pub fn group_relative_normalize(raw: &[f64], epsilon: f64) -> Result<NormalizedGroup> {
    if raw.is_empty() {
        return Err(Error::Contract("cannot normalize an empty reward group".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    if raw.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical("non-finite reward in group".into()));
    }
    let n = raw.len() as f64;
    let mu = raw.iter().sum::<f64>() / n;
    let sigma = (raw.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n).sqrt();
    let values = if sigma == 0.0 {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|r| (r - mu) / (sigma + epsilon)).collect()
    };
    Ok(NormalizedGroup { mu, sigma, values })
}

/// Rewards for one question: the raw `candidates x experts` matrix and the
/// normalized groups along the configured axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub axis: NormalizationAxis,
    pub epsilon: f64,
    pub raw: Vec<Vec<f64>>,
    /// One group for the candidate axis, one per candidate for the expert axis.
    pub groups: Vec<NormalizedGroup>,
}

impl GroupRewards {
    pub fn compute(raw: Vec<Vec<f64>>, axis: NormalizationAxis, epsilon: f64) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(Vec::is_empty) {
            return Err(Error::Contract("reward matrix must be non-empty".into()));
        }
        let groups = match axis {
            NormalizationAxis::Candidate => {
                let means: Vec<f64> = raw
                    .iter()
                    .map(|row| row.iter().sum::<f64>() / row.len() as f64)
                    .collect();
                vec![group_relative_normalize(&means, epsilon)?]
            }
            NormalizationAxis::Expert => raw
                .iter()
                .map(|row| group_relative_normalize(row, epsilon))
                .collect::<Result<_>>()?,
        };
        Ok(GroupRewards {
            axis,
            epsilon,
            raw,
            groups,
        })
    }

    /// Per-candidate advantage used to weight that candidate's score function.
    pub fn candidate_weights(&self) -> Vec<f64> {
        match self.axis {
            NormalizationAxis::Candidate => self.groups[0].values.clone(),
            NormalizationAxis::Expert => self
                .groups
                .iter()
                .map(|g| g.values.iter().sum::<f64>() / g.values.len() as f64)
                .collect(),
        }
    }

    pub fn mean_mu(&self) -> f64 {
        self.groups.iter().map(|g| g.mu).sum::<f64>() / self.groups.len() as f64
    }

    pub fn mean_sigma(&self) -> f64 {
        self.groups.iter().map(|g| g.sigma).sum::<f64>() / self.groups.len() as f64
    }
}
