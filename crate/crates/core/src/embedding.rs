//! Frozen question encoder and exact cosine retrieval over the auxiliary set.
//!
//! The encoder is seeded feature hashing: every token is mapped to a role
//! feature (operator, positional operand, modulus keyword, modulus value),
//! plus one whole-expression feature, and each feature is added with a signed
//! weight into one of `dim` buckets. The sum is L2-normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::taskgen::tokenize;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Builds a unit vector from raw values; all-zero input stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-role feature weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub operator: f64,
    pub operand: f64,
    pub modulus: f64,
    pub expression: f64,
}

impl Default for TokenWeights {
    fn default() -> Self {
        TokenWeights {
            operator: 2.0,
            operand: 1.0,
            modulus: 1.0,
            expression: 2.0,
        }
    }
}

impl TokenWeights {
    /// Weights used for policy features.
    pub fn policy() -> Self {
        TokenWeights {
            expression: 8.0,
            ..TokenWeights::default()
        }
    }
}

/// Output of [`Encoder::encode`]; `empty_input` flags a question with no
/// tokens, whose vector is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub vector: EmbeddingVector,
    pub empty_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    dim: usize,
    seed: u64,
    weights: TokenWeights,
}

impl Encoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        Self::with_weights(dim, seed, TokenWeights::default())
    }

    pub fn with_weights(dim: usize, seed: u64, weights: TokenWeights) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("embedding dimension must be at least 2, got {dim}")));
        }
        Ok(Encoder { dim, seed, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, question: &str) -> Encoding {
        let tokens = tokenize(question);
        if tokens.is_empty() {
            return Encoding {
                vector: EmbeddingVector::zeros(self.dim),
                empty_input: true,
            };
        }
        let mut values = vec![0.0; self.dim];
        for (feature, weight) in self.features(&tokens) {
            let h = seed::hash_token(self.seed, &feature);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            values[bucket] += sign * weight;
        }
        Encoding {
            vector: EmbeddingVector::normalized(values),
            empty_input: false,
        }
    }

    pub fn embed(&self, question: &str) -> EmbeddingVector {
        self.encode(question).vector
    }

    fn features(&self, tokens: &[String]) -> Vec<(String, f64)> {
        let w = &self.weights;
        let mut out = Vec::with_capacity(tokens.len() + 1);
        let mut operand = 0;
        let mut after_mod = false;
        for tok in tokens {
            if matches!(tok.as_str(), "+" | "-" | "*" | "/") {
                out.push((format!("op:{tok}"), w.operator));
            } else if tok == "mod" {
                out.push(("kw:mod".to_string(), w.modulus));
                after_mod = true;
            } else if after_mod {
                out.push((format!("m:{tok}"), w.modulus));
                after_mod = false;
            } else {
                out.push((format!("arg{operand}:{tok}"), w.operand));
                operand += 1;
            }
        }
        if tokens.len() > 1 && w.expression != 0.0 {
            out.push((format!("expr:{}", tokens.join(" ")), w.expression));
        }
        out
    }
}

/// One-shot form of [`Encoder::embed`].
pub fn embed(question: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    Ok(Encoder::new(dim, seed)?.embed(question))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The L auxiliary exemplars nearest to a query, most similar first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Neighborhood {
    pub entries: Vec<(u64, f64)>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|(id, _)| *id)
    }
}

/// Exhaustive top-L by cosine similarity, ties broken by ascending id.
pub fn retrieve_neighborhood(
    query: &EmbeddingVector,
    aux: &[(u64, EmbeddingVector)],
    l: usize,
) -> Result<Neighborhood> {
    if l == 0 {
        return Err(Error::Contract("neighborhood size must be at least 1".into()));
    }
    let mut scored = aux
        .iter()
        .map(|(id, v)| Ok((*id, cosine_similarity(query, v)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(l);
    Ok(Neighborhood { entries: scored })
}
