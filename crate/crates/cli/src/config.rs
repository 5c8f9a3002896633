//! Experiment configuration.
//!
//! A config file is plain `key = value` lines. `#` starts a comment, blank
//! lines are ignored and every key may appear at most once. Unknown keys are
//! rejected. Values given with `--set key=value` override the file, and the
//! file overrides the built-in defaults. A run manifest (`manifest.json`) is
//! accepted anywhere a config file is.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedgrpo_core::client::EvaluationMode;
use fedgrpo_core::server::{NormalizationAxis, SelectionRule};
use fedgrpo_core::taskgen::{Domain, PartitionMode};
use fedgrpo_core::{Execution, Scenario};
use serde_json::Value;

use crate::error::{io_err, CliError, Result};

/// Environment variable that, when set, is prepended to relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDGRPO_OUTPUT_ROOT";

pub const MANIFEST_FORMAT: &str = "fedgrpo-run";

/// Canonical keys in file order, with a short description for `--help`-style
/// listings.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed every other seed is derived from"),
    ("modulus", "task modulus p; answers are 0..p-1"),
    ("domains", "comma-separated domain:count pairs, e.g. add:600,mul:600"),
    ("clients", "number of clients K"),
    ("partition", "iid or dirichlet"),
    ("beta", "Dirichlet concentration"),
    ("aux_size", "labeled auxiliary exemplars held by the server"),
    ("server_size", "unlabeled server training questions"),
    ("test_size", "held-out test questions"),
    ("neighborhood", "auxiliary neighborhood size L"),
    ("experts", "experts per question M"),
    ("group_size", "candidates per question G"),
    ("rounds", "communication rounds T"),
    ("epsilon", "normalization epsilon"),
    ("learning_rate", "policy step size eta"),
    ("temperature", "policy sampling temperature"),
    ("c_group", "correctness reward coefficient"),
    ("c_format", "format reward coefficient"),
    ("normalization_axis", "candidate or expert"),
    ("selection", "competence or random"),
    ("eval_every", "rounds between test evaluations"),
    ("questions_per_round", "server questions processed per round"),
    ("competence_ema", "off, or smoothing factor in (0, 1]"),
    ("evaluation_mode", "mixed or me_only"),
    ("knn_neighbors", "neighbors used by the client kNN evaluator"),
    ("embed_dim", "retrieval embedding dimension"),
    ("policy_dim", "policy feature dimension"),
    ("policy_expression_weight", "weight of the whole-expression policy feature"),
    ("checkpoint_every", "rounds between policy checkpoints, 0 for final only"),
    ("execution", "parallel or sequential"),
    ("corpus_file", "optional JSONL corpus to use instead of generating one"),
    ("output_dir", "artifact directory"),
];

const ALIASES: &[(&str, &str)] = &[
    ("p", "modulus"),
    ("K", "clients"),
    ("L", "neighborhood"),
    ("M", "experts"),
    ("G", "group_size"),
    ("T", "rounds"),
    ("eta", "learning_rate"),
];

/// Keys that describe where a run writes, not what it computes. They are
/// left out of manifests so a replay picks its own destination.
const LOCATION_KEYS: &[&str] = &["output_dir"];

pub fn canonical_key(key: &str) -> Result<&'static str> {
    let key = key.trim();
    if let Some((_, canon)) = ALIASES.iter().find(|(a, _)| *a == key) {
        return Ok(canon);
    }
    KEYS.iter()
        .map(|(k, _)| *k)
        .find(|k| *k == key)
        .ok_or_else(|| CliError::Config(format!("unknown key `{key}`; known keys: {}", known_keys())))
}

fn known_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

/// Resolved, validated experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub execution: Execution,
    pub checkpoint_every: u32,
    pub corpus_file: Option<PathBuf>,
    pub output_dir: PathBuf,
    settings: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_settings(default_settings()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    /// Every setting as canonical key/value strings.
    pub fn settings(&self) -> &BTreeMap<&'static str, String> {
        &self.settings
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.settings.get(canonical_key(key).ok()?).map(String::as_str)
    }

    /// Returns a copy with `key` set to `value`, re-validated.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut settings = self.settings.clone();
        settings.insert(canonical_key(key)?, value.trim().to_string());
        ExperimentConfig::from_settings(settings)
    }

    /// Settings that determine the run's results.
    pub fn manifest_settings(&self) -> BTreeMap<&'static str, String> {
        self.settings
            .iter()
            .filter(|(k, _)| !LOCATION_KEYS.contains(k))
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    }

    /// Output directory with the output-root environment override applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() && !root.is_empty() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn from_settings(settings: BTreeMap<&'static str, String>) -> Result<Self> {
        let get = |key: &str| -> &str { settings.get(key).map(String::as_str).unwrap_or("") };

        let mut scenario = Scenario::default();
        scenario.task.modulus = num(get("modulus"), "modulus")?;
        scenario.task.domains = parse_domains(get("domains"))?;
        scenario.num_clients = num(get("clients"), "clients")?;
        let beta: f64 = num(get("beta"), "beta")?;
        scenario.partition = match get("partition") {
            "iid" => PartitionMode::Iid,
            "dirichlet" => PartitionMode::Dirichlet { beta },
            other => return Err(bad("partition", other, "iid or dirichlet")),
        };
        scenario.aux_size = num(get("aux_size"), "aux_size")?;
        scenario.server_size = num(get("server_size"), "server_size")?;
        scenario.test_size = num(get("test_size"), "test_size")?;

        let p = &mut scenario.protocol;
        p.seed = num(get("seed"), "seed")?;
        p.neighborhood_size = num(get("neighborhood"), "neighborhood")?;
        p.experts = num(get("experts"), "experts")?;
        p.group_size = num(get("group_size"), "group_size")?;
        p.rounds = num(get("rounds"), "rounds")?;
        p.epsilon = num(get("epsilon"), "epsilon")?;
        p.learning_rate = num(get("learning_rate"), "learning_rate")?;
        p.c_group = num(get("c_group"), "c_group")?;
        p.c_format = num(get("c_format"), "c_format")?;
        p.axis = NormalizationAxis::parse(get("normalization_axis"))?;
        p.selection = SelectionRule::parse(get("selection"))?;
        p.eval_every = num(get("eval_every"), "eval_every")?;
        p.questions_per_round = num(get("questions_per_round"), "questions_per_round")?;
        p.competence_ema = match get("competence_ema") {
            "off" | "none" | "" => None,
            v => Some(num(v, "competence_ema")?),
        };

        scenario.temperature = num(get("temperature"), "temperature")?;
        scenario.evaluation_mode = match get("evaluation_mode") {
            "mixed" => EvaluationMode::Mixed,
            "me_only" => EvaluationMode::MeOnly,
            other => return Err(bad("evaluation_mode", other, "mixed or me_only")),
        };
        scenario.knn_neighbors = num(get("knn_neighbors"), "knn_neighbors")?;
        scenario.embed_dim = num(get("embed_dim"), "embed_dim")?;
        scenario.policy_dim = num(get("policy_dim"), "policy_dim")?;
        scenario.policy_weights.expression = num(get("policy_expression_weight"), "policy_expression_weight")?;

        let execution = match get("execution") {
            "parallel" => Execution::Parallel,
            "sequential" => Execution::Sequential,
            other => return Err(bad("execution", other, "parallel or sequential")),
        };
        let checkpoint_every = num(get("checkpoint_every"), "checkpoint_every")?;
        let corpus_file = match get("corpus_file") {
            "" => None,
            f => Some(PathBuf::from(f)),
        };
        let output_dir = match get("output_dir") {
            "" => return Err(CliError::Config("output_dir must not be empty".into())),
            d => PathBuf::from(d),
        };

        validate(&scenario)?;
        Ok(ExperimentConfig {
            scenario,
            execution,
            checkpoint_every,
            corpus_file,
            output_dir,
            settings,
        })
    }
}

fn validate(s: &Scenario) -> Result<()> {
    s.task.validate()?;
    let k = s.num_clients;
    if k == 0 {
        return Err(CliError::Config("clients (K) must be at least 1".into()));
    }
    if s.protocol.experts > k {
        return Err(CliError::Config(format!(
            "experts (M={}) cannot exceed clients (K={k}); lower M or raise K",
            s.protocol.experts
        )));
    }
    if let PartitionMode::Dirichlet { beta } = s.partition {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(CliError::Config(format!("beta must be positive, got {beta}")));
        }
    }
    if !(s.temperature > 0.0 && s.temperature.is_finite()) {
        return Err(CliError::Config(format!("temperature must be positive, got {}", s.temperature)));
    }
    if s.knn_neighbors == 0 {
        return Err(CliError::Config("knn_neighbors must be at least 1".into()));
    }
    if !s.policy_weights.expression.is_finite() {
        return Err(CliError::Config("policy_expression_weight must be finite".into()));
    }
    s.protocol.validate(k)?;
    Ok(())
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Config(format!("invalid {key} `{value}` (expected {expected})"))
}

fn num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for {key}")))
}

fn parse_domains(spec: &str) -> Result<Vec<(Domain, usize)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|entry| {
            let (name, count) = entry
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("domain entry `{entry}` must look like add:600")))?;
            Ok((Domain::parse(name)?, num(count, "domain count")?))
        })
        .collect()
}

fn format_domains(domains: &[(Domain, usize)]) -> String {
    domains
        .iter()
        .map(|(d, n)| format!("{}:{n}", d.label()))
        .collect::<Vec<_>>()
        .join(",")
}

/// Built-in defaults, taken from [`Scenario::default`].
pub fn default_settings() -> BTreeMap<&'static str, String> {
    let s = Scenario::default();
    let p = &s.protocol;
    let (partition, beta) = match s.partition {
        PartitionMode::Iid => ("iid", 0.1),
        PartitionMode::Dirichlet { beta } => ("dirichlet", beta),
    };
    let axis = match p.axis {
        NormalizationAxis::Candidate => "candidate",
        NormalizationAxis::Expert => "expert",
    };
    let selection = match p.selection {
        SelectionRule::Competence => "competence",
        SelectionRule::Random => "random",
    };
    let mode = match s.evaluation_mode {
        EvaluationMode::Mixed => "mixed",
        EvaluationMode::MeOnly => "me_only",
    };
    let pairs: Vec<(&'static str, String)> = vec![
        ("seed", p.seed.to_string()),
        ("modulus", s.task.modulus.to_string()),
        ("domains", format_domains(&s.task.domains)),
        ("clients", s.num_clients.to_string()),
        ("partition", partition.into()),
        ("beta", beta.to_string()),
        ("aux_size", s.aux_size.to_string()),
        ("server_size", s.server_size.to_string()),
        ("test_size", s.test_size.to_string()),
        ("neighborhood", p.neighborhood_size.to_string()),
        ("experts", p.experts.to_string()),
        ("group_size", p.group_size.to_string()),
        ("rounds", p.rounds.to_string()),
        ("epsilon", p.epsilon.to_string()),
        ("learning_rate", p.learning_rate.to_string()),
        ("temperature", s.temperature.to_string()),
        ("c_group", p.c_group.to_string()),
        ("c_format", p.c_format.to_string()),
        ("normalization_axis", axis.into()),
        ("selection", selection.into()),
        ("eval_every", p.eval_every.to_string()),
        ("questions_per_round", p.questions_per_round.to_string()),
        ("competence_ema", p.competence_ema.map_or("off".into(), |a| a.to_string())),
        ("evaluation_mode", mode.into()),
        ("knn_neighbors", s.knn_neighbors.to_string()),
        ("embed_dim", s.embed_dim.to_string()),
        ("policy_dim", s.policy_dim.to_string()),
        ("policy_expression_weight", s.policy_weights.expression.to_string()),
        ("checkpoint_every", "0".into()),
        ("execution", "parallel".into()),
        ("corpus_file", String::new()),
        ("output_dir", "runs/latest".into()),
    ];
    pairs.into_iter().collect()
}

/// Parses `key = value` text into canonical key/value pairs.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<&'static str, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |message: String| CliError::Syntax { line: i + 1, message };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected `key = value`, got `{line}`")))?;
        let key = canonical_key(key).map_err(|e| syntax(e.to_string()))?;
        if out.insert(key, value.trim().to_string()).is_some() {
            return Err(syntax(format!("`{key}` is set more than once")));
        }
    }
    Ok(out)
}

fn parse_override(s: &str) -> Result<(&'static str, String)> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` must look like key=value")))?;
    Ok((canonical_key(key)?, value.trim().to_string()))
}

fn manifest_settings(path: &Path, manifest: &Value) -> Result<BTreeMap<&'static str, String>> {
    let malformed = |message: &str| CliError::Artifact {
        path: path.to_path_buf(),
        message: message.into(),
    };
    if manifest.get("format").and_then(Value::as_str) != Some(MANIFEST_FORMAT) {
        return Err(malformed("not a run manifest (format tag missing)"));
    }
    let config = manifest
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed("missing config object"))?;
    let mut out = BTreeMap::new();
    for (k, v) in config {
        let v = v.as_str().ok_or_else(|| malformed("config values must be strings"))?;
        out.insert(canonical_key(k)?, v.to_string());
    }
    Ok(out)
}

/// Builds a config from built-in defaults, then an optional file (key-value
/// text or a run manifest), then `key=value` overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut settings = default_settings();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let from_file = if text.trim_start().starts_with('{') {
            manifest_settings(path, &serde_json::from_str(&text)?)?
        } else {
            parse_key_values(&text)?
        };
        settings.extend(from_file);
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        settings.insert(k, v);
    }
    ExperimentConfig::from_settings(settings)
}
