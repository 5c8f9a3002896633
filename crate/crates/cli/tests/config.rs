use std::io::Write;

use fedgrpo_cli::config::*;
use fedgrpo_cli::CliError;
use fedgrpo_core::client::EvaluationMode;
use fedgrpo_core::server::NormalizationAxis;
use fedgrpo_core::taskgen::{Domain, PartitionMode};
use fedgrpo_core::Scenario;

fn file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn empty_file_gives_builtin_defaults() {
    let f = file("");
    let cfg = parse_config(Some(f.path()), &[]).unwrap();
    let p = &cfg.scenario.protocol;
    assert_eq!(p.neighborhood_size, 20);
    assert_eq!(p.experts, 2);
    assert_eq!(p.group_size, 8);
    assert_eq!(p.rounds, 320);
    assert_eq!(p.c_group, 8.0);
    assert_eq!(p.c_format, 1.0);
    assert_eq!(p.epsilon, 1e-4);
    assert_eq!(cfg.scenario.temperature, 0.7);
    assert_eq!(cfg.scenario.partition, PartitionMode::Dirichlet { beta: 0.1 });
    assert_eq!(cfg.scenario.aux_size, 100);
    assert_eq!(cfg.scenario, Scenario::default());
    assert_eq!(cfg, parse_config(None, &[]).unwrap());
}

#[test]
fn flags_override_file_override_defaults() {
    let f = file("beta = 0.3\nK = 6\n");
    let cfg = parse_config(Some(f.path()), &["beta=0.5".into()]).unwrap();
    assert_eq!(cfg.scenario.partition, PartitionMode::Dirichlet { beta: 0.5 });
    assert_eq!(cfg.scenario.num_clients, 6);
    assert_eq!(cfg.scenario.protocol.experts, 2);
}

#[test]
fn too_many_experts_is_rejected() {
    let f = file("M = 5\nK = 4\n");
    let err = parse_config(Some(f.path()), &[]).unwrap_err();
    assert!(err.to_string().contains("M=5"), "{err}");
    assert!(parse_config(None, &["K=4".into(), "M=4".into()]).is_ok());
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let f = file("experts = 2\nlearning_rte = 0.1\n");
    let err = parse_config(Some(f.path()), &[]).unwrap_err();
    assert!(matches!(err, CliError::Syntax { line: 2, .. }), "{err}");
    assert!(parse_config(None, &["bogus=1".into()]).is_err());
    assert!(parse_config(None, &["G".into()]).is_err());
    assert!(parse_config(None, &["G=0".into()]).is_err());
    assert!(parse_config(None, &["L=0".into()]).is_err());
    assert!(parse_config(None, &["epsilon=0".into()]).is_err());
    assert!(parse_config(None, &["eta=inf".into()]).is_err());
    assert!(parse_config(None, &["T=ten".into()]).is_err());
    assert!(parse_config(None, &["evaluation_mode=oracle".into()]).is_err());
    assert!(parse_config(None, &["beta=-1".into()]).is_err());
    assert!(parse_config(Some(std::path::Path::new("/nonexistent/cfg")), &[]).is_err());
}

#[test]
fn every_key_is_settable() {
    let text = "\
# full config
seed = 9
p = 11
domains = add:100, mix:120
clients = 5
partition = iid
beta = 0.7
aux_size = 20
server_size = 30
test_size = 40
L = 10
M = 3
G = 4
T = 7
epsilon = 0.001
eta = 0.2
temperature = 1.1
c_group = 4
c_format = 0.5
normalization_axis = expert
selection = random
eval_every = 3
questions_per_round = 2
competence_ema = 0.25
evaluation_mode = me_only
knn_neighbors = 3
embed_dim = 32
policy_dim = 128
policy_expression_weight = 4
checkpoint_every = 2
execution = sequential
corpus_file = corpus.jsonl
output_dir = out/x
";
    let f = file(text);
    let cfg = parse_config(Some(f.path()), &[]).unwrap();
    let s = &cfg.scenario;
    assert_eq!(s.seed(), 9);
    assert_eq!(s.task.modulus, 11);
    assert_eq!(s.task.domains, vec![(Domain::Add, 100), (Domain::Mix, 120)]);
    assert_eq!(s.num_clients, 5);
    assert_eq!(s.partition, PartitionMode::Iid);
    assert_eq!((s.aux_size, s.server_size, s.test_size), (20, 30, 40));
    let p = &s.protocol;
    assert_eq!((p.neighborhood_size, p.experts, p.group_size, p.rounds), (10, 3, 4, 7));
    assert_eq!((p.epsilon, p.learning_rate, p.c_group, p.c_format), (0.001, 0.2, 4.0, 0.5));
    assert_eq!(p.axis, NormalizationAxis::Expert);
    assert_eq!((p.eval_every, p.questions_per_round, p.competence_ema), (3, 2, Some(0.25)));
    assert_eq!(s.temperature, 1.1);
    assert_eq!(s.evaluation_mode, EvaluationMode::MeOnly);
    assert_eq!((s.knn_neighbors, s.embed_dim, s.policy_dim), (3, 32, 128));
    assert_eq!(s.policy_weights.expression, 4.0);
    assert_eq!(cfg.checkpoint_every, 2);
    assert_eq!(cfg.execution, fedgrpo_core::Execution::Sequential);
    assert_eq!(cfg.corpus_file.as_deref(), Some(std::path::Path::new("corpus.jsonl")));
    assert_eq!(cfg.output_dir, std::path::PathBuf::from("out/x"));
    assert_eq!(KEYS.len(), cfg.settings().len());
}
