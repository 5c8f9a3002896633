use std::fs;
use std::path::Path;

use fedgrpo_cli::config::parse_config;
use fedgrpo_cli::runner::*;
use fedgrpo_cli::{CliError, ExperimentConfig};

fn quick(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut sets: Vec<String> = [
        "domains=add:150,sub:150,mul:150",
        "aux_size=40",
        "server_size=80",
        "test_size=30",
        "K=4",
        "T=10",
        "eval_every=4",
        "policy_dim=64",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.push(format!("output_dir={}", dir.display()));
    sets.extend(extra.iter().map(|s| s.to_string()));
    parse_config(None, &sets).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = quick(&dir, &["checkpoint_every=5"]);
    let report = run_experiment(&cfg).unwrap();
    for f in [ROUNDS_FILE, SUMMARY_FILE, TRAFFIC_FILE, EVAL_FILE, MANIFEST_FILE, COMM_FILE, CORPUS_FILE, POLICY_FILE] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    assert!(!dir.join(".lock").exists());
    assert_eq!(lines(&dir.join(ROUNDS_FILE)).len(), 10);
    // ceil(10 / 4) + 1 evaluation rows
    let eval = lines(&dir.join(EVAL_FILE));
    assert_eq!(eval[0], "round,pass1_overall,pass1_add,pass1_sub,pass1_mul");
    assert_eq!(eval.len() - 1, 10usize.div_ceil(4) + 1);
    let summary = lines(&dir.join(SUMMARY_FILE));
    assert!(summary[0].starts_with("round,question_id,experts,mu,sigma,update_norm,bytes_up,bytes_down,pass1_overall"));
    assert_eq!(summary.len(), 11);
    assert_eq!(lines(&dir.join(TRAFFIC_FILE))[0], "round,kind,direction,bytes");
    assert_eq!(lines(&dir.join(CORPUS_FILE)).len(), 450);
    let ckpts: Vec<_> = fs::read_dir(dir.join(CHECKPOINT_DIR)).unwrap().collect();
    assert_eq!(ckpts.len(), 2);
    assert_eq!(report.records.len(), 10);
    let comm: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(COMM_FILE)).unwrap()).unwrap();
    assert_eq!(comm["fedgrpo_bytes"].as_u64().unwrap(), report.comm.fedgrpo_bytes);
    assert!(comm["fedpetuning_bytes_by_model"]["7B"].is_u64());
    let policy = fedgrpo_core::policy::PolicyParams::load(&dir.join(POLICY_FILE)).unwrap();
    assert_eq!(policy.answer_space().len(), 7);
}

#[test]
fn manifest_replays_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    run_experiment(&quick(&first, &[])).unwrap();
    let replay_dir = tmp.path().join("b");
    let replay = parse_config(
        Some(&first.join(MANIFEST_FILE)),
        &[format!("output_dir={}", replay_dir.display()), "execution=sequential".into()],
    )
    .unwrap();
    run_experiment(&replay).unwrap();
    for f in [ROUNDS_FILE, TRAFFIC_FILE, EVAL_FILE, SUMMARY_FILE, POLICY_FILE] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(replay_dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corpus_file_import_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    run_experiment(&quick(&a, &[])).unwrap();
    let b = tmp.path().join("b");
    let corpus = format!("corpus_file={}", a.join(CORPUS_FILE).display());
    run_experiment(&quick(&b, &[&corpus])).unwrap();
    assert_eq!(fs::read(a.join(ROUNDS_FILE)).unwrap(), fs::read(b.join(ROUNDS_FILE)).unwrap());
}

#[test]
fn me_only_runs_never_use_answer_based_scoring() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run_experiment(&quick(&tmp.path().join("r"), &["evaluation_mode=me_only"])).unwrap();
    for rec in &r.records {
        assert!(rec.steps[0].pathways.iter().all(|p| *p == fedgrpo_core::client::Pathway::ME));
    }
    let text = fs::read_to_string(tmp.path().join("r").join(ROUNDS_FILE)).unwrap();
    assert!(!text.contains("\"AE\""));
}

#[test]
fn locked_or_unwritable_output_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("busy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".lock"), "1").unwrap();
    assert!(matches!(run_experiment(&quick(&dir, &[])), Err(CliError::Locked(_))));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert!(matches!(run_experiment(&quick(&blocker.join("sub"), &[])), Err(CliError::Io { .. })));
}

#[test]
fn output_root_env_applies_to_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = parse_config(None, &["output_dir=rel/run".into()]).unwrap();
    std::env::set_var(fedgrpo_cli::config::OUTPUT_ROOT_ENV, tmp.path());
    assert_eq!(cfg.resolved_output_dir(), tmp.path().join("rel/run"));
    let abs = parse_config(None, &["output_dir=/abs/run".into()]).unwrap();
    assert_eq!(abs.resolved_output_dir(), std::path::PathBuf::from("/abs/run"));
    std::env::remove_var(fedgrpo_cli::config::OUTPUT_ROOT_ENV);
}

#[test]
fn ablation_sweeps_write_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("abl");
    let cfg = quick(&dir, &["T=3"]);
    let (param, values) = parse_sweep("M=1,2,4").unwrap();
    assert_eq!(param, "experts");
    let r = run_ablation(&cfg, param, &values, 2).unwrap();
    assert_eq!(r.points.len(), 3);
    let rows = lines(&dir.join(ABLATION_FILE));
    assert!(rows[0].starts_with("param,value,runs,pass1_overall"));
    assert_eq!(rows.len(), 4);
    assert_eq!(lines(&dir.join(ABLATION_RUNS_FILE)).len(), 1 + 6);
    assert!(dir.join("experts-4").join("seed-1").join(MANIFEST_FILE).is_file());
    assert_eq!(r.points[0].seeds, vec![0, 1]);

    let single = tmp.path().join("single");
    let r = run_ablation(&quick(&single, &["T=2"]), "G", &["4".into()], 1).unwrap();
    assert_eq!(r.points.len(), 1);
    assert_eq!(lines(&single.join(ABLATION_FILE)).len(), 2);
}

#[test]
fn invalid_sweeps_are_rejected() {
    assert!(parse_sweep("T=1,2").is_err());
    assert!(parse_sweep("K").is_err());
    assert!(parse_sweep("K=").is_err());
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick(&tmp.path().join("x"), &[]);
    assert!(run_ablation(&cfg, "M", &["1".into(), "9".into()], 1).is_err());
    assert!(run_ablation(&cfg, "K", &["4".into()], 0).is_err());
    let iid = quick(&tmp.path().join("y"), &["partition=iid"]);
    assert!(run_ablation(&iid, "beta", &["0.5".into()], 1).is_err());
}

#[test]
fn report_aggregates_runs_without_rerunning() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&quick(&a, &[])).unwrap();
    run_experiment(&quick(&b, &["seed=1"])).unwrap();
    let text = report(&[a.clone(), b.clone()]).unwrap();
    assert!(text.contains("pass1_overall"));
    assert!(text.contains("mean ± std (2 runs)"));
    assert_eq!(text.lines().count(), 2 + 3);
    let one = load_run(&a).unwrap();
    assert_eq!(one.final_round, 10);
    assert_eq!(one.pass1[0].0, "pass1_overall");
    assert!(report(&[tmp.path().join("missing")]).is_err());
}
