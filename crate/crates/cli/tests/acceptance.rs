//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedgrpo_cli::config::parse_config;
use fedgrpo_cli::runner::{run_ablation, run_experiment, RunReport, MANIFEST_FILE, ROUNDS_FILE, TRAFFIC_FILE};
use fedgrpo_cli::ExperimentConfig;
use fedgrpo_core::embedding::EmbeddingVector;
use fedgrpo_core::netsim::{Direction, Message, MessageKind};
use fedgrpo_core::policy::{GradientVector, PolicyParams};
use fedgrpo_core::seed;
use fedgrpo_core::server::{group_relative_normalize, GroupRewards, NormalizationAxis};
use ndarray::Array2;
use rand::Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const SEEDS: [u64; 3] = [0, 1, 2];
const MB: f64 = 1e6;

fn config(dir: &Path, sets: &[&str]) -> Result<ExperimentConfig, fedgrpo_cli::CliError> {
    let mut all: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    all.push(format!("output_dir={}", dir.display()));
    parse_config(None, &all)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn normalization(_: &Path) -> Outcome {
    let start = Instant::now();
    let eps = 1e-4;
    let mut rng = seed::rng(1);
    let mut worst_sum: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for i in 0..1000 {
        let n = rng.random_range(2..17);
        let raw: Vec<f64> = if i % 2 == 0 {
            (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
        } else {
            (0..n).map(|_| [0.0, 1.0, 8.0, 9.0][rng.random_range(0..4)]).collect()
        };
        let g = group_relative_normalize(&raw, eps)?;
        let sigma = pop_std(&raw);
        let want = if sigma == 0.0 { 0.0 } else { sigma / (sigma + eps) };
        worst_sum = worst_sum.max(g.values.iter().sum::<f64>().abs());
        worst_std = worst_std.max((pop_std(&g.values) - want).abs());
    }
    let pair = group_relative_normalize(&[1.0, 0.0], eps)?.values;
    let pair_err = (pair[0] - 0.99980004).abs().max((pair[1] + 0.99980004).abs());
    let elapsed = start.elapsed();
    let ok = worst_sum <= 1e-9 && worst_std <= 1e-9 && pair_err <= 1e-9 && elapsed < Duration::from_secs(1);
    Ok((
        ok,
        format!(
            "max |sum R| {worst_sum:.1e}, max std error {worst_std:.1e}, [1,0] -> [{:.8}, {:.8}], {}",
            pair[0],
            pair[1],
            secs(elapsed)
        ),
    ))
}

fn degenerate(dir: &Path) -> Outcome {
    let g = GroupRewards::compute(vec![vec![9.0, 9.0]; 8], NormalizationAxis::Candidate, 1e-4)?;
    let zero_weights = g.candidate_weights().iter().all(|&w| w == 0.0);

    // no reward signal at all: every raw reward is 0
    let cfg = config(dir, &["c_group=0", "c_format=0", "T=25"])?;
    let (mut fed, params) = cfg.scenario.build(cfg.execution)?;
    let out = fed.run_training(params.clone())?;
    let all_zero = out.records.iter().all(|r| r.update_norm == 0.0);
    let unchanged = out.params == params;
    Ok((
        zero_weights && all_zero && unchanged,
        format!(
            "all-equal group weights zero: {zero_weights}; 25 rounds with constant rewards: update norms all 0: {all_zero}, theta bit-identical: {unchanged}"
        ),
    ))
}

fn gradient(_: &Path) -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(33);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let cases = 25;
    for _ in 0..cases {
        let (n, d) = (rng.random_range(2..9), rng.random_range(1..7));
        let theta = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let temp = rng.random_range(0.3..1.5);
        let x = EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let answers: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let params = PolicyParams::from_parts(theta, temp, answers)?;
        let a = rng.random_range(0..n).to_string();
        let grad = params.grad_log_prob(&x, &a)?.grad;
        for i in 0..n {
            for j in 0..d {
                let mut bump = GradientVector::zeros(n, d);
                bump.grad[[i, j]] = 1.0;
                let up = params.apply_update(&bump, h)?.log_prob(&x, &a)?;
                let down = params.apply_update(&bump, -h)?.log_prob(&x, &a)?;
                let fd = (up - down) / (2.0 * h);
                let rel = (grad[[i, j]] - fd).abs() / fd.abs().max(grad[[i, j]].abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst < 1e-6 && elapsed < Duration::from_secs(5),
        format!("{cases} random instances, max relative error {worst:.2e}, {}", secs(elapsed)),
    ))
}

const LEARNING: &[&str] = &["modulus=5", "domains=add:1000", "K=4", "partition=iid", "T=300", "execution=sequential"];

fn learning(dir: &Path) -> Outcome {
    let mut first = Vec::new();
    let mut last = Vec::new();
    let mut slowest = Duration::ZERO;
    for s in SEEDS {
        let seed = format!("seed={s}");
        let mut sets = LEARNING.to_vec();
        sets.push(&seed);
        let cfg = config(&dir.join(format!("seed-{s}")), &sets)?;
        let start = Instant::now();
        let r = run_experiment(&cfg)?;
        slowest = slowest.max(start.elapsed());
        first.push(r.curve[0].overall);
        last.push(r.final_eval().overall);
    }
    let (r0, rt) = (mean(&first), mean(&last));
    let ok = (r0 - 0.2).abs() <= 0.05 && rt > 0.9 && slowest < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "pass@1 round 0 {r0:.3} (per seed {first:.3?}), round 300 {rt:.3} (per seed {last:.3?}), slowest single-threaded run {}",
            secs(slowest)
        ),
    ))
}

fn expert_selection(dir: &Path) -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    let mut questions = 0;
    let (mut comp_final, mut rand_final) = (Vec::new(), Vec::new());
    for s in SEEDS {
        let seed = format!("seed={s}");
        let run = |rule: &str| -> Result<RunReport, fedgrpo_cli::CliError> {
            let selection = format!("selection={rule}");
            let cfg = config(
                &dir.join(format!("{rule}-{s}")),
                &["evaluation_mode=me_only", &selection, &seed],
            )?;
            run_experiment(&cfg)
        };
        let comp = run("competence")?;
        for rec in &comp.records {
            for step in &rec.steps {
                let es = &step.expert_set;
                if let (Some(sel), Some(all)) = (es.mean_member_competence(), es.mean_all_competence()) {
                    gaps.push(sel - all);
                    questions += 1;
                }
            }
        }
        comp_final.push(comp.final_eval().overall);
        rand_final.push(run("random")?.final_eval().overall);
    }
    let gap = mean(&gaps);
    let (c, r) = (mean(&comp_final), mean(&rand_final));
    let elapsed = start.elapsed();
    let ok = questions >= 200 && gap >= 0.15 && c - r >= 0.05 && elapsed < Duration::from_secs(300);
    Ok((
        ok,
        format!(
            "selected minus all-client mean competence {gap:.3} over {questions} questions; final pass@1 competence {c:.3} vs random {r:.3} (gap {:.3}); {}",
            c - r,
            secs(elapsed)
        ),
    ))
}

fn communication(dir: &Path) -> Outcome {
    let start = Instant::now();
    let small = run_experiment(&config(&dir.join("dim-2"), &["policy_dim=2"])?)?;
    let large = run_experiment(&config(&dir.join("dim-20000"), &["policy_dim=20000"])?)?;
    let p_small = 7 * 2;
    let p_large = 7 * 20000;
    let equal_uplink = small.comm.fedgrpo_uplink_bytes == large.comm.fedgrpo_uplink_bytes;
    let c = &large.comm;
    let fedpet = c.fedpetuning_bytes_by_model["7B"];
    let ordering = c.fedgrpo_bytes < c.dpsda_bytes && c.dpsda_bytes < fedpet;
    let ten_x = c.fedgrpo_bytes * 10 <= c.dpsda_bytes;
    let total_mb = c.fedgrpo_bytes as f64 / MB;
    let magnitude = (0.24..=24.0).contains(&total_mb);
    let calibrated = c.dpsda_bytes == 102_500_000 && fedpet == 6_100_000_000;
    let elapsed = start.elapsed();
    Ok((
        equal_uplink && ordering && ten_x && magnitude && calibrated && elapsed < Duration::from_secs(60),
        format!(
            "uplink {} B at {p_small} params vs {} B at {p_large} params; fedgrpo {total_mb:.3} MB (up {:.3} MB) < dpsda {:.1} MB < fedpetuning-7B {:.2} GB, dpsda/fedgrpo {:.0}x; {}",
            small.comm.fedgrpo_uplink_bytes,
            large.comm.fedgrpo_uplink_bytes,
            c.fedgrpo_uplink_bytes as f64 / MB,
            c.dpsda_bytes as f64 / MB,
            fedpet as f64 / 1e9,
            c.dpsda_bytes as f64 / c.fedgrpo_bytes as f64,
            secs(elapsed)
        ),
    ))
}

fn replay(dir: &Path) -> Outcome {
    let mut sets = LEARNING.to_vec();
    sets.push("seed=0");
    let original = dir.join("original");
    run_experiment(&config(&original, &sets)?)?;
    let manifest = original.join(MANIFEST_FILE);
    let mut dirs = Vec::new();
    for (name, exec) in [("replay-a", "parallel"), ("replay-b", "sequential")] {
        let d = dir.join(name);
        let cfg = parse_config(Some(&manifest), &[format!("output_dir={}", d.display()), format!("execution={exec}")])?;
        run_experiment(&cfg)?;
        dirs.push(d);
    }
    let mut same = true;
    for f in [ROUNDS_FILE, TRAFFIC_FILE] {
        let base = fs::read(original.join(f))?;
        for d in &dirs {
            same &= fs::read(d.join(f))? == base;
        }
    }
    let rounds = fs::read_to_string(original.join(ROUNDS_FILE))?.lines().count();
    Ok((
        same,
        format!("rounds.jsonl ({rounds} records) and traffic.csv byte-identical across the original run and two manifest replays (parallel and sequential)"),
    ))
}

fn privacy(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = config(dir, &[])?;
    let (fed, params) = cfg.scenario.build(cfg.execution)?;
    let mut fed = fed.with_capture();
    fed.run_training(params)?;
    let shard_questions: BTreeSet<&str> =
        fed.clients().iter().flat_map(|c| c.shard()).map(|i| i.question.as_str()).collect();
    let shard_answers: BTreeSet<&str> = fed.clients().iter().flat_map(|c| c.shard()).map(|i| i.answer.as_str()).collect();

    let (mut frames, mut hits) = (0usize, 0usize);
    let mut kinds = BTreeSet::new();
    for frame in fed.bus().captured().iter().filter(|f| f.direction == Direction::Uplink) {
        frames += 1;
        let msg = Message::decode(&frame.bytes)?;
        kinds.insert(msg.kind());
        hits += shard_questions
            .iter()
            .filter(|q| frame.bytes.windows(q.len()).any(|w| w == q.as_bytes()))
            .count();
        hits += msg.payload.text_fields().iter().filter(|t| shard_answers.contains(**t)).count();
    }
    let scalar_only = kinds.iter().all(|k| matches!(k, MessageKind::CompetenceReply | MessageKind::RewardReply));
    let elapsed = start.elapsed();
    Ok((
        hits == 0 && scalar_only && frames > 0 && elapsed < Duration::from_secs(60),
        format!(
            "{frames} uplink frames scanned against {} shard questions and {} answer strings: {hits} hits; uplink kinds {:?}; {}",
            shard_questions.len(),
            shard_answers.len(),
            kinds.iter().map(|k| k.label()).collect::<Vec<_>>(),
            secs(elapsed)
        ),
    ))
}

fn ablation(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = config(dir, &[])?;
    let values: Vec<String> = ["4", "8", "12", "16", "20"].iter().map(|s| s.to_string()).collect();
    let report = run_ablation(&cfg, "K", &values, SEEDS.len() as u32)?;
    let means: Vec<(String, f64)> = report.points.iter().map(|p| (p.value.clone(), p.mean_overall())).collect();
    let at = |k: &str| means.iter().find(|(v, _)| v == k).map(|(_, m)| *m).unwrap_or(f64::NAN);
    let elapsed = start.elapsed();
    Ok((
        at("20") >= at("4") && elapsed < Duration::from_secs(600),
        format!(
            "3-seed mean final pass@1 by K: {}; {}",
            means.iter().map(|(k, m)| format!("K={k} {m:.3}")).collect::<Vec<_>>().join(", "),
            secs(elapsed)
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn(&Path) -> Outcome); 9] = [
        ("1 group-relative normalization", normalization),
        ("2 degenerate-group safety", degenerate),
        ("3 gradient fidelity", gradient),
        ("4 learning at desk scale", learning),
        ("5 expert selection effectiveness", expert_selection),
        ("6 communication claims", communication),
        ("7 determinism and replay", replay),
        ("8 privacy boundary", privacy),
        ("9 client-count ablation", ablation),
    ];
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let dir = tmp.path().join(format!("criterion-{}", i + 1));
        let (ok, detail) = match check(&dir) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!("criterion {name}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
