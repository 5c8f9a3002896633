//! Experiment execution and artifact writing.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fedgrpo_core::netsim::CommSummary;
use fedgrpo_core::seed;
use fedgrpo_core::server::{EvalPoint, RoundRecord};
use fedgrpo_core::taskgen::{read_jsonl, write_jsonl, Domain};
use serde_json::json;

use crate::config::{canonical_key, ExperimentConfig, MANIFEST_FORMAT};
use crate::error::{io_err, CliError, Result};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRAFFIC_FILE: &str = "traffic.csv";
pub const EVAL_FILE: &str = "eval_curve.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMM_FILE: &str = "comm_summary.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

/// Parameters `ablate` may sweep, by canonical key.
pub const SWEEPABLE: [&str; 4] = ["clients", "experts", "beta", "group_size"];

const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub curve: Vec<EvalPoint>,
    pub comm: CommSummary,
}

impl RunReport {
    pub fn final_eval(&self) -> &EvalPoint {
        self.curve.last().expect("round 0 is always evaluated")
    }
}

/// Runs one experiment and writes its artifacts into the configured output
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let dir = cfg.resolved_output_dir();
    let _lock = DirLock::acquire(&dir)?;

    let items = match &cfg.corpus_file {
        Some(path) => read_jsonl(BufReader::new(File::open(path).map_err(io_err(path))?))?,
        None => cfg.scenario.generate_items()?,
    };
    let (mut fed, params) = cfg.scenario.build_with_items(&items, cfg.execution)?;
    write_jsonl(&items, create(&dir.join(CORPUS_FILE))?)?;

    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    }
    let rounds_path = dir.join(ROUNDS_FILE);
    let mut rounds_out = create(&rounds_path)?;
    let every = cfg.checkpoint_every;
    let outcome = fed.run_training_with(params, |params, record| {
        let line = serde_json::to_string(record)?;
        writeln!(rounds_out, "{line}")?;
        if every > 0 && record.round % every == 0 {
            params.save(&ckpt_dir.join(format!("round-{:05}.json", record.round)))?;
        }
        Ok(())
    })?;
    rounds_out.flush().map_err(io_err(&rounds_path))?;
    drop(rounds_out);

    outcome.params.save(&dir.join(POLICY_FILE))?;
    let ledger = fed.ledger();
    ledger.write_csv(create(&dir.join(TRAFFIC_FILE))?)?;
    let domains: Vec<Domain> = fed.bundle().test.keys().copied().collect();
    write_eval_curve(&dir.join(EVAL_FILE), &outcome.curve, &domains)?;
    write_summary(&dir.join(SUMMARY_FILE), &outcome.records, &outcome.curve, &domains)?;

    let p = &cfg.scenario.protocol;
    let comm = CommSummary::from_ledger(ledger, p.rounds as u64, cfg.scenario.num_clients as u64)?;
    fs::write(dir.join(COMM_FILE), serde_json::to_vec_pretty(&comm)?).map_err(io_err(dir.join(COMM_FILE)))?;
    write_manifest(&dir.join(MANIFEST_FILE), cfg)?;

    Ok(RunReport {
        dir,
        records: outcome.records,
        curve: outcome.curve,
        comm,
    })
}

fn write_manifest(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let master = cfg.scenario.seed();
    let seeds: BTreeMap<&str, u64> = ["corpus", "partition", "clients", "encoder", "policy-features"]
        .into_iter()
        .map(|s| (s, seed::derive(master, s, 0)))
        .chain([("master", master)])
        .collect();
    let manifest = json!({
        "format": MANIFEST_FORMAT,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.manifest_settings(),
        "seeds": seeds,
    });
    fs::write(path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(path))
}

fn pass1_header(domains: &[Domain]) -> Vec<String> {
    std::iter::once("pass1_overall".to_string())
        .chain(domains.iter().map(|d| format!("pass1_{}", d.label())))
        .collect()
}

fn pass1_cells(point: &EvalPoint, domains: &[Domain]) -> Vec<String> {
    std::iter::once(point.overall.to_string())
        .chain(
            domains
                .iter()
                .map(|d| point.per_domain.get(d).map_or(String::new(), f64::to_string)),
        )
        .collect()
}

fn write_eval_curve(path: &Path, curve: &[EvalPoint], domains: &[Domain]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["round".to_string()];
    header.extend(pass1_header(domains));
    w.write_record(&header)?;
    for point in curve {
        let mut row = vec![point.round.to_string()];
        row.extend(pass1_cells(point, domains));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_summary(path: &Path, records: &[RoundRecord], curve: &[EvalPoint], domains: &[Domain]) -> Result<()> {
    let evals: BTreeMap<u32, &EvalPoint> = curve.iter().map(|e| (e.round, e)).collect();
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = [
        "round",
        "question_id",
        "experts",
        "mu",
        "sigma",
        "update_norm",
        "bytes_up",
        "bytes_down",
    ]
    .map(String::from)
    .to_vec();
    header.extend(pass1_header(domains));
    w.write_record(&header)?;
    let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(";");
    for r in records {
        let steps = &r.steps;
        let n = steps.len().max(1) as f64;
        let mu = steps.iter().map(|s| s.group.mean_mu()).sum::<f64>() / n;
        let sigma = steps.iter().map(|s| s.group.mean_sigma()).sum::<f64>() / n;
        let mut row = vec![
            r.round.to_string(),
            join(&mut steps.iter().map(|s| s.question_id.to_string())),
            join(&mut steps.iter().map(|s| {
                s.expert_set
                    .members
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(" ")
            })),
            mu.to_string(),
            sigma.to_string(),
            r.update_norm.to_string(),
            r.bytes_up.to_string(),
            r.bytes_down.to_string(),
        ];
        match evals.get(&r.round) {
            Some(e) => row.extend(pass1_cells(e, domains)),
            None => row.extend(std::iter::repeat_n(String::new(), domains.len() + 1)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))
}

/// One swept setting, aggregated over repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub value: String,
    pub seeds: Vec<u64>,
    pub finals: Vec<EvalPoint>,
}

impl AblationPoint {
    pub fn mean_overall(&self) -> f64 {
        self.finals.iter().map(|e| e.overall).sum::<f64>() / self.finals.len().max(1) as f64
    }

    pub fn mean_domain(&self, d: Domain) -> Option<f64> {
        let vals: Vec<f64> = self.finals.iter().filter_map(|e| e.per_domain.get(&d).copied()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub param: &'static str,
    pub dir: PathBuf,
    pub points: Vec<AblationPoint>,
}

/// Parses a `name=v1,v2,...` sweep specification.
pub fn parse_sweep(spec: &str) -> Result<(&'static str, Vec<String>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("sweep `{spec}` must look like K=4,8,12")))?;
    let key = canonical_key(name)?;
    if !SWEEPABLE.contains(&key) {
        return Err(CliError::Config(format!(
            "cannot sweep `{name}`; sweepable parameters are K, M, beta and G"
        )));
    }
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if values.is_empty() {
        return Err(CliError::Config(format!("sweep `{spec}` lists no values")));
    }
    Ok((key, values))
}

/// Runs every sweep value `repeats` times. Repeat `r` uses master seed
/// `seed + r`, so all values share one seed family. Sub-runs are written to
/// `<output_dir>/<param>-<value>/seed-<seed>`.
pub fn run_ablation(cfg: &ExperimentConfig, param: &str, values: &[String], repeats: u32) -> Result<AblationReport> {
    let param = canonical_key(param)?;
    if !SWEEPABLE.contains(&param) {
        return Err(CliError::Config(format!("cannot sweep `{param}`")));
    }
    if repeats == 0 {
        return Err(CliError::Config("repeats must be at least 1".into()));
    }
    let base_seed = cfg.scenario.seed();
    let dir = std::path::absolute(cfg.resolved_output_dir()).map_err(io_err(cfg.resolved_output_dir()))?;
    let _lock = DirLock::acquire(&dir)?;

    // validate every setting before spending time on any run
    let settings = values
        .iter()
        .map(|v| {
            if param == "beta" && cfg.get("partition") == Some("iid") {
                return Err(CliError::Config("sweeping beta requires partition = dirichlet".into()));
            }
            cfg.with(param, v)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::new();
    for (value, setting) in values.iter().zip(settings) {
        let mut point = AblationPoint {
            value: value.clone(),
            seeds: Vec::new(),
            finals: Vec::new(),
        };
        for r in 0..repeats {
            let s = base_seed.wrapping_add(r as u64);
            let run_dir = dir.join(format!("{param}-{value}")).join(format!("seed-{s}"));
            let run_cfg = setting
                .with("seed", &s.to_string())?
                .with("output_dir", &run_dir.to_string_lossy())?;
            let report = run_experiment(&run_cfg)?;
            point.seeds.push(s);
            point.finals.push(report.final_eval().clone());
        }
        points.push(point);
    }
    let report = AblationReport { param, dir, points };
    write_ablation(&report)?;
    Ok(report)
}

fn write_ablation(report: &AblationReport) -> Result<()> {
    let domains: Vec<Domain> = report
        .points
        .first()
        .and_then(|p| p.finals.first())
        .map(|e| e.per_domain.keys().copied().collect())
        .unwrap_or_default();

    let path = report.dir.join(ABLATION_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["param".to_string(), "value".into(), "runs".into()];
    header.extend(pass1_header(&domains));
    w.write_record(&header)?;
    for p in &report.points {
        let mut row = vec![report.param.to_string(), p.value.clone(), p.finals.len().to_string()];
        row.push(p.mean_overall().to_string());
        row.extend(domains.iter().map(|d| p.mean_domain(*d).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = report.dir.join(ABLATION_RUNS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["param".to_string(), "value".into(), "seed".into()];
    header.extend(pass1_header(&domains));
    w.write_record(&header)?;
    for p in &report.points {
        for (s, e) in p.seeds.iter().zip(&p.finals) {
            let mut row = vec![report.param.to_string(), p.value.clone(), s.to_string()];
            row.extend(pass1_cells(e, &domains));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(io_err(&path))
}

/// Final metrics of one finished run, read back from its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config: BTreeMap<String, String>,
    pub final_round: u32,
    /// `(column, value)` pairs from the last eval row, overall first.
    pub pass1: Vec<(String, f64)>,
    pub fedgrpo_bytes: u64,
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let malformed = |path: &Path, message: &str| CliError::Artifact {
        path: path.to_path_buf(),
        message: message.into(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(&mpath).map_err(io_err(&mpath))?)?;
    let config = manifest
        .get("config")
        .and_then(|c| c.as_object())
        .ok_or_else(|| malformed(&mpath, "missing config object"))?
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
        .collect();

    let epath = dir.join(EVAL_FILE);
    let mut rdr = csv::Reader::from_path(&epath)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let last = rdr
        .records()
        .last()
        .ok_or_else(|| malformed(&epath, "no evaluation rows"))??;
    let final_round = last
        .get(0)
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| malformed(&epath, "bad round column"))?;
    let pass1 = header
        .iter()
        .zip(last.iter())
        .skip(1)
        .filter_map(|(h, v)| v.parse().ok().map(|x| (h.clone(), x)))
        .collect();

    let cpath = dir.join(COMM_FILE);
    let comm: CommSummary = serde_json::from_slice(&fs::read(&cpath).map_err(io_err(&cpath))?)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        config,
        final_round,
        pass1,
        fedgrpo_bytes: comm.fedgrpo_bytes,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Renders a plain-text table of final metrics for finished runs. Several
/// directories are aggregated into a mean and standard deviation row.
/// Ablation directories are rendered from their `ablation.csv`.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    let mut runs = Vec::new();
    for dir in dirs {
        if !dir.join(MANIFEST_FILE).exists() && dir.join(ABLATION_FILE).exists() {
            out.push_str(&render_csv(&dir.join(ABLATION_FILE))?);
            out.push('\n');
        } else {
            runs.push(load_run(dir)?);
        }
    }
    if runs.is_empty() {
        return Ok(out);
    }
    let metric_cols: Vec<String> = runs[0].pass1.iter().map(|(h, _)| h.clone()).collect();
    let cfg_cols = ["seed", "clients", "experts", "selection", "evaluation_mode", "rounds"];
    let mut header: Vec<String> = vec!["run".into()];
    header.extend(cfg_cols.iter().map(|c| c.to_string()));
    header.extend(metric_cols.iter().cloned());
    header.push("fedgrpo_mb".into());

    let mut rows = Vec::new();
    for r in &runs {
        let mut row = vec![r.dir.display().to_string()];
        row.extend(cfg_cols.iter().map(|c| r.config.get(*c).cloned().unwrap_or_default()));
        row.extend(metric_cols.iter().map(|c| {
            r.pass1
                .iter()
                .find(|(h, _)| h == c)
                .map_or(String::new(), |(_, v)| format!("{v:.4}"))
        }));
        row.push(format!("{:.3}", r.fedgrpo_bytes as f64 / 1e6));
        rows.push(row);
    }
    if runs.len() > 1 {
        let mut row = vec![format!("mean ± std ({} runs)", runs.len())];
        row.extend(cfg_cols.iter().map(|_| String::new()));
        for c in &metric_cols {
            let xs: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.pass1.iter().find(|(h, _)| h == c).map(|(_, v)| *v))
                .collect();
            let (m, s) = mean_std(&xs);
            row.push(format!("{m:.4} ± {s:.4}"));
        }
        let (m, _) = mean_std(&runs.iter().map(|r| r.fedgrpo_bytes as f64 / 1e6).collect::<Vec<_>>());
        row.push(format!("{m:.3}"));
        rows.push(row);
    }
    out.push_str(&render_table(&header, &rows));
    Ok(out)
}

fn render_csv(path: &Path) -> Result<String> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| Ok(r?.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok(render_table(&header, &rows))
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .filter_map(|r| r.get(i))
                .chain([&header[i]])
                .map(|c| c.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
