//! Synthetic modular-arithmetic QA corpus, client partitioning and the
//! server-side splits (auxiliary labeled set, unlabeled questions, test set).
//!
//! Questions look like `3+5 mod 7`; the answer is the canonical decimal
//! residue. The operation type is the item's domain, which is what makes a
//! Dirichlet split over domains produce clients with distinct expertise.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Maximum number of Dirichlet re-draws before empty shards are repaired.
pub const MAX_PARTITION_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Add,
    Sub,
    Mul,
    /// `a*b+c mod p`
    Mix,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Add, Domain::Sub, Domain::Mul, Domain::Mix];

    pub fn label(self) -> &'static str {
        match self {
            Domain::Add => "add",
            Domain::Sub => "sub",
            Domain::Mul => "mul",
            Domain::Mix => "mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "add" => Ok(Domain::Add),
            "sub" => Ok(Domain::Sub),
            "mul" => Ok(Domain::Mul),
            "mix" => Ok(Domain::Mix),
            other => Err(Error::Config(format!(
                "unknown domain `{other}` (expected add, sub, mul or mix)"
            ))),
        }
    }

    fn arity(self) -> usize {
        match self {
            Domain::Mix => 3,
            _ => 2,
        }
    }

    fn render(self, operands: &[u64], modulus: u64) -> String {
        match self {
            Domain::Add => format!("{}+{} mod {modulus}", operands[0], operands[1]),
            Domain::Sub => format!("{}-{} mod {modulus}", operands[0], operands[1]),
            Domain::Mul => format!("{}*{} mod {modulus}", operands[0], operands[1]),
            Domain::Mix => format!(
                "{}*{}+{} mod {modulus}",
                operands[0], operands[1], operands[2]
            ),
        }
    }

    fn evaluate(self, operands: &[u64], modulus: u64) -> u64 {
        let p = modulus as i128;
        let o: Vec<i128> = operands.iter().map(|&x| x as i128).collect();
        let v = match self {
            Domain::Add => o[0] + o[1],
            Domain::Sub => o[0] - o[1],
            Domain::Mul => o[0] * o[1],
            Domain::Mix => o[0] * o[1] + o[2],
        };
        v.rem_euclid(p) as u64
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: u64,
    pub question: String,
    pub answer: String,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub modulus: u64,
    /// Domains in generation order with the number of items for each.
    pub domains: Vec<(Domain, usize)>,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::Config(format!(
                "modulus must be at least 2, got {}",
                self.modulus
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("domain list is empty".into()));
        }
        if let Some((d, _)) = self.domains.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("domain `{d}` has a zero item count")));
        }
        let mut seen = self.domains.iter().map(|(d, _)| *d).collect::<Vec<_>>();
        seen.sort();
        seen.dedup();
        if seen.len() != self.domains.len() {
            return Err(Error::Config("domain list contains duplicates".into()));
        }
        Ok(())
    }

    /// All canonical answers, `"0"` through `"p-1"`.
    pub fn answer_space(&self) -> Vec<String> {
        (0..self.modulus).map(|v| v.to_string()).collect()
    }
}

/// Canonical answer form: trimmed, and for decimal integers, no leading zeros.
/// Non-numeric strings are only trimmed, so they never match a numeric answer.
pub fn canonicalize_answer(s: &str) -> String {
    let t = s.trim();
    if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) {
        let stripped = t.trim_start_matches('0');
        if stripped.is_empty() {
            "0".to_string()
        } else {
            stripped.to_string()
        }
    } else {
        t.to_string()
    }
}

/// Splits on whitespace and on the operator symbols `+ - * /`, keeping the
/// operators as tokens of their own.
pub fn tokenize(question: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in question.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if matches!(ch, '+' | '-' | '*' | '/') {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            tokens.push(cur);
        }
    }
    tokens
}

/// Whitespace-insensitive question key used for shard lookup and gating.
pub fn canonical_question(question: &str) -> String {
    tokenize(question).join(" ")
}

pub fn generate_corpus(cfg: &TaskConfig, seed: u64) -> Result<Vec<QAItem>> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(seed, "corpus", 0));
    let mut items = Vec::with_capacity(cfg.domains.iter().map(|(_, n)| n).sum());
    let mut operands = Vec::with_capacity(3);
    for &(domain, count) in &cfg.domains {
        for _ in 0..count {
            operands.clear();
            for _ in 0..domain.arity() {
                operands.push(rng.random_range(0..cfg.modulus));
            }
            items.push(QAItem {
                id: items.len() as u64,
                question: domain.render(&operands, cfg.modulus),
                answer: domain.evaluate(&operands, cfg.modulus).to_string(),
                domain,
            });
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

/// Normalized Gamma(beta, 1) draws, one per client.
pub(crate) fn sample_dirichlet(rng: &mut seed::Rng, k: usize, beta: f64) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Splits `items` into `spec.num_clients` shards. Every item lands in exactly
/// one shard and each shard is sorted by id.
///
/// Dirichlet mode draws per-domain client proportions from `Dir(beta)` and
/// cuts each shuffled domain list at the cumulative proportions. A draw that
/// leaves any client empty is redrawn, up to [`MAX_PARTITION_ATTEMPTS`]; if
/// every attempt leaves an empty client, the last draw is repaired by moving
/// one item from the largest shard into each empty one.
pub fn partition(items: &[QAItem], spec: &PartitionSpec) -> Result<Vec<Vec<QAItem>>> {
    let k = spec.num_clients;
    if k == 0 {
        return Err(Error::Partition("number of clients must be at least 1".into()));
    }
    if items.is_empty() {
        return Err(Error::Partition("cannot partition an empty item list".into()));
    }
    if k > items.len() {
        return Err(Error::Partition(format!(
            "{k} clients need at least one item each but only {} items are available",
            items.len()
        )));
    }
    let assignment = match spec.mode {
        PartitionMode::Iid => iid_assignment(items.len(), k, spec.seed),
        PartitionMode::Dirichlet { beta } => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!("dirichlet beta must be positive, got {beta}")));
            }
            dirichlet_assignment(items, k, beta, spec.seed)
        }
    };
    let mut shards = vec![Vec::new(); k];
    for (item, client) in items.iter().zip(assignment) {
        shards[client].push(item.clone());
    }
    for shard in &mut shards {
        shard.sort_by_key(|it| it.id);
    }
    Ok(shards)
}

fn iid_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "partition-iid", 0)));
    let mut assignment = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for client in 0..k {
        let size = base + usize::from(client < extra);
        for &idx in &order[pos..pos + size] {
            assignment[idx] = client;
        }
        pos += size;
    }
    assignment
}

fn dirichlet_assignment(items: &[QAItem], k: usize, beta: f64, seed: u64) -> Vec<usize> {
    let mut by_domain: BTreeMap<Domain, Vec<usize>> = BTreeMap::new();
    for (idx, item) in items.iter().enumerate() {
        by_domain.entry(item.domain).or_default().push(idx);
    }
    let mut assignment = vec![0; items.len()];
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = seed::rng(seed::derive(seed, "partition-dirichlet", attempt));
        let mut sizes = vec![0usize; k];
        for indices in by_domain.values() {
            let mut order = indices.clone();
            order.shuffle(&mut rng);
            let shares = sample_dirichlet(&mut rng, k, beta);
            let n = order.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (client, share) in shares.iter().enumerate() {
                cum += share;
                let end = if client + 1 == k {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                for &idx in &order[start..end] {
                    assignment[idx] = client;
                }
                sizes[client] += end - start;
                start = end;
            }
        }
        if sizes.iter().all(|&s| s > 0) || attempt + 1 == MAX_PARTITION_ATTEMPTS {
            if sizes.iter().any(|&s| s == 0) {
                repair_empty(&mut assignment, &mut sizes);
            }
            break;
        }
    }
    assignment
}

fn repair_empty(assignment: &mut [usize], sizes: &mut [usize]) {
    for empty in 0..sizes.len() {
        if sizes[empty] > 0 {
            continue;
        }
        // largest shard, lowest client index on ties
        let donor = (0..sizes.len())
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("at least one client");
        let idx = assignment
            .iter()
            .rposition(|&c| c == donor)
            .expect("donor shard is non-empty");
        assignment[idx] = empty;
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
}

/// An unlabeled server question. The answer is not part of the type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerQuestion {
    pub id: u64,
    pub question: String,
}

/// Answers to the server questions, kept out of the training loop. Only
/// exposes a yes/no check, never the answers themselves.
#[derive(Debug, Clone, Default)]
pub struct SealedAnswers {
    answers: HashMap<u64, String>,
}

impl SealedAnswers {
    pub fn check(&self, question_id: u64, candidate: &str) -> Option<bool> {
        self.answers
            .get(&question_id)
            .map(|a| *a == canonicalize_answer(candidate))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub client_shards: Vec<Vec<QAItem>>,
    pub auxiliary: Vec<QAItem>,
    pub server_questions: Vec<ServerQuestion>,
    pub test: BTreeMap<Domain, Vec<QAItem>>,
    pub sealed: SealedAnswers,
}

impl CorpusBundle {
    pub fn test_len(&self) -> usize {
        self.test.values().map(Vec::len).sum()
    }
}

/// Shuffles the corpus once and carves off, in order, the auxiliary set, the
/// test set and the unlabeled server questions; the remainder is partitioned
/// across clients.
pub fn build_bundle(
    items: &[QAItem],
    spec: &PartitionSpec,
    aux_size: usize,
    server_size: usize,
    test_size: usize,
) -> Result<CorpusBundle> {
    let reserved = aux_size + server_size + test_size;
    if reserved > items.len() {
        return Err(Error::Config(format!(
            "auxiliary ({aux_size}) + server ({server_size}) + test ({test_size}) items exceed the corpus size {}",
            items.len()
        )));
    }
    if items.len() - reserved < spec.num_clients {
        return Err(Error::Config(format!(
            "only {} items remain for {} clients",
            items.len() - reserved,
            spec.num_clients
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.seed, "bundle", 0)));
    let mut picked = order.into_iter().map(|i| items[i].clone());

    let auxiliary: Vec<QAItem> = picked.by_ref().take(aux_size).collect();
    let mut test: BTreeMap<Domain, Vec<QAItem>> = BTreeMap::new();
    for item in picked.by_ref().take(test_size) {
        test.entry(item.domain).or_default().push(item);
    }
    let mut sealed = SealedAnswers::default();
    let server_questions = picked
        .by_ref()
        .take(server_size)
        .map(|item| {
            sealed.answers.insert(item.id, canonicalize_answer(&item.answer));
            ServerQuestion {
                id: item.id,
                question: item.question,
            }
        })
        .collect();
    let mut rest: Vec<QAItem> = picked.collect();
    rest.sort_by_key(|it| it.id);
    let client_shards = partition(&rest, spec)?;
    Ok(CorpusBundle {
        client_shards,
        auxiliary,
        server_questions,
        test,
        sealed,
    })
}

pub fn write_jsonl<W: Write>(items: &[QAItem], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<QAItem>> {
    let mut items = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn cfg(p: u64, domains: &[(Domain, usize)]) -> TaskConfig {
        TaskConfig {
            modulus: p,
            domains: domains.to_vec(),
        }
    }

    fn three_domain_items(n: usize) -> Vec<QAItem> {
        generate_corpus(
            &cfg(7, &[(Domain::Add, n), (Domain::Sub, n), (Domain::Mul, n)]),
            11,
        )
        .unwrap()
    }

    #[test]
    fn renders_and_evaluates_examples() {
        assert_eq!(Domain::Add.render(&[3, 5], 7), "3+5 mod 7");
        assert_eq!(Domain::Add.evaluate(&[3, 5], 7), 1);
        assert_eq!(Domain::Mul.evaluate(&[4, 6], 7), 3);
        assert_eq!(Domain::Sub.evaluate(&[3, 5], 7), 5);
        assert_eq!(Domain::Mix.evaluate(&[2, 3, 4], 7), 3);
    }

    #[test]
    fn rejects_bad_task_configs() {
        assert!(matches!(
            generate_corpus(&cfg(1, &[(Domain::Add, 3)]), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(generate_corpus(&cfg(7, &[]), 0), Err(Error::Config(_))));
        assert!(matches!(
            generate_corpus(&cfg(7, &[(Domain::Add, 0)]), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let c = cfg(7, &[(Domain::Add, 40), (Domain::Mul, 60)]);
        let a = generate_corpus(&c, 5).unwrap();
        let b = generate_corpus(&c, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_corpus(&c, 6).unwrap());
        assert_eq!(a.iter().filter(|i| i.domain == Domain::Add).count(), 40);
        assert_eq!(a.iter().filter(|i| i.domain == Domain::Mul).count(), 60);
        let ids: HashSet<u64> = a.iter().map(|i| i.id).collect();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonicalize_answer("01"), "1");
        assert_eq!(canonicalize_answer(" 000 "), "0");
        assert_eq!(canonicalize_answer("banana"), "banana");
        assert_eq!(canonical_question("3+5 mod 7"), canonical_question(" 3 +  5   mod\t7"));
        assert_eq!(tokenize("2*3+4 mod 7"), ["2", "*", "3", "+", "4", "mod", "7"]);
    }

    #[test]
    fn iid_split_is_even() {
        let items = three_domain_items(40);
        let shards = partition(
            &items[..100],
            &PartitionSpec {
                num_clients: 4,
                mode: PartitionMode::Iid,
                seed: 3,
            },
        )
        .unwrap();
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![25, 25, 25, 25]);
    }

    #[test]
    fn huge_beta_is_nearly_uniform() {
        let items = three_domain_items(2000);
        let shards = partition(
            &items,
            &PartitionSpec {
                num_clients: 4,
                mode: PartitionMode::Dirichlet { beta: 1e6 },
                seed: 9,
            },
        )
        .unwrap();
        for domain in [Domain::Add, Domain::Sub, Domain::Mul] {
            for shard in &shards {
                let share = shard.iter().filter(|i| i.domain == domain).count() as f64 / 2000.0;
                assert!((0.24..=0.26).contains(&share), "{domain}: {share}");
            }
        }
    }

    #[test]
    fn partition_errors() {
        let items = three_domain_items(1);
        let spec = |k| PartitionSpec {
            num_clients: k,
            mode: PartitionMode::Iid,
            seed: 0,
        };
        assert!(matches!(partition(&items, &spec(4)), Err(Error::Partition(_))));
        assert!(matches!(partition(&items, &spec(0)), Err(Error::Partition(_))));
        assert!(matches!(partition(&[], &spec(1)), Err(Error::Partition(_))));
    }

    #[test]
    fn many_clients_tiny_beta_never_leaves_empty_shards() {
        let items = three_domain_items(30);
        for seed in 0..10 {
            let shards = partition(
                &items,
                &PartitionSpec {
                    num_clients: 40,
                    mode: PartitionMode::Dirichlet { beta: 0.01 },
                    seed,
                },
            )
            .unwrap();
            assert!(shards.iter().all(|s| !s.is_empty()));
            assert_eq!(shards.iter().map(Vec::len).sum::<usize>(), 90);
        }
    }

    #[test]
    fn bundle_sizes_and_insufficient_items() {
        let items = three_domain_items(100);
        let spec = PartitionSpec {
            num_clients: 4,
            mode: PartitionMode::Iid,
            seed: 1,
        };
        let b = build_bundle(&items, &spec, 100, 50, 60).unwrap();
        assert_eq!(b.auxiliary.len(), 100);
        assert_eq!(b.server_questions.len(), 50);
        assert_eq!(b.sealed.len(), 50);
        assert_eq!(b.test_len(), 60);
        assert!(matches!(
            build_bundle(&items, &spec, 200, 100, 1),
            Err(Error::Config(_))
        ));
        let empty_aux = build_bundle(&items, &spec, 0, 10, 10).unwrap();
        assert!(empty_aux.auxiliary.is_empty());
    }

    #[test]
    fn sealed_answers_check_without_revealing() {
        let items = three_domain_items(20);
        let spec = PartitionSpec {
            num_clients: 2,
            mode: PartitionMode::Iid,
            seed: 1,
        };
        let b = build_bundle(&items, &spec, 5, 10, 5).unwrap();
        let q = &b.server_questions[0];
        let truth = &items.iter().find(|i| i.id == q.id).unwrap().answer;
        assert_eq!(b.sealed.check(q.id, truth), Some(true));
        assert_eq!(b.sealed.check(q.id, &format!("0{truth}")), Some(true));
        assert_eq!(b.sealed.check(u64::MAX, "1"), None);
    }

    #[test]
    fn jsonl_roundtrip() {
        let items = three_domain_items(5);
        let mut buf = Vec::new();
        write_jsonl(&items, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 15);
        assert!(text.lines().next().unwrap().contains("\"domain\":\"add\""));
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), items);
    }
}
