//! Synchronous in-process message bus with byte-exact traffic accounting,
//! plus calibrated communication-cost models for two baselines.
//!
//! # Wire schema
//!
//! Every frame starts with a 16-byte header of four little-endian `u32`s:
//! `kind, from, to, round`. The server is endpoint 0, clients are `1..=K`.
//! Payloads:
//!
//! | kind | payload |
//! |------|---------|
//! | 1 `NeighborhoodBroadcast` | repeated `(str question, str answer)` |
//! | 2 `CompetenceReply`       | `f64 score` |
//! | 3 `CandidateBroadcast`    | `u32 request_id, str question`, repeated `str candidate` |
//! | 4 `RewardReply`           | repeated `(f64 correctness, f64 format)` |
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes, scalars are IEEE-754
//! doubles. Repeated fields run to the end of the frame, so they carry no
//! count prefix.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SERVER: u32 = 0;
pub const HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    NeighborhoodBroadcast,
    CompetenceReply,
    CandidateBroadcast,
    RewardReply,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::NeighborhoodBroadcast,
        MessageKind::CompetenceReply,
        MessageKind::CandidateBroadcast,
        MessageKind::RewardReply,
    ];

    fn code(self) -> u32 {
        match self {
            MessageKind::NeighborhoodBroadcast => 1,
            MessageKind::CompetenceReply => 2,
            MessageKind::CandidateBroadcast => 3,
            MessageKind::RewardReply => 4,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            1 => MessageKind::NeighborhoodBroadcast,
            2 => MessageKind::CompetenceReply,
            3 => MessageKind::CandidateBroadcast,
            4 => MessageKind::RewardReply,
            other => return Err(Error::Wire(format!("unknown message kind {other}"))),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            MessageKind::NeighborhoodBroadcast => "neighborhood_broadcast",
            MessageKind::CompetenceReply => "competence_reply",
            MessageKind::CandidateBroadcast => "candidate_broadcast",
            MessageKind::RewardReply => "reward_reply",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MessageKind::NeighborhoodBroadcast | MessageKind::CandidateBroadcast => Direction::Downlink,
            MessageKind::CompetenceReply | MessageKind::RewardReply => Direction::Uplink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// client to server
    Uplink,
    /// server to client
    Downlink,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::Uplink => "up",
            Direction::Downlink => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Neighborhood { exemplars: Vec<(String, String)> },
    Competence { score: f64 },
    Candidates {
        request_id: u32,
        question: String,
        candidates: Vec<String>,
    },
    Rewards { scores: Vec<(f64, f64)> },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Neighborhood { .. } => MessageKind::NeighborhoodBroadcast,
            Payload::Competence { .. } => MessageKind::CompetenceReply,
            Payload::Candidates { .. } => MessageKind::CandidateBroadcast,
            Payload::Rewards { .. } => MessageKind::RewardReply,
        }
    }

    /// Every text-bearing field in the payload.
    pub fn text_fields(&self) -> Vec<&str> {
        match self {
            Payload::Neighborhood { exemplars } => exemplars
                .iter()
                .flat_map(|(q, a)| [q.as_str(), a.as_str()])
                .collect(),
            Payload::Candidates {
                question, candidates, ..
            } => std::iter::once(question.as_str())
                .chain(candidates.iter().map(String::as_str))
                .collect(),
            Payload::Competence { .. } | Payload::Rewards { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: u32,
    pub to: u32,
    pub round: u32,
    pub payload: Payload,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Wire("truncated frame".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Wire(e.to_string()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_BYTES + 64);
        put_u32(&mut buf, self.kind().code());
        put_u32(&mut buf, self.from);
        put_u32(&mut buf, self.to);
        put_u32(&mut buf, self.round);
        match &self.payload {
            Payload::Neighborhood { exemplars } => {
                for (q, a) in exemplars {
                    put_str(&mut buf, q);
                    put_str(&mut buf, a);
                }
            }
            Payload::Competence { score } => buf.extend_from_slice(&score.to_le_bytes()),
            Payload::Candidates {
                request_id,
                question,
                candidates,
            } => {
                put_u32(&mut buf, *request_id);
                put_str(&mut buf, question);
                for c in candidates {
                    put_str(&mut buf, c);
                }
            }
            Payload::Rewards { scores } => {
                for (c, f) in scores {
                    buf.extend_from_slice(&c.to_le_bytes());
                    buf.extend_from_slice(&f.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn decode(frame: &[u8]) -> Result<Message> {
        let mut r = Reader { buf: frame, pos: 0 };
        let kind = MessageKind::from_code(r.u32()?)?;
        let (from, to, round) = (r.u32()?, r.u32()?, r.u32()?);
        let payload = match kind {
            MessageKind::NeighborhoodBroadcast => {
                let mut exemplars = Vec::new();
                while !r.done() {
                    exemplars.push((r.str()?, r.str()?));
                }
                Payload::Neighborhood { exemplars }
            }
            MessageKind::CompetenceReply => Payload::Competence { score: r.f64()? },
            MessageKind::CandidateBroadcast => {
                let request_id = r.u32()?;
                let question = r.str()?;
                let mut candidates = Vec::new();
                while !r.done() {
                    candidates.push(r.str()?);
                }
                Payload::Candidates {
                    request_id,
                    question,
                    candidates,
                }
            }
            MessageKind::RewardReply => {
                let mut scores = Vec::new();
                while !r.done() {
                    scores.push((r.f64()?, r.f64()?));
                }
                Payload::Rewards { scores }
            }
        };
        if !r.done() {
            return Err(Error::Wire("trailing bytes after payload".into()));
        }
        Ok(Message {
            from,
            to,
            round,
            payload,
        })
    }

    /// Frame size under the wire schema, header included.
    pub fn payload_bytes(&self) -> u64 {
        self.encode().len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub seq: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub messages: u64,
    pub bytes: u64,
}

/// Byte counters keyed by `(round, kind)`. Totals are always derived from
/// the per-round entries, so cumulative = sum of rounds by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLedger {
    entries: BTreeMap<(u32, MessageKind), Counter>,
}

impl TrafficLedger {
    pub fn record(&mut self, round: u32, kind: MessageKind, bytes: u64) {
        let c = self.entries.entry((round, kind)).or_default();
        c.messages += 1;
        c.bytes += bytes;
    }

    fn sum(&self, pred: impl Fn(u32, MessageKind) -> bool) -> Counter {
        self.entries
            .iter()
            .filter(|((r, k), _)| pred(*r, *k))
            .fold(Counter::default(), |acc, (_, c)| Counter {
                messages: acc.messages + c.messages,
                bytes: acc.bytes + c.bytes,
            })
    }

    pub fn direction_total(&self, dir: Direction) -> Counter {
        self.sum(|_, k| k.direction() == dir)
    }

    pub fn round_total(&self, round: u32, dir: Direction) -> Counter {
        self.sum(|r, k| r == round && k.direction() == dir)
    }

    pub fn kind_total(&self, kind: MessageKind) -> Counter {
        self.sum(|_, k| k == kind)
    }

    pub fn round_kind(&self, round: u32, kind: MessageKind) -> Counter {
        self.entries.get(&(round, kind)).copied().unwrap_or_default()
    }

    pub fn total_bytes(&self) -> u64 {
        self.sum(|_, _| true).bytes
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with columns `round,kind,direction,bytes`, one row per
    /// `(round, kind)` that saw traffic.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "round,kind,direction,bytes")?;
        for ((round, kind), c) in &self.entries {
            writeln!(out, "{round},{},{},{}", kind.label(), kind.direction().label(), c.bytes)?;
        }
        Ok(())
    }
}

pub fn total_uplink(ledger: &TrafficLedger) -> u64 {
    ledger.direction_total(Direction::Uplink).bytes
}

pub fn total_downlink(ledger: &TrafficLedger) -> u64 {
    ledger.direction_total(Direction::Downlink).bytes
}

/// A delivered frame as seen on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedFrame {
    pub seq: u64,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// Lossless, synchronous, in-order bus. The receiver gets the message decoded
/// from its own wire encoding, so nothing reaches the other side that the
/// schema does not carry.
#[derive(Debug, Clone)]
pub struct Bus {
    num_clients: u32,
    ledger: TrafficLedger,
    seq: u64,
    capture: Option<Vec<CapturedFrame>>,
}

impl Bus {
    pub fn new(num_clients: u32) -> Self {
        Bus {
            num_clients,
            ledger: TrafficLedger::default(),
            seq: 0,
            capture: None,
        }
    }

    /// Keep a copy of every frame for auditing.
    pub fn with_capture(mut self) -> Self {
        self.capture = Some(Vec::new());
        self
    }

    pub fn num_clients(&self) -> u32 {
        self.num_clients
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn captured(&self) -> &[CapturedFrame] {
        self.capture.as_deref().unwrap_or(&[])
    }

    fn check_endpoints(&self, msg: &Message) -> Result<()> {
        let valid_client = |id: u32| (1..=self.num_clients).contains(&id);
        let (client, server) = match msg.kind().direction() {
            Direction::Downlink => (msg.to, msg.from),
            Direction::Uplink => (msg.from, msg.to),
        };
        if server != SERVER {
            return Err(Error::Routing(server));
        }
        if !valid_client(client) {
            return Err(Error::Routing(client));
        }
        Ok(())
    }

    pub fn send(&mut self, msg: &Message) -> Result<(Receipt, Message)> {
        self.check_endpoints(msg)?;
        let frame = msg.encode();
        let bytes = frame.len() as u64;
        self.ledger.record(msg.round, msg.kind(), bytes);
        let delivered = Message::decode(&frame)?;
        self.seq += 1;
        if let Some(cap) = self.capture.as_mut() {
            cap.push(CapturedFrame {
                seq: self.seq,
                direction: msg.kind().direction(),
                bytes: frame,
            });
        }
        Ok((
            Receipt {
                seq: self.seq,
                bytes,
            },
            delivered,
        ))
    }
}

/// Model-size labels understood by the cost models, with their parameter
/// counts in billions.
pub const MODEL_SIZES: [(&str, f64); 3] = [("1.5B", 1.5), ("3B", 3.0), ("7B", 7.0)];

/// Reference run shape the baseline constants are calibrated against.
pub const REFERENCE_ROUNDS: u64 = 320;
pub const REFERENCE_CLIENTS: u64 = 8;
/// Calibration targets: the adapter-exchange baseline moves 6.1 GB for the
/// 7B model and the synthetic-data baseline 102.5 MB over the reference run.
pub const FEDPETUNING_7B_TOTAL_BYTES: f64 = 6.1e9;
pub const DPSDA_TOTAL_BYTES: f64 = 102.5e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CostModel {
    /// Measured from the ledger, never modeled.
    FedGrpo,
    /// Adapter exchange: every client moves one adapter per round.
    /// Adapter size scales linearly with model size from the 7B figure.
    FedPetuning { bytes_per_client_round_7b: f64 },
    /// One-shot synthetic data upload, independent of rounds and model size.
    Dpsda { samples_per_client: u64, bytes_per_sample: u64 },
}

impl CostModel {
    pub fn fedpetuning_calibrated() -> Self {
        CostModel::FedPetuning {
            bytes_per_client_round_7b: FEDPETUNING_7B_TOTAL_BYTES
                / (REFERENCE_ROUNDS * REFERENCE_CLIENTS) as f64,
        }
    }

    /// 8 clients x 2500 samples x 5125 bytes = 102.5 MB.
    pub fn dpsda_calibrated() -> Self {
        CostModel::Dpsda {
            samples_per_client: 2500,
            bytes_per_sample: 5125,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunShape {
    pub rounds: u64,
    pub clients: u64,
    pub model_size: String,
}

pub fn model_size_billions(label: &str) -> Result<f64> {
    MODEL_SIZES
        .iter()
        .find(|(l, _)| l.eq_ignore_ascii_case(label))
        .map(|(_, b)| *b)
        .ok_or_else(|| Error::Config(format!("unknown model size label `{label}`")))
}

pub fn baseline_cost(model: &CostModel, shape: &RunShape) -> Result<u64> {
    let billions = model_size_billions(&shape.model_size)?;
    match model {
        CostModel::FedGrpo => Err(Error::Config(
            "fedgrpo cost is measured from the traffic ledger, not modeled".into(),
        )),
        CostModel::FedPetuning {
            bytes_per_client_round_7b,
        } => {
            let per = bytes_per_client_round_7b * billions / 7.0;
            Ok((shape.rounds as f64 * shape.clients as f64 * per).round() as u64)
        }
        CostModel::Dpsda {
            samples_per_client,
            bytes_per_sample,
        } => Ok(shape.clients * samples_per_client * bytes_per_sample),
    }
}

/// Side-by-side communication totals for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub fedgrpo_bytes: u64,
    pub fedgrpo_uplink_bytes: u64,
    pub fedgrpo_downlink_bytes: u64,
    pub dpsda_bytes: u64,
    pub fedpetuning_bytes_by_model: BTreeMap<String, u64>,
}

impl CommSummary {
    pub fn from_ledger(ledger: &TrafficLedger, rounds: u64, clients: u64) -> Result<Self> {
        let shape = |label: &str| RunShape {
            rounds,
            clients,
            model_size: label.to_string(),
        };
        let fedpetuning = CostModel::fedpetuning_calibrated();
        let mut by_model = BTreeMap::new();
        for (label, _) in MODEL_SIZES {
            by_model.insert(label.to_string(), baseline_cost(&fedpetuning, &shape(label))?);
        }
        Ok(CommSummary {
            fedgrpo_bytes: ledger.total_bytes(),
            fedgrpo_uplink_bytes: total_uplink(ledger),
            fedgrpo_downlink_bytes: total_downlink(ledger),
            dpsda_bytes: baseline_cost(&CostModel::dpsda_calibrated(), &shape("7B"))?,
            fedpetuning_bytes_by_model: by_model,
        })
    }
}
