//! Query oracles: sources of candidate labels for an input.
//!
//! Three kinds are supported. A synthetic oracle draws from a known
//! [`DiscreteDistribution`]; a replay oracle hands out pre-recorded samples in
//! order (one JSONL record per input); an external oracle talks to a child
//! process over line-delimited JSON on stdin/stdout:
//!
//! ```text
//! -> {"id":"q1","n":1}
//! <- {"label":5}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::distributions::DiscreteDistribution;
use crate::error::{CpqError, Result};
use crate::rng::CpqRng;
use crate::Label;

/// Default per-request timeout for external oracles.
pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(30);

/// One labelled input with its recorded oracle samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub truth: Label,
    pub samples: Vec<Label>,
}

impl QueryRecord {
    pub fn available(&self) -> usize {
        self.samples.len()
    }
}

/// Something that yields labels for a single input, one per call.
pub trait LabelSource {
    fn next_label(&mut self, rng: &mut CpqRng) -> Result<Label>;

    /// Samples still obtainable, `None` when unbounded.
    fn remaining(&self) -> Option<usize> {
        None
    }
}

/// Fresh draws from a known distribution.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSource<'a> {
    dist: &'a DiscreteDistribution,
}

impl<'a> SyntheticSource<'a> {
    pub fn new(dist: &'a DiscreteDistribution) -> Self {
        Self { dist }
    }
}

impl LabelSource for SyntheticSource<'_> {
    fn next_label(&mut self, rng: &mut CpqRng) -> Result<Label> {
        Ok(self.dist.sample(rng))
    }
}

/// Recorded samples handed out in order.
#[derive(Debug, Clone)]
pub struct ReplaySource<'a> {
    id: &'a str,
    samples: &'a [Label],
    cursor: usize,
}

impl<'a> ReplaySource<'a> {
    pub fn new(id: &'a str, samples: &'a [Label]) -> Self {
        Self { id, samples, cursor: 0 }
    }

    pub fn from_record(record: &'a QueryRecord) -> Self {
        Self::new(&record.id, &record.samples)
    }
}

impl LabelSource for ReplaySource<'_> {
    fn next_label(&mut self, _rng: &mut CpqRng) -> Result<Label> {
        let label = self.samples.get(self.cursor).copied().ok_or_else(|| {
            CpqError::BudgetExhausted { input: self.id.to_owned(), available: self.samples.len() }
        })?;
        self.cursor += 1;
        Ok(label)
    }

    fn remaining(&self) -> Option<usize> {
        Some(self.samples.len() - self.cursor)
    }
}

/// Where a labelled point gets its samples from.
#[derive(Debug, Clone, PartialEq)]
pub enum PointKind {
    Replay(Vec<Label>),
    Synthetic(DiscreteDistribution),
}

/// A labelled input together with its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePoint {
    pub id: String,
    pub truth: Label,
    pub kind: PointKind,
}

impl OraclePoint {
    pub fn synthetic(id: impl Into<String>, truth: Label, dist: DiscreteDistribution) -> Self {
        Self { id: id.into(), truth, kind: PointKind::Synthetic(dist) }
    }

    /// Fresh source positioned at the start of this point's stream.
    pub fn source(&self) -> PointSource<'_> {
        match &self.kind {
            PointKind::Replay(samples) => PointSource::Replay(ReplaySource::new(&self.id, samples)),
            PointKind::Synthetic(d) => PointSource::Synthetic(SyntheticSource::new(d)),
        }
    }

    /// Recorded length for replay points.
    pub fn available(&self) -> Option<usize> {
        match &self.kind {
            PointKind::Replay(samples) => Some(samples.len()),
            PointKind::Synthetic(_) => None,
        }
    }
}

impl From<QueryRecord> for OraclePoint {
    fn from(r: QueryRecord) -> Self {
        Self { id: r.id, truth: r.truth, kind: PointKind::Replay(r.samples) }
    }
}

pub enum PointSource<'a> {
    Replay(ReplaySource<'a>),
    Synthetic(SyntheticSource<'a>),
}

impl LabelSource for PointSource<'_> {
    fn next_label(&mut self, rng: &mut CpqRng) -> Result<Label> {
        match self {
            Self::Replay(s) => s.next_label(rng),
            Self::Synthetic(s) => s.next_label(rng),
        }
    }

    fn remaining(&self) -> Option<usize> {
        match self {
            Self::Replay(s) => s.remaining(),
            Self::Synthetic(s) => s.remaining(),
        }
    }
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    id: &'a str,
    n: u32,
}

#[derive(Deserialize)]
struct ExternalResponse {
    label: Label,
}

/// Child process answering one JSON request line with one JSON response line.
pub struct ExternalOracle {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ExternalOracle {
    /// Spawns `program args…` with piped stdin/stdout.
    pub fn spawn<S: AsRef<std::ffi::OsStr>>(program: S, args: &[S], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| CpqError::OracleIo(format!("spawn failed: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin: BufWriter::new(stdin), lines, timeout })
    }

    /// One request/response round trip.
    pub fn request(&mut self, input: &str) -> Result<Label> {
        let io = |e: std::io::Error| CpqError::OracleIo(e.to_string());
        let req = serde_json::to_string(&ExternalRequest { id: input, n: 1 })
            .map_err(|e| CpqError::OracleIo(e.to_string()))?;
        writeln!(self.stdin, "{req}").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(line) => line.map_err(io)?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(CpqError::OracleIo(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(CpqError::OracleIo("oracle process closed its output".into()))
            }
        };
        let resp: ExternalResponse = serde_json::from_str(line.trim())
            .map_err(|e| CpqError::OracleIo(format!("bad response {line:?}: {e}")))?;
        Ok(resp.label)
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Kind-erased oracle keyed by input id, with per-input replay cursors.
pub enum OracleHandle {
    Synthetic(HashMap<String, DiscreteDistribution>),
    Replay {
        records: HashMap<String, Vec<Label>>,
        cursors: HashMap<String, usize>,
    },
    External(ExternalOracle),
}

impl OracleHandle {
    pub fn synthetic<I: IntoIterator<Item = (String, DiscreteDistribution)>>(dists: I) -> Self {
        Self::Synthetic(dists.into_iter().collect())
    }

    pub fn replay(records: &[QueryRecord]) -> Self {
        Self::Replay {
            records: records.iter().map(|r| (r.id.clone(), r.samples.clone())).collect(),
            cursors: HashMap::new(),
        }
    }

    pub fn next_sample(&mut self, input: &str, rng: &mut CpqRng) -> Result<Label> {
        match self {
            Self::Synthetic(dists) => dists
                .get(input)
                .map(|d| d.sample(rng))
                .ok_or_else(|| CpqError::InvalidInput(format!("no distribution for input {input:?}"))),
            Self::Replay { records, cursors } => {
                let samples = records
                    .get(input)
                    .ok_or_else(|| CpqError::InvalidInput(format!("no record for input {input:?}")))?;
                let cursor = cursors.entry(input.to_owned()).or_insert(0);
                let label = samples.get(*cursor).copied().ok_or_else(|| CpqError::BudgetExhausted {
                    input: input.to_owned(),
                    available: samples.len(),
                })?;
                *cursor += 1;
                Ok(label)
            }
            Self::External(ext) => ext.request(input),
        }
    }

    fn remaining(&self, input: &str) -> Option<usize> {
        match self {
            Self::Replay { records, cursors } => records
                .get(input)
                .map(|s| s.len() - cursors.get(input).copied().unwrap_or(0)),
            _ => None,
        }
    }

    /// Binds the handle to one input so it can drive a query loop.
    pub fn for_input<'a>(&'a mut self, input: &'a str) -> BoundOracle<'a> {
        BoundOracle { oracle: self, input }
    }
}

pub struct BoundOracle<'a> {
    oracle: &'a mut OracleHandle,
    input: &'a str,
}

impl LabelSource for BoundOracle<'_> {
    fn next_label(&mut self, rng: &mut CpqRng) -> Result<Label> {
        self.oracle.next_sample(self.input, rng)
    }

    fn remaining(&self) -> Option<usize> {
        self.oracle.remaining(self.input)
    }
}

/// Reads a replay JSONL file.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    parse_records(BufReader::new(File::open(path)?))
}

/// Parses replay JSONL; blank lines are skipped, line numbers are 1-based.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<QueryRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(&line)
            .map_err(|e| CpqError::Parse { line: line_no, message: e.to_string() })?;
        if record.samples.is_empty() {
            return Err(CpqError::Parse { line: line_no, message: "samples must be non-empty".into() });
        }
        if !ids.insert(record.id.clone()) {
            return Err(CpqError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as JSONL with fields in canonical order.
pub fn write_records<W: Write>(mut writer: W, records: &[QueryRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
