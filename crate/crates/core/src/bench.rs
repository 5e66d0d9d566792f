//! Local-vs-remote microbenchmark harness.
//!
//! Each repetition commits `num_objects` objects of random data to the
//! producer store, then one consumer fetches all of their buffers in a single
//! request and reads them sequentially. Three values are recorded per
//! repetition: total create+write+seal time, retrieval latency (request sent
//! to last descriptor received) and read throughput (bytes over the whole
//! sequential read, access penalties included). The consumer is a second
//! client of the producer's store in the LOCAL scenario and a client of the
//! other store in the REMOTE scenario. After each repetition every reference
//! is released and the producer store evicts all unreferenced objects, so
//! repetitions start from the same empty arena.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, ClientSession, ObjectView};
use crate::id::ObjectId;

pub const DEFAULT_REPETITIONS: u32 = 100;

/// Bench rows: (bench id, number of objects, object size in bytes), 1 kB =
/// 1000 bytes.
pub const BENCHMARK_TABLE: [(u32, usize, u64); 6] = [
    (1, 1000, 1_000),
    (2, 500, 10_000),
    (3, 200, 100_000),
    (4, 100, 1_000_000),
    (5, 50, 10_000_000),
    (6, 10, 100_000_000),
];

/// The producer arena must hold this multiple of one repetition's bytes.
pub const CAPACITY_HEADROOM: f64 = 1.2;

const RETRIEVAL_TIMEOUT_MS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no bench with id {0}")]
    UnknownBench(u32),
    #[error("bench {bench_id} needs {needed} arena bytes, producer arena has {available}")]
    Capacity { bench_id: u32, needed: u64, available: u64 },
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    CreateWriteSeal,
    Retrieval,
    Read,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::CreateWriteSeal, Phase::Retrieval, Phase::Read];

    pub fn unit(self) -> &'static str {
        match self {
            Phase::CreateWriteSeal | Phase::Retrieval => "ns",
            Phase::Read => "B/s",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Local => "LOCAL",
            Scenario::Remote => "REMOTE",
        })
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::CreateWriteSeal => "CREATE_WRITE_SEAL",
            Phase::Retrieval => "RETRIEVAL",
            Phase::Read => "READ",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkSpec {
    pub bench_id: u32,
    pub num_objects: usize,
    pub object_size: u64,
    pub repetitions: u32,
    pub scenario: Scenario,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn from_table(bench_id: u32, scenario: Scenario, repetitions: u32, seed: u64) -> Result<Self, BenchError> {
        let &(_, num_objects, object_size) = BENCHMARK_TABLE
            .iter()
            .find(|row| row.0 == bench_id)
            .ok_or(BenchError::UnknownBench(bench_id))?;
        Ok(Self {
            bench_id,
            num_objects,
            object_size,
            repetitions,
            scenario,
            seed,
        })
    }

    pub fn bytes_per_repetition(&self) -> u64 {
        self.num_objects as u64 * self.object_size
    }

    pub fn required_capacity(&self) -> u64 {
        (self.bytes_per_repetition() as f64 * CAPACITY_HEADROOM).ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub bench_id: u32,
    pub scenario: Scenario,
    pub repetition: u32,
    pub phase: Phase,
    /// Nanoseconds for timing phases, bytes per second for `Read`.
    pub value: f64,
}

/// Deterministic payload stream for one repetition of one bench.
pub struct PayloadGenerator(ChaCha8Rng);

impl PayloadGenerator {
    pub fn new(seed: u64, bench_id: u32, repetition: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((u64::from(bench_id) << 32) | u64::from(repetition));
        Self(rng)
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.0.fill_bytes(buf);
    }
}

/// Socket paths of the three clients a run needs.
#[derive(Debug, Clone)]
pub struct BenchEndpoints {
    pub producer: PathBuf,
    pub consumer_local: PathBuf,
    pub consumer_remote: PathBuf,
}

impl BenchEndpoints {
    fn consumer(&self, scenario: Scenario) -> &Path {
        match scenario {
            Scenario::Local => &self.consumer_local,
            Scenario::Remote => &self.consumer_remote,
        }
    }
}

/// Handed to the observer after a repetition's reads complete, before the
/// consumer releases its references.
#[derive(Debug)]
pub struct RepetitionReport<'a> {
    pub spec: &'a BenchmarkSpec,
    pub repetition: u32,
    pub ids: &'a [ObjectId],
    pub bytes_read: u64,
}

#[derive(Debug, Clone)]
pub struct AbortedRepetition {
    pub bench_id: u32,
    pub scenario: Scenario,
    pub repetition: u32,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct BenchOutcome {
    pub records: Vec<MeasurementRecord>,
    pub aborted: Vec<AbortedRepetition>,
}

impl BenchOutcome {
    pub fn extend(&mut self, other: BenchOutcome) {
        self.records.extend(other.records);
        self.aborted.extend(other.aborted);
    }
}

struct Sessions {
    producer: ClientSession,
    consumer: ClientSession,
}

struct Buffers {
    payload: Vec<u8>,
    scratch: Vec<u8>,
}

/// One scenario's sessions, buffers and results, advanced one repetition
/// at a time.
struct Runner<'s> {
    spec: &'s BenchmarkSpec,
    sessions: Sessions,
    buffers: Buffers,
    id_rng: StdRng,
    outcome: BenchOutcome,
}

impl<'s> Runner<'s> {
    fn connect(spec: &'s BenchmarkSpec, endpoints: &BenchEndpoints) -> Result<Self, BenchError> {
        let mut sessions = Sessions {
            producer: ClientSession::connect(&endpoints.producer)?,
            consumer: ClientSession::connect(endpoints.consumer(spec.scenario))?,
        };
        let available = sessions
            .producer
            .hello()
            .arenas
            .iter()
            .find(|a| a.node_id == sessions.producer.local_node())
            .map_or(0, |a| a.capacity);
        if available < spec.required_capacity() {
            return Err(BenchError::Capacity {
                bench_id: spec.bench_id,
                needed: spec.required_capacity(),
                available,
            });
        }
        // Touch both buffers up front so page faults stay out of the timings.
        let size = spec.object_size as usize;
        let buffers = Buffers {
            payload: vec![1u8; size],
            scratch: vec![1u8; size],
        };
        sessions.producer.evict(u64::MAX)?;
        Ok(Self {
            spec,
            sessions,
            buffers,
            id_rng: StdRng::from_entropy(),
            outcome: BenchOutcome::default(),
        })
    }

    fn step(&mut self, repetition: u32, observer: &mut dyn FnMut(&RepetitionReport<'_>)) -> Result<(), BenchError> {
        let spec = self.spec;
        let ids: Vec<ObjectId> = (0..spec.num_objects).map(|_| ObjectId::random(&mut self.id_rng)).collect();
        match run_repetition(spec, repetition, &ids, &mut self.sessions, &mut self.buffers, observer) {
            Ok(records) => self.outcome.records.extend(records),
            Err(e) => {
                tracing::warn!(bench = spec.bench_id, %repetition, error = %e, "repetition aborted");
                self.outcome.aborted.push(AbortedRepetition {
                    bench_id: spec.bench_id,
                    scenario: spec.scenario,
                    repetition,
                    error: e.to_string(),
                });
                for id in &ids {
                    while self.sessions.consumer.open_references(id) > 0 {
                        if self.sessions.consumer.release(*id).is_err() {
                            break;
                        }
                    }
                }
                self.sessions.producer.evict(u64::MAX)?;
            }
        }
        Ok(())
    }
}

/// Runs every repetition of `spec`. Repetitions that hit a store error are
/// recorded in [`BenchOutcome::aborted`] and contribute no measurements.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    endpoints: &BenchEndpoints,
    observer: &mut dyn FnMut(&RepetitionReport<'_>),
) -> Result<BenchOutcome, BenchError> {
    let mut runner = Runner::connect(spec, endpoints)?;
    for repetition in 0..spec.repetitions {
        runner.step(repetition, observer)?;
    }
    Ok(runner.outcome)
}

fn run_repetition(
    spec: &BenchmarkSpec,
    repetition: u32,
    ids: &[ObjectId],
    sessions: &mut Sessions,
    buffers: &mut Buffers,
    observer: &mut dyn FnMut(&RepetitionReport<'_>),
) -> Result<[MeasurementRecord; 3], BenchError> {
    let mut payloads = PayloadGenerator::new(spec.seed, spec.bench_id, repetition);
    let mut commit = Duration::ZERO;
    for id in ids {
        payloads.fill(&mut buffers.payload);
        commit += sessions.producer.create_and_write(*id, &buffers.payload, &[])?.total();
    }

    let started = Instant::now();
    let views = sessions.consumer.get(ids, RETRIEVAL_TIMEOUT_MS)?;
    let retrieval = started.elapsed();
    let views: Vec<ObjectView> = views
        .into_iter()
        .zip(ids)
        .map(|(v, id)| v.ok_or_else(|| BenchError::Aborted(format!("object {id} not retrievable"))))
        .collect::<Result<_, _>>()?;

    let started = Instant::now();
    let mut bytes_read = 0u64;
    for view in &views {
        view.data.read_into(&mut buffers.scratch);
        bytes_read += view.data.len();
    }
    let read_time = started.elapsed();
    if bytes_read != spec.bytes_per_repetition() {
        return Err(BenchError::Aborted(format!(
            "read {bytes_read} bytes, expected {}",
            spec.bytes_per_repetition()
        )));
    }

    observer(&RepetitionReport {
        spec,
        repetition,
        ids,
        bytes_read,
    });
    for id in ids {
        sessions.consumer.release(*id)?;
    }
    sessions.producer.evict(u64::MAX)?;

    let record = |phase, value: f64| MeasurementRecord {
        bench_id: spec.bench_id,
        scenario: spec.scenario,
        repetition,
        phase,
        value,
    };
    Ok([
        record(Phase::CreateWriteSeal, commit.as_nanos().max(1) as f64),
        record(Phase::Retrieval, retrieval.as_nanos().max(1) as f64),
        record(Phase::Read, bytes_read as f64 / read_time.as_secs_f64().max(1e-9)),
    ])
}

/// Runs the selected benches one after another. Within a bench the LOCAL
/// and REMOTE repetitions alternate, so slow drift in machine speed hits
/// both scenarios alike. Records come back grouped by bench, then scenario.
pub fn run_selection(
    bench_ids: &[u32],
    endpoints: &BenchEndpoints,
    repetitions: u32,
    seed: u64,
    observer: &mut dyn FnMut(&RepetitionReport<'_>),
) -> Result<BenchOutcome, BenchError> {
    let mut outcome = BenchOutcome::default();
    for &bench_id in bench_ids {
        let local = BenchmarkSpec::from_table(bench_id, Scenario::Local, repetitions, seed)?;
        let remote = BenchmarkSpec::from_table(bench_id, Scenario::Remote, repetitions, seed)?;
        let mut runners = [Runner::connect(&local, endpoints)?, Runner::connect(&remote, endpoints)?];
        for repetition in 0..repetitions {
            for runner in &mut runners {
                runner.step(repetition, observer)?;
            }
        }
        for runner in runners {
            outcome.extend(runner.outcome);
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub min: f64,
    pub p50: f64,
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for one sample.
    pub stddev: f64,
}

impl Stats {
    pub fn from_samples(samples: &[f64]) -> Result<Self, BenchError> {
        if samples.is_empty() {
            return Err(BenchError::EmptySample);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            count: n,
            min: sorted[0],
            p50: percentile(&sorted, 0.50),
            mean,
            p95: percentile(&sorted, 0.95),
            max: sorted[n - 1],
            stddev: var.sqrt(),
        })
    }
}

/// Linear interpolation between closest ranks over sorted input.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub bench_id: u32,
    pub scenario: Scenario,
    pub phase: Phase,
    pub stats: Stats,
}

/// Per-(bench, scenario, phase) statistics in bench/scenario/phase order.
pub fn summarize(records: &[MeasurementRecord]) -> Result<Vec<Summary>, BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptySample);
    }
    let mut groups: BTreeMap<(u32, Scenario, Phase), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.bench_id, r.scenario, r.phase)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((bench_id, scenario, phase), values)| {
            Ok(Summary {
                bench_id,
                scenario,
                phase,
                stats: Stats::from_samples(&values)?,
            })
        })
        .collect()
}

pub fn render_summary(summaries: &[Summary]) -> String {
    let mut out = format!(
        "{:>5} {:<7} {:<18} {:>14} {:>14} {:>14} {:>14} {:>14} {:>12}  unit\n",
        "bench", "scen", "phase", "min", "p50", "mean", "p95", "max", "stddev"
    );
    for s in summaries {
        let st = &s.stats;
        out.push_str(&format!(
            "{:>5} {:<7} {:<18} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e} {:>14.4e} {:>12.3e}  {}\n",
            s.bench_id,
            s.scenario,
            s.phase,
            st.min,
            st.p50,
            st.mean,
            st.p95,
            st.max,
            st.stddev,
            s.phase.unit()
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

/// One output row; the shared schema of the CSV and JSON formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRow {
    pub bench_id: u32,
    pub scenario: Scenario,
    pub repetition: u32,
    pub phase: Phase,
    pub value: f64,
    pub unit: String,
}

impl From<&MeasurementRecord> for OutputRow {
    fn from(r: &MeasurementRecord) -> Self {
        Self {
            bench_id: r.bench_id,
            scenario: r.scenario,
            repetition: r.repetition,
            phase: r.phase,
            value: r.value,
            unit: r.phase.unit().to_string(),
        }
    }
}

pub fn emit(records: &[MeasurementRecord], format: OutputFormat, path: impl AsRef<Path>) -> Result<(), BenchError> {
    let rows: Vec<OutputRow> = records.iter().map(OutputRow::from).collect();
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in &rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, &rows)?;
            w.flush()?;
        }
    }
    Ok(())
}
