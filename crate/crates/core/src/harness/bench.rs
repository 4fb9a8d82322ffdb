use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;

use crate::codec::{encode_binary, BinaryDecoder, Record};
use crate::event::{Event, Timestamp};
use crate::filter::{parse_filter, Filter, Pipe, WriterSink};
use crate::transport::{Endpoint, Writer, WriterConfig};

use super::{athena_event, HarnessError};

/// Always-true comparisons on fields every generated event carries. They
/// cost a field lookup each and never change which events pass.
const TAUTOLOGIES: [&str; 6] = [
    "JOB >= 0",
    "EVT.NUM >= 0",
    "SIZE > 0",
    "CPU >= 0.0",
    "ALG != \"\"",
    "K >= 0",
];

const DECODE_BATCH: usize = 4096;

#[derive(Debug, Clone)]
pub struct FilterBenchConfig {
    /// Comparisons per filter, not counting the pass-rate comparison.
    pub complexities: Vec<usize>,
    /// Percent of events that pass.
    pub pass_rates: Vec<u32>,
    pub n_events: usize,
    /// Where the sink's output file goes while a cell runs.
    pub out_dir: PathBuf,
    /// Each cell is timed this many times and the fastest run kept.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for FilterBenchConfig {
    fn default() -> Self {
        FilterBenchConfig {
            complexities: (0..=40).step_by(4).collect(),
            pass_rates: (0..=100).step_by(10).collect(),
            n_events: 100_000,
            out_dir: std::env::temp_dir(),
            repeats: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub complexity: usize,
    /// Fraction of events that passed, 0..=1.
    pub pass_rate: f64,
    pub events_per_sec: f64,
    pub delivered: u64,
}

/// A single conjunction of `complexity` tautologies followed by `K < pass`.
/// Short-circuit evaluation reaches the last comparison for every event, so
/// cost tracks complexity while `pass` alone sets selectivity.
pub fn build_filter(complexity: usize, pass: u32) -> Filter {
    let mut parts: Vec<&str> = (0..complexity)
        .map(|i| TAUTOLOGIES[i % TAUTOLOGIES.len()])
        .collect();
    let last = format!("K < {pass}");
    parts.push(&last);
    parse_filter(&parts.join(" and ")).expect("bench filter parses")
}

/// Times one grid cell: decode the wire bytes as the producer would, push
/// through a one-sink pipe writing a binary file, then flush.
fn run_cell(
    wire: &[u8],
    filter: &Filter,
    out: &std::path::Path,
) -> Result<(f64, u64), HarnessError> {
    let _ = std::fs::remove_file(out);
    let writer = Writer::open(Endpoint::file(out), WriterConfig::default())?;
    let pipe = Pipe::new();
    pipe.add_sink(filter.clone(), Box::new(WriterSink(writer)));
    let start = Instant::now();
    let mut dec = BinaryDecoder::new();
    let mut at = 0;
    let mut batch: Vec<Arc<Event>> = Vec::with_capacity(DECODE_BATCH);
    let mut delivered = 0u64;
    let mut n = 0u64;
    loop {
        let rec = dec
            .next_record(&wire[at..])
            .map_err(|f| HarnessError::Run(format!("bench input: {}", f.error)))?;
        let Some((rec, used)) = rec else { break };
        at += used;
        if let Record::Event(e) = rec {
            batch.push(Arc::new(e));
            n += 1;
            if batch.len() == DECODE_BATCH {
                delivered += pipe.push_batch(&batch) as u64;
                batch.clear();
            }
        }
    }
    delivered += pipe.push_batch(&batch) as u64;
    if let Some((_, e)) = pipe.sync().into_iter().next() {
        return Err(HarnessError::Run(format!("bench sink: {e}")));
    }
    pipe.close();
    let secs = start.elapsed().as_secs_f64();
    let _ = std::fs::remove_file(out);
    Ok((n as f64 / secs, delivered))
}

/// Measures pipe throughput for every (complexity, pass rate) cell.
pub fn bench_filter(cfg: &FilterBenchConfig) -> Result<Vec<GridRow>, HarnessError> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
    let events: Vec<Event> = (0..cfg.n_events as u64)
        .map(|i| {
            athena_event(
                &mut rng,
                1,
                i,
                Timestamp::from_micros(1_000_000_000_000_000 + i as i64),
            )
            .with_seq(i)
        })
        .collect();
    let wire = encode_binary(&events)?;
    drop(events);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg
        .out_dir
        .join(format!("bench-filter.{}.nlog", std::process::id()));
    let mut rows = Vec::new();
    for &c in &cfg.complexities {
        for &p in &cfg.pass_rates {
            let filter = build_filter(c, p);
            let mut best = 0.0f64;
            let mut delivered = 0;
            for _ in 0..cfg.repeats.max(1) {
                let (eps, d) = run_cell(&wire, &filter, &out)?;
                best = best.max(eps);
                delivered = d;
            }
            rows.push(GridRow {
                complexity: c,
                pass_rate: if cfg.n_events == 0 {
                    0.0
                } else {
                    delivered as f64 / cfg.n_events as f64
                },
                events_per_sec: best,
                delivered,
            });
        }
    }
    Ok(rows)
}
