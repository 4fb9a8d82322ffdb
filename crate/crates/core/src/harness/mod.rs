//! Desk-scale experiments: filter throughput over a complexity × pass-rate
//! grid, and end-to-end latency with many generators and consumers.

mod bench;
mod gen;
mod scale;

use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::event::{Event, Level, Timestamp, Value};

pub use bench::{bench_filter, build_filter, FilterBenchConfig, GridRow};
pub use gen::{read_ledger, run_generator, GenConfig, GenSummary};
pub use scale::{bench_scale, FilterKind, Intervals, ScaleConfig, ScaleRow, ScaleRun};

/// Program name used by generated events.
pub const GEN_PROG: &str = "Athena";

/// Event names cycled through by the generator, with their levels.
pub const GEN_EVENTS: [(&str, i16); 3] = [("Start", 1), ("Middle", 2), ("End", 1)];

/// Level that lets every generated event through.
pub const GEN_DETAIL_LEVEL: i16 = 2;

const ALGORITHMS: [&str; 4] = ["Tracking", "Calo", "Muon", "Vertex"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {message}")]
    Path { path: PathBuf, message: String },
    #[error(transparent)]
    Service(#[from] crate::services::ServiceError),
    #[error(transparent)]
    Trigger(#[from] crate::trigger::TriggerError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Client(#[from] crate::control::ClientError),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Run(String),
}

/// Expected delay from periodic batching alone: each stage holds an event
/// for half its interval on average.
pub fn expected_fixed_latency(forward_interval: f64, buffer_timeouts: &[f64]) -> f64 {
    (forward_interval + buffer_timeouts.iter().sum::<f64>()) / 2.0
}

/// The `i`th generated event of job `job`. `K` is uniform in 0..100 and
/// drives pass-rate control in the filter bench.
pub fn athena_event(rng: &mut impl Rng, job: u32, i: u64, timestamp: Timestamp) -> Event {
    let (name, level) = GEN_EVENTS[(i % GEN_EVENTS.len() as u64) as usize];
    let fields = vec![
        ("JOB".to_string(), Value::Int(job as i64)),
        ("K".to_string(), Value::Int(rng.gen_range(0..100))),
        (
            "EVT.NUM".to_string(),
            Value::Int((i / GEN_EVENTS.len() as u64) as i64),
        ),
        (
            "SIZE".to_string(),
            Value::Int(rng.gen_range(1_000..2_000_000)),
        ),
        ("CPU".to_string(), Value::Float(rng.gen_range(0.0..100.0))),
        (
            "ALG".to_string(),
            Value::Text(ALGORITHMS[rng.gen_range(0..ALGORITHMS.len())].to_string()),
        ),
    ];
    Event::with_parts(
        timestamp,
        crate::event::local_host(),
        GEN_PROG,
        name,
        Level::new(level as i64).expect("valid level"),
        fields,
    )
    .expect("generated events are valid")
}

/// Identity of one generated event across generators: (host, prog, job, seq).
pub type EventKey = (String, String, i64, u64);

pub fn event_key(e: &Event) -> Option<EventKey> {
    let job = match e.field("JOB") {
        Some(Value::Int(j)) => *j,
        _ => return None,
    };
    Some((e.host.clone(), e.prog.clone(), job, e.seq?))
}

/// Value at quantile `q` (0..=1) of sorted samples, nearest rank.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Writes the filter grid as `complexity,pass_rate,events_per_sec`.
pub fn write_grid_csv(rows: &[GridRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["complexity", "pass_rate", "events_per_sec"])?;
    for r in rows {
        w.write_record([
            r.complexity.to_string(),
            format!("{:.2}", r.pass_rate),
            format!("{:.1}", r.events_per_sec),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes scale rows as `producers,consumers,filter_kind,median_s,p90_s,agg_out_eps`.
pub fn write_scale_csv(rows: &[ScaleRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "producers",
        "consumers",
        "filter_kind",
        "median_s",
        "p90_s",
        "agg_out_eps",
    ])?;
    for r in rows {
        w.write_record([
            r.producers.to_string(),
            r.consumers.to_string(),
            r.filter_kind.as_str().to_string(),
            format!("{:.3}", r.median_s),
            format!("{:.3}", r.p90_s),
            format!("{:.1}", r.agg_out_eps),
        ])?;
    }
    w.flush()?;
    Ok(())
}
