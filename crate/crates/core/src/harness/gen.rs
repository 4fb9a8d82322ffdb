use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::SeedableRng;

use crate::codec::{encode_ascii, parse_ascii};
use crate::event::{Event, Level, Timestamp};
use crate::transport::{Endpoint, WriterConfig};
use crate::trigger::{TriggerConfig, TriggeredHandle};

use super::{athena_event, HarnessError, GEN_PROG};

/// A synthetic instrumented application.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub job: u32,
    /// Attempted events per second; gated attempts still count.
    pub rate: f64,
    pub duration: Duration,
    pub spool_dir: PathBuf,
    /// Every emitted event is appended here as one ASCII line.
    pub ledger: PathBuf,
    pub check_interval: Duration,
    pub flush_interval: Duration,
    /// Hold the clock until the level admits events, for at most this long.
    pub wait_active: Option<Duration>,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(job: u32, spool_dir: impl Into<PathBuf>, ledger: impl Into<PathBuf>) -> GenConfig {
        GenConfig {
            job,
            rate: 40.0,
            duration: Duration::from_secs(10),
            spool_dir: spool_dir.into(),
            ledger: ledger.into(),
            check_interval: crate::trigger::DEFAULT_CHECK_INTERVAL,
            flush_interval: Duration::from_secs(1),
            wait_active: None,
            seed: job as u64,
        }
    }

    /// Command-line arguments of the `gen` subcommand for this config.
    pub fn to_args(&self) -> Vec<String> {
        let mut a = vec![
            "gen".to_string(),
            "--job".into(),
            self.job.to_string(),
            "--rate".into(),
            self.rate.to_string(),
            "--duration".into(),
            self.duration.as_secs_f64().to_string(),
            "--spool-dir".into(),
            self.spool_dir.display().to_string(),
            "--ledger".into(),
            self.ledger.display().to_string(),
            "--check-interval".into(),
            self.check_interval.as_secs_f64().to_string(),
            "--flush-interval".into(),
            self.flush_interval.as_secs_f64().to_string(),
            "--seed".into(),
            self.seed.to_string(),
        ];
        if let Some(w) = self.wait_active {
            a.push("--wait-active".into());
            a.push(w.as_secs_f64().to_string());
        }
        a
    }

    /// Number of write attempts a full run makes.
    pub fn attempts(&self) -> u64 {
        (self.rate * self.duration.as_secs_f64()).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSummary {
    pub attempted: u64,
    pub emitted: u64,
    /// When the paced run began (after any wait for activation).
    pub started_at: Timestamp,
}

/// Runs one generator in this process until its duration passes or `stop`
/// is set. Attempts are paced on an absolute schedule so the rate does not
/// drift.
pub fn run_generator(cfg: &GenConfig, stop: &AtomicBool) -> Result<GenSummary, HarnessError> {
    if cfg.rate.is_nan() || cfg.rate <= 0.0 {
        return Err(HarnessError::Run(format!(
            "rate must be positive, got {}",
            cfg.rate
        )));
    }
    let default = cfg
        .spool_dir
        .join(format!("{GEN_PROG}.{}.default.nlog", std::process::id()));
    let mut tc = TriggerConfig::new(GEN_PROG, &cfg.spool_dir, Endpoint::file(default))
        .with_check_interval(cfg.check_interval);
    tc.writer = WriterConfig::default().with_flush_interval(cfg.flush_interval);
    let mut handle = TriggeredHandle::open(tc)?;
    let ledger_file = std::fs::File::create(&cfg.ledger).map_err(|e| HarnessError::Path {
        path: cfg.ledger.clone(),
        message: e.to_string(),
    })?;
    let mut ledger = BufWriter::new(ledger_file);

    if let Some(limit) = cfg.wait_active {
        let lowest = Level::new(1).expect("valid level");
        let begin = Instant::now();
        while !handle.enabled(lowest)? && begin.elapsed() < limit && !stop.load(Ordering::Relaxed) {
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
    let period = Duration::from_secs_f64(1.0 / cfg.rate);
    let total = cfg.attempts();
    let start = Instant::now();
    let started_at = Timestamp::now();
    let mut emitted = 0;
    let mut attempted = 0;
    while attempted < total && !stop.load(Ordering::Relaxed) {
        let due = start + period.mul_f64(attempted as f64);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
        let event = athena_event(&mut rng, cfg.job, attempted, Timestamp::now());
        if let Some(written) = handle.t_write_event(event)? {
            ledger.write_all(encode_ascii(&written)?.as_bytes())?;
            ledger.write_all(b"\n")?;
            emitted += 1;
        }
        attempted += 1;
    }
    handle.close()?;
    ledger.flush()?;
    Ok(GenSummary {
        attempted,
        emitted,
        started_at,
    })
}

/// Events recorded in a generator ledger.
pub fn read_ledger(path: &Path) -> Result<Vec<Event>, HarnessError> {
    let f = std::fs::File::open(path).map_err(|e| HarnessError::Path {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(parse_ascii(&line)?);
        }
    }
    Ok(out)
}
