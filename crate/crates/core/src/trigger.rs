//! Leveled logging handle that a local activation daemon can retarget.
//!
//! Opening a handle drops a descriptor file `<spool>/<prog>.<pid>.desc` so the
//! daemon can find the process. The daemon steers the process by atomically
//! replacing `<spool>/<prog>.<pid>.trig`, a file of `key=value` lines:
//!
//! ```text
//! level=2
//! destination=file:///var/spool/nlact/Athena.4242.0.nlog
//! ```
//!
//! The handle looks at the trigger file from inside `t_write`, at most once
//! per check interval; there is no background thread. Each key falls back to
//! the handle's default when absent, and a missing file means all defaults.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{self, Event, EventError, Level, Timestamp, Value};
use crate::transport::{
    write_atomically, Endpoint, TransportError, Writer, WriterConfig, WriterStats,
};

pub const DEFAULT_CHECK_INTERVAL: Duration = Duration::from_secs(1);
pub const SPOOL_ENV: &str = "NL_SPOOL_DIR";

/// Spool directory from `NL_SPOOL_DIR`, else a directory under the system temp dir.
pub fn default_spool_dir() -> PathBuf {
    std::env::var_os(SPOOL_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("nlact-spool"))
}

pub fn descriptor_path(spool_dir: &Path, prog: &str, pid: u32) -> PathBuf {
    spool_dir.join(format!("{prog}.{pid}.desc"))
}

pub fn trigger_path(spool_dir: &Path, prog: &str, pid: u32) -> PathBuf {
    spool_dir.join(format!("{prog}.{pid}.trig"))
}

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("spool directory {0} is not writable: {1}")]
    SpoolDir(PathBuf, std::io::Error),
    #[error("descriptor {0} is already held by an open handle")]
    DescriptorCollision(PathBuf),
    #[error("invalid program name `{0}`")]
    BadProg(String),
    #[error("handle is closed")]
    Closed,
    #[error("events cannot be written at level -1")]
    OffLevel,
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("removing descriptor {0}: {1}")]
    Descriptor(PathBuf, std::io::Error),
}

/// Contents of a descriptor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppDescriptor {
    pub prog: String,
    pub pid: u32,
    pub host: String,
    pub start_time: String,
    pub trigger_path: PathBuf,
    pub default_destination: String,
}

impl AppDescriptor {
    pub fn load(path: &Path) -> std::io::Result<AppDescriptor> {
        let text = std::fs::read(path)?;
        serde_json::from_slice(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Parsed trigger file. `None` keys mean "use the default".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TriggerFile {
    pub level: Option<Level>,
    pub destination: Option<Endpoint>,
}

impl TriggerFile {
    pub fn parse(text: &str) -> Result<TriggerFile, String> {
        let mut t = TriggerFile::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            let value = value.trim();
            match key.trim() {
                "level" => {
                    t.level =
                        Some(Level::from_token(value).map_err(|e| format!("line {}: {e}", i + 1))?)
                }
                "destination" => {
                    t.destination =
                        Some(Endpoint::parse(value).map_err(|e| format!("line {}: {e}", i + 1))?)
                }
                other => return Err(format!("line {}: unknown key `{other}`", i + 1)),
            }
        }
        Ok(t)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.level {
            out.push_str(&format!("level={l}\n"));
        }
        if let Some(d) = &self.destination {
            out.push_str(&format!("destination={d}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> std::io::Result<Option<TriggerFile>> {
        match std::fs::read_to_string(path) {
            Ok(text) => TriggerFile::parse(&text)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Replaces the trigger file atomically.
    pub fn store(&self, path: &Path) -> std::io::Result<()> {
        write_atomically(path, self.render().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct TriggerConfig {
    pub prog: String,
    pub spool_dir: PathBuf,
    pub default_level: Level,
    pub default_destination: Endpoint,
    pub check_interval: Duration,
    pub writer: WriterConfig,
}

impl TriggerConfig {
    pub fn new(
        prog: impl Into<String>,
        spool_dir: impl Into<PathBuf>,
        default_destination: Endpoint,
    ) -> TriggerConfig {
        TriggerConfig {
            prog: prog.into(),
            spool_dir: spool_dir.into(),
            default_level: Level::OFF,
            default_destination,
            check_interval: DEFAULT_CHECK_INTERVAL,
            writer: WriterConfig::default(),
        }
    }

    pub fn with_default_level(mut self, level: Level) -> Self {
        self.default_level = level;
        self
    }

    pub fn with_check_interval(mut self, interval: Duration) -> Self {
        self.check_interval = interval;
        self
    }
}

fn open_descriptors() -> &'static Mutex<HashSet<PathBuf>> {
    static OPEN: OnceLock<Mutex<HashSet<PathBuf>>> = OnceLock::new();
    OPEN.get_or_init(Default::default)
}

/// File identity used to notice trigger rewrites.
type Signature = (SystemTime, u64, u64);

fn signature(path: &Path) -> Option<Signature> {
    let m = std::fs::metadata(path).ok()?;
    #[cfg(unix)]
    let ino = std::os::unix::fs::MetadataExt::ino(&m);
    #[cfg(not(unix))]
    let ino = 0;
    Some((m.modified().ok()?, m.len(), ino))
}

/// Logging handle for one instrumented activity.
pub struct TriggeredHandle {
    config: TriggerConfig,
    host: String,
    descriptor: PathBuf,
    trigger: PathBuf,
    level: Level,
    destination: Endpoint,
    writer: Option<Writer>,
    last_check: Instant,
    seen: Option<Signature>,
    next_seq: u64,
    emitted: u64,
    notices: Vec<String>,
    closed: bool,
}

impl TriggeredHandle {
    pub fn open(config: TriggerConfig) -> Result<TriggeredHandle, TriggerError> {
        if !event::valid_field_name(&config.prog) || config.prog.contains('/') {
            return Err(TriggerError::BadProg(config.prog.clone()));
        }
        let pid = std::process::id();
        let descriptor = descriptor_path(&config.spool_dir, &config.prog, pid);
        let trigger = trigger_path(&config.spool_dir, &config.prog, pid);
        if !open_descriptors()
            .lock()
            .unwrap()
            .insert(descriptor.clone())
        {
            return Err(TriggerError::DescriptorCollision(descriptor));
        }
        let host = event::local_host().to_string();
        let desc = AppDescriptor {
            prog: config.prog.clone(),
            pid,
            host: host.clone(),
            start_time: Timestamp::now().render(),
            trigger_path: trigger.clone(),
            default_destination: config.default_destination.to_string(),
        };
        let json = serde_json::to_vec_pretty(&desc).expect("descriptor serializes");
        if let Err(e) = std::fs::create_dir_all(&config.spool_dir)
            .and_then(|_| write_atomically(&descriptor, &json))
        {
            open_descriptors().lock().unwrap().remove(&descriptor);
            return Err(TriggerError::SpoolDir(config.spool_dir.clone(), e));
        }
        let mut handle = TriggeredHandle {
            level: config.default_level,
            destination: config.default_destination.clone(),
            config,
            host,
            descriptor,
            trigger,
            writer: None,
            last_check: Instant::now(),
            seen: None,
            next_seq: 0,
            emitted: 0,
            notices: Vec::new(),
            closed: false,
        };
        handle.poll_trigger()?;
        Ok(handle)
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn destination(&self) -> &Endpoint {
        &self.destination
    }

    pub fn descriptor_path(&self) -> &Path {
        &self.descriptor
    }

    pub fn trigger_path(&self) -> &Path {
        &self.trigger
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    /// Counters of the current destination writer, if one is open.
    pub fn writer_stats(&self) -> Option<WriterStats> {
        self.writer.as_ref().map(Writer::stats)
    }

    /// Problems met while reading the trigger file since the last call.
    pub fn take_notices(&mut self) -> Vec<String> {
        std::mem::take(&mut self.notices)
    }

    /// Whether an event at `level` would be emitted now. Re-reads the
    /// trigger file first when the check interval has passed.
    pub fn enabled(&mut self, level: Level) -> Result<bool, TriggerError> {
        if self.closed {
            return Err(TriggerError::Closed);
        }
        if level.is_off() {
            return Err(TriggerError::OffLevel);
        }
        if self.last_check.elapsed() >= self.config.check_interval {
            self.poll_trigger()?;
        }
        Ok(self.level.permits(level))
    }

    /// Writes an event when `level` is within the current level. Returns
    /// whether an event was emitted. Gated-out calls do no encoding or I/O
    /// beyond the periodic trigger check.
    pub fn t_write<K, V>(
        &mut self,
        level: Level,
        name: &str,
        fields: impl IntoIterator<Item = (K, V)>,
    ) -> Result<bool, TriggerError>
    where
        K: Into<String>,
        V: Into<Value>,
    {
        if !self.enabled(level)? {
            return Ok(false);
        }
        let fields = fields
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        let event = Event::with_parts(
            Timestamp::now(),
            self.host.as_str(),
            self.config.prog.as_str(),
            name,
            level,
            fields,
        )?;
        self.emit(event)?;
        Ok(true)
    }

    /// Like [`t_write`](Self::t_write) for a prepared event. Host and prog
    /// are replaced with the handle's own. Returns the event as written,
    /// sequence number included, or `None` when its level is gated out.
    pub fn t_write_event(&mut self, mut event: Event) -> Result<Option<Event>, TriggerError> {
        if !self.enabled(event.level)? {
            return Ok(None);
        }
        event.host.clone_from(&self.host);
        event.prog.clone_from(&self.config.prog);
        event.seq = Some(self.emit(event.clone())?);
        Ok(Some(event))
    }

    fn emit(&mut self, mut event: Event) -> Result<u64, TriggerError> {
        let seq = self.next_seq;
        event.seq = Some(seq);
        if self.writer.is_none() {
            self.writer = Some(Writer::open(
                self.destination.clone(),
                self.config.writer.clone(),
            )?);
        }
        self.writer.as_ref().expect("opened").write(event)?;
        self.next_seq += 1;
        self.emitted += 1;
        Ok(seq)
    }

    /// Re-reads the trigger file if it changed and applies it.
    pub fn poll_trigger(&mut self) -> Result<(), TriggerError> {
        self.last_check = Instant::now();
        let sig = signature(&self.trigger);
        if sig == self.seen {
            return Ok(());
        }
        let parsed = match TriggerFile::load(&self.trigger) {
            Ok(t) => t.unwrap_or_default(),
            Err(e) => {
                self.notices.push(format!(
                    "ignoring trigger file {}: {e}",
                    self.trigger.display()
                ));
                self.seen = sig;
                return Ok(());
            }
        };
        self.seen = sig;
        self.level = parsed.level.unwrap_or(self.config.default_level);
        let destination = parsed
            .destination
            .unwrap_or_else(|| self.config.default_destination.clone());
        if destination != self.destination {
            if let Some(w) = self.writer.take() {
                if let Err(e) = w.close() {
                    self.notices
                        .push(format!("closing {}: {e}", self.destination));
                }
            }
            self.destination = destination;
        }
        Ok(())
    }

    pub fn flush(&self) -> Result<(), TriggerError> {
        if let Some(w) = &self.writer {
            w.flush()?;
        }
        Ok(())
    }

    /// Flushes, closes the destination and removes the descriptor. Idempotent.
    pub fn close(&mut self) -> Result<(), TriggerError> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        let flushed = match self.writer.take() {
            Some(w) => w.close().map_err(TriggerError::from),
            None => Ok(()),
        };
        open_descriptors().lock().unwrap().remove(&self.descriptor);
        match std::fs::remove_file(&self.descriptor) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(TriggerError::Descriptor(self.descriptor.clone(), e)),
        }
        flushed
    }
}

impl Drop for TriggeredHandle {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
