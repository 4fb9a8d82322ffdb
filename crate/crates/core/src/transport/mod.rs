//! Buffered, failure-tolerant event streaming to files and network peers.
//!
//! Two endpoint kinds exist: `file:///path` appends to a local file (binary for
//! `.nlog`, ASCII for `.log`), and `x-netlog://host[:port]` streams the binary
//! format over TCP. Network receivers answer with cumulative acknowledgements
//! (u64 little-endian counts of event records consumed), which lets a writer
//! move unacknowledged events to its backup file when a connection breaks and
//! resend them later. Delivery is at-least-once; duplicates carry the same
//! `NL.SEQ` and can be dropped by the consumer.

mod listener;
mod reader;
mod spool;
mod writer;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{CodecError, Format};

pub use listener::{Acker, Inbound, Listener};
pub use reader::{open_reader, ReadItem, Reader};
pub use spool::{cursor_path, SpoolBatch, SpoolReader};
pub use writer::{Writer, WriterStats};

pub const DEFAULT_PORT: u16 = 14380;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("malformed endpoint `{0}`: {1}")]
    MalformedEndpoint(String, String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Codec(#[from] CodecError),
    #[error("writer is closed")]
    Closed,
    #[error("writer failed: {0}")]
    Failed(String),
    #[error("backup path {0} is not writable: {1}")]
    Backup(PathBuf, std::io::Error),
    #[error("protocol error from {peer}: {source}")]
    Protocol {
        peer: String,
        #[source]
        source: CodecError,
    },
    #[error("{0} is not a listening endpoint")]
    NotListenable(String),
}

/// Where events go.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Net { host: String, port: u16 },
    File { path: PathBuf },
}

impl Endpoint {
    pub fn file(path: impl Into<PathBuf>) -> Endpoint {
        Endpoint::File { path: path.into() }
    }

    pub fn net(host: impl Into<String>, port: u16) -> Endpoint {
        Endpoint::Net {
            host: host.into(),
            port,
        }
    }

    pub fn parse(text: &str) -> Result<Endpoint, TransportError> {
        let bad = |why: &str| TransportError::MalformedEndpoint(text.to_string(), why.to_string());
        let url = url::Url::parse(text).map_err(|e| bad(&e.to_string()))?;
        match url.scheme() {
            "x-netlog" => {
                let host = url
                    .host_str()
                    .filter(|h| !h.is_empty())
                    .ok_or_else(|| bad("missing host"))?;
                if !(url.path().is_empty() || url.path() == "/") {
                    return Err(bad("unexpected path"));
                }
                let host = host.trim_start_matches('[').trim_end_matches(']');
                Ok(Endpoint::net(host, url.port().unwrap_or(DEFAULT_PORT)))
            }
            "file" => {
                if url
                    .host_str()
                    .is_some_and(|h| !h.is_empty() && h != "localhost")
                {
                    return Err(bad("file endpoints must be local absolute paths"));
                }
                let path = url
                    .to_file_path()
                    .map_err(|_| bad("not an absolute path"))?;
                if path.file_name().is_none() {
                    return Err(bad("missing file name"));
                }
                Ok(Endpoint::File { path })
            }
            other => Err(bad(&format!("unsupported scheme `{other}`"))),
        }
    }

    pub fn file_path(&self) -> Option<&Path> {
        match self {
            Endpoint::File { path } => Some(path),
            Endpoint::Net { .. } => None,
        }
    }

    pub fn format(&self) -> Format {
        match self {
            Endpoint::File { path } => Format::from_path(path),
            Endpoint::Net { .. } => Format::Binary,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Net { host, port } if host.contains(':') => {
                write!(f, "x-netlog://[{host}]:{port}")
            }
            Endpoint::Net { host, port } => write!(f, "x-netlog://{host}:{port}"),
            Endpoint::File { path } => match url::Url::from_file_path(path) {
                Ok(u) => f.write_str(u.as_str()),
                Err(()) => write!(f, "file://{}", path.display()),
            },
        }
    }
}

impl FromStr for Endpoint {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Endpoint::parse(s)
    }
}

/// Writer tuning. Defaults: flush at 64 KiB or 1 s, reconnect backoff 0.5 s
/// doubling to 30 s, resend from backup on reconnect.
#[derive(Debug, Clone)]
pub struct WriterConfig {
    pub flush_bytes: usize,
    pub flush_interval: Duration,
    pub backup_path: Option<PathBuf>,
    pub reconnect_initial: Duration,
    pub reconnect_max: Duration,
    pub resend: bool,
    pub connect_timeout: Duration,
    /// How long `close` waits for outstanding acknowledgements.
    pub close_timeout: Duration,
}

impl Default for WriterConfig {
    fn default() -> Self {
        WriterConfig {
            flush_bytes: 64 * 1024,
            flush_interval: Duration::from_secs(1),
            backup_path: None,
            reconnect_initial: Duration::from_millis(500),
            reconnect_max: Duration::from_secs(30),
            resend: true,
            connect_timeout: Duration::from_secs(2),
            close_timeout: Duration::from_secs(5),
        }
    }
}

impl WriterConfig {
    pub fn with_flush_interval(mut self, interval: Duration) -> Self {
        self.flush_interval = interval;
        self
    }

    pub fn with_backup(mut self, path: impl Into<PathBuf>) -> Self {
        self.backup_path = Some(path.into());
        self
    }
}

/// Writes `contents` to `path` through a temporary file and rename, so readers
/// never see a partial file.
pub fn write_atomically(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("tmp");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
    }
    std::fs::rename(&tmp, path)
}
