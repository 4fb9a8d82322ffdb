use std::path::{Path, PathBuf};

use glob::Pattern;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Level, Timestamp};
use crate::transport::write_atomically;

use super::{Activation, ActivationList};

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("empty pattern")]
    EmptyPattern,
    #[error("malformed pattern `{0}`: {1}")]
    BadPattern(String, String),
    #[error("level {0} is outside -1..=255")]
    BadLevel(i64),
    #[error("activation set is at version {current}, not {expected}")]
    Conflict { expected: u64, current: u64 },
    #[error("state file {0}: {1}")]
    State(PathBuf, String),
}

/// Characters before the first glob metacharacter.
pub fn literal_prefix_len(pattern: &str) -> usize {
    pattern.find(['*', '?', '[']).unwrap_or(pattern.len())
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StateFile {
    version: u64,
    activations: Vec<Activation>,
}

struct Entry {
    activation: Activation,
    prog: Pattern,
    host: Pattern,
}

fn compile(pattern: &str) -> Result<Pattern, ActivationError> {
    if pattern.trim().is_empty() {
        return Err(ActivationError::EmptyPattern);
    }
    Pattern::new(pattern)
        .map_err(|e| ActivationError::BadPattern(pattern.to_string(), e.msg.to_string()))
}

/// Activation levels keyed by (program glob, host glob), optionally persisted.
///
/// When several entries match a (host, prog) pair the one with the longer
/// literal program prefix wins, then the longer literal host prefix, then the
/// most recently set. No match means level -1.
#[derive(Default)]
pub struct ActivationSet {
    version: u64,
    entries: Vec<Entry>,
    path: Option<PathBuf>,
}

impl ActivationSet {
    pub fn new() -> ActivationSet {
        ActivationSet::default()
    }

    /// Loads the set from `path` (empty if the file does not exist); later
    /// changes are saved back to it.
    pub fn open(path: impl Into<PathBuf>) -> Result<ActivationSet, ActivationError> {
        let path = path.into();
        let state: StateFile = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| ActivationError::State(path.clone(), e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StateFile::default(),
            Err(e) => return Err(ActivationError::State(path, e.to_string())),
        };
        let mut set = ActivationSet {
            version: state.version,
            entries: Vec::new(),
            path: Some(path),
        };
        for a in state.activations {
            set.entries.push(Entry {
                prog: compile(&a.prog)?,
                host: compile(&a.host)?,
                activation: a,
            });
        }
        Ok(set)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn list(&self) -> ActivationList {
        ActivationList {
            version: self.version,
            activations: self.entries.iter().map(|e| e.activation.clone()).collect(),
        }
    }

    fn save(&self) -> Result<(), ActivationError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let state = StateFile {
            version: self.version,
            activations: self.entries.iter().map(|e| e.activation.clone()).collect(),
        };
        let json = serde_json::to_vec_pretty(&state).expect("state serializes");
        write_atomically(path, &json)
            .map_err(|e| ActivationError::State(path.clone(), e.to_string()))
    }

    /// Inserts or replaces the entry for (`prog`, `host`).
    pub fn set(
        &mut self,
        prog: &str,
        host: &str,
        level: i64,
        if_version: Option<u64>,
    ) -> Result<Activation, ActivationError> {
        let level = Level::new(level).map_err(|_| ActivationError::BadLevel(level))?;
        let (prog_pat, host_pat) = (compile(prog)?, compile(host)?);
        if let Some(expected) = if_version {
            if expected != self.version {
                return Err(ActivationError::Conflict {
                    expected,
                    current: self.version,
                });
            }
        }
        self.version += 1;
        let activation = Activation {
            prog: prog.to_string(),
            host: host.to_string(),
            level: level.value(),
            seq: self.version,
            set_at: Timestamp::now().render(),
        };
        match self
            .entries
            .iter_mut()
            .find(|e| e.activation.prog == prog && e.activation.host == host)
        {
            Some(e) => e.activation = activation.clone(),
            None => self.entries.push(Entry {
                activation: activation.clone(),
                prog: prog_pat,
                host: host_pat,
            }),
        }
        self.save()?;
        Ok(activation)
    }

    /// Removes the entry for (`prog`, `host`); returns whether one existed.
    pub fn clear(&mut self, prog: &str, host: &str) -> Result<bool, ActivationError> {
        let before = self.entries.len();
        self.entries
            .retain(|e| !(e.activation.prog == prog && e.activation.host == host));
        if self.entries.len() == before {
            return Ok(false);
        }
        self.version += 1;
        self.save()?;
        Ok(true)
    }

    /// Effective level for `prog` running on `host`.
    pub fn resolve(&self, host: &str, prog: &str) -> Level {
        self.entries
            .iter()
            .filter(|e| e.prog.matches(prog) && e.host.matches(host))
            .max_by_key(|e| {
                (
                    literal_prefix_len(&e.activation.prog),
                    literal_prefix_len(&e.activation.host),
                    e.activation.seq,
                )
            })
            .map(|e| Level::new(e.activation.level as i64).expect("validated on set"))
            .unwrap_or(Level::OFF)
    }
}
