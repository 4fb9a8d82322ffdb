//! ASCII and binary wire formats, and conversion between them.

pub mod ascii;
pub mod binary;

use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::event::{DateError, Event, LevelError};

pub use ascii::{encode_ascii, parse_ascii};
pub use binary::{
    decode_binary, encode_binary, BinaryDecoder, BinaryEncoder, Decoded, Record, Truncation,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("missing required field {0}")]
    MissingField(&'static str),
    #[error("field {0} appears more than once")]
    DuplicateField(String),
    #[error("malformed FIELD=VALUE pair at column {column}")]
    MalformedPair { column: usize },
    #[error(transparent)]
    Date(#[from] DateError),
    #[error("bad LVL: {0}")]
    Level(LevelError),
    #[error("events cannot carry level -1")]
    OffLevel,
    #[error("bad NL.SEQ value {0}")]
    BadSeq(String),
    #[error("invalid field name `{0}`")]
    InvalidFieldName(String),
    #[error("value of {0} contains a control character")]
    ControlCharacter(String),
    #[error("value of {0} is not a finite number")]
    NonFinite(String),
    #[error("too many fields ({0})")]
    TooManyFields(usize),
    #[error("name of {0} bytes does not fit the dictionary")]
    NameTooLong(usize),
    #[error("text value of {0} exceeds 65535 bytes")]
    TextTooLong(String),
    #[error("more than 65536 distinct names in one stream")]
    DictionaryOverflow,
    #[error("bad stream magic")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    BadVersion(u8),
    #[error("unknown record tag {0:#04x}")]
    BadTag(u8),
    #[error("corrupt record length {0}")]
    CorruptLength(usize),
    #[error("corrupt event record")]
    CorruptRecord,
    #[error("unknown value type {0}")]
    BadValueType(u8),
    #[error("name id {0} used before definition")]
    UndefinedName(u16),
    #[error("invalid UTF-8 in record")]
    InvalidUtf8,
    #[error("at byte offset {offset}: {source}")]
    At {
        offset: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error("stream ends mid-record at byte offset {0}")]
    Truncated(usize),
    #[error("i/o: {0}")]
    Io(String),
}

impl CodecError {
    pub fn at_offset(self, offset: usize) -> CodecError {
        CodecError::At {
            offset,
            source: Box::new(self),
        }
    }

    pub fn at_line(self, line: usize) -> CodecError {
        CodecError::Line {
            line,
            source: Box::new(self),
        }
    }
}

impl From<io::Error> for CodecError {
    fn from(e: io::Error) -> Self {
        CodecError::Io(e.to_string())
    }
}

/// On-disk / on-wire event format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ascii,
    Binary,
}

impl Format {
    /// `.log` is ASCII; anything else (normally `.nlog`) is binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("log") => Format::Ascii,
            _ => Format::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConvertStats {
    pub events: u64,
}

/// Reads every event from `input` in the given format.
pub fn read_all(input: impl Read, from: Format) -> Result<Vec<Event>, CodecError> {
    let mut events = Vec::new();
    for_each_event(input, from, |e| {
        events.push(e);
        Ok(())
    })?;
    Ok(events)
}

fn for_each_event(
    input: impl Read,
    from: Format,
    mut f: impl FnMut(Event) -> Result<(), CodecError>,
) -> Result<(), CodecError> {
    match from {
        Format::Ascii => {
            let reader = io::BufReader::new(input);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                f(parse_ascii(&line).map_err(|e| e.at_line(i + 1))?)?;
            }
        }
        Format::Binary => {
            let mut input = input;
            let mut bytes = Vec::new();
            input.read_to_end(&mut bytes)?;
            if bytes.is_empty() {
                return Ok(());
            }
            let decoded = decode_binary(&bytes)?;
            for e in decoded.events {
                f(e)?;
            }
            if let Some(t) = decoded.truncated {
                return Err(CodecError::Truncated(t.offset));
            }
        }
    }
    Ok(())
}

/// Streams events from `input` to `output`, changing format when `from != to`.
///
/// When both formats match the bytes are copied through unchanged. Empty input
/// gives empty output.
pub fn convert(
    mut input: impl Read,
    from: Format,
    mut output: impl Write,
    to: Format,
) -> Result<ConvertStats, CodecError> {
    if from == to {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let events = match from {
            Format::Binary if !bytes.is_empty() => {
                let d = decode_binary(&bytes)?;
                if let Some(t) = d.truncated {
                    return Err(CodecError::Truncated(t.offset));
                }
                d.events.len()
            }
            Format::Binary => 0,
            Format::Ascii => read_all(&bytes[..], Format::Ascii)?.len(),
        };
        output.write_all(&bytes)?;
        return Ok(ConvertStats {
            events: events as u64,
        });
    }

    let mut stats = ConvertStats::default();
    match to {
        Format::Ascii => {
            let mut line = String::with_capacity(256);
            for_each_event(input, from, |e| {
                line.clear();
                ascii::encode_into(&e, &mut line)?;
                line.push('\n');
                output.write_all(line.as_bytes())?;
                stats.events += 1;
                Ok(())
            })?;
        }
        Format::Binary => {
            let mut enc = BinaryEncoder::new();
            let mut buf = Vec::with_capacity(64 * 1024);
            let mut started = false;
            for_each_event(input, from, |e| {
                if !started {
                    binary::write_header(&mut buf);
                    started = true;
                }
                enc.encode(&e, &mut buf)?;
                if buf.len() >= 64 * 1024 {
                    output.write_all(&buf)?;
                    buf.clear();
                }
                stats.events += 1;
                Ok(())
            })?;
            output.write_all(&buf)?;
        }
    }
    output.flush()?;
    Ok(stats)
}

/// Canonical ASCII for a batch of events, one line each, newline-terminated.
/// Uses rayon when the `parallel` feature is enabled.
pub fn encode_ascii_batch(events: &[Event]) -> Result<Vec<String>, CodecError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        events.par_iter().map(encode_ascii).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        events.iter().map(encode_ascii).collect()
    }
}

/// Parses a batch of ASCII lines. Errors carry the 1-based line number.
pub fn parse_ascii_batch(lines: &[&str]) -> Result<Vec<Event>, CodecError> {
    let parse = |(i, l): (usize, &&str)| parse_ascii(l).map_err(|e| e.at_line(i + 1));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        lines.par_iter().enumerate().map(parse).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        lines.iter().enumerate().map(parse).collect()
    }
}
