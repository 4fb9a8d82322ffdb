use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::codec::{binary, parse_ascii, BinaryDecoder, Format, Record};
use crate::event::Event;

use super::write_atomically;

/// Largest chunk pulled from the file per read.
const READ_CHUNK: usize = 4 << 20;

/// Sidecar file holding a reader's committed byte offset.
pub fn cursor_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".cursor");
    path.with_file_name(name)
}

fn read_cursor(path: &Path) -> Option<u64> {
    std::fs::read_to_string(cursor_path(path))
        .ok()?
        .trim()
        .parse()
        .ok()
}

/// Events read by one call, plus notices about skipped or corrupt data.
#[derive(Debug, Default)]
pub struct SpoolBatch {
    pub events: Vec<Event>,
    pub notices: Vec<String>,
    /// File offset just past the last record consumed.
    pub end_offset: u64,
}

/// Incremental reader over a spool file that other processes append to.
///
/// Only complete records are returned. The committed offset lives in a
/// `.cursor` sidecar, so a new reader resumes where the last one committed.
pub struct SpoolReader {
    path: PathBuf,
    format: Format,
    file: Option<File>,
    offset: u64,
    committed: u64,
    buf: Vec<u8>,
    decoder: BinaryDecoder,
    persistent: bool,
}

impl SpoolReader {
    /// Opens `path`, resuming from its committed cursor.
    pub fn open(path: impl Into<PathBuf>) -> io::Result<SpoolReader> {
        let path = path.into();
        let cursor = read_cursor(&path).unwrap_or(0);
        let mut r = SpoolReader::new(path, true);
        r.offset = cursor;
        r.committed = cursor;
        r.rebuild_dictionary()?;
        Ok(r)
    }

    /// Opens `path` from the beginning without reading or writing a cursor.
    pub fn from_start(path: impl Into<PathBuf>) -> SpoolReader {
        SpoolReader::new(path.into(), false)
    }

    fn new(path: PathBuf, persistent: bool) -> SpoolReader {
        SpoolReader {
            format: Format::from_path(&path),
            path,
            file: None,
            offset: 0,
            committed: 0,
            buf: Vec::new(),
            decoder: BinaryDecoder::new(),
            persistent,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Offset just past the last record returned.
    pub fn position(&self) -> u64 {
        self.offset
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    /// Bytes in the file not yet consumed.
    pub fn backlog(&self) -> u64 {
        std::fs::metadata(&self.path)
            .map(|m| m.len().saturating_sub(self.offset))
            .unwrap_or(0)
    }

    /// Replays the dictionary records before the cursor.
    fn rebuild_dictionary(&mut self) -> io::Result<()> {
        self.decoder = BinaryDecoder::new();
        if self.format != Format::Binary || self.offset == 0 {
            return Ok(());
        }
        let mut bytes = Vec::new();
        match File::open(&self.path) {
            Ok(f) => {
                f.take(self.offset).read_to_end(&mut bytes)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                self.offset = 0;
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        if (bytes.len() as u64) < self.offset {
            self.offset = 0;
            return Ok(());
        }
        let mut at = 0;
        while at < bytes.len() {
            match self.decoder.next_record(&bytes[at..]) {
                Ok(Some((_, used))) => at += used,
                Ok(None) => break,
                Err(f) => match f.skip {
                    Some(n) => at += n,
                    None => match resync(&mut self.decoder, &bytes[at + 1..]) {
                        Some(n) => at += 1 + n,
                        None => break,
                    },
                },
            }
        }
        Ok(())
    }

    fn reset(&mut self, notices: &mut Vec<String>, why: &str) {
        notices.push(format!(
            "{}: {why}; reading from the start",
            self.path.display()
        ));
        self.file = None;
        self.offset = 0;
        self.committed = 0;
        self.buf.clear();
        self.decoder = BinaryDecoder::new();
    }

    /// Reads up to `max` complete events appended since the last call.
    pub fn read_batch(&mut self, max: usize) -> io::Result<SpoolBatch> {
        let mut notices = Vec::new();
        if self.file.is_none() {
            match File::open(&self.path) {
                Ok(f) => self.file = Some(f),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Ok(SpoolBatch {
                        end_offset: self.offset,
                        ..SpoolBatch::default()
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let len = self.file.as_ref().expect("open").metadata()?.len();
        if len < self.offset + self.buf.len() as u64 {
            self.reset(&mut notices, "file shrank");
            return self.read_batch(max).map(|mut b| {
                notices.append(&mut b.notices);
                b.notices = notices;
                b
            });
        }
        let read_from = self.offset + self.buf.len() as u64;
        if len > read_from && self.buf.len() < READ_CHUNK {
            let f = self.file.as_mut().expect("open");
            f.seek(SeekFrom::Start(read_from))?;
            let want = ((len - read_from) as usize).min(READ_CHUNK);
            let start = self.buf.len();
            self.buf.resize(start + want, 0);
            let got = read_up_to(f, &mut self.buf[start..])?;
            self.buf.truncate(start + got);
        }
        let mut events = Vec::new();
        let used = match self.format {
            Format::Ascii => self.parse_lines(max, &mut events, &mut notices),
            Format::Binary => self.parse_records(max, &mut events, &mut notices),
        };
        self.buf.drain(..used);
        self.offset += used as u64;
        Ok(SpoolBatch {
            events,
            notices,
            end_offset: self.offset,
        })
    }

    fn parse_lines(
        &mut self,
        max: usize,
        events: &mut Vec<Event>,
        notices: &mut Vec<String>,
    ) -> usize {
        let mut at = 0;
        while events.len() < max {
            let Some(nl) = self.buf[at..].iter().position(|&b| b == b'\n') else {
                break;
            };
            let line = &self.buf[at..at + nl];
            let offset = self.offset + at as u64;
            at += nl + 1;
            let Ok(text) = std::str::from_utf8(line) else {
                notices.push(format!(
                    "{}: invalid UTF-8 at byte {offset}",
                    self.path.display()
                ));
                continue;
            };
            let text = text.trim_end_matches('\r');
            if text.trim().is_empty() {
                continue;
            }
            match parse_ascii(text) {
                Ok(e) => events.push(e),
                Err(e) => notices.push(format!(
                    "{}: skipped line at byte {offset}: {e}",
                    self.path.display()
                )),
            }
        }
        at
    }

    fn parse_records(
        &mut self,
        max: usize,
        events: &mut Vec<Event>,
        notices: &mut Vec<String>,
    ) -> usize {
        let mut at = 0;
        while events.len() < max && at < self.buf.len() {
            match self.decoder.next_record(&self.buf[at..]) {
                Ok(Some((record, used))) => {
                    if let Record::Event(e) = record {
                        events.push(e);
                    }
                    at += used;
                }
                Ok(None) => break,
                Err(f) => {
                    let offset = self.offset + at as u64;
                    let skip = f
                        .skip
                        .or_else(|| resync(&mut self.decoder, &self.buf[at + 1..]).map(|n| n + 1));
                    let skip = skip.unwrap_or(self.buf.len() - at);
                    notices.push(format!(
                        "{}: skipped {skip} bytes at {offset}: {}",
                        self.path.display(),
                        f.error
                    ));
                    at += skip;
                }
            }
        }
        at
    }

    /// Persists `offset` as the committed cursor. Offsets never move backwards.
    pub fn commit_to(&mut self, offset: u64) -> io::Result<()> {
        let offset = offset.min(self.offset);
        if !self.persistent || offset <= self.committed {
            return Ok(());
        }
        write_atomically(&cursor_path(&self.path), format!("{offset}\n").as_bytes())?;
        self.committed = offset;
        Ok(())
    }

    /// Commits everything returned so far.
    pub fn commit(&mut self) -> io::Result<()> {
        self.commit_to(self.offset)
    }
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match f.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Finds the next offset in `buf` where a stream header or a decodable event
/// record starts.
pub(crate) fn resync(dec: &mut BinaryDecoder, buf: &[u8]) -> Option<usize> {
    let magic = binary::MAGIC.to_le_bytes();
    for i in 0..buf.len() {
        let b = buf[i];
        if b == magic[0] && buf[i..].starts_with(&magic) {
            return Some(i);
        }
        if b == binary::TAG_EVENT {
            if let Ok(Some((Record::Event(_), _))) = dec.next_record(&buf[i..]) {
                return Some(i);
            }
        }
    }
    None
}

/// Decodes what it can from a possibly damaged binary stream.
pub(crate) fn decode_lenient(bytes: &[u8]) -> Vec<Event> {
    let mut dec = BinaryDecoder::new();
    let mut events = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        match dec.next_record(&bytes[at..]) {
            Ok(Some((record, used))) => {
                if let Record::Event(e) = record {
                    events.push(e);
                }
                at += used;
            }
            Ok(None) => break,
            Err(f) => match f
                .skip
                .or_else(|| resync(&mut dec, &bytes[at + 1..]).map(|n| n + 1))
            {
                Some(n) => at += n,
                None => break,
            },
        }
    }
    events
}
