//! Binary stream format.
//!
//! All integers little-endian.
//!
//! ```text
//! header      u32 magic 0x4E4C4F47, u8 version (1)
//! dictionary  u8 0x01, u16 id, u8 len, name bytes
//! event       u8 0x02, u32 body len, then body:
//!             u64 micros since epoch, i16 level,
//!             u16 host id, u16 prog id, u16 event-name id,
//!             u8 field count, per field: u16 name id, u8 type, payload
//!             type 0 = text (u16 len + bytes), 1 = i64, 2 = f64
//! ```
//!
//! Names and the HOST/PROG/NL.EVNT values share one per-stream dictionary.
//! A dictionary record may rebind an id, so streams can be concatenated after
//! stripping the second header. `NL.SEQ` travels as an ordinary int field.

use std::collections::HashMap;

use crate::event::{self, Event, Level, Timestamp, Value};

use super::CodecError;

pub const MAGIC: u32 = 0x4E4C_4F47;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 5;
pub const TAG_DICT: u8 = 0x01;
pub const TAG_EVENT: u8 = 0x02;
pub const TYPE_TEXT: u8 = 0;
pub const TYPE_INT: u8 = 1;
pub const TYPE_FLOAT: u8 = 2;

pub(crate) const EVENT_FIXED_LEN: usize = 8 + 2 + 2 + 2 + 2 + 1;
const MAX_RECORD_LEN: usize = 1 << 24;
const MAX_NAMES: usize = 1 << 16;

pub fn write_header(out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
}

/// Single-owner encoder holding one stream's name dictionary.
#[derive(Debug, Default)]
pub struct BinaryEncoder {
    ids: HashMap<String, u16>,
    order: Vec<String>,
    dict_records: u64,
}

impl BinaryEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dictionary records emitted so far.
    pub fn dictionary_records(&self) -> u64 {
        self.dict_records
    }

    fn intern(&mut self, name: &str, out: &mut Vec<u8>) -> Result<u16, CodecError> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        if name.len() > u8::MAX as usize {
            return Err(CodecError::NameTooLong(name.len()));
        }
        if self.ids.len() >= MAX_NAMES {
            return Err(CodecError::DictionaryOverflow);
        }
        let id = self.ids.len() as u16;
        self.ids.insert(name.to_string(), id);
        self.order.push(name.to_string());
        out.push(TAG_DICT);
        out.extend_from_slice(&id.to_le_bytes());
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        self.dict_records += 1;
        Ok(id)
    }

    /// Appends any needed dictionary records plus one event record to `out`.
    /// On error `out` is left unchanged.
    pub fn encode(&mut self, event: &Event, out: &mut Vec<u8>) -> Result<(), CodecError> {
        let mark = out.len();
        let known = self.order.len();
        let result = self.encode_inner(event, out);
        if result.is_err() {
            out.truncate(mark);
            for name in self.order.drain(known..) {
                self.ids.remove(&name);
                self.dict_records -= 1;
            }
        }
        result
    }

    fn encode_inner(&mut self, event: &Event, out: &mut Vec<u8>) -> Result<(), CodecError> {
        let count = event.fields.len() + usize::from(event.seq.is_some());
        if count > u8::MAX as usize {
            return Err(CodecError::TooManyFields(count));
        }
        let host = self.intern(&event.host, out)?;
        let prog = self.intern(&event.prog, out)?;
        let name = self.intern(&event.name, out)?;
        let mut field_ids = [0u16; 256];
        if event.seq.is_some() {
            field_ids[0] = self.intern(event::SEQ, out)?;
        }
        let off = usize::from(event.seq.is_some());
        for (i, (fname, _)) in event.fields.iter().enumerate() {
            field_ids[i + off] = self.intern(fname, out)?;
        }

        out.push(TAG_EVENT);
        let len_at = out.len();
        out.extend_from_slice(&[0u8; 4]);
        let body_at = out.len();
        out.extend_from_slice(&(event.timestamp.as_micros() as u64).to_le_bytes());
        out.extend_from_slice(&event.level.value().to_le_bytes());
        out.extend_from_slice(&host.to_le_bytes());
        out.extend_from_slice(&prog.to_le_bytes());
        out.extend_from_slice(&name.to_le_bytes());
        out.push(count as u8);
        if let Some(seq) = event.seq {
            out.extend_from_slice(&field_ids[0].to_le_bytes());
            out.push(TYPE_INT);
            out.extend_from_slice(&(seq as i64).to_le_bytes());
        }
        for (i, (fname, value)) in event.fields.iter().enumerate() {
            out.extend_from_slice(&field_ids[i + off].to_le_bytes());
            match value {
                Value::Text(t) => {
                    if t.len() > u16::MAX as usize {
                        return Err(CodecError::TextTooLong(fname.clone()));
                    }
                    out.push(TYPE_TEXT);
                    out.extend_from_slice(&(t.len() as u16).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
                Value::Int(v) => {
                    out.push(TYPE_INT);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Value::Float(x) => {
                    out.push(TYPE_FLOAT);
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let body_len = (out.len() - body_at) as u32;
        out[len_at..len_at + 4].copy_from_slice(&body_len.to_le_bytes());
        Ok(())
    }
}

/// Encodes a whole stream: header, then dictionary and event records.
pub fn encode_binary(events: &[Event]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(HEADER_LEN + events.len() * 64);
    write_header(&mut out);
    let mut enc = BinaryEncoder::new();
    for e in events {
        enc.encode(e, &mut out)?;
    }
    Ok(out)
}

/// What one decoded record contained.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Header,
    Dictionary,
    Event(Event),
}

/// A decode failure. `skip` is the byte length of the offending record when it
/// is known, so a reader can resynchronise past it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeFailure {
    pub error: CodecError,
    pub skip: Option<usize>,
}

/// Incremental decoder for one stream; holds the dictionary.
#[derive(Debug)]
pub struct BinaryDecoder {
    names: Vec<Option<String>>,
    need_header: bool,
}

impl Default for BinaryDecoder {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn rd_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

#[inline]
fn rd_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[inline]
fn rd_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

impl BinaryDecoder {
    /// Decoder expecting a stream header first.
    pub fn new() -> Self {
        BinaryDecoder {
            names: vec![None; MAX_NAMES],
            need_header: true,
        }
    }

    /// Decoder positioned after a header (resuming mid-stream).
    pub fn headerless() -> Self {
        BinaryDecoder {
            need_header: false,
            ..Self::new()
        }
    }

    pub fn expects_header(&self) -> bool {
        self.need_header
    }

    fn name(&self, id: u16) -> Result<&str, CodecError> {
        self.names[id as usize]
            .as_deref()
            .ok_or(CodecError::UndefinedName(id))
    }

    /// Decodes the record at the start of `buf`.
    ///
    /// Returns `Ok(None)` when `buf` holds only part of a record, otherwise the
    /// record and its byte length.
    pub fn next_record(&mut self, buf: &[u8]) -> Result<Option<(Record, usize)>, DecodeFailure> {
        let fail = |error, skip| DecodeFailure { error, skip };
        if buf.is_empty() {
            return Ok(None);
        }
        let starts_header = buf[0] == MAGIC.to_le_bytes()[0];
        if self.need_header || starts_header {
            if buf.len() < HEADER_LEN {
                let prefix = &MAGIC.to_le_bytes()[..buf.len().min(4)];
                if buf[..prefix.len()] != *prefix {
                    return Err(fail(CodecError::BadMagic, None));
                }
                return Ok(None);
            }
            if rd_u32(buf, 0) != MAGIC {
                return Err(fail(CodecError::BadMagic, None));
            }
            if buf[4] != VERSION {
                return Err(fail(CodecError::BadVersion(buf[4]), None));
            }
            self.need_header = false;
            self.names.iter_mut().for_each(|n| *n = None);
            return Ok(Some((Record::Header, HEADER_LEN)));
        }
        match buf[0] {
            TAG_DICT => {
                if buf.len() < 4 {
                    return Ok(None);
                }
                let id = rd_u16(buf, 1);
                let len = buf[3] as usize;
                let total = 4 + len;
                if buf.len() < total {
                    return Ok(None);
                }
                let name = std::str::from_utf8(&buf[4..total])
                    .map_err(|_| fail(CodecError::InvalidUtf8, Some(total)))?;
                self.names[id as usize] = Some(name.to_string());
                Ok(Some((Record::Dictionary, total)))
            }
            TAG_EVENT => {
                if buf.len() < 5 {
                    return Ok(None);
                }
                let body_len = rd_u32(buf, 1) as usize;
                if !(EVENT_FIXED_LEN..=MAX_RECORD_LEN).contains(&body_len) {
                    return Err(fail(CodecError::CorruptLength(body_len), None));
                }
                let total = 5 + body_len;
                if buf.len() < total {
                    return Ok(None);
                }
                let event = self
                    .decode_event(&buf[5..total])
                    .map_err(|e| fail(e, Some(total)))?;
                Ok(Some((Record::Event(event), total)))
            }
            other => Err(fail(CodecError::BadTag(other), None)),
        }
    }

    fn decode_event(&self, body: &[u8]) -> Result<Event, CodecError> {
        let corrupt = || CodecError::CorruptRecord;
        let micros = rd_u64(body, 0) as i64;
        let level = i16::from_le_bytes([body[8], body[9]]);
        let level = Level::new(level as i64).map_err(CodecError::Level)?;
        if level.is_off() {
            return Err(CodecError::OffLevel);
        }
        let host = self.name(rd_u16(body, 10))?.to_string();
        let prog = self.name(rd_u16(body, 12))?.to_string();
        let name = self.name(rd_u16(body, 14))?.to_string();
        let count = body[16] as usize;
        let mut at = EVENT_FIXED_LEN;
        let mut fields = Vec::with_capacity(count);
        let mut seq = None;
        for _ in 0..count {
            if at + 3 > body.len() {
                return Err(corrupt());
            }
            let fname = self.name(rd_u16(body, at))?;
            let ty = body[at + 2];
            at += 3;
            let value = match ty {
                TYPE_TEXT => {
                    if at + 2 > body.len() {
                        return Err(corrupt());
                    }
                    let len = rd_u16(body, at) as usize;
                    at += 2;
                    if at + len > body.len() {
                        return Err(corrupt());
                    }
                    let s = std::str::from_utf8(&body[at..at + len])
                        .map_err(|_| CodecError::InvalidUtf8)?;
                    at += len;
                    Value::Text(s.to_string())
                }
                TYPE_INT | TYPE_FLOAT => {
                    if at + 8 > body.len() {
                        return Err(corrupt());
                    }
                    let raw = rd_u64(body, at);
                    at += 8;
                    if ty == TYPE_INT {
                        Value::Int(raw as i64)
                    } else {
                        Value::Float(f64::from_bits(raw))
                    }
                }
                other => return Err(CodecError::BadValueType(other)),
            };
            if fname == event::SEQ {
                match value {
                    Value::Int(v) if v >= 0 && seq.is_none() => seq = Some(v as u64),
                    _ => return Err(CodecError::BadSeq(format!("{value:?}"))),
                }
            } else {
                fields.push((fname.to_string(), value));
            }
        }
        if at != body.len() {
            return Err(corrupt());
        }
        Ok(Event {
            timestamp: Timestamp::from_micros(micros),
            host,
            prog,
            name,
            level,
            fields,
            seq,
        })
    }
}

/// Where and why a stream ended early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    /// Offset of the incomplete record.
    pub offset: usize,
    /// Bytes present after `offset`.
    pub trailing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub events: Vec<Event>,
    pub truncated: Option<Truncation>,
}

/// Decodes a complete in-memory stream. A trailing partial record is reported
/// as a truncation notice rather than an error.
pub fn decode_binary(bytes: &[u8]) -> Result<Decoded, CodecError> {
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
            Ok(None) => {
                return Ok(Decoded {
                    events,
                    truncated: Some(Truncation {
                        offset: at,
                        trailing: bytes.len() - at,
                    }),
                })
            }
            Err(f) => return Err(f.error.at_offset(at)),
        }
    }
    if dec.expects_header() {
        return Err(CodecError::BadMagic);
    }
    Ok(Decoded {
        events,
        truncated: None,
    })
}
