//! Line-oriented `FIELD=VALUE` format.
//!
//! Canonical order on encode is `DATE HOST PROG LVL NL.EVNT [NL.SEQ]` followed by user
//! fields in insertion order. The parser accepts any order.

use crate::event::{self, Event, Level, Timestamp, Value};

use super::CodecError;

/// How an unquoted token is typed on parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Sniffed {
    Int,
    Float,
    Text,
}

pub(crate) fn sniff(token: &str) -> Sniffed {
    let body = token.strip_prefix(['-', '+']).unwrap_or(token);
    if body.is_empty() {
        return Sniffed::Text;
    }
    if body.bytes().all(|b| b.is_ascii_digit()) {
        return if token.parse::<i64>().is_ok() {
            Sniffed::Int
        } else {
            Sniffed::Text
        };
    }
    let decimal_chars = body
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'-' | b'+'));
    let has_marker = body.bytes().any(|b| matches!(b, b'.' | b'e' | b'E'));
    let has_digit = body.bytes().any(|b| b.is_ascii_digit());
    if decimal_chars && has_marker && has_digit && token.parse::<f64>().is_ok() {
        Sniffed::Float
    } else {
        Sniffed::Text
    }
}

fn check_text(field: &str, text: &str) -> Result<(), CodecError> {
    if text.chars().any(char::is_control) {
        return Err(CodecError::ControlCharacter(field.to_string()));
    }
    Ok(())
}

/// Appends `text`, quoting when it holds whitespace, `=`, `"`, is empty, or would
/// otherwise read back as a number (`typed`).
fn push_text(out: &mut String, text: &str, typed: bool) {
    let needs_quotes = text.is_empty()
        || text
            .chars()
            .any(|c| c.is_whitespace() || c == '=' || c == '"')
        || (typed && sniff(text) != Sniffed::Text);
    if !needs_quotes {
        out.push_str(text);
        return;
    }
    out.push('"');
    for c in text.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
}

fn push_float(out: &mut String, x: f64) {
    use std::fmt::Write;
    let start = out.len();
    let _ = write!(out, "{x}");
    if !out[start..].contains(['.', 'e', 'E']) {
        out.push_str(".0");
    }
}

/// Appends the canonical line for `event` (no trailing newline).
pub fn encode_into(event: &Event, out: &mut String) -> Result<(), CodecError> {
    use std::fmt::Write;
    check_text(event::HOST, &event.host)?;
    check_text(event::PROG, &event.prog)?;
    check_text(event::EVNT, &event.name)?;
    for (name, value) in &event.fields {
        if let Value::Text(t) = value {
            check_text(name, t)?;
        }
        if let Value::Float(x) = value {
            if !x.is_finite() {
                return Err(CodecError::NonFinite(name.clone()));
            }
        }
    }

    out.push_str("DATE=");
    event.timestamp.render_into(out);
    out.push_str(" HOST=");
    push_text(out, &event.host, false);
    out.push_str(" PROG=");
    push_text(out, &event.prog, false);
    let _ = write!(out, " LVL={}", event.level);
    out.push_str(" NL.EVNT=");
    push_text(out, &event.name, false);
    if let Some(seq) = event.seq {
        let _ = write!(out, " NL.SEQ={seq}");
    }
    for (name, value) in &event.fields {
        out.push(' ');
        out.push_str(name);
        out.push('=');
        match value {
            Value::Text(t) => push_text(out, t, true),
            Value::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Value::Float(x) => push_float(out, *x),
        }
    }
    Ok(())
}

/// Canonical ASCII line for `event`, without the trailing newline.
pub fn encode_ascii(event: &Event) -> Result<String, CodecError> {
    let mut out = String::with_capacity(128);
    encode_into(event, &mut out)?;
    Ok(out)
}

struct Pair<'a> {
    name: &'a str,
    value: String,
    quoted: bool,
}

fn split_pairs(line: &str) -> Result<Vec<Pair<'_>>, CodecError> {
    let bytes = line.as_bytes();
    let mut pairs = Vec::new();
    let mut i = 0;
    let n = bytes.len();
    loop {
        while i < n && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= n {
            break;
        }
        let start = i;
        while i < n && bytes[i] != b'=' && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= n || bytes[i] != b'=' || i == start {
            return Err(CodecError::MalformedPair { column: start });
        }
        let name = &line[start..i];
        i += 1;
        if i < n && bytes[i] == b'"' {
            i += 1;
            let mut value = String::new();
            let mut closed = false;
            let mut chars = line[i..].char_indices();
            while let Some((off, c)) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some((_, esc)) => value.push(esc),
                        None => break,
                    },
                    '"' => {
                        i += off + 1;
                        closed = true;
                        break;
                    }
                    _ => value.push(c),
                }
            }
            if !closed {
                return Err(CodecError::MalformedPair { column: start });
            }
            if i < n && !bytes[i].is_ascii_whitespace() {
                return Err(CodecError::MalformedPair { column: start });
            }
            pairs.push(Pair {
                name,
                value,
                quoted: true,
            });
        } else {
            let vstart = i;
            while i < n && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i == vstart {
                return Err(CodecError::MalformedPair { column: start });
            }
            pairs.push(Pair {
                name,
                value: line[vstart..i].to_string(),
                quoted: false,
            });
        }
    }
    Ok(pairs)
}

/// Parses one line (a trailing newline is ignored).
pub fn parse_ascii(line: &str) -> Result<Event, CodecError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let mut timestamp = None;
    let mut host = None;
    let mut prog = None;
    let mut name = None;
    let mut level = None;
    let mut seq = None;
    let mut fields: Vec<(String, Value)> = Vec::new();

    fn set<T>(slot: &mut Option<T>, v: T, field: &str) -> Result<(), CodecError> {
        if slot.replace(v).is_some() {
            return Err(CodecError::DuplicateField(field.to_string()));
        }
        Ok(())
    }

    for pair in split_pairs(line)? {
        match pair.name {
            event::DATE => set(
                &mut timestamp,
                Timestamp::parse(&pair.value).map_err(CodecError::Date)?,
                event::DATE,
            )?,
            event::HOST => set(&mut host, pair.value, event::HOST)?,
            event::PROG => set(&mut prog, pair.value, event::PROG)?,
            event::EVNT | event::EVENT_ALIAS => set(&mut name, pair.value, event::EVNT)?,
            event::LVL => {
                let l = Level::from_token(&pair.value).map_err(CodecError::Level)?;
                if l.is_off() {
                    return Err(CodecError::OffLevel);
                }
                set(&mut level, l, event::LVL)?
            }
            event::SEQ => {
                let s = pair
                    .value
                    .parse::<u64>()
                    .map_err(|_| CodecError::BadSeq(pair.value.clone()))?;
                set(&mut seq, s, event::SEQ)?
            }
            other => {
                if !event::valid_field_name(other) {
                    return Err(CodecError::InvalidFieldName(other.to_string()));
                }
                if fields.iter().any(|(n, _)| n == other) {
                    return Err(CodecError::DuplicateField(other.to_string()));
                }
                let value = if pair.quoted {
                    Value::Text(pair.value)
                } else {
                    match sniff(&pair.value) {
                        Sniffed::Int => Value::Int(pair.value.parse().expect("sniffed int")),
                        Sniffed::Float => Value::Float(pair.value.parse().expect("sniffed float")),
                        Sniffed::Text => Value::Text(pair.value),
                    }
                };
                fields.push((other.to_string(), value));
            }
        }
    }
    if fields.len() > event::MAX_USER_FIELDS {
        return Err(CodecError::TooManyFields(fields.len()));
    }
    let missing = |f: &'static str| CodecError::MissingField(f);
    let name = name.ok_or(missing(event::EVNT))?;
    if name.is_empty() {
        return Err(CodecError::MissingField(event::EVNT));
    }
    Ok(Event {
        timestamp: timestamp.ok_or(missing(event::DATE))?,
        host: host.ok_or(missing(event::HOST))?,
        prog: prog.ok_or(missing(event::PROG))?,
        name,
        level: level.ok_or(missing(event::LVL))?,
        fields,
        seq,
    })
}
