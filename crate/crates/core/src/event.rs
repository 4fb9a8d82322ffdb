//! Monitoring event data model.
//!
//! An event is a timestamped set of typed name/value pairs. Five parts are
//! always present (`DATE`, `HOST`, `PROG`, `NL.EVNT`, `LVL`); everything else
//! is an ordered list of user fields.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike};
use thiserror::Error;

pub const DATE: &str = "DATE";
pub const HOST: &str = "HOST";
pub const PROG: &str = "PROG";
pub const EVNT: &str = "NL.EVNT";
pub const LVL: &str = "LVL";
/// Accepted on parse as an alias of [`EVNT`].
pub const EVENT_ALIAS: &str = "NL.EVENT";
/// Per-writer sequence number, added by transport writers.
pub const SEQ: &str = "NL.SEQ";

/// Names user fields may not take.
pub const RESERVED: [&str; 7] = [DATE, HOST, PROG, EVNT, LVL, EVENT_ALIAS, SEQ];

pub const MAX_USER_FIELDS: usize = 255;
pub const MAX_FIELD_NAME_LEN: usize = 255;

/// Symbolic level names accepted by [`Level::from_token`]. Writers always emit integers.
pub const LEVEL_ALIASES: [(&str, i16); 6] = [
    ("Error", 0),
    ("Warning", 1),
    ("Usage", 2),
    ("Info", 3),
    ("Debug", 4),
    ("Trace", 5),
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventError {
    #[error("event name must not be empty")]
    EmptyName,
    #[error("events cannot be written at level {0}")]
    InvalidEventLevel(Level),
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("field name `{0}` is reserved")]
    ReservedField(String),
    #[error("invalid field name `{0}`")]
    InvalidFieldName(String),
    #[error("too many user fields ({0}, max {MAX_USER_FIELDS})")]
    TooManyFields(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LevelError {
    #[error("empty level token")]
    Empty,
    #[error("unknown level alias `{0}`")]
    UnknownAlias(String),
    #[error("level {0} out of range -1..=255")]
    OutOfRange(i64),
}

/// Logging level. `-1` is off; at level `L` events with level `0..=L` are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Level(i16);

impl Level {
    pub const OFF: Level = Level(-1);
    pub const MIN: i16 = -1;
    pub const MAX: i16 = 255;

    pub fn new(value: i64) -> Result<Level, LevelError> {
        if (Self::MIN as i64..=Self::MAX as i64).contains(&value) {
            Ok(Level(value as i16))
        } else {
            Err(LevelError::OutOfRange(value))
        }
    }

    pub const fn value(self) -> i16 {
        self.0
    }

    pub const fn is_off(self) -> bool {
        self.0 < 0
    }

    /// True when an event at `event_level` is produced while this is the current level.
    #[inline]
    pub const fn permits(self, event_level: Level) -> bool {
        event_level.0 >= 0 && event_level.0 <= self.0
    }

    /// Parses a decimal integer or one of the symbolic [`LEVEL_ALIASES`] (case-insensitive).
    pub fn from_token(token: &str) -> Result<Level, LevelError> {
        let token = token.trim();
        if token.is_empty() {
            return Err(LevelError::Empty);
        }
        let numeric = token
            .strip_prefix(['-', '+'])
            .unwrap_or(token)
            .bytes()
            .all(|b| b.is_ascii_digit());
        if numeric {
            return match token.parse::<i64>() {
                Ok(v) => Level::new(v),
                Err(_) => Err(LevelError::OutOfRange(if token.starts_with('-') {
                    i64::MIN
                } else {
                    i64::MAX
                })),
            };
        }
        LEVEL_ALIASES
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(token))
            .map(|&(_, v)| Level(v))
            .ok_or_else(|| LevelError::UnknownAlias(token.to_string()))
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Level {
    type Err = LevelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Level::from_token(s)
    }
}

impl TryFrom<i64> for Level {
    type Error = LevelError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Level::new(value)
    }
}

/// Wall-clock instant in microseconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed DATE `{0}` (expected YYYYMMDDhhmmss.ffffff)")]
pub struct DateError(pub String);

impl Timestamp {
    pub const fn from_micros(micros: i64) -> Self {
        Timestamp(micros)
    }

    pub fn now() -> Self {
        let d = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        Timestamp(d.as_micros() as i64)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Renders as `YYYYMMDDhhmmss.ffffff`.
    pub fn render(self) -> String {
        let mut s = String::with_capacity(21);
        self.render_into(&mut s);
        s
    }

    pub fn render_into(self, out: &mut String) {
        use std::fmt::Write;
        let secs = self.0.div_euclid(1_000_000);
        let micros = self.0.rem_euclid(1_000_000);
        let dt = DateTime::from_timestamp(secs, 0)
            .map(|d| d.naive_utc())
            .unwrap_or_default();
        let _ = write!(
            out,
            "{:04}{:02}{:02}{:02}{:02}{:02}.{:06}",
            dt.year(),
            dt.month(),
            dt.day(),
            dt.hour(),
            dt.minute(),
            dt.second(),
            micros
        );
    }

    /// Parses `YYYYMMDDhhmmss` followed by an optional fraction of up to six digits.
    pub fn parse(text: &str) -> Result<Self, DateError> {
        let err = || DateError(text.to_string());
        let (whole, frac) = match text.split_once('.') {
            Some((w, f)) => (w, f),
            None => (text, ""),
        };
        if whole.len() != 14
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 6
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(err());
        }
        let num = |r: std::ops::Range<usize>| whole[r].parse::<u32>().map_err(|_| err());
        let date =
            NaiveDate::from_ymd_opt(num(0..4)? as i32, num(4..6)?, num(6..8)?).ok_or_else(err)?;
        let time: NaiveDateTime = date
            .and_hms_opt(num(8..10)?, num(10..12)?, num(12..14)?)
            .ok_or_else(err)?;
        let mut micros: i64 = 0;
        if !frac.is_empty() {
            micros = frac.parse::<i64>().map_err(|_| err())? * 10i64.pow(6 - frac.len() as u32);
        }
        Ok(Timestamp(time.and_utc().timestamp() * 1_000_000 + micros))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A typed field value. The type is fixed at creation.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Int(i64),
    Float(f64),
}

impl Value {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Text(_) => "text",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

/// A single monitoring event. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub timestamp: Timestamp,
    pub host: String,
    pub prog: String,
    pub name: String,
    pub level: Level,
    pub fields: Vec<(String, Value)>,
    pub seq: Option<u64>,
}

/// Host name of this machine, resolved once.
pub fn local_host() -> &'static str {
    static HOST_NAME: OnceLock<String> = OnceLock::new();
    HOST_NAME.get_or_init(|| {
        gethostname::gethostname()
            .into_string()
            .ok()
            .filter(|h| !h.is_empty())
            .unwrap_or_else(|| "localhost".to_string())
    })
}

pub(crate) fn valid_field_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_FIELD_NAME_LEN
        && name.chars().all(|c| {
            !c.is_whitespace() && !c.is_control() && !matches!(c, '=' | '"' | '!' | '<' | '>')
        })
}

impl Event {
    /// Builds an event stamped with the current time and the local host name.
    pub fn new(
        prog: impl Into<String>,
        name: impl Into<String>,
        level: Level,
        fields: Vec<(String, Value)>,
    ) -> Result<Event, EventError> {
        Event::with_parts(Timestamp::now(), local_host(), prog, name, level, fields)
    }

    /// Builds an event from explicit parts, checking the construction rules.
    pub fn with_parts(
        timestamp: Timestamp,
        host: impl Into<String>,
        prog: impl Into<String>,
        name: impl Into<String>,
        level: Level,
        fields: Vec<(String, Value)>,
    ) -> Result<Event, EventError> {
        let name = name.into();
        if name.is_empty() {
            return Err(EventError::EmptyName);
        }
        if level.is_off() {
            return Err(EventError::InvalidEventLevel(level));
        }
        if fields.len() > MAX_USER_FIELDS {
            return Err(EventError::TooManyFields(fields.len()));
        }
        for (i, (fname, _)) in fields.iter().enumerate() {
            if RESERVED.contains(&fname.as_str()) {
                return Err(EventError::ReservedField(fname.clone()));
            }
            if !valid_field_name(fname) {
                return Err(EventError::InvalidFieldName(fname.clone()));
            }
            if fields[..i].iter().any(|(n, _)| n == fname) {
                return Err(EventError::DuplicateField(fname.clone()));
            }
        }
        Ok(Event {
            timestamp,
            host: host.into(),
            prog: prog.into(),
            name,
            level,
            fields,
            seq: None,
        })
    }

    pub fn field(&self, name: &str) -> Option<&Value> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = Some(seq);
        self
    }
}

/// One broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyName,
    EmptyHost,
    EmptyProg,
    OffLevel,
    ReservedField(String),
    DuplicateField(String),
    InvalidFieldName(String),
    TooManyFields(usize),
    NonFiniteFloat(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyName => f.write_str("NL.EVNT is empty"),
            Violation::EmptyHost => f.write_str("HOST is empty"),
            Violation::EmptyProg => f.write_str("PROG is empty"),
            Violation::OffLevel => f.write_str("event level is -1"),
            Violation::ReservedField(n) => write!(f, "user field `{n}` uses a reserved name"),
            Violation::DuplicateField(n) => write!(f, "user field `{n}` appears more than once"),
            Violation::InvalidFieldName(n) => write!(f, "user field name `{n}` is not encodable"),
            Violation::TooManyFields(n) => write!(f, "{n} user fields exceeds {MAX_USER_FIELDS}"),
            Violation::NonFiniteFloat(n) => write!(f, "user field `{n}` holds a non-finite float"),
        }
    }
}

/// Lists every invariant `event` breaks. Valid events give an empty list.
pub fn validate(event: &Event) -> Vec<Violation> {
    let mut out = Vec::new();
    if event.name.is_empty() {
        out.push(Violation::EmptyName);
    }
    if event.host.is_empty() {
        out.push(Violation::EmptyHost);
    }
    if event.prog.is_empty() {
        out.push(Violation::EmptyProg);
    }
    if event.level.is_off() {
        out.push(Violation::OffLevel);
    }
    if event.fields.len() > MAX_USER_FIELDS {
        out.push(Violation::TooManyFields(event.fields.len()));
    }
    for (i, (name, value)) in event.fields.iter().enumerate() {
        if RESERVED.contains(&name.as_str()) {
            out.push(Violation::ReservedField(name.clone()));
        } else if !valid_field_name(name) {
            out.push(Violation::InvalidFieldName(name.clone()));
        }
        if event.fields[..i].iter().any(|(n, _)| n == name) {
            out.push(Violation::DuplicateField(name.clone()));
        }
        if let Value::Float(x) = value {
            if !x.is_finite() {
                out.push(Violation::NonFiniteFloat(name.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Event {
        Event::with_parts(
            Timestamp::parse("20000330112320.957943").unwrap(),
            "dps1.lbl.gov",
            "testProg",
            "WriteData",
            Level::from_token("Usage").unwrap(),
            vec![("SEND.SZ".into(), Value::Int(49332))],
        )
        .unwrap()
    }

    #[test]
    fn level_tokens() {
        assert_eq!(Level::from_token("3").unwrap().value(), 3);
        assert_eq!(Level::from_token("-1").unwrap(), Level::OFF);
        assert_eq!(Level::from_token("Usage").unwrap().value(), 2);
        assert_eq!(Level::from_token("usage").unwrap().value(), 2);
        assert_eq!(Level::from_token("Trace").unwrap().value(), 5);
        assert!(matches!(
            Level::from_token("Loud"),
            Err(LevelError::UnknownAlias(_))
        ));
        assert!(matches!(
            Level::from_token("256"),
            Err(LevelError::OutOfRange(256))
        ));
        assert!(matches!(
            Level::from_token("-2"),
            Err(LevelError::OutOfRange(-2))
        ));
        assert!(matches!(
            Level::from_token("99999999999999999999"),
            Err(LevelError::OutOfRange(_))
        ));
        assert_eq!(Level::from_token(""), Err(LevelError::Empty));
    }

    #[test]
    fn level_render_round_trip() {
        for v in -1..=255i64 {
            let l = Level::new(v).unwrap();
            assert_eq!(Level::from_token(&l.to_string()).unwrap(), l);
        }
    }

    #[test]
    fn level_gating() {
        let cur = Level::new(3).unwrap();
        for v in 0..=3 {
            assert!(cur.permits(Level::new(v).unwrap()));
        }
        assert!(!cur.permits(Level::new(4).unwrap()));
        for v in 0..=255 {
            assert!(!Level::OFF.permits(Level::new(v).unwrap()));
        }
    }

    #[test]
    fn date_render_and_parse() {
        let ts = Timestamp::parse("20000330112320.957943").unwrap();
        assert_eq!(ts.render(), "20000330112320.957943");
        assert_eq!(ts.as_micros(), 954_415_400_957_943);
        assert_eq!(
            Timestamp::parse("20000330112320.5").unwrap().render(),
            "20000330112320.500000"
        );
        assert_eq!(
            Timestamp::parse("20000330112320").unwrap().render(),
            "20000330112320.000000"
        );
        for bad in [
            "2000033011232.957943",
            "20001330112320.0",
            "2000033011232x.1",
            "20000330112320.1234567",
            "",
        ] {
            assert!(Timestamp::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn new_event_has_required_parts() {
        let e = Event::new("p", "E", Level::new(0).unwrap(), vec![]).unwrap();
        assert_eq!(e.prog, "p");
        assert_eq!(e.name, "E");
        assert_eq!(e.host, local_host());
        assert!(e.fields.is_empty());
        assert!(e.seq.is_none());
        assert!(validate(&e).is_empty());
    }

    #[test]
    fn new_event_errors() {
        let l0 = Level::new(0).unwrap();
        assert_eq!(
            Event::new(
                "p",
                "E",
                l0,
                vec![("A".into(), 1i64.into()), ("A".into(), 2i64.into())]
            ),
            Err(EventError::DuplicateField("A".into()))
        );
        assert_eq!(
            Event::new("p", "E", l0, vec![("PROG".into(), "x".into())]),
            Err(EventError::ReservedField("PROG".into()))
        );
        assert_eq!(Event::new("p", "", l0, vec![]), Err(EventError::EmptyName));
        assert_eq!(
            Event::new("p", "E", Level::OFF, vec![]),
            Err(EventError::InvalidEventLevel(Level::OFF))
        );
        assert!(matches!(
            Event::new("p", "E", l0, vec![("a b".into(), 1i64.into())]),
            Err(EventError::InvalidFieldName(_))
        ));
    }

    #[test]
    fn validate_reports_each_violation() {
        assert!(validate(&sample()).is_empty());

        let mut off = sample();
        off.level = Level::OFF;
        assert_eq!(validate(&off), vec![Violation::OffLevel]);

        let mut reserved = sample();
        reserved.fields.push(("PROG".into(), "x".into()));
        assert_eq!(
            validate(&reserved),
            vec![Violation::ReservedField("PROG".into())]
        );

        let mut nan = sample();
        nan.fields.push(("X".into(), Value::Float(f64::NAN)));
        assert_eq!(validate(&nan), vec![Violation::NonFiniteFloat("X".into())]);
    }

    #[test]
    fn field_order_preserved() {
        let fields: Vec<(String, Value)> =
            (0..20).map(|i| (format!("F{i}"), Value::Int(i))).collect();
        let e = Event::new("p", "E", Level::new(1).unwrap(), fields.clone()).unwrap();
        assert_eq!(e.fields, fields);
    }
}
