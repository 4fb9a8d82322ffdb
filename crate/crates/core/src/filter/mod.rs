//! Subscription filters and the multiplexing pipe.
//!
//! A filter is a disjunction of conjunctions of `(field, operator, value)`
//! comparisons:
//!
//! ```text
//! NL.EVNT="Start" and PROG="Athena" and LVL <= 2
//! or NL.EVNT="End" and PROG="Athena" and LVL <= 2
//! ```
//!
//! `and` binds tighter than `or`; there are no parentheses and no negation.
//! A comparison that names a field the event lacks, or compares text with a
//! number, is false.

mod parse;
pub mod pipe;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::event::{self, Event, Timestamp, Value};

pub use parse::{parse_filter, FilterError};
pub use pipe::{ChannelSink, Pipe, PipeStats, Sink, SinkError, SinkId, SinkStats, WriterSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Le => "<=",
            Op::Gt => ">",
            Op::Ge => ">=",
        }
    }

    #[inline]
    fn test(self, ord: Ordering) -> bool {
        match self {
            Op::Eq => ord == Ordering::Equal,
            Op::Ne => ord != Ordering::Equal,
            Op::Lt => ord == Ordering::Less,
            Op::Le => ord != Ordering::Greater,
            Op::Gt => ord == Ordering::Greater,
            Op::Ge => ord != Ordering::Less,
        }
    }
}

impl FromStr for Op {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "=" => Op::Eq,
            "!=" => Op::Ne,
            "<" => Op::Lt,
            "<=" => Op::Le,
            ">" => Op::Gt,
            ">=" => Op::Ge,
            _ => return Err(()),
        })
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which part of an event a comparison reads.
#[derive(Debug, Clone, PartialEq)]
enum Target {
    /// DATE compares chronologically against a quoted `YYYYMMDDhhmmss.ffffff` literal.
    Date(Option<i64>),
    Host,
    Prog,
    Name,
    Level,
    Seq,
    User,
}

impl Target {
    fn resolve(field: &str, value: &Value) -> Target {
        match field {
            event::DATE => Target::Date(
                value
                    .as_text()
                    .and_then(|t| Timestamp::parse(t).ok())
                    .map(Timestamp::as_micros),
            ),
            event::HOST => Target::Host,
            event::PROG => Target::Prog,
            event::EVNT | event::EVENT_ALIAS => Target::Name,
            event::LVL => Target::Level,
            event::SEQ => Target::Seq,
            _ => Target::User,
        }
    }
}

/// Borrowed view of the event-side operand.
enum Operand<'a> {
    Text(&'a str),
    Int(i64),
    Float(f64),
}

#[inline]
fn compare(lhs: Operand<'_>, rhs: &Value) -> Option<Ordering> {
    match (lhs, rhs) {
        (Operand::Text(a), Value::Text(b)) => Some(a.as_bytes().cmp(b.as_bytes())),
        (Operand::Int(a), Value::Int(b)) => Some(a.cmp(b)),
        (Operand::Int(a), Value::Float(b)) => (a as f64).partial_cmp(b),
        (Operand::Float(a), Value::Int(b)) => a.partial_cmp(&(*b as f64)),
        (Operand::Float(a), Value::Float(b)) => a.partial_cmp(b),
        _ => None,
    }
}

/// One `(field, operator, value)` test.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    field: String,
    op: Op,
    value: Value,
    target: Target,
}

impl Comparison {
    pub fn new(field: impl Into<String>, op: Op, value: impl Into<Value>) -> Comparison {
        let field = field.into();
        let value = value.into();
        let target = Target::resolve(&field, &value);
        Comparison {
            field,
            op,
            value,
            target,
        }
    }

    pub fn field(&self) -> &str {
        &self.field
    }

    pub fn op(&self) -> Op {
        self.op
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    #[inline]
    pub fn matches(&self, event: &Event) -> bool {
        let lhs = match &self.target {
            Target::Date(Some(micros)) => {
                return self.op.test(event.timestamp.as_micros().cmp(micros));
            }
            Target::Date(None) => return false,
            Target::Host => Operand::Text(&event.host),
            Target::Prog => Operand::Text(&event.prog),
            Target::Name => Operand::Text(&event.name),
            Target::Level => Operand::Int(event.level.value() as i64),
            Target::Seq => match event.seq {
                Some(s) => Operand::Int(s as i64),
                None => return false,
            },
            Target::User => match event.fields.iter().find(|(n, _)| *n == self.field) {
                Some((_, Value::Text(t))) => Operand::Text(t),
                Some((_, Value::Int(i))) => Operand::Int(*i),
                Some((_, Value::Float(x))) => Operand::Float(*x),
                None => return false,
            },
        };
        match compare(lhs, &self.value) {
            Some(ord) => self.op.test(ord),
            None => false,
        }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.field, self.op)?;
        match &self.value {
            Value::Text(t) => {
                f.write_str("\"")?;
                for c in t.chars() {
                    if c == '"' || c == '\\' {
                        f.write_str("\\")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str("\"")
            }
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) if x.fract() == 0.0 && x.is_finite() => write!(f, "{x:.1}"),
            Value::Float(x) => write!(f, "{x}"),
        }
    }
}

/// Disjunction of conjunctions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filter {
    conjunctions: Vec<Vec<Comparison>>,
}

impl Filter {
    /// Zero conjunctions: matches nothing.
    pub fn none() -> Filter {
        Filter::default()
    }

    /// One empty conjunction: matches everything.
    pub fn all() -> Filter {
        Filter {
            conjunctions: vec![Vec::new()],
        }
    }

    pub fn from_conjunctions(conjunctions: Vec<Vec<Comparison>>) -> Filter {
        Filter { conjunctions }
    }

    pub fn conjunctions(&self) -> &[Vec<Comparison>] {
        &self.conjunctions
    }

    pub fn push_conjunction(&mut self, conjunction: Vec<Comparison>) {
        self.conjunctions.push(conjunction);
    }

    /// Total number of comparisons.
    pub fn complexity(&self) -> usize {
        self.conjunctions.iter().map(Vec::len).sum()
    }

    /// Short-circuit evaluation in parse order.
    #[inline]
    pub fn matches(&self, event: &Event) -> bool {
        self.conjunctions
            .iter()
            .any(|conj| conj.iter().all(|c| c.matches(event)))
    }

    /// Evaluates every event; parallel when the `parallel` feature is enabled.
    pub fn matches_batch<E>(&self, events: &[E]) -> Vec<bool>
    where
        E: AsRef<Event> + Sync,
    {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            events
                .par_iter()
                .map(|e| self.matches(e.as_ref()))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            events.iter().map(|e| self.matches(e.as_ref())).collect()
        }
    }
}

impl AsRef<Event> for Event {
    fn as_ref(&self) -> &Event {
        self
    }
}

impl fmt::Display for Filter {
    /// Renders filter text that parses back to an equal filter. A filter with
    /// zero conjunctions has no text form and renders empty, which parses as
    /// match-all.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, conj) in self.conjunctions.iter().enumerate() {
            if i > 0 {
                f.write_str(" or ")?;
            }
            for (j, cmp) in conj.iter().enumerate() {
                if j > 0 {
                    f.write_str(" and ")?;
                }
                write!(f, "{cmp}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Filter {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_filter(s)
    }
}
