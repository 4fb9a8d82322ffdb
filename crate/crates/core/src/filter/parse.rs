use thiserror::Error;

use crate::codec::ascii::{sniff, Sniffed};
use crate::event::Value;

use super::{Comparison, Filter, Op};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("syntax error at {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown operator `{op}` at {position}")]
    UnknownOperator { position: usize, op: String },
}

impl FilterError {
    /// Byte offset into the filter text.
    pub fn position(&self) -> usize {
        match self {
            FilterError::Syntax { position, .. }
            | FilterError::UnknownOperator { position, .. } => *position,
        }
    }

    /// Two-line rendering: the text and a caret under the error position.
    pub fn caret(&self, text: &str) -> String {
        let col = text[..self.position().min(text.len())].chars().count();
        format!("{}\n{}^", text.replace('\n', " "), " ".repeat(col))
    }
}

fn syntax(position: usize, message: impl Into<String>) -> FilterError {
    FilterError::Syntax {
        position,
        message: message.into(),
    }
}

fn is_op_char(b: u8) -> bool {
    matches!(b, b'=' | b'!' | b'<' | b'>')
}

/// Characters swallowed into an operator token, so `=~` reports as one unknown operator.
fn is_op_token_char(b: u8) -> bool {
    is_op_char(b)
        || matches!(
            b,
            b'~' | b'%' | b'&' | b'|' | b'^' | b'*' | b'/' | b'?' | b'+'
        )
}

struct Cursor<'a> {
    text: &'a str,
    at: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&self) -> &'a [u8] {
        self.text.as_bytes()
    }

    fn skip_ws(&mut self) {
        while self.at < self.text.len() && self.bytes()[self.at].is_ascii_whitespace() {
            self.at += 1;
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.at >= self.text.len()
    }

    /// Reads a run of characters that can form a name or bare literal.
    fn word(&mut self) -> (usize, &'a str) {
        self.skip_ws();
        let start = self.at;
        let b = self.bytes();
        while self.at < b.len()
            && !b[self.at].is_ascii_whitespace()
            && !is_op_char(b[self.at])
            && b[self.at] != b'"'
        {
            self.at += 1;
        }
        (start, &self.text[start..self.at])
    }

    fn name(&mut self) -> Result<&'a str, FilterError> {
        let (start, w) = self.word();
        if w.is_empty() {
            return Err(syntax(start, "expected field name"));
        }
        Ok(w)
    }

    fn op(&mut self) -> Result<Op, FilterError> {
        self.skip_ws();
        let start = self.at;
        let b = self.bytes();
        while self.at < b.len() && is_op_token_char(b[self.at]) {
            self.at += 1;
        }
        let tok = &self.text[start..self.at];
        if tok.is_empty() {
            return Err(syntax(start, "expected operator"));
        }
        tok.parse().map_err(|_| FilterError::UnknownOperator {
            position: start,
            op: tok.to_string(),
        })
    }

    fn value(&mut self) -> Result<Value, FilterError> {
        self.skip_ws();
        let start = self.at;
        if self.at >= self.text.len() {
            return Err(syntax(start, "expected value"));
        }
        if self.bytes()[self.at] == b'"' {
            let mut out = String::new();
            let mut chars = self.text[self.at + 1..].char_indices();
            while let Some((off, c)) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some((_, esc)) => out.push(esc),
                        None => break,
                    },
                    '"' => {
                        self.at += 1 + off + 1;
                        return Ok(Value::Text(out));
                    }
                    _ => out.push(c),
                }
            }
            return Err(syntax(start, "unterminated string"));
        }
        let (_, w) = self.word();
        match sniff(w) {
            Sniffed::Int => Ok(Value::Int(w.parse().expect("sniffed int"))),
            Sniffed::Float => Ok(Value::Float(w.parse().expect("sniffed float"))),
            Sniffed::Text if w.is_empty() => Err(syntax(start, "expected value")),
            Sniffed::Text => Err(syntax(
                start,
                format!("expected quoted string or number, found `{w}`"),
            )),
        }
    }

    /// Consumes `kw` (case-insensitive) when it is the next word.
    fn keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let save = self.at;
        let (_, w) = self.word();
        if w.eq_ignore_ascii_case(kw) {
            true
        } else {
            self.at = save;
            false
        }
    }
}

/// Parses filter text.
///
/// ```text
/// expr := conj ("or" conj)*
/// conj := cmp ("and" cmp)*
/// cmp  := NAME OP VALUE        OP: = != < <= > >=
/// ```
///
/// VALUE is a double-quoted string or a bare number; keywords are
/// case-insensitive. Blank text is the match-all filter (one empty
/// conjunction).
pub fn parse_filter(text: &str) -> Result<Filter, FilterError> {
    let mut cur = Cursor { text, at: 0 };
    if cur.at_end() {
        return Ok(Filter::all());
    }
    let mut conjunctions = Vec::new();
    let mut conj = Vec::new();
    loop {
        let field = cur.name()?;
        let op = cur.op()?;
        let value = cur.value()?;
        conj.push(Comparison::new(field, op, value));
        if cur.at_end() {
            break;
        }
        if cur.keyword("and") {
            continue;
        }
        if cur.keyword("or") {
            conjunctions.push(std::mem::take(&mut conj));
            continue;
        }
        let (pos, w) = cur.word();
        return Err(syntax(pos, format!("expected `and` or `or`, found `{w}`")));
    }
    conjunctions.push(conj);
    Ok(Filter::from_conjunctions(conjunctions))
}
