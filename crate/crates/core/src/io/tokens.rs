use std::io::BufRead;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Whitespace-separated tokens with the line each came from.
pub(crate) struct Tokens<R> {
    reader: R,
    line: usize,
    buf: String,
    pending: Vec<String>,
}

impl<R: BufRead> Tokens<R> {
    pub(crate) fn new(reader: R) -> Self {
        Self {
            reader,
            line: 0,
            buf: String::new(),
            pending: Vec::new(),
        }
    }

    /// Line of the most recently returned token.
    pub(crate) fn line(&self) -> usize {
        self.line
    }

    pub(crate) fn next_token(&mut self) -> Result<Option<String>> {
        while self.pending.is_empty() {
            self.buf.clear();
            if self.reader.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            self.pending = self.buf.split_whitespace().rev().map(str::to_string).collect();
        }
        Ok(self.pending.pop())
    }

    pub(crate) fn expect<T: FromStr>(&mut self, what: &str) -> Result<T> {
        match self.next_token()? {
            Some(tok) => tok.parse().map_err(|_| Error::Parse {
                line: self.line,
                message: format!("expected {what}, found {tok:?}"),
            }),
            None => Err(Error::Parse {
                line: self.line,
                message: format!("unexpected end of input while reading {what}"),
            }),
        }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }
}
