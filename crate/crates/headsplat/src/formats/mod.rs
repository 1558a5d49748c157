//! File formats. Each format has a parse/emit pair on in-memory buffers
//! plus thin path wrappers.

pub mod blob;
pub mod image;
pub mod landmarks;
pub mod model;
pub mod obj;
pub mod ply;
pub mod prior;

use std::path::Path;
use std::str::FromStr;

use crate::error::{io_context, malformed, Result};

/// Whitespace token stream with `#` comments stripped.
pub(crate) struct Tokens<'a> {
    iter: Box<dyn Iterator<Item = &'a str> + 'a>,
    consumed: usize,
}

impl<'a> Tokens<'a> {
    pub fn new(text: &'a str) -> Self {
        let iter = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split_whitespace());
        Tokens {
            iter: Box::new(iter),
            consumed: 0,
        }
    }

    pub fn next_str(&mut self, what: &str) -> Result<&'a str, String> {
        self.consumed += 1;
        self.iter
            .next()
            .ok_or_else(|| format!("unexpected end of file while reading {what}"))
    }

    pub fn next<T: FromStr>(&mut self, what: &str) -> Result<T, String> {
        let tok = self.next_str(what)?;
        tok.parse()
            .map_err(|_| format!("token {} ({tok:?}) is not a valid {what}", self.consumed))
    }

    pub fn expect(&mut self, literal: &str) -> Result<(), String> {
        let tok = self.next_str(literal)?;
        if tok == literal {
            Ok(())
        } else {
            Err(format!("expected {literal:?}, found {tok:?}"))
        }
    }

    pub fn finish(mut self) -> Result<(), String> {
        match self.iter.next() {
            None => Ok(()),
            Some(t) => Err(format!("trailing data starting at {t:?}")),
        }
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    io_context(std::fs::read_to_string(path), path)
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    io_context(std::fs::read(path), path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    io_context(std::fs::write(path, bytes), path)
}

pub(crate) fn parse_file<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T, String>) -> Result<T> {
    let text = read_text(path)?;
    parse(&text).map_err(|m| malformed(path, m))
}
