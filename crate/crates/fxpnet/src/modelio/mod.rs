//! On-disk formats.
//!
//! | file | format |
//! |------|--------|
//! | network definition | line-oriented text, [`netdef`] |
//! | parameters | little-endian binary with CRC-32, [`params`] |
//! | quantization scheme | line-oriented text, [`scheme`] |
//! | range profile | line-oriented text, [`profile`] |
//! | flow report | JSON, [`report`] |
//! | fine-tuning history, mode sweep | CSV, [`report`] |
//!
//! Text formats start with a `<kind> <version>` header line. Blank lines and
//! anything after `#` are ignored; unknown keys are errors.

pub mod netdef;
pub mod params;
pub mod profile;
pub mod report;
pub mod scheme;

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use netdef::NetDef;
pub use params::{decode_params, encode_params, load_params, save_params, Blob};
pub use profile::{parse_profile, profile_sha256, profile_to_text};
pub use scheme::{Provenance, SchemeFile};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Non-empty lines split on whitespace, with 1-based line numbers.
pub(crate) struct Lines<'a> {
    format: &'static str,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    pub(crate) fn new(format: &'static str, text: &'a str) -> Self {
        Self {
            format,
            inner: text.lines().enumerate(),
        }
    }

    /// Consumes the `<format> <version>` header.
    pub(crate) fn header(&mut self, expected: u32) -> Result<()> {
        let (line, toks) = self
            .next()
            .ok_or_else(|| self.err(1, "empty file"))?;
        if toks.len() != 2 || toks[0] != self.format {
            return Err(self.err(line, format!("expected header `{} {expected}`", self.format)));
        }
        let found = self.parse::<u32>(line, toks[1])?;
        if found != expected {
            return Err(Error::Version {
                format: self.format,
                found,
                expected,
            });
        }
        Ok(())
    }

    pub(crate) fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            format: self.format,
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn parse<T: FromStr>(&self, line: usize, tok: &str) -> Result<T> {
        tok.parse()
            .map_err(|_| self.err(line, format!("cannot parse `{tok}`")))
    }

    pub(crate) fn arity(&self, line: usize, toks: &[&str], n: usize) -> Result<()> {
        if toks.len() != n {
            return Err(self.err(line, format!("`{}` takes {} value(s)", toks[0], n - 1)));
        }
        Ok(())
    }
}

impl<'a> Iterator for Lines<'a> {
    type Item = (usize, Vec<&'a str>);

    fn next(&mut self) -> Option<Self::Item> {
        for (i, raw) in self.inner.by_ref() {
            let content = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = content.split_whitespace().collect();
            if !toks.is_empty() {
                return Some((i + 1, toks));
            }
        }
        None
    }
}
