//! Line-oriented TSV reading with a named-column header.
//!
//! The dialect is the one used by the public data release: tab separated,
//! `\n` line endings (a trailing `\r` is tolerated), no quoting or escaping.

use std::collections::HashSet;
use std::io::BufRead;
use std::sync::Arc;

use super::IngestError;

pub(crate) struct TsvReader<R> {
    src: R,
    columns: Vec<String>,
    line_no: u64,
    buf: String,
}

impl<R: BufRead> TsvReader<R> {
    pub(crate) fn new(mut src: R) -> Result<Self, IngestError> {
        let mut header = String::new();
        if src.read_line(&mut header)? == 0 {
            return Err(IngestError::EmptyInput);
        }
        let columns = trim_eol(&header)
            .split('\t')
            .map(|c| c.trim_start_matches('\u{feff}').to_string())
            .collect();
        Ok(Self {
            src,
            columns,
            line_no: 1,
            buf: String::new(),
        })
    }

    pub(crate) fn column(&self, name: &str) -> Result<usize, IngestError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| IngestError::MissingColumn {
                name: name.to_string(),
            })
    }

    pub(crate) fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Reads the next non-empty data line. Returns the 1-based line number
    /// and the split fields, or `None` at end of input.
    pub(crate) fn next_row(&mut self) -> Result<Option<(u64, Vec<&str>)>, IngestError> {
        loop {
            self.buf.clear();
            if self.src.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            if !trim_eol(&self.buf).is_empty() {
                break;
            }
        }
        Ok(Some((self.line_no, trim_eol(&self.buf).split('\t').collect())))
    }
}

fn trim_eol(s: &str) -> &str {
    s.trim_end_matches('\n').trim_end_matches('\r')
}

pub(crate) fn field<'a>(row: &[&'a str], idx: usize, name: &str) -> Result<&'a str, String> {
    match row.get(idx) {
        Some(v) if !v.is_empty() => Ok(v),
        Some(_) => Err(format!("empty value for `{name}`")),
        None => Err(format!("missing value for `{name}`")),
    }
}

pub(crate) fn parse_millis(v: &str, name: &str) -> Result<i64, String> {
    let t: i64 = v
        .parse()
        .map_err(|_| format!("`{name}` is not an integer: {v:?}"))?;
    if t < 0 {
        return Err(format!("`{name}` is negative: {t}"));
    }
    Ok(t)
}

/// Deduplicates id allocations: a rater with ten thousand ratings holds one
/// string, not ten thousand.
#[derive(Default)]
pub(crate) struct Interner {
    set: HashSet<Arc<str>>,
}

impl Interner {
    pub(crate) fn intern(&mut self, s: &str) -> Arc<str> {
        if let Some(a) = self.set.get(s) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(s);
        self.set.insert(a.clone());
        a
    }
}
