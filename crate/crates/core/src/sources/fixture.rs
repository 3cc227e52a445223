//! Fixture files: one record per line,
//! `element_id <TAB> iso8601_ts <TAB> value <TAB> status`, with an empty
//! status field for "no status". Blank lines and lines starting with `#` are
//! ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{RowStream, Source, SourceError, SourceRow};
use crate::time::Timestamp;

pub fn parse_fixture_line(line: &str) -> Result<SourceRow, String> {
    let mut fields = line.split('\t');
    let mut next = |name: &str| {
        fields
            .next()
            .ok_or_else(|| format!("missing field {name}"))
    };
    let element_id = next("element_id")?
        .trim()
        .parse::<u32>()
        .map_err(|e| format!("bad element_id: {e}"))?;
    let ts = Timestamp::parse_iso(next("ts")?.trim()).map_err(|e| e.to_string())?;
    let value = next("value")?
        .trim()
        .parse::<f64>()
        .map_err(|e| format!("bad value: {e}"))?;
    let status = match next("status")?.trim() {
        "" => None,
        s => Some(s.parse::<i32>().map_err(|e| format!("bad status: {e}"))?),
    };
    if fields.next().is_some() {
        return Err("too many fields".into());
    }
    Ok(SourceRow {
        element_id,
        ts,
        value,
        status,
    })
}

pub fn format_fixture_line(row: &SourceRow) -> String {
    let status = row.status.map(|s| s.to_string()).unwrap_or_default();
    format!("{}\t{}\t{}\t{}", row.element_id, row.ts.to_iso(), row.value, status)
}

pub fn write_fixture<'a, W: Write>(
    mut out: W,
    rows: impl IntoIterator<Item = &'a SourceRow>,
) -> std::io::Result<()> {
    for r in rows {
        writeln!(out, "{}", format_fixture_line(r))?;
    }
    out.flush()
}

/// Reads a fixture file on every fetch, so appends to the file between syncs
/// are picked up.
#[derive(Debug, Clone)]
pub struct FixtureSource {
    path: PathBuf,
}

impl FixtureSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FixtureSource { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_all(&self) -> Result<Vec<SourceRow>, SourceError> {
        let file = File::open(&self.path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                SourceError::Unreachable(format!("{} does not exist", self.path.display()))
            }
            _ => SourceError::Io {
                path: self.path.clone(),
                source: e,
            },
        })?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| SourceError::Io {
                path: self.path.clone(),
                source: e,
            })?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let row = parse_fixture_line(&line).map_err(|reason| SourceError::Parse {
                path: self.path.clone(),
                line: i + 1,
                reason,
            })?;
            rows.push(row);
        }
        Ok(rows)
    }
}

impl Source for FixtureSource {
    fn describe(&self) -> String {
        format!("fixture:{}", self.path.display())
    }

    fn fetch_since(&mut self, cursor: Option<Timestamp>) -> Result<RowStream<'_>, SourceError> {
        let mut rows = self.read_all()?;
        if let Some(c) = cursor {
            rows.retain(|r| r.ts > c);
        }
        rows.sort_by_key(|r| r.ts);
        Ok(Box::new(rows.into_iter().map(Ok)))
    }
}
