//! Upstream readers.
//!
//! A [`Source`] hands out rows with `ts > cursor` in timestamp order. Sources
//! never write upstream: the SQL client opens its database read-only and only
//! ever prepares `SELECT` statements.

mod fixture;
mod runs;
mod sql;

use std::path::PathBuf;

pub use fixture::{format_fixture_line, parse_fixture_line, write_fixture, FixtureSource};
pub use runs::{
    fetch_run_intervals, read_run_file, write_run_file, RunFile, RunInterval, RunKind,
    RunProvider, SqlRunSource,
};
pub use sql::{
    SqlConnection, SqlEndpoint, SqlParam, SqlSource, SqlValue, SqliteConnection, ENV_PASSWORD,
    ENV_USER,
};

use crate::storage::EventRecord;
use crate::time::Timestamp;

/// A row as delivered by a source; same shape and meaning as a stored record.
pub type SourceRow = EventRecord;

pub type RowStream<'a> = Box<dyn Iterator<Item = Result<SourceRow, SourceError>> + 'a>;

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("source unreachable: {0}")]
    Unreachable(String),

    #[error("SQL error: {0}")]
    Sql(String),

    #[error("invalid endpoint descriptor {descriptor:?}: {reason}")]
    Endpoint { descriptor: String, reason: String },

    #[error("invalid run interval {run_number}: {reason}")]
    InvalidInterval { run_number: u64, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub trait Source: Send {
    /// Human-readable origin, used in reports.
    fn describe(&self) -> String;

    /// Rows with `ts > cursor` (all rows when `cursor` is `None`), ordered by
    /// `ts`.
    fn fetch_since(&mut self, cursor: Option<Timestamp>) -> Result<RowStream<'_>, SourceError>;
}

/// In-memory source for tests and generated data.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    rows: Vec<SourceRow>,
    reachable: bool,
}

impl MemorySource {
    pub fn new(mut rows: Vec<SourceRow>) -> Self {
        rows.sort_by_key(|r| r.ts);
        MemorySource {
            rows,
            reachable: true,
        }
    }

    /// A source whose every fetch fails.
    pub fn unreachable() -> Self {
        MemorySource {
            rows: Vec::new(),
            reachable: false,
        }
    }

    pub fn rows(&self) -> &[SourceRow] {
        &self.rows
    }

    pub fn push(&mut self, rows: impl IntoIterator<Item = SourceRow>) {
        self.rows.extend(rows);
        self.rows.sort_by_key(|r| r.ts);
    }

    pub fn retain(&mut self, f: impl FnMut(&SourceRow) -> bool) {
        self.rows.retain(f);
    }

    pub fn set_reachable(&mut self, reachable: bool) {
        self.reachable = reachable;
    }
}

impl Source for MemorySource {
    fn describe(&self) -> String {
        format!("memory({} rows)", self.rows.len())
    }

    fn fetch_since(&mut self, cursor: Option<Timestamp>) -> Result<RowStream<'_>, SourceError> {
        if !self.reachable {
            return Err(SourceError::Unreachable("memory source offline".into()));
        }
        let start = match cursor {
            Some(c) => self.rows.partition_point(|r| r.ts <= c),
            None => 0,
        };
        Ok(Box::new(self.rows[start..].iter().copied().map(Ok)))
    }
}

/// Opens a source from a descriptor string.
///
/// * `fixture:<path>` reads a fixture file.
/// * `sqlite://[host]/<path>?table=<name>&ts_column=<col>` queries SQLite.
pub fn open_source(descriptor: &str) -> Result<Box<dyn Source>, SourceError> {
    if let Some(path) = descriptor.strip_prefix("fixture:") {
        return Ok(Box::new(FixtureSource::new(path)));
    }
    let (endpoint, query) = descriptor.split_once('?').unwrap_or((descriptor, ""));
    let mut table = None;
    let mut ts_column = None;
    for kv in query.split('&').filter(|s| !s.is_empty()) {
        match kv.split_once('=') {
            Some(("table", v)) => table = Some(v.to_string()),
            Some(("ts_column", v)) => ts_column = Some(v.to_string()),
            _ => {
                return Err(SourceError::Endpoint {
                    descriptor: descriptor.to_string(),
                    reason: format!("unknown parameter {kv:?}"),
                })
            }
        }
    }
    let endpoint = SqlEndpoint::parse(endpoint)?;
    let missing = |what: &str| SourceError::Endpoint {
        descriptor: descriptor.to_string(),
        reason: format!("missing {what} parameter"),
    };
    let table = table.ok_or_else(|| missing("table"))?;
    let ts_column = ts_column.unwrap_or_else(|| "ts".to_string());
    Ok(Box::new(SqlSource::new(endpoint, &table, &ts_column)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_source_filters_strictly_after_cursor() {
        let rows: Vec<_> = (0..10)
            .map(|i| EventRecord::new(1, Timestamp(i * 10), i as f64))
            .collect();
        let mut src = MemorySource::new(rows);
        let got: Vec<_> = src
            .fetch_since(Some(Timestamp(50)))
            .unwrap()
            .map(|r| r.unwrap().ts.0)
            .collect();
        assert_eq!(got, vec![60, 70, 80, 90]);
        assert_eq!(src.fetch_since(Some(Timestamp(1000))).unwrap().count(), 0);
    }

    #[test]
    fn unreachable_memory_source_errors() {
        let mut src = MemorySource::unreachable();
        assert!(matches!(
            src.fetch_since(None).err(),
            Some(SourceError::Unreachable(_))
        ));
    }

    #[test]
    fn open_source_rejects_missing_table() {
        let err = open_source("sqlite:///tmp/x.db").err().unwrap();
        assert!(err.to_string().contains("table"), "{err}");
    }
}
