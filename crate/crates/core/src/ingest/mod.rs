//! Synchronization from upstream sources into the store.
//!
//! Large append-only tables are synced incrementally: rows newer than
//! `last_ts - overlap` are re-read and deduplicated on `(element_id, ts)`, so
//! late arrivals inside the overlap window are picked up and replays are
//! no-ops. Small tables are rewritten in full every cycle.

mod schedule;

use std::collections::BTreeSet;
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::sources::{Source, SourceError};
use crate::storage::{EventRecord, StoreError, Table, TableWriter};
use crate::time::{Span, Timestamp};

pub use crate::storage::Watermark;
pub use schedule::{ScheduleConfig, Schedule, TableSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Incremental,
    #[serde(alias = "overwrite")]
    FullOverwrite,
}

impl std::fmt::Display for SyncMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SyncMode::Incremental => "incremental",
            SyncMode::FullOverwrite => "full_overwrite",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub table: String,
    pub rows_read: u64,
    /// Rows that changed the store, after deduplication.
    pub rows_written: u64,
    pub partitions_touched: Vec<NaiveDate>,
    pub old_watermark: Option<Timestamp>,
    pub new_watermark: Option<Timestamp>,
    pub mode: SyncMode,
    pub duration: f64,
    pub manifest_version: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SyncReport {
    pub fn failed(table: &str, mode: SyncMode, error: impl ToString) -> Self {
        SyncReport {
            table: table.to_string(),
            rows_read: 0,
            rows_written: 0,
            partitions_touched: Vec::new(),
            old_watermark: None,
            new_watermark: None,
            mode,
            duration: 0.0,
            manifest_version: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("source error: {0}")]
    Source(#[from] SourceError),
    #[error("store error: {0}")]
    Store(#[from] StoreError),
}

impl SyncError {
    fn is_conflict(&self) -> bool {
        matches!(
            self,
            SyncError::Store(StoreError::CommitConflict { .. } | StoreError::Locked { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SyncOptions {
    /// Overrides the overlap stored in the table's watermark.
    pub overlap: Option<Span>,
}

/// Groups an ordered row stream into per-day batches and stages them.
struct DayWriter<'w> {
    writer: &'w mut TableWriter,
    day: Option<NaiveDate>,
    buf: Vec<EventRecord>,
    touched: BTreeSet<NaiveDate>,
    rows_read: u64,
    max_ts: Option<Timestamp>,
}

impl<'w> DayWriter<'w> {
    fn new(writer: &'w mut TableWriter) -> Self {
        DayWriter {
            writer,
            day: None,
            buf: Vec::new(),
            touched: BTreeSet::new(),
            rows_read: 0,
            max_ts: None,
        }
    }

    fn push(&mut self, r: EventRecord) -> Result<(), StoreError> {
        self.rows_read += 1;
        self.max_ts = Some(self.max_ts.map_or(r.ts, |m| m.max(r.ts)));
        let day = r.ts.day();
        if self.day != Some(day) {
            self.flush()?;
            self.day = Some(day);
        }
        self.buf.push(r);
        Ok(())
    }

    fn flush(&mut self) -> Result<(), StoreError> {
        let Some(day) = self.day else {
            return Ok(());
        };
        if self.buf.is_empty() {
            return Ok(());
        }
        let before = self.writer.rows_written();
        self.writer.write_partition(day, std::mem::take(&mut self.buf))?;
        if self.writer.rows_written() > before {
            self.touched.insert(day);
        }
        Ok(())
    }
}

fn run_sync(
    source: &mut dyn Source,
    table: &Table,
    mode: SyncMode,
    options: SyncOptions,
) -> Result<SyncReport, SyncError> {
    let started = Instant::now();
    let mut writer = table.writer()?;
    let mut watermark = writer.base().watermark.clone();
    watermark.table = table.name().to_string();
    if let Some(overlap) = options.overlap {
        watermark.overlap = overlap;
    }
    let old = watermark.last_ts;
    let cursor = match mode {
        SyncMode::Incremental => watermark.cursor(),
        SyncMode::FullOverwrite => None,
    };
    writer.set_overwrite(mode == SyncMode::FullOverwrite);

    let (rows_read, max_ts, touched) = {
        let stream = source.fetch_since(cursor)?;
        let mut days = DayWriter::new(&mut writer);
        for row in stream {
            days.push(row?)?;
        }
        days.flush()?;
        (days.rows_read, days.max_ts, days.touched)
    };
    let rows_written = writer.rows_written();
    let new_watermark = watermark.advanced_to(max_ts);
    // An empty incremental delta leaves the table at its current version.
    let unchanged = mode == SyncMode::Incremental
        && rows_written == 0
        && writer.base().version > 0
        && new_watermark == writer.base().watermark;
    let version = if unchanged {
        writer.base().version
    } else {
        writer.commit(new_watermark.clone())?.version
    };
    let report = SyncReport {
        table: table.name().to_string(),
        rows_read,
        rows_written,
        partitions_touched: touched.into_iter().collect(),
        old_watermark: old,
        new_watermark: new_watermark.last_ts,
        mode,
        duration: started.elapsed().as_secs_f64(),
        manifest_version: Some(version),
        error: None,
    };
    info!(
        table = %report.table,
        mode = %mode,
        rows_read,
        rows_written,
        version,
        "sync finished"
    );
    Ok(report)
}

fn with_retry(
    source: &mut dyn Source,
    table: &Table,
    mode: SyncMode,
    options: SyncOptions,
) -> Result<SyncReport, SyncError> {
    match run_sync(source, table, mode, options) {
        Err(e) if e.is_conflict() => {
            warn!(table = table.name(), error = %e, "commit conflict, retrying once");
            run_sync(source, table, mode, options)
        }
        other => other,
    }
}

/// Appends rows newer than `last_ts - overlap` and advances the watermark.
/// On a source error nothing is committed.
pub fn sync_incremental(
    source: &mut dyn Source,
    table: &Table,
    options: SyncOptions,
) -> Result<SyncReport, SyncError> {
    with_retry(source, table, SyncMode::Incremental, options)
}

/// Replaces the whole table with the current source contents. Earlier
/// versions stay readable until garbage-collected.
pub fn sync_full_overwrite(
    source: &mut dyn Source,
    table: &Table,
    options: SyncOptions,
) -> Result<SyncReport, SyncError> {
    with_retry(source, table, SyncMode::FullOverwrite, options)
}

pub fn sync(
    source: &mut dyn Source,
    table: &Table,
    mode: SyncMode,
    options: SyncOptions,
) -> Result<SyncReport, SyncError> {
    with_retry(source, table, mode, options)
}
