//! Day-partitioned columnar table store.
//!
//! Every table lives under `<root>/<table>/`:
//!
//! ```text
//! <root>/<table>/date=YYYY-MM-DD/part-<seq>.parquet
//! <root>/<table>/_manifests/manifest-<version>.json
//! <root>/<table>/_manifests/CURRENT
//! ```
//!
//! Data files are immutable once written. A commit writes a new manifest next
//! to the old ones and then swaps `CURRENT` with a rename, so a reader that
//! pinned version N keeps seeing exactly the files of version N. Pruning only
//! looks at statistics carried in the manifest; the parquet row-group
//! statistics are used for a second, finer pushdown pass inside each file.

mod format;
mod manifest;
mod prune;
mod scan;
mod table;

use std::path::PathBuf;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub use format::{read_file, write_file, FileFilter};
pub use manifest::{FileMeta, Manifest, PartitionMeta, Watermark};
pub use prune::{prune_partitions, ElementPredicate, ValuePredicate};
pub use scan::{EventBatch, Field, Projection, Scan, ScanRequest, ScanStats};
pub use table::{FailAction, FailPoint, Snapshot, Store, StoreConfig, Table, TableWriter};

/// One archived measurement: the row type of the event history table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub element_id: u32,
    pub ts: Timestamp,
    pub value: f64,
    pub status: Option<i32>,
}

impl EventRecord {
    pub fn new(element_id: u32, ts: Timestamp, value: f64) -> Self {
        EventRecord {
            element_id,
            ts,
            value,
            status: None,
        }
    }

    pub fn with_status(mut self, status: i32) -> Self {
        self.status = Some(status);
        self
    }

    pub fn key(&self) -> (u32, Timestamp) {
        (self.element_id, self.ts)
    }

    /// Bitwise equality, so NaN payloads and signed zeros compare the way they
    /// are stored.
    pub fn same_payload(&self, other: &EventRecord) -> bool {
        self.value.to_bits() == other.value.to_bits() && self.status == other.status
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("record ({element_id}, {ts}) does not fall on partition day {day}")]
    PartitionBoundary {
        element_id: u32,
        ts: Timestamp,
        day: NaiveDate,
    },

    #[error("record ({element_id}, {ts}) is outside the store epoch range [{lo}, {hi})")]
    OutOfEpoch {
        element_id: u32,
        ts: Timestamp,
        lo: Timestamp,
        hi: Timestamp,
    },

    #[error("record ({element_id}, {ts}) has a non-finite value")]
    NonFiniteValue { element_id: u32, ts: Timestamp },

    #[error("commit conflict on table {table}: expected base version {expected}, found {found}")]
    CommitConflict {
        table: String,
        expected: u64,
        found: u64,
    },

    #[error("table {table} is locked by another writer")]
    Locked { table: String },

    #[error("manifest version {version} of table {table} not found")]
    VersionNotFound { table: String, version: u64 },

    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("error reading data file {path}: {reason}")]
    DataFile { path: PathBuf, reason: String },

    #[error("invalid scan request: {0}")]
    InvalidRequest(String),

    #[error("invalid table name {0:?}")]
    InvalidTableName(String),

    #[error("injected failure at {0:?}")]
    Injected(FailPoint),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Sorts by `(element_id, ts)` and collapses duplicate keys, keeping the
/// last occurrence in input order.
pub fn sort_dedup(records: &mut Vec<EventRecord>) {
    // Stable sort keeps input order among equal keys, so the last of a run is
    // the last-seen record.
    records.sort_by_key(|r| r.key());
    let mut out: Vec<EventRecord> = Vec::with_capacity(records.len());
    for r in records.drain(..) {
        match out.last_mut() {
            Some(prev) if prev.key() == r.key() => *prev = r,
            _ => out.push(r),
        }
    }
    *records = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn sort_dedup_keeps_last_seen() {
        let t = Timestamp(10);
        let mut v = vec![
            EventRecord::new(2, t, 1.0),
            EventRecord::new(1, t, 2.0),
            EventRecord::new(2, t, 3.0),
        ];
        sort_dedup(&mut v);
        assert_eq!(v, vec![EventRecord::new(1, t, 2.0), EventRecord::new(2, t, 3.0)]);
    }

    #[test]
    fn sort_dedup_matches_map_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut v: Vec<EventRecord> = (0..2000)
            .map(|_| {
                EventRecord::new(
                    rng.random_range(0..20),
                    Timestamp(rng.random_range(0..100)),
                    rng.random(),
                )
            })
            .collect();
        let mut oracle: HashMap<(u32, Timestamp), EventRecord> = HashMap::new();
        for r in &v {
            oracle.insert(r.key(), *r);
        }
        sort_dedup(&mut v);
        assert_eq!(v.len(), oracle.len());
        for r in &v {
            assert_eq!(oracle[&r.key()], *r);
        }
        assert!(v.windows(2).all(|w| w[0].key() < w[1].key()));
    }
}
