use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::EventRecord;
use crate::time::{Span, Timestamp};

/// Per-table incremental sync cursor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Watermark {
    pub table: String,
    /// High-water mark of synced data; `None` before the first sync.
    pub last_ts: Option<Timestamp>,
    /// Re-read window for late arrivals.
    pub overlap: Span,
}

impl Watermark {
    pub fn new(table: impl Into<String>, overlap: Span) -> Self {
        Watermark {
            table: table.into(),
            last_ts: None,
            overlap,
        }
    }

    /// Lower (exclusive) bound for the next incremental read.
    pub fn cursor(&self) -> Option<Timestamp> {
        self.last_ts.map(|ts| ts.saturating_sub(self.overlap.micros()))
    }

    /// Never moves backwards.
    pub fn advanced_to(&self, observed_max: Option<Timestamp>) -> Watermark {
        let last_ts = match (self.last_ts, observed_max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        Watermark {
            last_ts,
            ..self.clone()
        }
    }
}

/// One immutable data file inside a partition, with exact statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    /// Relative to the table directory.
    pub path: String,
    pub row_count: u64,
    pub min_ts: Timestamp,
    pub max_ts: Timestamp,
    pub min_value: f64,
    pub max_value: f64,
    pub element_id_set_digest: Vec<u32>,
}

impl FileMeta {
    /// `records` must be non-empty and sorted by `(element_id, ts)`.
    pub(crate) fn from_sorted(path: String, records: &[EventRecord]) -> FileMeta {
        debug_assert!(!records.is_empty());
        let mut min_ts = Timestamp::MAX;
        let mut max_ts = Timestamp::MIN;
        let mut min_value = f64::INFINITY;
        let mut max_value = f64::NEG_INFINITY;
        let mut ids: Vec<u32> = Vec::new();
        for r in records {
            min_ts = min_ts.min(r.ts);
            max_ts = max_ts.max(r.ts);
            min_value = min_value.min(r.value);
            max_value = max_value.max(r.value);
            if ids.last() != Some(&r.element_id) {
                ids.push(r.element_id);
            }
        }
        FileMeta {
            path,
            row_count: records.len() as u64,
            min_ts,
            max_ts,
            min_value,
            max_value,
            element_id_set_digest: ids,
        }
    }
}

/// A single UTC day of one table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMeta {
    pub table: String,
    pub day: NaiveDate,
    pub files: Vec<FileMeta>,
    pub row_count: u64,
    pub min_ts: Option<Timestamp>,
    pub max_ts: Option<Timestamp>,
    pub min_value: Option<f64>,
    pub max_value: Option<f64>,
    /// Exact sorted list of the element ids present in the partition.
    pub element_id_set_digest: Vec<u32>,
}

impl PartitionMeta {
    pub fn empty(table: &str, day: NaiveDate) -> Self {
        PartitionMeta {
            table: table.to_string(),
            day,
            files: Vec::new(),
            row_count: 0,
            min_ts: None,
            max_ts: None,
            min_value: None,
            max_value: None,
            element_id_set_digest: Vec::new(),
        }
    }

    /// Merges file statistics. Files must not share `(element_id, ts)` keys.
    pub fn from_files(table: &str, day: NaiveDate, files: Vec<FileMeta>) -> Self {
        let mut meta = PartitionMeta::empty(table, day);
        let mut ids: Vec<u32> = Vec::new();
        for f in &files {
            meta.row_count += f.row_count;
            meta.min_ts = Some(meta.min_ts.map_or(f.min_ts, |t| t.min(f.min_ts)));
            meta.max_ts = Some(meta.max_ts.map_or(f.max_ts, |t| t.max(f.max_ts)));
            meta.min_value = Some(meta.min_value.map_or(f.min_value, |v| v.min(f.min_value)));
            meta.max_value = Some(meta.max_value.map_or(f.max_value, |v| v.max(f.max_value)));
            ids.extend_from_slice(&f.element_id_set_digest);
        }
        ids.sort_unstable();
        ids.dedup();
        meta.element_id_set_digest = ids;
        meta.files = files;
        meta
    }

    pub fn contains_element(&self, id: u32) -> bool {
        self.element_id_set_digest.binary_search(&id).is_ok()
    }
}

/// Versioned snapshot of a whole table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u64,
    pub table: String,
    pub partitions: BTreeMap<NaiveDate, PartitionMeta>,
    pub watermark: Watermark,
    pub created_at: Timestamp,
}

impl Manifest {
    /// Version 0: the state of a table that has never been committed.
    pub fn empty(table: &str, overlap: Span) -> Self {
        Manifest {
            version: 0,
            table: table.to_string(),
            partitions: BTreeMap::new(),
            watermark: Watermark::new(table, overlap),
            created_at: Timestamp(0),
        }
    }

    pub fn total_rows(&self) -> u64 {
        self.partitions.values().map(|p| p.row_count).sum()
    }

    pub fn row_counts_by_day(&self) -> BTreeMap<NaiveDate, u64> {
        self.partitions
            .iter()
            .map(|(d, p)| (*d, p.row_count))
            .collect()
    }

    pub fn file_paths(&self) -> impl Iterator<Item = &str> {
        self.partitions
            .values()
            .flat_map(|p| p.files.iter().map(|f| f.path.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u32, ts: i64, v: f64) -> EventRecord {
        EventRecord::new(id, Timestamp(ts), v)
    }

    #[test]
    fn file_stats_are_exact() {
        let rows = [rec(1, 5, 0.2), rec(1, 9, 0.1), rec(4, 2, 0.7)];
        let f = FileMeta::from_sorted("x".into(), &rows);
        assert_eq!(f.row_count, 3);
        assert_eq!((f.min_ts, f.max_ts), (Timestamp(2), Timestamp(9)));
        assert_eq!((f.min_value, f.max_value), (0.1, 0.7));
        assert_eq!(f.element_id_set_digest, vec![1, 4]);
    }

    #[test]
    fn partition_merges_files() {
        let day = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
        let a = FileMeta::from_sorted("a".into(), &[rec(3, 5, 0.2)]);
        let b = FileMeta::from_sorted("b".into(), &[rec(1, 1, 0.4), rec(3, 7, 0.3)]);
        let p = PartitionMeta::from_files("t", day, vec![a, b]);
        assert_eq!(p.row_count, 3);
        assert_eq!(p.min_ts, Some(Timestamp(1)));
        assert_eq!(p.max_ts, Some(Timestamp(7)));
        assert_eq!(p.max_value, Some(0.4));
        assert_eq!(p.element_id_set_digest, vec![1, 3]);
    }

    #[test]
    fn watermark_never_decreases() {
        let w = Watermark::new("t", Span::from_hours(1)).advanced_to(Some(Timestamp(100)));
        assert_eq!(w.advanced_to(Some(Timestamp(50))).last_ts, Some(Timestamp(100)));
        assert_eq!(w.advanced_to(None).last_ts, Some(Timestamp(100)));
        assert_eq!(w.cursor(), Some(Timestamp(100 - 3_600_000_000)));
    }

    #[test]
    fn manifest_json_uses_iso_timestamps() {
        let day = NaiveDate::from_ymd_opt(2024, 5, 1).unwrap();
        let ts = Timestamp::start_of_day(day);
        let f = FileMeta::from_sorted("date=2024-05-01/part-00000.parquet".into(), &[rec(1, ts.0, 0.5)]);
        let mut m = Manifest::empty("t", Span::from_hours(1));
        m.partitions.insert(day, PartitionMeta::from_files("t", day, vec![f]));
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"2024-05-01\":"));
        assert!(json.contains("\"min_ts\":\"2024-05-01T00:00:00.000000Z\""));
        let back: Manifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
