use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{read_file, FileFilter};
use super::manifest::PartitionMeta;
use super::prune::{file_may_match, ElementPredicate, ValuePredicate};
use super::table::Snapshot;
use super::{EventRecord, Result, StoreError};
use crate::time::{TimeRange, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    ElementId,
    Ts,
    Value,
    Status,
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "element_id" => Ok(Field::ElementId),
            "ts" => Ok(Field::Ts),
            "value" => Ok(Field::Value),
            "status" => Ok(Field::Status),
            other => Err(format!("unknown field {other:?}")),
        }
    }
}

/// Which optional columns are decoded. `element_id` and `ts` are always read
/// because output ordering and the range filter depend on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub value: bool,
    pub status: bool,
}

impl Projection {
    pub fn all() -> Self {
        Projection {
            value: true,
            status: true,
        }
    }

    pub fn keys_only() -> Self {
        Projection {
            value: false,
            status: false,
        }
    }

    pub fn from_fields(fields: &[Field]) -> Result<Self> {
        if fields.is_empty() {
            return Err(StoreError::InvalidRequest("projection is empty".into()));
        }
        Ok(Projection {
            value: fields.contains(&Field::Value),
            status: fields.contains(&Field::Status),
        })
    }
}

/// Columnar slice of records. Unprojected columns are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventBatch {
    pub element_id: Vec<u32>,
    pub ts: Vec<i64>,
    pub value: Option<Vec<f64>>,
    pub status: Option<Vec<Option<i32>>>,
}

impl EventBatch {
    pub fn with_projection(p: Projection) -> Self {
        EventBatch {
            element_id: Vec::new(),
            ts: Vec::new(),
            value: p.value.then(Vec::new),
            status: p.status.then(Vec::new),
        }
    }

    pub fn len(&self) -> usize {
        self.element_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_id.is_empty()
    }

    /// Unprojected values read as NaN, unprojected status as `None`.
    pub fn record(&self, i: usize) -> EventRecord {
        EventRecord {
            element_id: self.element_id[i],
            ts: Timestamp(self.ts[i]),
            value: self.value.as_ref().map_or(f64::NAN, |v| v[i]),
            status: self.status.as_ref().and_then(|s| s[i]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = EventRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn to_records(&self) -> Vec<EventRecord> {
        self.iter().collect()
    }

    fn append(&mut self, mut other: EventBatch) {
        self.element_id.append(&mut other.element_id);
        self.ts.append(&mut other.ts);
        if let (Some(a), Some(b)) = (self.value.as_mut(), other.value.as_mut()) {
            a.append(b);
        }
        if let (Some(a), Some(b)) = (self.status.as_mut(), other.status.as_mut()) {
            a.append(b);
        }
    }

    fn sort_by_key(&mut self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_unstable_by_key(|&i| (self.element_id[i], self.ts[i]));
        self.element_id = idx.iter().map(|&i| self.element_id[i]).collect();
        self.ts = idx.iter().map(|&i| self.ts[i]).collect();
        if let Some(v) = self.value.as_mut() {
            *v = idx.iter().map(|&i| v[i]).collect();
        }
        if let Some(s) = self.status.as_mut() {
            *s = idx.iter().map(|&i| s[i]).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRequest {
    pub range: TimeRange,
    pub elements: Option<ElementPredicate>,
    pub value: Option<ValuePredicate>,
    pub fields: Vec<Field>,
}

impl ScanRequest {
    pub fn new(range: TimeRange) -> Self {
        ScanRequest {
            range,
            elements: None,
            value: None,
            fields: vec![Field::ElementId, Field::Ts, Field::Value, Field::Status],
        }
    }

    pub fn elements(mut self, e: ElementPredicate) -> Self {
        self.elements = Some(e);
        self
    }

    pub fn value(mut self, p: ValuePredicate) -> Self {
        self.value = Some(p);
        self
    }

    pub fn fields(mut self, fields: Vec<Field>) -> Self {
        self.fields = fields;
        self
    }

    fn validate(&self) -> Result<Projection> {
        if self.range.start >= self.range.end {
            return Err(StoreError::InvalidRequest(format!(
                "empty time range [{}, {})",
                self.range.start.0, self.range.end.0
            )));
        }
        Projection::from_fields(&self.fields)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScanStats {
    pub partitions_total: u64,
    pub partitions_opened: u64,
    pub rows_scanned: u64,
    pub rows_returned: u64,
}

impl ScanStats {
    pub fn merge(&mut self, other: &ScanStats) {
        self.partitions_total = self.partitions_total.max(other.partitions_total);
        self.partitions_opened += other.partitions_opened;
        self.rows_scanned += other.rows_scanned;
        self.rows_returned += other.rows_returned;
    }
}

/// Lazy scan over the pruned partitions of a pinned snapshot. Yields one
/// batch per partition in day order; within a batch rows are sorted by
/// `(element_id, ts)`.
pub struct Scan<'s> {
    snapshot: &'s Snapshot,
    request: ScanRequest,
    projection: Projection,
    partitions: Vec<&'s PartitionMeta>,
    next: usize,
    stats: ScanStats,
}

impl<'s> Scan<'s> {
    pub(crate) fn new(snapshot: &'s Snapshot, request: ScanRequest) -> Result<Self> {
        let projection = request.validate()?;
        let partitions = super::prune_partitions(
            snapshot.manifest(),
            &request.range,
            request.value.as_ref(),
            request.elements.as_ref(),
        );
        let stats = ScanStats {
            partitions_total: snapshot.manifest().partitions.len() as u64,
            partitions_opened: partitions.len() as u64,
            ..ScanStats::default()
        };
        Ok(Scan {
            snapshot,
            request,
            projection,
            partitions,
            next: 0,
            stats,
        })
    }

    /// Statistics so far; final once the iterator is exhausted.
    pub fn stats(&self) -> ScanStats {
        self.stats
    }

    pub fn pruned_days(&self) -> Vec<NaiveDate> {
        self.partitions.iter().map(|p| p.day).collect()
    }

    /// Drains the scan into records.
    pub fn collect_records(mut self) -> Result<(Vec<EventRecord>, ScanStats)> {
        let mut out = Vec::new();
        for batch in self.by_ref() {
            out.extend(batch?.1.iter());
        }
        Ok((out, self.stats))
    }

    /// Runs `f` over every pruned partition in parallel and returns the
    /// results in day order.
    pub fn par_map<T, F>(self, f: F) -> Result<(Vec<T>, ScanStats)>
    where
        T: Send,
        F: Fn(NaiveDate, EventBatch) -> T + Sync + Send,
    {
        let Scan {
            snapshot,
            request,
            projection,
            partitions,
            mut stats,
            ..
        } = self;
        let results: Vec<Result<(T, u64, u64)>> = partitions
            .par_iter()
            .map(|p| {
                let (batch, scanned) = read_partition(snapshot, p, &request, projection)?;
                let returned = batch.len() as u64;
                Ok((f(p.day, batch), scanned, returned))
            })
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            let (t, scanned, returned) = r?;
            stats.rows_scanned += scanned;
            stats.rows_returned += returned;
            out.push(t);
        }
        Ok((out, stats))
    }
}

impl Iterator for Scan<'_> {
    type Item = Result<(NaiveDate, EventBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        let p = *self.partitions.get(self.next)?;
        self.next += 1;
        Some(
            read_partition(self.snapshot, p, &self.request, self.projection).map(
                |(batch, scanned)| {
                    self.stats.rows_scanned += scanned;
                    self.stats.rows_returned += batch.len() as u64;
                    (p.day, batch)
                },
            ),
        )
    }
}

fn read_partition(
    snapshot: &Snapshot,
    p: &PartitionMeta,
    request: &ScanRequest,
    projection: Projection,
) -> Result<(EventBatch, u64)> {
    let filter = FileFilter {
        range: request.range,
        elements: request.elements.as_ref(),
        value: request.value.as_ref(),
        projection,
    };
    let mut out = EventBatch::with_projection(projection);
    let mut scanned = 0;
    let mut files_read = 0;
    for f in &p.files {
        if !file_may_match(f, &request.range, request.value.as_ref(), request.elements.as_ref()) {
            continue;
        }
        let (batch, n) = read_file(&snapshot.table_dir().join(&f.path), &filter)?;
        scanned += n;
        files_read += 1;
        out.append(batch);
    }
    if files_read > 1 {
        out.sort_by_key();
    }
    Ok((out, scanned))
}
