//! Parquet encoding of one partition file.
//!
//! Columns: `element_id: UInt32`, `ts: Timestamp(µs, UTC)`, `value: Float64`,
//! `status: Int32 (nullable)`. Rows are sorted by `(element_id, ts)` and split
//! into small row groups so the per-row-group statistics can skip most of a
//! file when only a few elements are requested.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use arrow_array::{
    Array, ArrayRef, Float64Array, Int32Array, RecordBatch, TimestampMicrosecondArray, UInt32Array,
};
use arrow_schema::{DataType, Field as ArrowField, Schema, SchemaRef, TimeUnit};
use parquet::arrow::arrow_reader::ParquetRecordBatchReaderBuilder;
use parquet::arrow::{ArrowWriter, ProjectionMask};
use parquet::basic::Compression;
use parquet::file::metadata::RowGroupMetaData;
use parquet::file::properties::{EnabledStatistics, WriterProperties};
use parquet::file::statistics::Statistics;

use super::prune::{ElementPredicate, ValuePredicate};
use super::scan::{EventBatch, Projection};
use super::{EventRecord, Result, StoreError};
use crate::time::TimeRange;

const ROW_GROUP_ROWS: usize = 4096;

const COL_ELEMENT: usize = 0;
const COL_TS: usize = 1;
const COL_VALUE: usize = 2;
const COL_STATUS: usize = 3;

fn schema() -> SchemaRef {
    Arc::new(Schema::new(vec![
        ArrowField::new("element_id", DataType::UInt32, false),
        ArrowField::new(
            "ts",
            DataType::Timestamp(TimeUnit::Microsecond, Some("UTC".into())),
            false,
        ),
        ArrowField::new("value", DataType::Float64, false),
        ArrowField::new("status", DataType::Int32, true),
    ]))
}

fn data_err(path: &Path, reason: impl ToString) -> StoreError {
    StoreError::DataFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes `records` (already sorted and deduplicated) to a new parquet file.
pub fn write_file(path: &Path, records: &[EventRecord]) -> Result<()> {
    let columns: Vec<ArrayRef> = vec![
        Arc::new(UInt32Array::from_iter_values(
            records.iter().map(|r| r.element_id),
        )),
        Arc::new(
            TimestampMicrosecondArray::from_iter_values(records.iter().map(|r| r.ts.0))
                .with_timezone("UTC"),
        ),
        Arc::new(Float64Array::from_iter_values(records.iter().map(|r| r.value))),
        Arc::new(Int32Array::from_iter(records.iter().map(|r| r.status))),
    ];
    let batch = RecordBatch::try_new(schema(), columns).map_err(|e| data_err(path, e))?;
    let props = WriterProperties::builder()
        .set_compression(Compression::SNAPPY)
        .set_statistics_enabled(EnabledStatistics::Chunk)
        .set_max_row_group_row_count(Some(ROW_GROUP_ROWS))
        .build();
    let file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut writer = ArrowWriter::try_new(BufWriter::new(file), schema(), Some(props))
        .map_err(|e| data_err(path, e))?;
    writer.write(&batch).map_err(|e| data_err(path, e))?;
    let inner = writer.into_inner().map_err(|e| data_err(path, e))?;
    let file = inner
        .into_inner()
        .map_err(|e| StoreError::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| StoreError::io(path, e))?;
    Ok(())
}

/// Row filter pushed into a file read.
#[derive(Debug, Clone, Copy)]
pub struct FileFilter<'a> {
    pub range: TimeRange,
    pub elements: Option<&'a ElementPredicate>,
    pub value: Option<&'a ValuePredicate>,
    pub projection: Projection,
}

fn i64_bounds(rg: &RowGroupMetaData, col: usize) -> Option<(i64, i64)> {
    match rg.column(col).statistics()? {
        Statistics::Int64(s) => Some((*s.min_opt()?, *s.max_opt()?)),
        _ => None,
    }
}

fn u32_bounds(rg: &RowGroupMetaData, col: usize) -> Option<(u32, u32)> {
    match rg.column(col).statistics()? {
        // UINT_32 is stored as INT32 with unsigned ordering; the bit pattern
        // round-trips through `as`.
        Statistics::Int32(s) => Some((*s.min_opt()? as u32, *s.max_opt()? as u32)),
        _ => None,
    }
}

fn f64_bounds(rg: &RowGroupMetaData, col: usize) -> Option<(f64, f64)> {
    match rg.column(col).statistics()? {
        Statistics::Double(s) => Some((*s.min_opt()?, *s.max_opt()?)),
        _ => None,
    }
}

fn row_group_may_match(rg: &RowGroupMetaData, filter: &FileFilter<'_>) -> bool {
    if let Some((lo, hi)) = i64_bounds(rg, COL_TS) {
        if !filter
            .range
            .overlaps_closed(crate::time::Timestamp(lo), crate::time::Timestamp(hi))
        {
            return false;
        }
    }
    if let (Some(elements), Some((lo, hi))) = (filter.elements, u32_bounds(rg, COL_ELEMENT)) {
        if !elements.may_match_range(lo, hi) {
            return false;
        }
    }
    if let (Some(pred), Some((lo, hi))) = (filter.value, f64_bounds(rg, COL_VALUE)) {
        if !pred.may_match(lo, hi) {
            return false;
        }
    }
    true
}

/// Reads the rows of one file that pass `filter`, in file order. Returns the
/// batch and the number of rows decoded before row-level filtering.
pub fn read_file(path: &Path, filter: &FileFilter<'_>) -> Result<(EventBatch, u64)> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let builder = ParquetRecordBatchReaderBuilder::try_new(file).map_err(|e| data_err(path, e))?;
    let md = builder.metadata().clone();
    if md.file_metadata().schema_descr().num_columns() != 4 {
        return Err(data_err(path, "unexpected column count"));
    }
    let groups: Vec<usize> = (0..md.num_row_groups())
        .filter(|&i| row_group_may_match(md.row_group(i), filter))
        .collect();

    let mut out = EventBatch::with_projection(filter.projection);
    if groups.is_empty() {
        return Ok((out, 0));
    }

    let need_value = filter.projection.value || filter.value.is_some();
    let mut cols = vec![COL_ELEMENT, COL_TS];
    if need_value {
        cols.push(COL_VALUE);
    }
    if filter.projection.status {
        cols.push(COL_STATUS);
    }
    let mask = ProjectionMask::roots(builder.parquet_schema(), cols.iter().copied());
    let reader = builder
        .with_row_groups(groups)
        .with_projection(mask)
        .with_batch_size(8192)
        .build()
        .map_err(|e| data_err(path, e))?;

    let mut scanned = 0u64;
    for batch in reader {
        let batch = batch.map_err(|e| data_err(path, e))?;
        scanned += batch.num_rows() as u64;
        let ids = column::<UInt32Array>(&batch, "element_id", path)?;
        let ts = column::<TimestampMicrosecondArray>(&batch, "ts", path)?;
        let values = if need_value {
            Some(column::<Float64Array>(&batch, "value", path)?)
        } else {
            None
        };
        let status = if filter.projection.status {
            Some(column::<Int32Array>(&batch, "status", path)?)
        } else {
            None
        };
        let ids = ids.values();
        let ts = ts.values();
        for i in 0..batch.num_rows() {
            let t = crate::time::Timestamp(ts[i]);
            if !filter.range.contains(t) {
                continue;
            }
            if let Some(e) = filter.elements {
                if !e.matches(ids[i]) {
                    continue;
                }
            }
            let v = values.map(|a| a.value(i));
            if let (Some(pred), Some(v)) = (filter.value, v) {
                if !pred.matches(v) {
                    continue;
                }
            }
            out.element_id.push(ids[i]);
            out.ts.push(ts[i]);
            if let (Some(col), Some(v)) = (out.value.as_mut(), v) {
                col.push(v);
            }
            if let (Some(col), Some(s)) = (out.status.as_mut(), status) {
                col.push(s.is_valid(i).then(|| s.value(i)));
            }
        }
    }
    Ok((out, scanned))
}

fn column<'b, A: 'static>(batch: &'b RecordBatch, name: &str, path: &Path) -> Result<&'b A> {
    batch
        .column_by_name(name)
        .and_then(|c| c.as_any().downcast_ref::<A>())
        .ok_or_else(|| data_err(path, format!("missing or mistyped column {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Timestamp;

    fn sample() -> Vec<EventRecord> {
        let mut v = Vec::new();
        for id in 0..50u32 {
            for k in 0..1000i64 {
                let mut r = EventRecord::new(id, Timestamp(k * 1_000_000), id as f64 + k as f64 / 1000.0);
                if k % 3 == 0 {
                    r.status = Some(k as i32);
                }
                v.push(r);
            }
        }
        v
    }

    #[test]
    fn round_trip_all_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.parquet");
        let rows = sample();
        write_file(&path, &rows).unwrap();
        let filter = FileFilter {
            range: TimeRange::all(),
            elements: None,
            value: None,
            projection: Projection::all(),
        };
        let (batch, scanned) = read_file(&path, &filter).unwrap();
        assert_eq!(scanned, rows.len() as u64);
        assert_eq!(batch.to_records(), rows);
    }

    #[test]
    fn row_group_pushdown_skips_unrelated_elements() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.parquet");
        let rows = sample();
        write_file(&path, &rows).unwrap();
        let e = ElementPredicate::new([3]);
        let filter = FileFilter {
            range: TimeRange::all(),
            elements: Some(&e),
            value: None,
            projection: Projection::all(),
        };
        let (batch, scanned) = read_file(&path, &filter).unwrap();
        assert_eq!(batch.len(), 1000);
        assert!(scanned < rows.len() as u64 / 4, "scanned {scanned}");
    }

    #[test]
    fn corrupt_file_error_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.parquet");
        std::fs::write(&path, b"not parquet").unwrap();
        let filter = FileFilter {
            range: TimeRange::all(),
            elements: None,
            value: None,
            projection: Projection::all(),
        };
        let err = read_file(&path, &filter).unwrap_err().to_string();
        assert!(err.contains("bad.parquet"), "{err}");
    }
}
