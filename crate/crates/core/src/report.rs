//! Plot-ready tabular output and the query pipeline behind it.
//!
//! Every output is a [`Table`]: named parameters, a column list and typed
//! cells. CSV and JSON are two encodings of the same table, so they always
//! carry identical data.
//!
//! CSV dialect: `# key=value` parameter lines, then a header row, then one
//! row per record; comma separated, `\n` line endings, `.` decimal point,
//! floats in shortest round-trip form without exponent, timestamps as
//! `YYYY-MM-DDTHH:MM:SS.ffffffZ`, missing values as empty fields. Fields
//! containing `,`, `"` or a newline are double-quoted.
//!
//! JSON: `{"parameters": {..}, "columns": [..], "rows": [{..}, ..]}` with the
//! same cell text for numbers and `null` for missing values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analyses::{DailyCounts, Evidence, Grid, LinkFlag, LAYERS, SECTORS};
use crate::query::{interval_semijoin, time_bin, BinnedSeries, IntervalSet, SemijoinMode};
use crate::storage::{ElementPredicate, EventRecord, ScanRequest, ScanStats, Snapshot, StoreError};
use crate::time::{Span, TimeRange, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}, expected csv or json")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Time(Timestamp),
    Null,
}

impl Cell {
    fn text(&self) -> Option<String> {
        match self {
            Cell::Int(i) => Some(i.to_string()),
            Cell::Float(f) if f.is_finite() => Some(f.to_string()),
            Cell::Float(_) | Cell::Null => None,
            Cell::Bool(b) => Some(b.to_string()),
            Cell::Text(s) => Some(s.clone()),
            Cell::Time(t) => Some(t.to_iso()),
        }
    }

    fn is_quoted_in_json(&self) -> bool {
        matches!(self, Cell::Text(_) | Cell::Time(_))
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v.into())
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<Timestamp> for Cell {
    fn from(v: Timestamp) -> Self {
        Cell::Time(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Null, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub parameters: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            parameters: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.parameters.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, out: W, format: Format) -> io::Result<()> {
        match format {
            Format::Csv => self.write_csv(out),
            Format::Json => self.write_json(out),
        }
    }

    pub fn render(&self, format: Format) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf, format).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 output")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = io::BufWriter::new(out);
        for (k, v) in &self.parameters {
            writeln!(out, "# {k}={v}")?;
        }
        let header: Vec<String> = self.columns.iter().map(|c| csv_field(c)).collect();
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for row in &self.rows {
            line.clear();
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                if let Some(t) = cell.text() {
                    line.push_str(&csv_field(&t));
                }
            }
            writeln!(out, "{line}")?;
        }
        out.flush()
    }

    pub fn write_json<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = io::BufWriter::new(out);
        let params: Vec<String> = self
            .parameters
            .iter()
            .map(|(k, v)| format!("{}:{}", json_str(k), json_str(v)))
            .collect();
        let cols: Vec<String> = self.columns.iter().map(|c| json_str(c)).collect();
        write!(out, "{{\"parameters\":{{{}}},\"columns\":[{}],\"rows\":[", params.join(","), cols.join(","))?;
        let mut line = String::new();
        for (r, row) in self.rows.iter().enumerate() {
            line.clear();
            if r > 0 {
                line.push(',');
            }
            line.push_str("\n{");
            for (i, (col, cell)) in self.columns.iter().zip(row).enumerate() {
                if i > 0 {
                    line.push(',');
                }
                let _ = write!(line, "{}:", json_str(col));
                match cell.text() {
                    None => line.push_str("null"),
                    Some(t) if cell.is_quoted_in_json() => line.push_str(&json_str(&t)),
                    Some(t) => line.push_str(&t),
                }
            }
            line.push('}');
            out.write_all(line.as_bytes())?;
        }
        writeln!(out, "]}}")?;
        out.flush()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialises")
}

/// Per-bin aggregate selected for query output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    Count,
    Min,
    #[default]
    Max,
    Mean,
    Std,
    Last,
    All,
}

impl FromStr for Agg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "count" => Agg::Count,
            "min" => Agg::Min,
            "max" => Agg::Max,
            "mean" => Agg::Mean,
            "std" => Agg::Std,
            "last" => Agg::Last,
            "all" => Agg::All,
            other => return Err(format!("unknown aggregate {other:?}")),
        })
    }
}

impl std::fmt::Display for Agg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Agg::Count => "count",
            Agg::Min => "min",
            Agg::Max => "max",
            Agg::Mean => "mean",
            Agg::Std => "std",
            Agg::Last => "last",
            Agg::All => "all",
        })
    }
}

#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub range: TimeRange,
    pub elements: Option<ElementPredicate>,
    /// Bin width; raw records when `None`.
    pub bin: Option<Span>,
    pub agg: Agg,
    /// Keep only samples inside these intervals (run selection).
    pub keep: Option<IntervalSet>,
    /// Remove samples inside these intervals (masks).
    pub drop: Option<IntervalSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryOutput {
    Records(Vec<EventRecord>),
    Bins(BTreeMap<u32, BinnedSeries>),
}

/// Scan, interval semi-joins, then optional binning. Records come out in
/// `(element_id, ts)` order.
pub fn run_query(snapshot: &Snapshot, spec: &QuerySpec) -> Result<(QueryOutput, ScanStats), StoreError> {
    let mut request = ScanRequest::new(spec.range);
    request.elements = spec.elements.clone();
    let (mut records, stats) = snapshot.scan(request)?.collect_records()?;
    if let Some(keep) = &spec.keep {
        records = interval_semijoin(records, keep, SemijoinMode::Keep);
    }
    if let Some(drop) = &spec.drop {
        records = interval_semijoin(records, drop, SemijoinMode::Drop);
    }
    let out = match spec.bin {
        Some(width) if width.micros() > 0 => QueryOutput::Bins(time_bin(records, width)),
        Some(_) => return Err(StoreError::InvalidRequest("bin width must be positive".into())),
        None => {
            records.sort_by_key(|r| r.key());
            QueryOutput::Records(records)
        }
    };
    Ok((out, stats))
}

pub fn query_table(output: &QueryOutput, agg: Agg) -> Table {
    match output {
        QueryOutput::Records(records) => {
            let mut t = Table::new(&["element_id", "ts", "value", "status"]);
            for r in records {
                t.push(vec![
                    r.element_id.into(),
                    r.ts.into(),
                    r.value.into(),
                    r.status.map_or(Cell::Null, |s| Cell::Int(s.into())),
                ]);
            }
            t
        }
        QueryOutput::Bins(series) => {
            let single = [agg];
            let aggs: &[Agg] = match agg {
                Agg::All => &[Agg::Count, Agg::Min, Agg::Max, Agg::Mean, Agg::Std, Agg::Last],
                _ => &single,
            };
            let names: Vec<String> = aggs.iter().map(|a| a.to_string()).collect();
            let mut cols = vec!["element_id", "bin_start"];
            cols.extend(names.iter().map(String::as_str));
            let mut t = Table::new(&cols);
            for s in series.values() {
                for b in &s.bins {
                    let mut row = vec![s.element_id.into(), b.bin_start.into()];
                    for a in aggs {
                        row.push(match a {
                            Agg::Count => b.count.into(),
                            Agg::Min => b.min.into(),
                            Agg::Max => b.max.into(),
                            Agg::Mean => b.mean.into(),
                            Agg::Std => b.std.into(),
                            Agg::Last | Agg::All => b.last.into(),
                        });
                    }
                    t.push(row);
                }
            }
            t
        }
    }
}

/// One row per flag; evidence columns that do not apply to the rule are
/// empty. Stale intervals are rendered as `start/end` pairs joined by `;`.
pub fn flags_table(flags: &[LinkFlag]) -> Table {
    let mut t = Table::new(&[
        "element_id",
        "rule",
        "window_start",
        "window_end",
        "occurrence_count",
        "max_value",
        "hard_failure",
        "bins_over",
        "max_std",
        "stale_intervals",
    ]);
    for f in flags {
        let mut row = vec![
            f.element_id.into(),
            Cell::Text(f.rule.to_string()),
            f.window.start.into(),
            f.window.end.into(),
        ];
        row.extend(match &f.evidence {
            Evidence::HighRssi {
                occurrence_count,
                max_value,
                hard_failure,
            } => [
                (*occurrence_count).into(),
                (*max_value).into(),
                (*hard_failure).into(),
                Cell::Null,
                Cell::Null,
                Cell::Null,
            ],
            Evidence::Oscillating { bins_over, max_std } => [
                Cell::Null,
                Cell::Null,
                Cell::Null,
                (*bins_over).into(),
                (*max_std).into(),
                Cell::Null,
            ],
            Evidence::Stale { stale_intervals } => {
                let s: Vec<String> = stale_intervals
                    .iter()
                    .map(|(a, b)| format!("{}/{}", a.to_iso(), b.to_iso()))
                    .collect();
                [Cell::Null, Cell::Null, Cell::Null, Cell::Null, Cell::Null, Cell::Text(s.join(";"))]
            }
        });
        t.push(row);
    }
    t
}

pub fn daily_counts_table(counts: &DailyCounts) -> Table {
    let mut t = Table::new(&["day", "above", "below", "channels"]);
    for (day, c) in counts {
        t.push(vec![
            Cell::Text(day.to_string()),
            c.above.into(),
            c.below.into(),
            c.channels().into(),
        ]);
    }
    t
}

/// Long form: one row per (wheel, layer, sector) cell, zeros included.
pub fn grid_table(grids: &[Grid]) -> Table {
    let mut t = Table::new(&["wheel", "layer", "sector", "count"]);
    for g in grids {
        for layer in 1..=LAYERS {
            for sector in 1..=SECTORS {
                t.push(vec![
                    u32::from(g.wheel).into(),
                    u32::from(layer).into(),
                    u32::from(sector).into(),
                    g.get(layer, sector).into(),
                ]);
            }
        }
    }
    t
}
