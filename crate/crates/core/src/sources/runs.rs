//! Data-taking periods.
//!
//! Run file format: `run_number <TAB> start_iso <TAB> end_iso <TAB> kind`,
//! kind one of `physics`, `special`, `other`. `#` lines are comments.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::sql::{check_identifier, value_to_ts, SqlConnection, SqlValue};
use super::SourceError;
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Physics,
    Special,
    Other,
}

impl FromStr for RunKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "physics" => Ok(RunKind::Physics),
            "special" => Ok(RunKind::Special),
            "other" => Ok(RunKind::Other),
            other => Err(format!("unknown run kind {other:?}")),
        }
    }
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunKind::Physics => "physics",
            RunKind::Special => "special",
            RunKind::Other => "other",
        })
    }
}

/// `[start_ts, end_ts)` of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInterval {
    pub run_number: u64,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub run_kind: RunKind,
}

/// Anything that can list raw run intervals.
pub trait RunProvider {
    fn raw_intervals(&mut self) -> Result<Vec<RunInterval>, SourceError>;
}

impl RunProvider for Vec<RunInterval> {
    fn raw_intervals(&mut self) -> Result<Vec<RunInterval>, SourceError> {
        Ok(self.clone())
    }
}

pub struct RunFile {
    path: PathBuf,
}

impl RunFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunFile { path: path.into() }
    }
}

impl RunProvider for RunFile {
    fn raw_intervals(&mut self) -> Result<Vec<RunInterval>, SourceError> {
        read_run_file(&self.path)
    }
}

pub fn read_run_file(path: &Path) -> Result<Vec<RunInterval>, SourceError> {
    let file = File::open(path).map_err(|e| SourceError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SourceError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| SourceError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", f.len())));
        }
        out.push(RunInterval {
            run_number: f[0]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad run_number: {e}")))?,
            start_ts: Timestamp::parse_iso(f[1].trim()).map_err(|e| parse_err(e.to_string()))?,
            end_ts: Timestamp::parse_iso(f[2].trim()).map_err(|e| parse_err(e.to_string()))?,
            run_kind: f[3].parse().map_err(parse_err)?,
        });
    }
    Ok(out)
}

pub fn write_run_file<W: Write>(mut out: W, runs: &[RunInterval]) -> std::io::Result<()> {
    for r in runs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.run_number,
            r.start_ts.to_iso(),
            r.end_ts.to_iso(),
            r.run_kind
        )?;
    }
    out.flush()
}

/// Runs from a SQL table `(run_number, start_ts, end_ts, run_kind)`.
pub struct SqlRunSource {
    conn: Box<dyn SqlConnection>,
    table: String,
}

impl SqlRunSource {
    pub fn new(conn: Box<dyn SqlConnection>, table: &str) -> Result<Self, SourceError> {
        check_identifier(table)?;
        Ok(SqlRunSource {
            conn,
            table: table.to_string(),
        })
    }
}

impl RunProvider for SqlRunSource {
    fn raw_intervals(&mut self) -> Result<Vec<RunInterval>, SourceError> {
        let sql = format!(
            "SELECT run_number, start_ts, end_ts, run_kind FROM {} ORDER BY start_ts",
            self.table
        );
        let rows = self.conn.query(&sql, &[])?;
        rows.iter()
            .enumerate()
            .map(|(i, r)| {
                let bad = |reason: String| SourceError::Sql(format!("run row {i}: {reason}"));
                let [num, start, end, kind] = r.as_slice() else {
                    return Err(bad("expected 4 columns".into()));
                };
                let run_number = match num {
                    SqlValue::Integer(n) if *n >= 0 => *n as u64,
                    other => return Err(bad(format!("bad run_number {other:?}"))),
                };
                let run_kind = match kind {
                    SqlValue::Text(s) => s.parse().map_err(bad)?,
                    other => return Err(bad(format!("bad run_kind {other:?}"))),
                };
                Ok(RunInterval {
                    run_number,
                    start_ts: value_to_ts(start).map_err(bad)?,
                    end_ts: value_to_ts(end).map_err(bad)?,
                    run_kind,
                })
            })
            .collect()
    }
}

/// Validated run list: sorted by start, overlapping runs of the same kind
/// merged (the merged run keeps the first run number).
pub fn fetch_run_intervals(provider: &mut dyn RunProvider) -> Result<Vec<RunInterval>, SourceError> {
    let mut raw = provider.raw_intervals()?;
    for r in &raw {
        if r.start_ts >= r.end_ts {
            return Err(SourceError::InvalidInterval {
                run_number: r.run_number,
                reason: format!("start {} is not before end {}", r.start_ts, r.end_ts),
            });
        }
    }
    raw.sort_by_key(|r| (r.run_kind, r.start_ts, r.run_number));
    let mut merged: Vec<RunInterval> = Vec::with_capacity(raw.len());
    for r in raw {
        match merged.last_mut() {
            Some(last) if last.run_kind == r.run_kind && r.start_ts < last.end_ts => {
                last.end_ts = last.end_ts.max(r.end_ts);
            }
            _ => merged.push(r),
        }
    }
    merged.sort_by_key(|r| (r.start_ts, r.run_kind, r.run_number));
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(n: u64, s: i64, e: i64, kind: RunKind) -> RunInterval {
        RunInterval {
            run_number: n,
            start_ts: Timestamp(s * 1_000_000),
            end_ts: Timestamp(e * 1_000_000),
            run_kind: kind,
        }
    }

    #[test]
    fn disjoint_runs_come_back_sorted() {
        let mut p = vec![run(2, 50, 60, RunKind::Physics), run(1, 10, 20, RunKind::Physics)];
        let got = fetch_run_intervals(&mut p).unwrap();
        assert_eq!(got, vec![run(1, 10, 20, RunKind::Physics), run(2, 50, 60, RunKind::Physics)]);
    }

    #[test]
    fn overlapping_runs_merge() {
        let mut p = vec![run(1, 10, 30, RunKind::Physics), run(2, 20, 40, RunKind::Physics)];
        assert_eq!(fetch_run_intervals(&mut p).unwrap(), vec![run(1, 10, 40, RunKind::Physics)]);
    }

    #[test]
    fn kinds_are_not_merged_together() {
        let mut p = vec![run(1, 10, 30, RunKind::Physics), run(2, 20, 40, RunKind::Special)];
        assert_eq!(fetch_run_intervals(&mut p).unwrap().len(), 2);
    }

    #[test]
    fn empty_or_reversed_interval_rejected() {
        let mut p = vec![run(7, 10, 10, RunKind::Physics)];
        assert!(matches!(
            fetch_run_intervals(&mut p),
            Err(SourceError::InvalidInterval { run_number: 7, .. })
        ));
    }

    #[test]
    fn run_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.tsv");
        let runs = vec![run(1, 0, 3600, RunKind::Physics), run(2, 7200, 9000, RunKind::Special)];
        write_run_file(File::create(&path).unwrap(), &runs).unwrap();
        assert_eq!(read_run_file(&path).unwrap(), runs);
        let got = fetch_run_intervals(&mut RunFile::new(&path)).unwrap();
        assert_eq!(got, runs);
    }

    proptest! {
        #[test]
        fn coverage_matches_timeline_oracle(
            raw in prop::collection::vec((0i64..500, 1i64..60, 0u8..2), 0..25)
        ) {
            let mut p: Vec<RunInterval> = raw
                .iter()
                .enumerate()
                .map(|(i, &(s, len, k))| {
                    let kind = if k == 0 { RunKind::Physics } else { RunKind::Special };
                    run(i as u64, s, s + len, kind)
                })
                .collect();
            // Boolean timeline per kind at 1 s resolution.
            let mut expect = [[false; 600]; 2];
            for r in &p {
                let k = (r.run_kind == RunKind::Special) as usize;
                for t in r.start_ts.0 / 1_000_000..r.end_ts.0 / 1_000_000 {
                    expect[k][t as usize] = true;
                }
            }
            let merged = fetch_run_intervals(&mut p).unwrap();
            let mut got = [[false; 600]; 2];
            for r in &merged {
                let k = (r.run_kind == RunKind::Special) as usize;
                for t in r.start_ts.0 / 1_000_000..r.end_ts.0 / 1_000_000 {
                    prop_assert!(!got[k][t as usize], "overlap after merge");
                    got[k][t as usize] = true;
                }
            }
            prop_assert_eq!(got, expect);
            prop_assert!(merged.windows(2).all(|w| w[0].start_ts <= w[1].start_ts));
        }
    }
}
