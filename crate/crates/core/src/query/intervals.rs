use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bin, BinnedSeries};
use crate::sources::{RunInterval, RunKind, SourceError};
use crate::storage::EventRecord;
use crate::time::Timestamp;

/// Sorted, disjoint, half-open `[start, end)` intervals.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IntervalSet {
    pub label: String,
    intervals: Vec<(Timestamp, Timestamp)>,
}

impl IntervalSet {
    /// Normalizes `raw`: drops empty intervals, sorts, and merges overlapping
    /// or touching ones.
    pub fn new(label: impl Into<String>, raw: impl IntoIterator<Item = (Timestamp, Timestamp)>) -> Self {
        let mut v: Vec<(Timestamp, Timestamp)> = raw.into_iter().filter(|(s, e)| s < e).collect();
        v.sort_unstable();
        let mut out: Vec<(Timestamp, Timestamp)> = Vec::with_capacity(v.len());
        for (s, e) in v {
            match out.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => out.push((s, e)),
            }
        }
        IntervalSet {
            label: label.into(),
            intervals: out,
        }
    }

    pub fn empty(label: impl Into<String>) -> Self {
        IntervalSet::new(label, [])
    }

    /// Union of the runs whose kind is in `kinds` (all runs when empty).
    pub fn from_runs(label: impl Into<String>, runs: &[RunInterval], kinds: &[RunKind]) -> Self {
        IntervalSet::new(
            label,
            runs.iter()
                .filter(|r| kinds.is_empty() || kinds.contains(&r.run_kind))
                .map(|r| (r.start_ts, r.end_ts)),
        )
    }

    pub fn intervals(&self) -> &[(Timestamp, Timestamp)] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        let i = self.intervals.partition_point(|(s, _)| *s <= ts);
        i > 0 && ts < self.intervals[i - 1].1
    }

    /// Whether any interval intersects `[start, end)`.
    pub fn overlaps(&self, start: Timestamp, end: Timestamp) -> bool {
        let i = self.intervals.partition_point(|(_, e)| *e <= start);
        self.intervals.get(i).is_some_and(|(s, _)| *s < end)
    }

    /// Pieces of `[start, end)` not covered by the set.
    pub fn subtract_from(&self, start: Timestamp, end: Timestamp) -> Vec<(Timestamp, Timestamp)> {
        let mut out = Vec::new();
        let mut cursor = start;
        let first = self.intervals.partition_point(|(_, e)| *e <= start);
        for &(s, e) in &self.intervals[first..] {
            if s >= end {
                break;
            }
            if s > cursor {
                out.push((cursor, s));
            }
            cursor = cursor.max(e);
            if cursor >= end {
                break;
            }
        }
        if cursor < end {
            out.push((cursor, end));
        }
        out
    }

    pub fn union(&self, other: &IntervalSet) -> IntervalSet {
        IntervalSet::new(
            self.label.clone(),
            self.intervals.iter().chain(other.intervals.iter()).copied(),
        )
    }

    /// Total covered microseconds.
    pub fn covered(&self) -> i64 {
        self.intervals.iter().map(|(s, e)| e.0 - s.0).sum()
    }

    /// One `start <TAB> end` line per interval, ISO timestamps.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (s, e) in &self.intervals {
            writeln!(out, "{}\t{}", s.to_iso(), e.to_iso())?;
        }
        out.flush()
    }

    /// Reads the format of [`IntervalSet::write_tsv`]; blank and `#` lines
    /// are skipped.
    pub fn read_tsv(path: &Path, label: impl Into<String>) -> Result<Self, SourceError> {
        let text = std::fs::read_to_string(path).map_err(|e| SourceError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut raw = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| SourceError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| err("expected start and end separated by a tab".into()))?;
            let s = Timestamp::parse_iso(a.trim()).map_err(|e| err(e.to_string()))?;
            let e = Timestamp::parse_iso(b.trim()).map_err(|e| err(e.to_string()))?;
            if s >= e {
                return Err(err(format!("interval start {s} is not before end {e}")));
            }
            raw.push((s, e));
        }
        Ok(IntervalSet::new(label, raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemijoinMode {
    Keep,
    Drop,
}

/// Items with a reference instant for interval membership.
pub trait Timestamped {
    fn timestamp(&self) -> Timestamp;
}

impl Timestamped for EventRecord {
    fn timestamp(&self) -> Timestamp {
        self.ts
    }
}

impl Timestamped for Bin {
    fn timestamp(&self) -> Timestamp {
        self.bin_start
    }
}

/// `Keep` retains items whose timestamp lies in some interval; `Drop` is the
/// exact complement. Input order is preserved.
pub fn interval_semijoin<T: Timestamped + Clone>(
    items: impl IntoIterator<Item = T>,
    intervals: &IntervalSet,
    mode: SemijoinMode,
) -> Vec<T> {
    let keep = mode == SemijoinMode::Keep;
    items
        .into_iter()
        .filter(|it| intervals.contains(it.timestamp()) == keep)
        .collect()
}

/// Semi-join on bins (by `bin_start`); series left without bins are removed.
pub fn semijoin_series(
    series: &BTreeMap<u32, BinnedSeries>,
    intervals: &IntervalSet,
    mode: SemijoinMode,
) -> BTreeMap<u32, BinnedSeries> {
    series
        .iter()
        .filter_map(|(id, s)| {
            let bins = interval_semijoin(s.bins.iter().copied(), intervals, mode);
            (!bins.is_empty()).then(|| {
                (
                    *id,
                    BinnedSeries {
                        element_id: s.element_id,
                        bin_width: s.bin_width,
                        bins,
                    },
                )
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(x: i64) -> Timestamp {
        Timestamp(x)
    }

    #[test]
    fn normalization_merges_touching_and_overlapping() {
        let s = IntervalSet::new("x", [(t(5), t(10)), (t(0), t(5)), (t(20), t(30)), (t(25), t(26)), (t(40), t(40))]);
        assert_eq!(s.intervals(), &[(t(0), t(10)), (t(20), t(30))]);
    }

    #[test]
    fn half_open_membership() {
        let s = IntervalSet::new("x", [(t(10), t(20))]);
        assert!(!s.contains(t(9)));
        assert!(s.contains(t(10)));
        assert!(s.contains(t(19)));
        assert!(!s.contains(t(20)));
    }

    #[test]
    fn empty_set_keep_and_drop() {
        let recs: Vec<EventRecord> = (0..5).map(|i| EventRecord::new(1, t(i), 0.0)).collect();
        let empty = IntervalSet::empty("none");
        assert!(interval_semijoin(recs.clone(), &empty, SemijoinMode::Keep).is_empty());
        assert_eq!(interval_semijoin(recs.clone(), &empty, SemijoinMode::Drop), recs);
    }

    #[test]
    fn subtraction_and_overlap() {
        let s = IntervalSet::new("m", [(t(10), t(20)), (t(30), t(40))]);
        assert_eq!(s.subtract_from(t(0), t(50)), vec![(t(0), t(10)), (t(20), t(30)), (t(40), t(50))]);
        assert_eq!(s.subtract_from(t(12), t(18)), vec![]);
        assert_eq!(s.subtract_from(t(15), t(35)), vec![(t(20), t(30))]);
        assert!(s.overlaps(t(19), t(25)));
        assert!(!s.overlaps(t(20), t(30)));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.tsv");
        let s = IntervalSet::new("m", [(t(0), t(86_400_000_000)), (t(2 * 86_400_000_000), t(3 * 86_400_000_000))]);
        s.write_tsv(std::fs::File::create(&path).unwrap()).unwrap();
        assert_eq!(IntervalSet::read_tsv(&path, "m").unwrap(), s);
        std::fs::write(&path, "# mask\n2024-01-02\t2024-01-01\n").unwrap();
        assert!(matches!(IntervalSet::read_tsv(&path, "m"), Err(SourceError::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn keep_and_drop_partition_input(
            raw in prop::collection::vec((0i64..1000, 1i64..100), 0..12),
            ts in prop::collection::vec(0i64..1200, 0..200),
        ) {
            let set = IntervalSet::new("p", raw.iter().map(|&(s, l)| (t(s), t(s + l))));
            let recs: Vec<EventRecord> = ts.iter().enumerate().map(|(i, &x)| EventRecord::new(i as u32, t(x), 0.0)).collect();
            let keep = interval_semijoin(recs.clone(), &set, SemijoinMode::Keep);
            let drop = interval_semijoin(recs.clone(), &set, SemijoinMode::Drop);
            prop_assert_eq!(keep.len() + drop.len(), recs.len());
            // Linear-scan membership oracle over the raw, unnormalized intervals.
            for r in &recs {
                let inside = raw.iter().any(|&(s, l)| s <= r.ts.0 && r.ts.0 < s + l);
                prop_assert_eq!(keep.contains(r), inside);
                prop_assert_eq!(drop.contains(r), !inside);
            }
            let mut merged: Vec<_> = keep.iter().chain(drop.iter()).map(|r| r.element_id).collect();
            merged.sort();
            prop_assert_eq!(merged, (0..recs.len() as u32).collect::<Vec<_>>());
        }

        #[test]
        fn subtraction_is_coverage_complement(
            raw in prop::collection::vec((0i64..200, 1i64..30), 0..8),
            a in 0i64..250, len in 1i64..100,
        ) {
            let set = IntervalSet::new("p", raw.iter().map(|&(s, l)| (t(s), t(s + l))));
            let pieces = set.subtract_from(t(a), t(a + len));
            for x in a..a + len {
                let in_piece = pieces.iter().any(|(s, e)| s.0 <= x && x < e.0);
                prop_assert_eq!(in_piece, !set.contains(t(x)));
            }
        }
    }
}
