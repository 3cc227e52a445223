use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::storage::{
    ElementPredicate, EventRecord, Field, ScanRequest, ScanStats, Snapshot, StoreError,
};
use crate::time::{Span, TimeRange, Timestamp};

/// Latest timestamp per element within `range`. Partitions are visited
/// newest first and, when an element filter is given, the walk stops as soon
/// as every requested element has been seen.
pub fn last_update_index(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<&ElementPredicate>,
) -> Result<(BTreeMap<u32, Timestamp>, ScanStats), StoreError> {
    let mut out: BTreeMap<u32, Timestamp> = BTreeMap::new();
    let mut stats = ScanStats {
        partitions_total: snapshot.manifest().partitions.len() as u64,
        ..ScanStats::default()
    };
    let days: Vec<_> = snapshot
        .prune(&range, None, elements)
        .iter()
        .map(|p| p.day)
        .collect();
    for day in days.into_iter().rev() {
        if let Some(e) = elements {
            if out.len() == e.len() {
                break;
            }
        }
        let day_range = TimeRange {
            start: range.start.max(Timestamp::start_of_day(day)),
            end: range
                .end
                .min(Timestamp::start_of_day(day.succ_opt().expect("date in range"))),
        };
        let mut request =
            ScanRequest::new(day_range).fields(vec![Field::ElementId, Field::Ts]);
        request.elements = elements.cloned();
        let mut scan = snapshot.scan(request)?;
        for batch in scan.by_ref() {
            let (_, batch) = batch?;
            for i in 0..batch.len() {
                let ts = Timestamp(batch.ts[i]);
                out.entry(batch.element_id[i])
                    .and_modify(|t| *t = (*t).max(ts))
                    .or_insert(ts);
            }
        }
        stats.merge(&scan.stats());
    }
    Ok((out, stats))
}

/// Record timeline summary of one element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementActivity {
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    /// `(previous record, next record)` pairs further apart than the index's
    /// minimum gap.
    pub gaps: Vec<(Timestamp, Timestamp)>,
}

/// Per-element record gaps longer than `min_gap`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapIndex {
    pub min_gap: Span,
    pub elements: BTreeMap<u32, ElementActivity>,
}

impl GapIndex {
    pub fn build(records: impl IntoIterator<Item = EventRecord>, min_gap: Span) -> GapIndex {
        let mut per: BTreeMap<u32, Vec<Timestamp>> = BTreeMap::new();
        for r in records {
            per.entry(r.element_id).or_default().push(r.ts);
        }
        let elements = per
            .into_iter()
            .map(|(id, mut ts)| {
                ts.sort_unstable();
                (id, activity_of_sorted(&ts, min_gap))
            })
            .collect();
        GapIndex { min_gap, elements }
    }

    pub fn last_update(&self) -> BTreeMap<u32, Timestamp> {
        self.elements
            .iter()
            .map(|(id, a)| (*id, a.last_ts))
            .collect()
    }
}

fn activity_of_sorted(ts: &[Timestamp], min_gap: Span) -> ElementActivity {
    let gaps = ts
        .windows(2)
        .filter(|w| w[1].0 - w[0].0 > min_gap.micros())
        .map(|w| (w[0], w[1]))
        .collect();
    ElementActivity {
        first_ts: ts[0],
        last_ts: ts[ts.len() - 1],
        gaps,
    }
}

/// Builds a [`GapIndex`] from a scan, one partition per task, stitching gaps
/// across partition boundaries in day order.
pub fn gap_index_scan(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<&ElementPredicate>,
    min_gap: Span,
) -> Result<(GapIndex, ScanStats), StoreError> {
    let mut request = ScanRequest::new(range).fields(vec![Field::ElementId, Field::Ts]);
    request.elements = elements.cloned();
    let scan = snapshot.scan(request)?;
    let (per_day, stats) = scan.par_map(|_, batch| {
        // Rows are sorted by (element_id, ts) within a partition.
        let mut out: Vec<(u32, ElementActivity)> = Vec::new();
        let mut start = 0;
        while start < batch.len() {
            let id = batch.element_id[start];
            let mut end = start;
            while end < batch.len() && batch.element_id[end] == id {
                end += 1;
            }
            let ts: Vec<Timestamp> = batch.ts[start..end].iter().map(|&t| Timestamp(t)).collect();
            out.push((id, activity_of_sorted(&ts, min_gap)));
            start = end;
        }
        out
    })?;
    let mut merged: BTreeMap<u32, ElementActivity> = BTreeMap::new();
    for day in per_day {
        for (id, act) in day {
            match merged.get_mut(&id) {
                None => {
                    merged.insert(id, act);
                }
                Some(prev) => {
                    if act.first_ts.0 - prev.last_ts.0 > min_gap.micros() {
                        prev.gaps.push((prev.last_ts, act.first_ts));
                    }
                    prev.gaps.extend(act.gaps);
                    prev.last_ts = act.last_ts;
                }
            }
        }
    }
    Ok((
        GapIndex {
            min_gap,
            elements: merged,
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaps_above_threshold_only() {
        let h = 3_600_000_000;
        let recs = [0, 1, 2, 30, 31].map(|k| EventRecord::new(9, Timestamp(k * h), 0.1));
        let idx = GapIndex::build(recs, Span::from_hours(24));
        let a = &idx.elements[&9];
        assert_eq!(a.gaps, vec![(Timestamp(2 * h), Timestamp(30 * h))]);
        assert_eq!(a.first_ts, Timestamp(0));
        assert_eq!(a.last_ts, Timestamp(31 * h));
        assert_eq!(idx.last_update()[&9], Timestamp(31 * h));
    }
}
