//! Query primitives over scans: time binning, daily extremes, interval
//! semi-joins and per-element activity indexes.
//!
//! Bins are anchored at the Unix epoch in UTC, so daily bins coincide with
//! partition days. All spreads are population standard deviations.

mod index;
mod intervals;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::storage::{EventRecord, ScanRequest, ScanStats, Snapshot, StoreError};
use crate::time::{Span, Timestamp};

pub use index::{gap_index_scan, last_update_index, ElementActivity, GapIndex};
pub use intervals::{interval_semijoin, semijoin_series, IntervalSet, SemijoinMode, Timestamped};

/// Aggregates of one bin. `last` is the value with the greatest timestamp
/// (the later arrival on ties).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub bin_start: Timestamp,
    pub count: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedSeries {
    pub element_id: u32,
    pub bin_width: Span,
    pub bins: Vec<Bin>,
}

/// Streaming accumulator: Welford updates within a run, Chan's pairwise
/// formula when combining partial results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinAccumulator {
    count: u64,
    min: f64,
    max: f64,
    mean: f64,
    m2: f64,
    last_ts: Timestamp,
    last: f64,
}

impl Default for BinAccumulator {
    fn default() -> Self {
        BinAccumulator {
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
            m2: 0.0,
            last_ts: Timestamp::MIN,
            last: f64::NAN,
        }
    }
}

impl BinAccumulator {
    pub fn push(&mut self, ts: Timestamp, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        if ts >= self.last_ts {
            self.last_ts = ts;
            self.last = v;
        }
    }

    pub fn merge(&mut self, other: &BinAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        if other.last_ts >= self.last_ts {
            self.last_ts = other.last_ts;
            self.last = other.last;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(&self, bin_start: Timestamp) -> Bin {
        let var = (self.m2 / self.count as f64).max(0.0);
        Bin {
            bin_start,
            count: self.count,
            min: self.min,
            max: self.max,
            // Rounding can push the running mean an ulp outside [min, max].
            mean: self.mean.clamp(self.min, self.max),
            std: var.sqrt(),
            last: self.last,
        }
    }
}

type BinKey = (u32, Timestamp);

fn assemble(acc: BTreeMap<BinKey, BinAccumulator>, width: Span) -> BTreeMap<u32, BinnedSeries> {
    let mut out: BTreeMap<u32, BinnedSeries> = BTreeMap::new();
    for ((id, start), a) in acc {
        out.entry(id)
            .or_insert_with(|| BinnedSeries {
                element_id: id,
                bin_width: width,
                bins: Vec::new(),
            })
            .bins
            .push(a.finish(start));
    }
    out
}

/// Groups records into `bin_width` cells per element. Empty bins are omitted.
///
/// Panics if `bin_width` is not positive.
pub fn time_bin(
    records: impl IntoIterator<Item = EventRecord>,
    bin_width: Span,
) -> BTreeMap<u32, BinnedSeries> {
    assert!(bin_width.micros() > 0, "bin width must be positive");
    let w = bin_width.micros();
    let mut acc: BTreeMap<BinKey, BinAccumulator> = BTreeMap::new();
    for r in records {
        acc.entry((r.element_id, r.ts.floor_to(w)))
            .or_default()
            .push(r.ts, r.value);
    }
    assemble(acc, bin_width)
}

/// Binning fused with the scan: each partition is binned in parallel and the
/// partial bins are merged in day order.
pub fn time_bin_scan(
    snapshot: &Snapshot,
    request: ScanRequest,
    bin_width: Span,
) -> Result<(BTreeMap<u32, BinnedSeries>, ScanStats), StoreError> {
    assert!(bin_width.micros() > 0, "bin width must be positive");
    let w = bin_width.micros();
    let scan = snapshot.scan(request)?;
    let (partials, stats) = scan.par_map(|_, batch| {
        let values = batch.value.as_deref();
        let mut runs: Vec<(BinKey, BinAccumulator)> = Vec::new();
        for i in 0..batch.len() {
            let ts = Timestamp(batch.ts[i]);
            let key = (batch.element_id[i], ts.floor_to(w));
            let v = values.map_or(f64::NAN, |v| v[i]);
            match runs.last_mut() {
                Some((k, a)) if *k == key => a.push(ts, v),
                _ => {
                    let mut a = BinAccumulator::default();
                    a.push(ts, v);
                    runs.push((key, a));
                }
            }
        }
        runs
    })?;
    let mut acc: BTreeMap<BinKey, BinAccumulator> = BTreeMap::new();
    for runs in partials {
        for (k, a) in runs {
            acc.entry(k).or_default().merge(&a);
        }
    }
    Ok((assemble(acc, bin_width), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extreme {
    Max,
    Min,
}

/// Per-element, per-UTC-day maximum or minimum.
pub fn daily_extreme(
    records: impl IntoIterator<Item = EventRecord>,
    kind: Extreme,
) -> BTreeMap<(u32, NaiveDate), f64> {
    let mut out: BTreeMap<(u32, NaiveDate), f64> = BTreeMap::new();
    for r in records {
        out.entry((r.element_id, r.ts.day()))
            .and_modify(|v| {
                *v = match kind {
                    Extreme::Max => v.max(r.value),
                    Extreme::Min => v.min(r.value),
                }
            })
            .or_insert(r.value);
    }
    out
}
