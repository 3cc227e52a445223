//! Link and high-voltage health analyses over query outputs.
//!
//! * [`flag_high_rssi`]: links whose binned RSSI maximum exceeds a threshold
//!   in more than a minimum number of bins.
//! * [`flag_oscillating`]: links whose per-bin spread exceeds a threshold.
//! * [`detect_stale`]: links that stopped updating, outside masked periods.
//! * [`hv_nominal_counts`]: per-day channel counts above/below nominal voltage.
//! * [`geometry_grid`]: flagged-link counts on the layer × sector grid.

mod mapping;
pub mod pipeline;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::query::{Bin, BinnedSeries, GapIndex, IntervalSet};
use crate::storage::{EventRecord, StoreError};
use crate::time::{Span, TimeRange, Timestamp};

pub use mapping::{ElementInfo, ElementKind, ElementMapping, LAYERS, SECTORS, WHEELS};

pub const DEFAULT_RSSI_THRESHOLD: f64 = 0.45;
pub const DEFAULT_MIN_OCCURRENCES: u64 = 3;
/// RSSI level corresponding to total loss of optical signal.
pub const RSSI_NO_SIGNAL: f64 = 0.5;
pub const DEFAULT_STD_THRESHOLD: f64 = 0.05;
pub const DEFAULT_MIN_BINS: u64 = 3;
pub const DEFAULT_STALENESS: Span = Span::from_hours(24);
pub const HV_NOMINAL_VOLTS: f64 = 505.0;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("elements are not rssi links: {ids:?}")]
    NotRssi { ids: Vec<u32> },
    #[error("elements missing from the mapping: {ids:?}")]
    Unmapped { ids: Vec<u32> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("element {element_id}: {reason}")]
    InvalidMapping { element_id: u32, reason: String },
    #[error("{path}:{line}: {reason}")]
    MappingFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    HighRssi,
    Oscillating,
    Stale,
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::HighRssi => "high_rssi",
            Rule::Oscillating => "oscillating",
            Rule::Stale => "stale",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Evidence {
    HighRssi {
        /// Bins (or samples) above the threshold.
        occurrence_count: u64,
        max_value: f64,
        /// Set when the signal reached the no-signal level.
        hard_failure: bool,
    },
    Oscillating {
        bins_over: u64,
        max_std: f64,
    },
    Stale {
        stale_intervals: Vec<(Timestamp, Timestamp)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFlag {
    pub element_id: u32,
    pub rule: Rule,
    pub evidence: Evidence,
    pub window: TimeRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counting {
    /// One occurrence per bin whose maximum exceeds the threshold.
    #[default]
    Bins,
    /// One occurrence per raw sample above the threshold.
    Samples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighRssiParams {
    pub threshold: f64,
    pub min_occurrences: u64,
    pub counting: Counting,
}

impl Default for HighRssiParams {
    fn default() -> Self {
        HighRssiParams {
            threshold: DEFAULT_RSSI_THRESHOLD,
            min_occurrences: DEFAULT_MIN_OCCURRENCES,
            counting: Counting::Bins,
        }
    }
}

impl HighRssiParams {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.threshold > 0.0 && self.threshold <= RSSI_NO_SIGNAL) {
            return Err(AnalysisError::InvalidParameter(format!(
                "rssi threshold {} outside (0, {RSSI_NO_SIGNAL}]",
                self.threshold
            )));
        }
        if self.min_occurrences < 1 {
            return Err(AnalysisError::InvalidParameter("min_occurrences must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillationParams {
    pub std_threshold: f64,
    pub min_bins: u64,
    /// Pool all bins of the window into one spread instead of testing each bin.
    pub whole_window: bool,
}

impl Default for OscillationParams {
    fn default() -> Self {
        OscillationParams {
            std_threshold: DEFAULT_STD_THRESHOLD,
            min_bins: DEFAULT_MIN_BINS,
            whole_window: false,
        }
    }
}

impl OscillationParams {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.std_threshold > 0.0 && self.std_threshold.is_finite()) {
            return Err(AnalysisError::InvalidParameter(format!(
                "std threshold {} must be positive",
                self.std_threshold
            )));
        }
        if self.min_bins < 1 {
            return Err(AnalysisError::InvalidParameter("min_bins must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_rssi<'a>(
    ids: impl IntoIterator<Item = &'a u32>,
    mapping: Option<&ElementMapping>,
) -> Result<(), AnalysisError> {
    if let Some(m) = mapping {
        let bad = m.not_of_kind(ids.into_iter().copied(), ElementKind::Rssi);
        if !bad.is_empty() {
            return Err(AnalysisError::NotRssi { ids: bad });
        }
    }
    Ok(())
}

fn series_window(s: &BinnedSeries) -> TimeRange {
    let first = s.bins.first().map_or(Timestamp(0), |b| b.bin_start);
    let last = s.bins.last().map_or(Timestamp(0), |b| b.bin_start);
    TimeRange {
        start: first,
        end: last.saturating_add(s.bin_width.micros()),
    }
}

/// Flags an element when the number of bins whose maximum exceeds
/// `threshold` is strictly greater than `min_occurrences`. When a mapping is
/// given every element must be mapped as an rssi link.
pub fn flag_high_rssi(
    binned: &BTreeMap<u32, BinnedSeries>,
    params: &HighRssiParams,
    mapping: Option<&ElementMapping>,
) -> Result<Vec<LinkFlag>, AnalysisError> {
    params.validate()?;
    check_rssi(binned.keys(), mapping)?;
    Ok(binned
        .values()
        .filter(|s| !s.bins.is_empty())
        .filter_map(|s| {
            let over = s.bins.iter().filter(|b| b.max > params.threshold).count() as u64;
            let max_value = s.bins.iter().map(|b| b.max).fold(f64::NEG_INFINITY, f64::max);
            (over > params.min_occurrences).then(|| LinkFlag {
                element_id: s.element_id,
                rule: Rule::HighRssi,
                evidence: Evidence::HighRssi {
                    occurrence_count: over,
                    max_value,
                    hard_failure: max_value >= RSSI_NO_SIGNAL,
                },
                window: series_window(s),
            })
        })
        .collect())
}

/// Raw-sample variant of [`flag_high_rssi`]: every sample above the threshold
/// counts as one occurrence.
pub fn flag_high_rssi_samples(
    records: impl IntoIterator<Item = EventRecord>,
    params: &HighRssiParams,
    window: TimeRange,
    mapping: Option<&ElementMapping>,
) -> Result<Vec<LinkFlag>, AnalysisError> {
    params.validate()?;
    let mut per: BTreeMap<u32, (u64, f64)> = BTreeMap::new();
    for r in records {
        let e = per.entry(r.element_id).or_insert((0, f64::NEG_INFINITY));
        if r.value > params.threshold {
            e.0 += 1;
        }
        e.1 = e.1.max(r.value);
    }
    check_rssi(per.keys(), mapping)?;
    Ok(per
        .into_iter()
        .filter(|(_, (n, _))| *n > params.min_occurrences)
        .map(|(id, (n, max_value))| LinkFlag {
            element_id: id,
            rule: Rule::HighRssi,
            evidence: Evidence::HighRssi {
                occurrence_count: n,
                max_value,
                hard_failure: max_value >= RSSI_NO_SIGNAL,
            },
            window,
        })
        .collect())
}

/// Population spread of the union of `bins`.
fn pooled_std(bins: &[Bin]) -> f64 {
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for b in bins.iter().filter(|b| b.count > 0) {
        let nb = b.count as f64;
        let total = n + nb;
        let delta = b.mean - mean;
        mean += delta * nb / total;
        m2 += b.std * b.std * nb + delta * delta * n * nb / total;
        n = total;
    }
    if n > 0.0 {
        (m2 / n).max(0.0).sqrt()
    } else {
        0.0
    }
}

/// Flags an element when at least `min_bins` bins have a spread above
/// `std_threshold` (or, with `whole_window`, when the pooled spread of the
/// window exceeds it).
pub fn flag_oscillating(
    binned: &BTreeMap<u32, BinnedSeries>,
    params: &OscillationParams,
    mapping: Option<&ElementMapping>,
) -> Result<Vec<LinkFlag>, AnalysisError> {
    params.validate()?;
    check_rssi(binned.keys(), mapping)?;
    Ok(binned
        .values()
        .filter(|s| !s.bins.is_empty())
        .filter_map(|s| {
            let (bins_over, max_std, hit) = if params.whole_window {
                let std = pooled_std(&s.bins);
                (u64::from(std > params.std_threshold), std, std > params.std_threshold)
            } else {
                let over = s.bins.iter().filter(|b| b.std > params.std_threshold).count() as u64;
                let max_std = s.bins.iter().map(|b| b.std).fold(0.0, f64::max);
                (over, max_std, over >= params.min_bins)
            };
            hit.then(|| LinkFlag {
                element_id: s.element_id,
                rule: Rule::Oscillating,
                evidence: Evidence::Oscillating { bins_over, max_std },
                window: series_window(s),
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaleParams {
    pub staleness: Span,
}

impl Default for StaleParams {
    fn default() -> Self {
        StaleParams {
            staleness: DEFAULT_STALENESS,
        }
    }
}

/// Silent periods longer than `staleness` within `range`, after removing
/// masked time.
///
/// Silences are taken between consecutive records, from `range.start` to the
/// first record, and from the last record (per `last_update`) to `range.end`.
/// Elements listed in `expected` but absent from both inputs are silent over
/// the whole range. The index must have been built with a minimum gap no
/// larger than `staleness`.
pub fn detect_stale(
    last_update: &BTreeMap<u32, Timestamp>,
    index: &GapIndex,
    range: TimeRange,
    expected: &[u32],
    params: &StaleParams,
    masks: &IntervalSet,
) -> Result<Vec<LinkFlag>, AnalysisError> {
    let staleness = params.staleness.micros();
    if staleness <= 0 {
        return Err(AnalysisError::InvalidParameter("staleness must be positive".into()));
    }
    if index.min_gap.micros() > staleness {
        return Err(AnalysisError::InvalidParameter(format!(
            "gap index built with min gap {} above staleness {}",
            index.min_gap, params.staleness
        )));
    }
    let ids: BTreeSet<u32> = last_update
        .keys()
        .chain(index.elements.keys())
        .chain(expected.iter())
        .copied()
        .collect();
    let mut flags = Vec::new();
    for id in ids {
        let activity = index.elements.get(&id);
        let last = last_update.get(&id).copied().or(activity.map(|a| a.last_ts));
        let mut silences: Vec<(Timestamp, Timestamp)> = Vec::new();
        match (activity.map(|a| a.first_ts), last) {
            (Some(first), Some(last)) => {
                silences.push((range.start, first));
                silences.extend(activity.into_iter().flat_map(|a| a.gaps.iter().copied()));
                silences.push((last, range.end));
            }
            (None, Some(last)) => silences.push((last, range.end)),
            _ => silences.push((range.start, range.end)),
        }
        let mut stale = Vec::new();
        for (s, e) in silences {
            let (s, e) = (s.max(range.start), e.min(range.end));
            if s >= e {
                continue;
            }
            stale.extend(
                masks
                    .subtract_from(s, e)
                    .into_iter()
                    .filter(|(a, b)| b.0 - a.0 > staleness),
            );
        }
        if !stale.is_empty() {
            stale.sort_unstable();
            flags.push(LinkFlag {
                element_id: id,
                rule: Rule::Stale,
                evidence: Evidence::Stale {
                    stale_intervals: stale,
                },
                window: range,
            });
        }
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DayCount {
    pub above: u32,
    pub below: u32,
}

impl DayCount {
    pub fn channels(&self) -> u32 {
        self.above + self.below
    }
}

pub type DailyCounts = BTreeMap<NaiveDate, DayCount>;

/// Per day, channels whose daily maximum is at or above `nominal` versus
/// below it. Days that do not intersect `run_intervals` are omitted.
pub fn hv_nominal_counts(
    daily_max: &BTreeMap<(u32, NaiveDate), f64>,
    nominal: f64,
    run_intervals: &IntervalSet,
) -> DailyCounts {
    let mut out = DailyCounts::new();
    let mut run_day: BTreeMap<NaiveDate, bool> = BTreeMap::new();
    for (&(_, day), &v) in daily_max {
        let in_run = *run_day.entry(day).or_insert_with(|| {
            let start = Timestamp::start_of_day(day);
            run_intervals.overlaps(start, start.saturating_add(crate::time::MICROS_PER_DAY))
        });
        if !in_run {
            continue;
        }
        let c = out.entry(day).or_default();
        if v >= nominal {
            c.above += 1;
        } else {
            c.below += 1;
        }
    }
    out
}

/// Flagged-element counts of one wheel, indexed `[layer - 1][sector - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub wheel: u8,
    pub cells: Vec<Vec<u32>>,
}

impl Grid {
    pub fn zero(wheel: u8) -> Self {
        Grid {
            wheel,
            cells: vec![vec![0; SECTORS as usize]; LAYERS as usize],
        }
    }

    pub fn get(&self, layer: u8, sector: u8) -> u32 {
        self.cells[layer as usize - 1][sector as usize - 1]
    }

    pub fn total(&self) -> u32 {
        self.cells.iter().flatten().sum()
    }
}

/// Places each distinct flagged element of `wheel` on the layer × sector
/// grid. Every flagged element must be mapped.
pub fn geometry_grid(
    flags: &[LinkFlag],
    mapping: &ElementMapping,
    wheel: u8,
) -> Result<Grid, AnalysisError> {
    if !(1..=WHEELS).contains(&wheel) {
        return Err(AnalysisError::InvalidParameter(format!("wheel {wheel} outside 1..={WHEELS}")));
    }
    let ids: BTreeSet<u32> = flags.iter().map(|f| f.element_id).collect();
    let unmapped: Vec<u32> = ids.iter().copied().filter(|id| mapping.get(*id).is_none()).collect();
    if !unmapped.is_empty() {
        return Err(AnalysisError::Unmapped { ids: unmapped });
    }
    let mut grid = Grid::zero(wheel);
    for id in ids {
        let info = mapping.get(id).expect("checked above");
        if info.wheel == wheel {
            grid.cells[info.layer as usize - 1][info.sector as usize - 1] += 1;
        }
    }
    Ok(grid)
}
