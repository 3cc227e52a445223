//! Store-backed drivers: scan, bin, and run the analyses in one call.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    detect_stale, flag_high_rssi, flag_high_rssi_samples, flag_oscillating, geometry_grid,
    hv_nominal_counts, AnalysisError, Counting, DailyCounts, ElementKind, ElementMapping, Grid,
    HighRssiParams, LinkFlag, OscillationParams, StaleParams, WHEELS,
};
use crate::query::{gap_index_scan, time_bin_scan, BinnedSeries, IntervalSet};
use crate::storage::{ElementPredicate, Field, ScanRequest, ScanStats, Snapshot, ValuePredicate};
use crate::time::{Span, TimeRange, Timestamp};

/// Elements to analyse: the explicit list if given, otherwise every element
/// the mapping declares with `kind`.
pub fn scope(
    elements: Option<&ElementPredicate>,
    mapping: Option<&ElementMapping>,
    kind: ElementKind,
) -> Option<ElementPredicate> {
    match (elements, mapping) {
        (Some(e), _) => Some(e.clone()),
        (None, Some(m)) => Some(ElementPredicate::new(m.ids_of_kind(kind))),
        (None, None) => None,
    }
}

/// Clips `range` to the span of data present in the snapshot.
pub fn observed_range(snapshot: &Snapshot, range: TimeRange) -> Option<TimeRange> {
    let parts = snapshot.prune(&range, None, None);
    let lo = parts.iter().filter_map(|p| p.min_ts).min()?;
    let hi = parts.iter().filter_map(|p| p.max_ts).max()?;
    TimeRange::new(range.start.max(lo), range.end.min(hi.saturating_add(1)))
}

pub fn bin_values(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<ElementPredicate>,
    bin_width: Span,
) -> Result<(BTreeMap<u32, BinnedSeries>, ScanStats), AnalysisError> {
    if bin_width.micros() <= 0 {
        return Err(AnalysisError::InvalidParameter("bin width must be positive".into()));
    }
    let mut request = ScanRequest::new(range).fields(vec![Field::ElementId, Field::Ts, Field::Value]);
    request.elements = elements;
    Ok(time_bin_scan(snapshot, request, bin_width)?)
}

pub fn failed_links(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<&ElementPredicate>,
    mapping: Option<&ElementMapping>,
    params: &HighRssiParams,
    bin_width: Span,
) -> Result<(Vec<LinkFlag>, ScanStats), AnalysisError> {
    params.validate()?;
    let elements = scope(elements, mapping, ElementKind::Rssi);
    match params.counting {
        Counting::Bins => {
            let (binned, stats) = bin_values(snapshot, range, elements, bin_width)?;
            Ok((flag_high_rssi(&binned, params, mapping)?, stats))
        }
        Counting::Samples => {
            let mut request = ScanRequest::new(range)
                .fields(vec![Field::ElementId, Field::Ts, Field::Value])
                .value(ValuePredicate::Gt(params.threshold));
            request.elements = elements;
            let (records, stats) = snapshot.scan(request)?.collect_records()?;
            Ok((flag_high_rssi_samples(records, params, range, mapping)?, stats))
        }
    }
}

pub fn oscillating_links(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<&ElementPredicate>,
    mapping: Option<&ElementMapping>,
    params: &OscillationParams,
    bin_width: Span,
) -> Result<(Vec<LinkFlag>, ScanStats), AnalysisError> {
    params.validate()?;
    let elements = scope(elements, mapping, ElementKind::Rssi);
    let (binned, stats) = bin_values(snapshot, range, elements, bin_width)?;
    Ok((flag_oscillating(&binned, params, mapping)?, stats))
}

/// Stale detection over the part of `range` covered by stored data, so that
/// the newest data in the store, not the wall clock, is the reference point.
pub fn stale_links(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<&ElementPredicate>,
    mapping: Option<&ElementMapping>,
    params: &StaleParams,
    masks: &IntervalSet,
) -> Result<(Vec<LinkFlag>, ScanStats), AnalysisError> {
    let elements = scope(elements, mapping, ElementKind::Rssi);
    let Some(range) = observed_range(snapshot, range) else {
        return Ok((Vec::new(), ScanStats::default()));
    };
    let (index, stats) = gap_index_scan(snapshot, range, elements.as_ref(), params.staleness)?;
    let expected = elements.as_ref().map_or(&[][..], |e| e.ids());
    let flags = detect_stale(&index.last_update(), &index, range, expected, params, masks)?;
    Ok((flags, stats))
}

/// Per-channel daily maximum restricted to samples inside `runs`.
pub fn hv_daily_max(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<ElementPredicate>,
    runs: &IntervalSet,
) -> Result<(BTreeMap<(u32, NaiveDate), f64>, ScanStats), AnalysisError> {
    let mut request = ScanRequest::new(range).fields(vec![Field::ElementId, Field::Ts, Field::Value]);
    request.elements = elements;
    let scan = snapshot.scan(request)?;
    let (per_day, stats) = scan.par_map(|day, batch| {
        let values = batch.value.as_deref().expect("value projected");
        let mut out: Vec<(u32, f64)> = Vec::new();
        for i in 0..batch.len() {
            if !runs.contains(Timestamp(batch.ts[i])) {
                continue;
            }
            let id = batch.element_id[i];
            match out.last_mut() {
                Some((last, v)) if *last == id => *v = v.max(values[i]),
                _ => out.push((id, values[i])),
            }
        }
        (day, out)
    })?;
    let mut daily = BTreeMap::new();
    for (day, rows) in per_day {
        for (id, v) in rows {
            daily.insert((id, day), v);
        }
    }
    Ok((daily, stats))
}

pub fn hv_nominal(
    snapshot: &Snapshot,
    range: TimeRange,
    elements: Option<&ElementPredicate>,
    mapping: Option<&ElementMapping>,
    nominal: f64,
    runs: &IntervalSet,
) -> Result<(DailyCounts, ScanStats), AnalysisError> {
    if !nominal.is_finite() {
        return Err(AnalysisError::InvalidParameter(format!("nominal voltage {nominal}")));
    }
    let elements = scope(elements, mapping, ElementKind::HvVoltage);
    if let (Some(m), Some(e)) = (mapping, elements.as_ref()) {
        let bad = m.not_of_kind(e.ids().iter().copied(), ElementKind::HvVoltage);
        if !bad.is_empty() {
            return Err(AnalysisError::InvalidParameter(format!(
                "elements are not hv_voltage channels: {bad:?}"
            )));
        }
    }
    let (daily, stats) = hv_daily_max(snapshot, range, elements, runs)?;
    Ok((hv_nominal_counts(&daily, nominal, runs), stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub bin_width: Span,
    pub high_rssi: HighRssiParams,
    pub oscillation: OscillationParams,
    pub stale: StaleParams,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            bin_width: Span::from_days(1),
            high_rssi: HighRssiParams::default(),
            oscillation: OscillationParams::default(),
            stale: StaleParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub high_rssi: Vec<LinkFlag>,
    pub oscillating: Vec<LinkFlag>,
    pub stale: Vec<LinkFlag>,
    /// One grid per wheel over all flagged links.
    pub grids: Vec<Grid>,
    pub bin_stats: ScanStats,
    pub stale_stats: ScanStats,
    pub bin_seconds: f64,
    pub total_seconds: f64,
}

/// Full link reduction: one binned scan feeds the high-RSSI and oscillation
/// rules, a keys-only scan feeds staleness, and all flags are placed on the
/// geometry grids.
pub fn link_report(
    snapshot: &Snapshot,
    range: TimeRange,
    mapping: &ElementMapping,
    params: &LinkParams,
    masks: &IntervalSet,
) -> Result<LinkReport, AnalysisError> {
    let started = Instant::now();
    params.high_rssi.validate()?;
    params.oscillation.validate()?;
    let elements = scope(None, Some(mapping), ElementKind::Rssi);
    let (binned, bin_stats) = bin_values(snapshot, range, elements.clone(), params.bin_width)?;
    let bin_seconds = started.elapsed().as_secs_f64();
    let high_rssi = match params.high_rssi.counting {
        Counting::Bins => flag_high_rssi(&binned, &params.high_rssi, Some(mapping))?,
        Counting::Samples => {
            failed_links(snapshot, range, elements.as_ref(), Some(mapping), &params.high_rssi, params.bin_width)?.0
        }
    };
    let oscillating = flag_oscillating(&binned, &params.oscillation, Some(mapping))?;
    let (stale, stale_stats) =
        stale_links(snapshot, range, elements.as_ref(), Some(mapping), &params.stale, masks)?;
    let all: Vec<LinkFlag> = high_rssi
        .iter()
        .chain(&oscillating)
        .chain(&stale)
        .cloned()
        .collect();
    let grids = (1..=WHEELS)
        .map(|w| geometry_grid(&all, mapping, w))
        .collect::<Result<_, _>>()?;
    Ok(LinkReport {
        high_rssi,
        oscillating,
        stale,
        grids,
        bin_stats,
        stale_stats,
        bin_seconds,
        total_seconds: started.elapsed().as_secs_f64(),
    })
}
