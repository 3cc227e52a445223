use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::analyses::RSSI_NO_SIGNAL;
use crate::time::{Span, TimeRange, Timestamp, MICROS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    StuckHigh,
    Oscillating,
    DisabledInterval,
    HvOffInterval,
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FaultKind::StuckHigh => "stuck_high",
            FaultKind::Oscillating => "oscillating",
            FaultKind::DisabledInterval => "disabled_interval",
            FaultKind::HvOffInterval => "hv_off_interval",
        })
    }
}

/// Shape parameters of a fault; unused fields are ignored for a given kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultParams {
    /// Stuck-high values are drawn from `(stuck_low, stuck_high]`.
    pub stuck_low: f64,
    pub stuck_high: f64,
    /// Oscillating links alternate between these two levels.
    pub osc_low: f64,
    pub osc_high: f64,
    /// Baseline drop applied when a disabled link comes back.
    pub recovery_drop: f64,
}

impl Default for FaultParams {
    fn default() -> Self {
        FaultParams {
            stuck_low: 0.46,
            stuck_high: 0.49,
            osc_low: 0.10,
            osc_high: 0.40,
            recovery_drop: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub element: u32,
    pub kind: FaultKind,
    pub start: Timestamp,
    pub end: Timestamp,
    #[serde(default)]
    pub params: FaultParams,
}

impl FaultSpec {
    pub fn window(&self) -> TimeRange {
        TimeRange {
            start: self.start,
            end: self.end,
        }
    }
}

/// Number of randomly placed faults of each kind. Windows are whole days;
/// stuck-high windows last at least five days, oscillating at least three,
/// disabled windows at least two, so every injection is detectable at the
/// default analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomFaults {
    pub stuck_high: u32,
    pub oscillating: u32,
    /// Links with one to three disable/re-enable cycles.
    pub disabled: u32,
    /// Days on which every HV channel is off during a special run.
    pub hv_off_days: u32,
}

impl Default for RandomFaults {
    fn default() -> Self {
        RandomFaults {
            stuck_high: 6,
            oscillating: 6,
            disabled: 6,
            hv_off_days: 3,
        }
    }
}

impl RandomFaults {
    pub fn none() -> Self {
        RandomFaults {
            stuck_high: 0,
            oscillating: 0,
            disabled: 0,
            hv_off_days: 0,
        }
    }
}

/// Shortest generated run; every channel reports at least once per run.
pub const MIN_RUN: Span = Span::from_hours(8);
pub const MAX_RUN: Span = Span::from_hours(14);

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

/// Generator configuration; every field has a default, so an empty TOML file
/// is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub start: NaiveDate,
    pub days: u32,
    pub rssi_elements: u32,
    pub hv_sectors: u32,
    pub hv_channels_per_sector: u32,
    /// First HV element id; RSSI links use ids `0..rssi_elements`.
    pub hv_id_base: u32,
    pub cadence: Span,
    /// Per-sample delay drawn from `[0, jitter)`.
    pub jitter: Span,
    /// Archive-on-change thresholds; a value is written when it moves by
    /// more than this, or when `heartbeat` has passed since the last write.
    pub rssi_deadband: f64,
    pub hv_deadband: f64,
    pub heartbeat: Span,
    pub rssi_baseline_min: f64,
    pub rssi_baseline_max: f64,
    pub rssi_noise: f64,
    pub hv_nominal: f64,
    pub hv_noise: f64,
    /// Trailing days with no data and no runs.
    pub shutdown_days: u32,
    /// Probability that a day outside the shutdown has a physics run.
    pub run_probability: f64,
    pub random_faults: RandomFaults,
    pub faults: Vec<FaultSpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            start: date(2024, 1, 1),
            days: 366,
            rssi_elements: 512,
            hv_sectors: 1,
            hv_channels_per_sector: 64,
            hv_id_base: 100_000,
            cadence: Span::from_secs(1200),
            jitter: Span::from_secs(60),
            rssi_deadband: 0.002,
            hv_deadband: 0.05,
            heartbeat: Span::from_hours(4),
            rssi_baseline_min: 0.15,
            rssi_baseline_max: 0.30,
            rssi_noise: 0.01,
            hv_nominal: 505.0,
            hv_noise: 0.5,
            shutdown_days: 14,
            run_probability: 0.9,
            random_faults: RandomFaults::default(),
            faults: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl GenConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|reason| GenError::Parse {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn span(&self) -> TimeRange {
        let start = Timestamp::start_of_day(self.start);
        TimeRange {
            start,
            end: Timestamp(start.0 + self.days as i64 * MICROS_PER_DAY),
        }
    }

    /// Days with data and runs, before the shutdown.
    pub fn active(&self) -> TimeRange {
        let span = self.span();
        TimeRange {
            start: span.start,
            end: Timestamp(span.end.0 - self.shutdown_days as i64 * MICROS_PER_DAY),
        }
    }

    pub fn active_days(&self) -> u32 {
        self.days - self.shutdown_days
    }

    pub fn hv_elements(&self) -> u32 {
        self.hv_sectors * self.hv_channels_per_sector
    }

    pub fn is_rssi(&self, id: u32) -> bool {
        id < self.rssi_elements
    }

    pub fn is_hv(&self, id: u32) -> bool {
        id >= self.hv_id_base && id - self.hv_id_base < self.hv_elements()
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Invalid(m));
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if self.shutdown_days >= self.days {
            return bad(format!("shutdown_days {} must be below days {}", self.shutdown_days, self.days));
        }
        if self.cadence.micros() <= 0 {
            return bad("cadence must be positive".into());
        }
        if self.jitter.micros() < 0 || 2 * self.jitter.micros() >= self.cadence.micros() {
            return bad("jitter must be non-negative and below half the cadence".into());
        }
        if self.heartbeat.micros() <= 0
            || self.heartbeat.micros() + self.cadence.micros() + self.jitter.micros() >= MIN_RUN.micros()
        {
            return bad(format!("heartbeat plus cadence must stay below the shortest run ({MIN_RUN})"));
        }
        if !(self.rssi_deadband >= 0.0 && self.hv_deadband >= 0.0) {
            return bad("deadbands must be non-negative".into());
        }
        if !(0.0 < self.rssi_baseline_min
            && self.rssi_baseline_min <= self.rssi_baseline_max
            && self.rssi_baseline_max + 4.0 * self.rssi_noise < 0.45)
        {
            return bad("rssi baseline plus noise must stay inside (0, 0.45)".into());
        }
        if !(self.rssi_noise >= 0.0 && self.rssi_noise < 0.0125) {
            return bad("rssi_noise must be in [0, 0.0125)".into());
        }
        if !(self.hv_nominal > 0.0 && self.hv_noise >= 0.0) {
            return bad("hv_nominal must be positive and hv_noise non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.run_probability) {
            return bad("run_probability must be in [0, 1]".into());
        }
        if self.hv_elements() > 0 && self.hv_id_base < self.rssi_elements {
            return bad("hv_id_base overlaps the rssi id range".into());
        }
        if self.hv_id_base.checked_add(self.hv_elements()).is_none() {
            return bad("hv ids overflow".into());
        }
        self.validate_faults(&self.faults)
    }

    pub(crate) fn validate_faults(&self, faults: &[FaultSpec]) -> Result<(), GenError> {
        let active = self.active();
        // Keep one clean day at each end so silences are bracketed by data.
        let lo = active.start.0 + MICROS_PER_DAY;
        let hi = active.end.0 - MICROS_PER_DAY;
        let mut per: std::collections::BTreeMap<u32, Vec<&FaultSpec>> = Default::default();
        for f in faults {
            let name = format!("{} fault on element {}", f.kind, f.element);
            if f.start >= f.end {
                return Err(GenError::Invalid(format!("{name}: empty window")));
            }
            if f.start.0 < lo || f.end.0 > hi {
                return Err(GenError::Invalid(format!(
                    "{name}: window must lie within {} .. {}",
                    Timestamp(lo),
                    Timestamp(hi)
                )));
            }
            if f.start.0.rem_euclid(MICROS_PER_DAY) != 0 || f.end.0.rem_euclid(MICROS_PER_DAY) != 0 {
                return Err(GenError::Invalid(format!("{name}: window must start and end at midnight")));
            }
            let want_hv = f.kind == FaultKind::HvOffInterval;
            let ok = if want_hv { self.is_hv(f.element) } else { self.is_rssi(f.element) };
            if !ok {
                return Err(GenError::Invalid(format!(
                    "{name}: element does not exist or has the wrong kind"
                )));
            }
            let p = &f.params;
            match f.kind {
                FaultKind::StuckHigh
                    if !(0.45 <= p.stuck_low && p.stuck_low < p.stuck_high && p.stuck_high <= RSSI_NO_SIGNAL) =>
                {
                    return Err(GenError::Invalid(format!("{name}: stuck range must lie in [0.45, 0.5]")));
                }
                FaultKind::Oscillating if !(0.0 < p.osc_low && p.osc_low < p.osc_high && p.osc_high < 0.45) => {
                    return Err(GenError::Invalid(format!("{name}: oscillation levels must lie in (0, 0.45)")));
                }
                FaultKind::DisabledInterval if !(0.0..0.1).contains(&p.recovery_drop) => {
                    return Err(GenError::Invalid(format!("{name}: recovery_drop must be in [0, 0.1)")));
                }
                _ => {}
            }
            per.entry(f.element).or_default().push(f);
        }
        for (id, mut fs) in per {
            if fs.iter().any(|f| f.kind != fs[0].kind) {
                return Err(GenError::Invalid(format!("element {id} has faults of different kinds")));
            }
            fs.sort_by_key(|f| f.start);
            if fs.windows(2).any(|w| w[1].start < w[0].end) {
                return Err(GenError::Invalid(format!("element {id} has overlapping fault windows")));
            }
            if fs[0].kind == FaultKind::DisabledInterval {
                if fs.windows(2).any(|w| w[1].start.0 - w[0].end.0 < MICROS_PER_DAY) {
                    return Err(GenError::Invalid(format!(
                        "element {id}: re-enabled periods must last at least one day"
                    )));
                }
                let drop: f64 = fs.iter().map(|f| f.params.recovery_drop).sum();
                if self.rssi_baseline_min - drop - 4.0 * self.rssi_noise <= 0.0 {
                    return Err(GenError::Invalid(format!("element {id}: recovery drops push rssi below zero")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_default() {
        assert_eq!(GenConfig::from_toml("").unwrap(), GenConfig::default());
        GenConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_with_faults() {
        let mut c = GenConfig::default();
        c.faults.push(FaultSpec {
            element: 3,
            kind: FaultKind::StuckHigh,
            start: Timestamp::from_ymd_hms(2024, 3, 1, 0, 0, 0),
            end: Timestamp::from_ymd_hms(2024, 3, 9, 0, 0, 0),
            params: FaultParams::default(),
        });
        let back = GenConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = GenConfig::default();
        let cases: Vec<Box<dyn Fn(&mut GenConfig)>> = vec![
            Box::new(|c| c.days = 0),
            Box::new(|c| c.jitter = Span::from_secs(600)),
            Box::new(|c| c.heartbeat = Span::from_hours(8)),
            Box::new(|c| c.rssi_baseline_max = 0.44),
            Box::new(|c| c.hv_id_base = 10),
            Box::new(|c| c.run_probability = 1.5),
            Box::new(|c| {
                c.faults.push(FaultSpec {
                    element: 9999,
                    kind: FaultKind::StuckHigh,
                    start: Timestamp::from_ymd_hms(2024, 3, 1, 0, 0, 0),
                    end: Timestamp::from_ymd_hms(2024, 3, 9, 0, 0, 0),
                    params: FaultParams::default(),
                })
            }),
            Box::new(|c| {
                c.faults.push(FaultSpec {
                    element: 1,
                    kind: FaultKind::DisabledInterval,
                    start: Timestamp::from_ymd_hms(2024, 3, 1, 6, 0, 0),
                    end: Timestamp::from_ymd_hms(2024, 3, 9, 0, 0, 0),
                    params: FaultParams::default(),
                })
            }),
            Box::new(|c| {
                c.faults.push(FaultSpec {
                    element: 1,
                    kind: FaultKind::Oscillating,
                    start: Timestamp::from_ymd_hms(2024, 12, 28, 0, 0, 0),
                    end: Timestamp::from_ymd_hms(2024, 12, 30, 0, 0, 0),
                    params: FaultParams::default(),
                })
            }),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut c = base.clone();
            mutate(&mut c);
            assert!(c.validate().is_err(), "case {i} accepted");
        }
    }
}
