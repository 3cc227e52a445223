//! Seeded synthetic telemetry with injected link and HV faults.
//!
//! Every element is sampled on a jittered cadence and archived on change:
//! a sample is written when it differs from the last written value by more
//! than the deadband, when the heartbeat has elapsed, or when the element
//! changes state (fault start or end). Each element draws from its own
//! ChaCha stream, so output is a pure function of the configuration.
//!
//! Links (`0..rssi_elements`) sit at a per-link baseline with small bounded
//! noise; HV channels sit at or just above nominal. Faults:
//!
//! * `stuck_high`: values in `(stuck_low, stuck_high]`, above the 0.45 V cut.
//! * `oscillating`: values alternate between two levels every sample.
//! * `disabled_interval`: nothing is written; the first sample after the
//!   window is always written and the baseline may drop on recovery.
//! * `hv_off_interval`: the channel reads about 0 V; runs on those days are
//!   labelled special.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analyses::{
    DayCount, ElementInfo, ElementKind, ElementMapping, Rule, DEFAULT_MIN_BINS,
    DEFAULT_MIN_OCCURRENCES, LAYERS, SECTORS, WHEELS,
};
use crate::ingest::{ScheduleConfig, SyncMode, TableSpec};
use crate::query::IntervalSet;
use crate::sources::{format_fixture_line, write_run_file, RunInterval, RunKind};
use crate::storage::EventRecord;
use crate::time::{Span, TimeRange, Timestamp, MICROS_PER_DAY, MICROS_PER_SECOND};

pub use config::{
    FaultKind, FaultParams, FaultSpec, GenConfig, GenError, RandomFaults, MAX_RUN, MIN_RUN,
};

pub const FIRST_RUN_NUMBER: u64 = 450_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub element_id: u32,
    pub kind: FaultKind,
    pub window: TimeRange,
    /// Rule that should flag this injection at default analysis parameters.
    pub expected_flag: Option<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub span: TimeRange,
    pub shutdown: Option<TimeRange>,
    pub entries: Vec<TruthEntry>,
    /// Expected HV counts per run day.
    pub hv_daily: BTreeMap<NaiveDate, DayCount>,
}

impl GroundTruth {
    pub fn expected_ids(&self, rule: Rule) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.expected_flag == Some(rule))
            .map(|e| e.element_id)
            .collect()
    }

    /// Injected windows of `kind` per element, sorted.
    pub fn windows(&self, kind: FaultKind) -> BTreeMap<u32, Vec<TimeRange>> {
        let mut out: BTreeMap<u32, Vec<TimeRange>> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.kind == kind) {
            out.entry(e.element_id).or_default().push(e.window);
        }
        for v in out.values_mut() {
            v.sort_by_key(|w| w.start);
        }
        out
    }
}

fn expected_flag(kind: FaultKind, window: TimeRange) -> Option<Rule> {
    let days = ((window.end.0 - window.start.0) / MICROS_PER_DAY) as u64;
    match kind {
        FaultKind::StuckHigh => (days > DEFAULT_MIN_OCCURRENCES).then_some(Rule::HighRssi),
        FaultKind::Oscillating => (days >= DEFAULT_MIN_BINS).then_some(Rule::Oscillating),
        FaultKind::DisabledInterval => Some(Rule::Stale),
        FaultKind::HvOffInterval => None,
    }
}

/// A validated configuration with its random draws resolved: fault windows,
/// runs, the shutdown mask and ground truth. Records are produced lazily by
/// [`Generator::days`].
#[derive(Debug, Clone)]
pub struct Generator {
    config: GenConfig,
    faults: Vec<FaultSpec>,
    runs: Vec<RunInterval>,
    mask: IntervalSet,
    truth: GroundTruth,
}

impl Generator {
    pub fn new(config: GenConfig) -> Result<Self, GenError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut faults = config.faults.clone();
        faults.extend(place_random_faults(&config, &mut rng)?);
        config.validate_faults(&faults)?;
        // Runs draw from their own stream so that resolving random faults
        // into explicit ones reproduces the same runs.
        let mut run_rng = ChaCha8Rng::seed_from_u64(config.seed);
        run_rng.set_stream(u64::MAX);
        let runs = place_runs(&config, &faults, &mut run_rng);
        let span = config.span();
        let active = config.active();
        let shutdown = (config.shutdown_days > 0).then_some(TimeRange {
            start: active.end,
            end: span.end,
        });
        let mask = IntervalSet::new("shutdown", shutdown.map(|s| (s.start, s.end)));
        let entries = faults
            .iter()
            .map(|f| TruthEntry {
                element_id: f.element,
                kind: f.kind,
                window: f.window(),
                expected_flag: expected_flag(f.kind, f.window()),
            })
            .collect();
        let hv_daily = expected_hv(&config, &faults, &runs);
        let truth = GroundTruth {
            seed: config.seed,
            span,
            shutdown,
            entries,
            hv_daily,
        };
        Ok(Generator {
            config,
            faults,
            runs,
            mask,
            truth,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    /// Configured plus randomly placed faults.
    pub fn faults(&self) -> &[FaultSpec] {
        &self.faults
    }

    pub fn runs(&self) -> &[RunInterval] {
        &self.runs
    }

    pub fn shutdown_mask(&self) -> &IntervalSet {
        &self.mask
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn mapping(&self) -> ElementMapping {
        let c = &self.config;
        let mut m = ElementMapping::new();
        let cells = (WHEELS as u32) * (SECTORS as u32) * (LAYERS as u32);
        for id in 0..c.rssi_elements {
            let cell = id % cells;
            let layer = (cell % LAYERS as u32) as u8 + 1;
            let sector = ((cell / LAYERS as u32) % SECTORS as u32) as u8 + 1;
            let wheel = (cell / (LAYERS as u32 * SECTORS as u32)) as u8 + 1;
            let info = ElementInfo {
                detector: "MMG".into(),
                wheel,
                sector,
                layer,
                board: format!("L{layer}B{}", id / cells),
                kind: ElementKind::Rssi,
            };
            m.insert(id, info).expect("generated geometry is valid");
        }
        for i in 0..c.hv_elements() {
            let sector_idx = i / c.hv_channels_per_sector;
            let ch = i % c.hv_channels_per_sector;
            let info = ElementInfo {
                detector: "MMG".into(),
                wheel: (sector_idx / SECTORS as u32 % WHEELS as u32) as u8 + 1,
                sector: (sector_idx % SECTORS as u32) as u8 + 1,
                layer: (ch * LAYERS as u32 / c.hv_channels_per_sector.max(1)) as u8 + 1,
                board: format!("HV{ch}"),
                kind: ElementKind::HvVoltage,
            };
            m.insert(c.hv_id_base + i, info).expect("generated geometry is valid");
        }
        m
    }

    pub fn element_ids(&self) -> impl Iterator<Item = u32> + '_ {
        let c = &self.config;
        (0..c.rssi_elements).chain(c.hv_id_base..c.hv_id_base + c.hv_elements())
    }

    /// Records one UTC day at a time, each day sorted by `(ts, element_id)`.
    /// Shutdown days yield empty batches.
    pub fn days(&self) -> DayStream<'_> {
        let span = self.config.span();
        let mut by_element: BTreeMap<u32, Vec<FaultSpec>> = BTreeMap::new();
        for f in &self.faults {
            by_element.entry(f.element).or_default().push(f.clone());
        }
        let channels = self
            .element_ids()
            .map(|id| {
                let mut faults = by_element.remove(&id).unwrap_or_default();
                faults.sort_by_key(|f| f.start);
                Channel::new(&self.config, id, faults, span.start)
            })
            .collect();
        DayStream {
            generator: self,
            channels,
            day: 0,
        }
    }

    /// All records in timestamp order.
    pub fn records(&self) -> impl Iterator<Item = EventRecord> + '_ {
        self.days().flat_map(|(_, rows)| rows)
    }

    /// Writes the fixture, ground truth, runs, mask, mapping, the effective
    /// generator config and a sync config pointing at `out/store`.
    pub fn write_outputs(&self, out: &Path) -> Result<GenOutputs, GenError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| GenError::Io { path: path.clone(), source: e }
        };
        std::fs::create_dir_all(out).map_err(io(out))?;
        let out = out.canonicalize().map_err(io(out))?;
        let paths = GenOutputs::in_dir(&out);

        let mut rows = 0u64;
        {
            use std::io::Write;
            let mut w = BufWriter::new(File::create(&paths.events).map_err(io(&paths.events))?);
            writeln!(w, "# element_id\tts\tvalue\tstatus").map_err(io(&paths.events))?;
            for (_, day) in self.days() {
                for r in &day {
                    writeln!(w, "{}", format_fixture_line(r)).map_err(io(&paths.events))?;
                }
                rows += day.len() as u64;
            }
            w.flush().map_err(io(&paths.events))?;
        }
        let truth = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        std::fs::write(&paths.truth, truth + "\n").map_err(io(&paths.truth))?;
        write_run_file(File::create(&paths.runs).map_err(io(&paths.runs))?, &self.runs)
            .map_err(io(&paths.runs))?;
        self.mask
            .write_tsv(File::create(&paths.mask).map_err(io(&paths.mask))?)
            .map_err(io(&paths.mask))?;
        self.mapping()
            .write(File::create(&paths.mapping).map_err(io(&paths.mapping))?)
            .map_err(io(&paths.mapping))?;
        let mut effective = self.config.clone();
        effective.faults = self.faults.clone();
        effective.random_faults = RandomFaults::none();
        std::fs::write(&paths.config, effective.to_toml()).map_err(io(&paths.config))?;
        let sync = ScheduleConfig {
            store: out.join("store"),
            cadence: Span::from_hours(24),
            overlap: Span::from_hours(1),
            tables: vec![TableSpec {
                name: "eventhistory".into(),
                mode: SyncMode::Incremental,
                source: format!("fixture:{}", paths.events.display()),
                overlap: None,
            }],
        };
        std::fs::write(&paths.sync, sync.to_toml()).map_err(io(&paths.sync))?;
        Ok(GenOutputs { rows, ..paths })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenOutputs {
    pub events: PathBuf,
    pub truth: PathBuf,
    pub runs: PathBuf,
    pub mask: PathBuf,
    pub mapping: PathBuf,
    pub config: PathBuf,
    pub sync: PathBuf,
    pub rows: u64,
}

impl GenOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        GenOutputs {
            events: dir.join("events.tsv"),
            truth: dir.join("truth.json"),
            runs: dir.join("runs.tsv"),
            mask: dir.join("mask.tsv"),
            mapping: dir.join("mapping.tsv"),
            config: dir.join("gen.toml"),
            sync: dir.join("sync.toml"),
            rows: 0,
        }
    }
}

fn day_ts(config: &GenConfig, day: u32) -> Timestamp {
    Timestamp(config.span().start.0 + day as i64 * MICROS_PER_DAY)
}

fn fault(element: u32, kind: FaultKind, start: Timestamp, end: Timestamp, params: FaultParams) -> FaultSpec {
    FaultSpec {
        element,
        kind,
        start,
        end,
        params,
    }
}

fn place_random_faults(config: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Vec<FaultSpec>, GenError> {
    let rf = config.random_faults;
    let taken: BTreeSet<u32> = config.faults.iter().map(|f| f.element).collect();
    let mut free: Vec<u32> = (0..config.rssi_elements).filter(|id| !taken.contains(id)).collect();
    free.shuffle(rng);
    let wanted = (rf.stuck_high + rf.oscillating + rf.disabled) as usize;
    if wanted > free.len() {
        return Err(GenError::Invalid(format!(
            "{wanted} random link faults requested but only {} links are free",
            free.len()
        )));
    }
    // Usable whole days: [1, active_days - 1).
    let last = config.active_days().saturating_sub(1);
    let mut out = Vec::new();
    let window = |rng: &mut ChaCha8Rng, min_len: u32, max_len: u32| -> Result<(u32, u32), GenError> {
        if last < 1 + min_len {
            return Err(GenError::Invalid(format!(
                "span too short for a {min_len}-day random fault"
            )));
        }
        let len = rng.random_range(min_len..=max_len.min(last - 1));
        let start = rng.random_range(1..=last - len);
        Ok((start, start + len))
    };
    let mut links = free.into_iter();
    for _ in 0..rf.stuck_high {
        let (s, e) = window(rng, 5, 20)?;
        let id = links.next().expect("counted above");
        out.push(fault(id, FaultKind::StuckHigh, day_ts(config, s), day_ts(config, e), FaultParams::default()));
    }
    for _ in 0..rf.oscillating {
        let (s, e) = window(rng, 3, 15)?;
        let id = links.next().expect("counted above");
        out.push(fault(id, FaultKind::Oscillating, day_ts(config, s), day_ts(config, e), FaultParams::default()));
    }
    for _ in 0..rf.disabled {
        let id = links.next().expect("counted above");
        let cycles = rng.random_range(1..=3u32);
        let (mut s, mut e) = window(rng, 2, 20)?;
        for c in 0..cycles {
            let params = FaultParams {
                recovery_drop: rng.random_range(0.0..0.03),
                ..FaultParams::default()
            };
            out.push(fault(id, FaultKind::DisabledInterval, day_ts(config, s), day_ts(config, e), params));
            if c + 1 == cycles {
                break;
            }
            let gap = rng.random_range(2..=10u32);
            let len = rng.random_range(2..=10u32);
            if e + gap + len > last {
                break;
            }
            s = e + gap;
            e = s + len;
        }
    }
    if rf.hv_off_days > 0 && config.hv_elements() > 0 {
        if rf.hv_off_days + 2 > config.active_days() {
            return Err(GenError::Invalid("too many hv_off_days for the span".into()));
        }
        let mut days: Vec<u32> = (1..last).collect();
        days.shuffle(rng);
        let mut picked: Vec<u32> = days.into_iter().take(rf.hv_off_days as usize).collect();
        picked.sort_unstable();
        // Adjacent days form one window per channel.
        let mut windows: Vec<(u32, u32)> = Vec::new();
        for d in picked {
            match windows.last_mut() {
                Some(w) if w.1 == d => w.1 = d + 1,
                _ => windows.push((d, d + 1)),
            }
        }
        for (s, e) in windows {
            for i in 0..config.hv_elements() {
                out.push(fault(
                    config.hv_id_base + i,
                    FaultKind::HvOffInterval,
                    day_ts(config, s),
                    day_ts(config, e),
                    FaultParams::default(),
                ));
            }
        }
    }
    Ok(out)
}

fn place_runs(config: &GenConfig, faults: &[FaultSpec], rng: &mut ChaCha8Rng) -> Vec<RunInterval> {
    let hv_off = IntervalSet::new(
        "hv_off",
        faults
            .iter()
            .filter(|f| f.kind == FaultKind::HvOffInterval)
            .map(|f| (f.start, f.end)),
    );
    let mut runs = Vec::new();
    for d in 0..config.active_days() {
        let day = day_ts(config, d);
        let next = day.saturating_add(MICROS_PER_DAY);
        let special = hv_off.overlaps(day, next);
        let draw: f64 = rng.random();
        if !special && draw >= config.run_probability {
            continue;
        }
        let start = day.0 + 8 * 3600 * MICROS_PER_SECOND + rng.random_range(0..2 * 3600) * MICROS_PER_SECOND;
        let len = rng.random_range(MIN_RUN.micros() / MICROS_PER_SECOND..=MAX_RUN.micros() / MICROS_PER_SECOND)
            * MICROS_PER_SECOND;
        runs.push(RunInterval {
            run_number: FIRST_RUN_NUMBER + runs.len() as u64,
            start_ts: Timestamp(start),
            end_ts: Timestamp(start + len),
            run_kind: if special { RunKind::Special } else { RunKind::Physics },
        });
    }
    runs
}

fn expected_hv(config: &GenConfig, faults: &[FaultSpec], runs: &[RunInterval]) -> BTreeMap<NaiveDate, DayCount> {
    let mut out = BTreeMap::new();
    if config.hv_elements() == 0 {
        return out;
    }
    for run in runs {
        let c: &mut DayCount = out.entry(run.start_ts.day()).or_default();
        for i in 0..config.hv_elements() {
            let id = config.hv_id_base + i;
            let off = faults.iter().any(|f| {
                f.element == id
                    && f.kind == FaultKind::HvOffInterval
                    && f.start <= run.start_ts
                    && run.end_ts <= f.end
            });
            if off {
                c.below += 1;
            } else {
                c.above += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Normal,
    Fault(FaultKind),
}

struct Channel {
    id: u32,
    hv: bool,
    rng: ChaCha8Rng,
    baseline: f64,
    next_ts: i64,
    k: i64,
    origin: i64,
    faults: Vec<FaultSpec>,
    fault_idx: usize,
    state: State,
    parity: u64,
    last: Option<(i64, f64)>,
}

impl Channel {
    fn new(config: &GenConfig, id: u32, faults: Vec<FaultSpec>, start: Timestamp) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id as u64 + 1);
        let baseline = rng.random_range(config.rssi_baseline_min..=config.rssi_baseline_max);
        let origin = start.0 + rng.random_range(0..config.cadence.micros());
        let mut ch = Channel {
            id,
            hv: config.is_hv(id),
            rng,
            baseline,
            next_ts: 0,
            k: 0,
            origin,
            faults,
            fault_idx: 0,
            state: State::Normal,
            parity: 0,
            last: None,
        };
        ch.advance(config);
        ch
    }

    fn advance(&mut self, config: &GenConfig) {
        let jitter = if config.jitter.micros() > 0 {
            self.rng.random_range(0..config.jitter.micros())
        } else {
            0
        };
        self.next_ts = self.origin + self.k * config.cadence.micros() + jitter;
        self.k += 1;
    }

    fn active_fault(&mut self, ts: i64) -> Option<&FaultSpec> {
        while self.faults.get(self.fault_idx).is_some_and(|f| f.end.0 <= ts) {
            self.fault_idx += 1;
        }
        self.faults.get(self.fault_idx).filter(|f| f.start.0 <= ts)
    }

    /// Emits this channel's records with `ts < until`.
    fn run_until(&mut self, config: &GenConfig, until: i64, out: &mut Vec<EventRecord>) {
        while self.next_ts < until {
            let ts = self.next_ts;
            self.advance(config);
            let fault = self.active_fault(ts).cloned();
            let state = fault.as_ref().map_or(State::Normal, |f| State::Fault(f.kind));
            let mut force = state != self.state;
            if force {
                if let State::Fault(FaultKind::DisabledInterval) = self.state {
                    let drop = self.faults[..self.fault_idx]
                        .last()
                        .map_or(0.0, |f| f.params.recovery_drop);
                    self.baseline -= drop;
                }
                self.state = state;
            }
            let noise: f64 = self.rng.sample(StandardNormal);
            let u: f64 = self.rng.random();
            let (value, deadband) = match (&fault, self.hv) {
                (Some(f), _) if f.kind == FaultKind::DisabledInterval => continue,
                (Some(f), _) if f.kind == FaultKind::StuckHigh => {
                    let p = f.params;
                    (p.stuck_high - u * (p.stuck_high - p.stuck_low), config.rssi_deadband)
                }
                (Some(f), _) if f.kind == FaultKind::Oscillating => {
                    self.parity += 1;
                    force = true;
                    let p = f.params;
                    (if self.parity % 2 == 1 { p.osc_low } else { p.osc_high }, config.rssi_deadband)
                }
                (Some(f), _) if f.kind == FaultKind::HvOffInterval => (noise.abs().min(5.0) * 0.2, config.hv_deadband),
                (_, true) => (
                    config.hv_nominal + (noise.abs() * config.hv_noise).min(4.0 * config.hv_noise),
                    config.hv_deadband,
                ),
                (_, false) => (
                    self.baseline + (noise * config.rssi_noise).clamp(-4.0 * config.rssi_noise, 4.0 * config.rssi_noise),
                    config.rssi_deadband,
                ),
            };
            let emit = force
                || match self.last {
                    None => true,
                    Some((lt, lv)) => (value - lv).abs() > deadband || ts - lt >= config.heartbeat.micros(),
                };
            if emit {
                self.last = Some((ts, value));
                out.push(EventRecord::new(self.id, Timestamp(ts), value));
            }
        }
    }
}

pub struct DayStream<'g> {
    generator: &'g Generator,
    channels: Vec<Channel>,
    day: u32,
}

impl Iterator for DayStream<'_> {
    type Item = (NaiveDate, Vec<EventRecord>);

    fn next(&mut self) -> Option<Self::Item> {
        let config = &self.generator.config;
        if self.day >= config.days {
            return None;
        }
        let start = day_ts(config, self.day);
        self.day += 1;
        let end = start.0 + MICROS_PER_DAY;
        let until = end.min(config.active().end.0);
        let mut rows = Vec::new();
        if start.0 < until {
            for ch in &mut self.channels {
                ch.run_until(config, until, &mut rows);
            }
        }
        rows.sort_unstable_by_key(|r| (r.ts, r.element_id));
        Some((start.day(), rows))
    }
}

#[cfg(test)]
mod tests;
