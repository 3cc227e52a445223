use super::*;
use crate::analyses::{
    detect_stale, flag_high_rssi, flag_oscillating, hv_nominal_counts, Evidence, HighRssiParams,
    OscillationParams, StaleParams, DEFAULT_STALENESS, HV_NOMINAL_VOLTS,
};
use crate::query::{daily_extreme, interval_semijoin, time_bin, Extreme, GapIndex, SemijoinMode};

fn small(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        days: 60,
        shutdown_days: 5,
        rssi_elements: 64,
        random_faults: RandomFaults {
            stuck_high: 3,
            oscillating: 3,
            disabled: 3,
            hv_off_days: 2,
        },
        ..GenConfig::default()
    }
}

#[test]
fn same_seed_same_output() {
    let a = Generator::new(small(11)).unwrap();
    let b = Generator::new(small(11)).unwrap();
    assert_eq!(a.truth(), b.truth());
    assert_eq!(a.runs(), b.runs());
    assert!(a.records().eq(b.records()));
    let c = Generator::new(small(12)).unwrap();
    assert_ne!(a.records().take(1000).collect::<Vec<_>>(), c.records().take(1000).collect::<Vec<_>>());
}

#[test]
fn output_is_in_timestamp_order_and_outside_shutdown() {
    let g = Generator::new(small(3)).unwrap();
    let active = g.config().active();
    let mut prev = (Timestamp::MIN, 0);
    for r in g.records() {
        assert!((r.ts, r.element_id) > prev);
        assert!(active.contains(r.ts));
        prev = (r.ts, r.element_id);
    }
    let shutdown = g.truth().shutdown.unwrap();
    assert!(g.runs().iter().all(|r| r.end_ts <= shutdown.start));
    assert_eq!(g.shutdown_mask().intervals(), &[(shutdown.start, shutdown.end)]);
}

#[test]
fn clean_config_never_crosses_threshold() {
    let cfg = GenConfig {
        random_faults: RandomFaults::none(),
        ..small(5)
    };
    let g = Generator::new(cfg).unwrap();
    assert!(g.truth().entries.is_empty());
    let rssi: Vec<_> = g.records().filter(|r| g.config().is_rssi(r.element_id)).collect();
    assert!(rssi.iter().all(|r| r.value > 0.0 && r.value <= 0.45));
    let binned = time_bin(rssi.clone(), Span::from_days(1));
    assert!(flag_high_rssi(&binned, &HighRssiParams::default(), None).unwrap().is_empty());
    assert!(flag_oscillating(&binned, &OscillationParams::default(), None).unwrap().is_empty());
    let idx = GapIndex::build(rssi, DEFAULT_STALENESS);
    let range = TimeRange::new(g.config().span().start, g.config().active().end).unwrap();
    let stale = detect_stale(&idx.last_update(), &idx, range, &[], &StaleParams::default(), g.shutdown_mask()).unwrap();
    assert!(stale.is_empty());
}

#[test]
fn row_count_follows_cadence_without_deadband() {
    let cfg = GenConfig {
        rssi_deadband: -0.0,
        hv_deadband: 0.0,
        random_faults: RandomFaults::none(),
        ..small(9)
    };
    // Every value differs from the previous one, so a zero deadband writes
    // every sample: ceil((active - origin) / cadence) with origin in
    // [0, cadence), and jitter below the cadence can move one sample across
    // the end boundary.
    let g = Generator::new(cfg).unwrap();
    let c = g.config();
    let span = (c.active().end.0 - c.active().start.0) as f64;
    let per = span / c.cadence.micros() as f64;
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for r in g.records() {
        *counts.entry(r.element_id).or_default() += 1;
    }
    assert_eq!(counts.len() as u32, c.rssi_elements + c.hv_elements());
    for (id, n) in &counts {
        assert!((*n as f64 - per).abs() <= 2.0, "element {id}: {n} rows, expected about {per}");
    }
    let total: u64 = counts.values().sum();
    let expect = per * counts.len() as f64;
    assert!((total as f64 - expect).abs() <= 2.0 * counts.len() as f64);
}

#[test]
fn deadband_suppresses_but_heartbeat_bounds_gaps() {
    let cfg = GenConfig {
        rssi_deadband: 0.02,
        random_faults: RandomFaults::none(),
        ..small(4)
    };
    let g = Generator::new(cfg).unwrap();
    let limit = g.config().heartbeat.micros() + g.config().cadence.micros() + g.config().jitter.micros();
    let mut last: BTreeMap<u32, Timestamp> = BTreeMap::new();
    let mut n = 0u64;
    for r in g.records() {
        if let Some(p) = last.insert(r.element_id, r.ts) {
            assert!(r.ts.0 - p.0 <= limit, "gap {} on {}", r.ts.0 - p.0, r.element_id);
        }
        n += 1;
    }
    let full = g.config().active_days() as u64 * 72 * (64 + 64);
    assert!(n < full, "deadband had no effect: {n} of {full}");
}

#[test]
fn fault_windows_shape_the_data() {
    let g = Generator::new(small(21)).unwrap();
    let truth = g.truth();
    let stuck = truth.windows(FaultKind::StuckHigh);
    let disabled = truth.windows(FaultKind::DisabledInterval);
    let off = truth.windows(FaultKind::HvOffInterval);
    assert_eq!(stuck.len(), 3);
    assert_eq!(disabled.len(), 3);
    assert_eq!(off.len(), 64);
    let inside = |ws: Option<&Vec<TimeRange>>, ts: Timestamp| ws.is_some_and(|ws| ws.iter().any(|w| w.contains(ts)));
    let mut stuck_rows = 0;
    for r in g.records() {
        if inside(stuck.get(&r.element_id), r.ts) {
            assert!(r.value > 0.46 && r.value <= 0.49, "{r:?}");
            stuck_rows += 1;
        }
        assert!(!inside(disabled.get(&r.element_id), r.ts), "disabled link wrote {r:?}");
        if inside(off.get(&r.element_id), r.ts) {
            assert!(r.value <= 1.0);
        } else if g.config().is_hv(r.element_id) {
            assert!(r.value >= 505.0);
        }
    }
    assert!(stuck_rows > 0);
    for (_, ws) in off.iter().take(1) {
        for w in ws {
            let runs: Vec<_> = g.runs().iter().filter(|r| w.contains(r.start_ts)).collect();
            assert!(!runs.is_empty());
            assert!(runs.iter().all(|r| r.run_kind == RunKind::Special));
        }
    }
}

#[test]
fn analyses_recover_ground_truth_in_memory() {
    for seed in [1, 2, 3] {
        let g = Generator::new(small(seed)).unwrap();
        let truth = g.truth();
        let records: Vec<_> = g.records().collect();
        let rssi: Vec<_> = records.iter().filter(|r| g.config().is_rssi(r.element_id)).cloned().collect();
        let binned = time_bin(rssi.clone(), Span::from_days(1));
        let ids = |flags: Vec<crate::analyses::LinkFlag>| flags.into_iter().map(|f| f.element_id).collect::<BTreeSet<_>>();
        let high = ids(flag_high_rssi(&binned, &HighRssiParams::default(), None).unwrap());
        assert_eq!(high, truth.expected_ids(Rule::HighRssi), "seed {seed}");
        let osc = ids(flag_oscillating(&binned, &OscillationParams::default(), None).unwrap());
        assert_eq!(osc, truth.expected_ids(Rule::Oscillating), "seed {seed}");

        let range = TimeRange::new(g.config().span().start, g.config().span().end).unwrap();
        let idx = GapIndex::build(rssi, DEFAULT_STALENESS);
        let stale = detect_stale(&idx.last_update(), &idx, range, &[], &StaleParams::default(), g.shutdown_mask()).unwrap();
        let want = truth.windows(FaultKind::DisabledInterval);
        assert_eq!(stale.iter().map(|f| f.element_id).collect::<BTreeSet<_>>(), want.keys().copied().collect());
        for f in &stale {
            let Evidence::Stale { stale_intervals } = &f.evidence else { panic!() };
            let w = &want[&f.element_id];
            assert_eq!(stale_intervals.len(), w.len());
            for ((s, e), w) in stale_intervals.iter().zip(w) {
                assert!((s.0 - w.start.0).abs() <= MICROS_PER_DAY && (e.0 - w.end.0).abs() <= MICROS_PER_DAY);
            }
        }

        let runs = IntervalSet::from_runs("runs", g.runs(), &[]);
        let hv: Vec<_> = records.iter().filter(|r| g.config().is_hv(r.element_id)).cloned().collect();
        let in_runs = interval_semijoin(hv, &runs, SemijoinMode::Keep);
        let counts = hv_nominal_counts(&daily_extreme(in_runs, Extreme::Max), HV_NOMINAL_VOLTS, &runs);
        assert_eq!(counts, truth.hv_daily, "seed {seed}");
        assert!(counts.values().all(|c| c.channels() == 64));
        assert!(counts.values().any(|c| c.below == 64));
    }
}

#[test]
fn too_many_random_faults_rejected() {
    let cfg = GenConfig {
        rssi_elements: 4,
        ..small(1)
    };
    assert!(matches!(Generator::new(cfg), Err(GenError::Invalid(_))));
}

#[test]
fn explicit_faults_pass_through_to_truth() {
    let start = Timestamp::from_ymd_hms(2024, 1, 10, 0, 0, 0);
    let cfg = GenConfig {
        random_faults: RandomFaults::none(),
        faults: vec![FaultSpec {
            element: 5,
            kind: FaultKind::StuckHigh,
            start,
            end: Timestamp(start.0 + 3 * MICROS_PER_DAY),
            params: FaultParams::default(),
        }],
        ..small(1)
    };
    let g = Generator::new(cfg).unwrap();
    // Three days is not more than three occurrences.
    assert_eq!(g.truth().entries[0].expected_flag, None);
    let binned = time_bin(g.records().filter(|r| r.element_id == 5), Span::from_days(1));
    assert!(flag_high_rssi(&binned, &HighRssiParams::default(), None).unwrap().is_empty());
}

#[test]
fn outputs_round_trip_through_sources() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        days: 10,
        shutdown_days: 2,
        rssi_elements: 8,
        hv_channels_per_sector: 4,
        random_faults: RandomFaults {
            stuck_high: 1,
            oscillating: 1,
            disabled: 1,
            hv_off_days: 1,
        },
        ..GenConfig::default()
    };
    let g = Generator::new(cfg).unwrap();
    let out = g.write_outputs(dir.path()).unwrap();
    let rows = crate::sources::FixtureSource::new(&out.events).read_all().unwrap();
    assert_eq!(rows.len() as u64, out.rows);
    assert!(rows.iter().cloned().eq(g.records()));
    let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(&out.truth).unwrap()).unwrap();
    assert_eq!(&truth, g.truth());
    assert_eq!(crate::sources::read_run_file(&out.runs).unwrap(), g.runs());
    assert_eq!(&IntervalSet::read_tsv(&out.mask, "shutdown").unwrap(), g.shutdown_mask());
    assert_eq!(ElementMapping::load(&out.mapping).unwrap(), g.mapping());
    let again = Generator::new(GenConfig::load(&out.config).unwrap()).unwrap();
    assert_eq!(again.truth(), g.truth());
    let sync = ScheduleConfig::load(&out.sync).unwrap();
    assert_eq!(sync.tables[0].mode, SyncMode::Incremental);
}
