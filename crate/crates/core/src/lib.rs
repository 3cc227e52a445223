//! Day-partitioned columnar storage and analysis toolkit for detector-control
//! telemetry.
//!
//! * [`storage`]: partitioned parquet tables with versioned manifests,
//!   partition pruning and pushdown scans.
//! * [`sources`] and [`ingest`]: upstream readers and the watermark-based
//!   incremental / full-overwrite sync jobs.
//! * [`query`]: time binning, daily extremes, interval semi-joins.
//! * [`analyses`]: failed-link, oscillation, staleness and HV-nominal
//!   selections plus layer × sector grids.
//! * [`report`]: CSV / JSON tables and the query pipeline behind them.
//! * [`simgen`]: seeded synthetic telemetry with injected faults and ground
//!   truth.

pub mod analyses;
pub mod ingest;
pub mod query;
pub mod report;
pub mod simgen;
pub mod sources;
pub mod storage;
pub mod time;

pub use storage::{EventRecord, Manifest, PartitionMeta, ScanStats, Store};
pub use time::{Span, TimeRange, Timestamp};
