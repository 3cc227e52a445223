use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::error;

use super::{sync, SyncMode, SyncOptions, SyncReport};
use crate::sources::{open_source, Source, SourceError};
use crate::storage::Store;
use crate::time::Span;

fn default_cadence() -> Span {
    Span::from_hours(24)
}

fn default_overlap() -> Span {
    Span::from_hours(1)
}

/// Scheduler configuration, usually loaded from TOML:
///
/// ```toml
/// store = "/data/lake"
/// cadence = "24h"
/// overlap = "1h"
///
/// [[tables]]
/// name = "eventhistory"
/// mode = "incremental"
/// source = "fixture:/data/events.tsv"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub store: PathBuf,
    #[serde(default = "default_cadence")]
    pub cadence: Span,
    #[serde(default = "default_overlap")]
    pub overlap: Span,
    #[serde(default)]
    pub tables: Vec<TableSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub name: String,
    pub mode: SyncMode,
    /// Source descriptor, see [`open_source`].
    pub source: String,
    #[serde(default)]
    pub overlap: Option<Span>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

impl ScheduleConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: ScheduleConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|reason| ConfigError::Invalid {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), String> {
        if self.cadence.micros() <= 0 {
            return Err("cadence must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.as_str()) {
                return Err(format!("table {:?} listed twice", t.name));
            }
            if t.overlap.is_some_and(|o| o.micros() < 0) {
                return Err(format!("table {:?}: negative overlap", t.name));
            }
        }
        if self.overlap.micros() < 0 {
            return Err("negative overlap".into());
        }
        Ok(())
    }
}

type Opener = Box<dyn FnMut(&TableSpec) -> Result<Box<dyn Source>, SourceError>>;
type Sleeper = Box<dyn FnMut(Duration)>;

/// Runs sync cycles and yields one [`SyncReport`] per table per cycle.
/// A failing table produces a report with `error` set and does not stop the
/// other tables.
pub struct Schedule {
    config: ScheduleConfig,
    store: Store,
    opener: Opener,
    sleeper: Sleeper,
    cycles_left: Option<u64>,
    cycles_done: u64,
    pending: VecDeque<SyncReport>,
}

impl Schedule {
    pub fn new(config: ScheduleConfig, store: Store) -> Self {
        Schedule {
            config,
            store,
            opener: Box::new(|spec| open_source(&spec.source)),
            sleeper: Box::new(std::thread::sleep),
            cycles_left: None,
            cycles_done: 0,
            pending: VecDeque::new(),
        }
    }

    pub fn with_opener(
        mut self,
        opener: impl FnMut(&TableSpec) -> Result<Box<dyn Source>, SourceError> + 'static,
    ) -> Self {
        self.opener = Box::new(opener);
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl FnMut(Duration) + 'static) -> Self {
        self.sleeper = Box::new(sleeper);
        self
    }

    /// Stops after `n` cycles; unlimited by default.
    pub fn cycles(mut self, n: u64) -> Self {
        self.cycles_left = Some(n);
        self
    }

    pub fn run_cycle(&mut self) -> Vec<SyncReport> {
        let tables = self.config.tables.clone();
        tables.iter().map(|spec| self.sync_one(spec)).collect()
    }

    fn sync_one(&mut self, spec: &TableSpec) -> SyncReport {
        let result = (|| {
            let table = self
                .store
                .table(&spec.name)
                .map_err(|e| e.to_string())?;
            let mut source = (self.opener)(spec).map_err(|e| e.to_string())?;
            let options = SyncOptions {
                overlap: Some(spec.overlap.unwrap_or(self.config.overlap)),
            };
            sync(source.as_mut(), &table, spec.mode, options).map_err(|e| e.to_string())
        })();
        result.unwrap_or_else(|e| {
            error!(table = %spec.name, error = %e, "sync failed");
            SyncReport::failed(&spec.name, spec.mode, e)
        })
    }
}

impl Iterator for Schedule {
    type Item = SyncReport;

    fn next(&mut self) -> Option<SyncReport> {
        loop {
            if let Some(r) = self.pending.pop_front() {
                return Some(r);
            }
            if self.cycles_left == Some(0) || self.config.tables.is_empty() {
                return None;
            }
            if self.cycles_done > 0 {
                (self.sleeper)(self.config.cadence.as_std());
            }
            let reports = self.run_cycle();
            self.pending.extend(reports);
            self.cycles_done += 1;
            if let Some(n) = self.cycles_left.as_mut() {
                *n -= 1;
            }
        }
    }
}
