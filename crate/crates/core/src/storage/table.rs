use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use tracing::{debug, info, warn};

use super::format::{read_file, write_file, FileFilter};
use super::manifest::{FileMeta, Manifest, PartitionMeta, Watermark};
use super::prune::{ElementPredicate, ValuePredicate};
use super::scan::{Projection, Scan, ScanRequest};
use super::{sort_dedup, EventRecord, Result, StoreError};
use crate::time::{Span, TimeRange, Timestamp};

const MANIFEST_DIR: &str = "_manifests";
const CURRENT: &str = "CURRENT";
const LOCK: &str = "LOCK";
const PENDING: &str = "PENDING";
const DATA_EXT: &str = "parquet";

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Accepted timestamp range `[lo, hi)`.
    pub epoch: TimeRange,
    /// Overlap recorded in the watermark of a table's first manifest.
    pub default_overlap: Span,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            epoch: TimeRange {
                start: Timestamp::from_ymd_hms(1970, 1, 1, 0, 0, 0),
                end: Timestamp::from_ymd_hms(2100, 1, 1, 0, 0, 0),
            },
            default_overlap: Span::from_hours(1),
        }
    }
}

/// Points in the commit sequence where a crash can be simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    /// Data files written, no manifest yet.
    AfterDataWrite,
    /// New manifest written to its temporary name, not yet renamed.
    BeforeManifestRename,
    /// New manifest in place, `CURRENT` still names the old version.
    BeforeCurrentSwap,
}

impl std::str::FromStr for FailPoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "after-data-write" => Ok(FailPoint::AfterDataWrite),
            "before-manifest-rename" => Ok(FailPoint::BeforeManifestRename),
            "before-current-swap" => Ok(FailPoint::BeforeCurrentSwap),
            other => Err(format!("unknown failpoint {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailAction {
    /// Return [`StoreError::Injected`] and drop the writer.
    Error,
    /// Abort the process on the spot.
    Abort,
}

/// Root of a store holding any number of tables.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    config: StoreConfig,
    failpoint: Option<(FailPoint, FailAction)>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        Store::with_config(root, StoreConfig::default())
    }

    pub fn with_config(root: impl Into<PathBuf>, config: StoreConfig) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StoreError::io(&root, e))?;
        Ok(Store {
            root,
            config,
            failpoint: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn set_failpoint(&mut self, failpoint: Option<(FailPoint, FailAction)>) {
        self.failpoint = failpoint;
    }

    pub fn table(&self, name: &str) -> Result<Table> {
        let valid = !name.is_empty()
            && !name.starts_with('_')
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid {
            return Err(StoreError::InvalidTableName(name.to_string()));
        }
        Ok(Table {
            name: name.to_string(),
            dir: self.root.join(name),
            config: self.config.clone(),
            failpoint: self.failpoint,
        })
    }
}

/// Handle on one table directory.
#[derive(Debug, Clone)]
pub struct Table {
    name: String,
    dir: PathBuf,
    config: StoreConfig,
    failpoint: Option<(FailPoint, FailAction)>,
}

impl Table {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn manifest_dir(&self) -> PathBuf {
        self.dir.join(MANIFEST_DIR)
    }

    fn manifest_path(&self, version: u64) -> PathBuf {
        self.manifest_dir().join(format!("manifest-{version}.json"))
    }

    /// Latest committed version, 0 if the table was never committed.
    pub fn current_version(&self) -> Result<u64> {
        let path = self.manifest_dir().join(CURRENT);
        match fs::read_to_string(&path) {
            Ok(s) => s.trim().parse().map_err(|_| StoreError::CorruptManifest {
                path,
                reason: format!("CURRENT holds {s:?}"),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
            Err(e) => Err(StoreError::io(path, e)),
        }
    }

    pub fn load_manifest(&self, version: u64) -> Result<Manifest> {
        if version == 0 {
            return Ok(Manifest::empty(&self.name, self.config.default_overlap));
        }
        if version > self.current_version()? {
            return Err(StoreError::VersionNotFound {
                table: self.name.clone(),
                version,
            });
        }
        let path = self.manifest_path(version);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::VersionNotFound {
                table: self.name.clone(),
                version,
            },
            _ => StoreError::io(&path, e),
        })?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptManifest {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if manifest.version != version || manifest.table != self.name {
            return Err(StoreError::CorruptManifest {
                path,
                reason: format!(
                    "header says {}@{}, expected {}@{}",
                    manifest.table, manifest.version, self.name, version
                ),
            });
        }
        Ok(manifest)
    }

    /// Pins the latest committed version.
    pub fn snapshot(&self) -> Result<Snapshot> {
        self.snapshot_at(self.current_version()?)
    }

    pub fn snapshot_at(&self, version: u64) -> Result<Snapshot> {
        Ok(Snapshot {
            table_dir: self.dir.clone(),
            manifest: Arc::new(self.load_manifest(version)?),
        })
    }

    /// Committed versions still on disk, ascending.
    pub fn versions(&self) -> Result<Vec<u64>> {
        let current = self.current_version()?;
        let mut out = Vec::new();
        let dir = self.manifest_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(StoreError::io(dir, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
            let name = entry.file_name();
            let Some(v) = name
                .to_str()
                .and_then(|n| n.strip_prefix("manifest-"))
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u64>().ok())
            else {
                continue;
            };
            if v <= current {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Takes the single-writer lock, cleans up after any interrupted commit
    /// and pins the latest version as the base of the new transaction.
    pub fn writer(&self) -> Result<TableWriter> {
        let mdir = self.manifest_dir();
        fs::create_dir_all(&mdir).map_err(|e| StoreError::io(&mdir, e))?;
        let lock_path = mdir.join(LOCK);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| StoreError::io(&lock_path, e))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => {
                return Err(StoreError::Locked {
                    table: self.name.clone(),
                })
            }
            Err(fs::TryLockError::Error(e)) => return Err(StoreError::io(lock_path, e)),
        }
        self.recover()?;
        let base = Arc::new(self.load_manifest(self.current_version()?)?);
        Ok(TableWriter {
            table: self.clone(),
            base,
            _lock: lock,
            staged: BTreeMap::new(),
            overwrite: false,
            next_seq: HashMap::new(),
            rows_written: 0,
            pending: None,
        })
    }

    /// Removes leftovers of a commit that never reached the `CURRENT` swap.
    /// Must run under the writer lock.
    fn recover(&self) -> Result<()> {
        let current = self.current_version()?;
        let mdir = self.manifest_dir();
        let pending_path = mdir.join(PENDING);
        if pending_path.exists() {
            let listed =
                fs::read_to_string(&pending_path).map_err(|e| StoreError::io(&pending_path, e))?;
            let live: HashSet<String> = if current == 0 {
                HashSet::new()
            } else {
                self.load_manifest(current)?
                    .file_paths()
                    .map(str::to_string)
                    .collect()
            };
            for rel in listed.lines().filter(|l| !l.is_empty()) {
                if !live.contains(rel) {
                    let path = self.dir.join(rel);
                    match fs::remove_file(&path) {
                        Ok(()) => debug!(path = %path.display(), "removed orphan data file"),
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                        Err(e) => return Err(StoreError::io(path, e)),
                    }
                }
            }
            fs::remove_file(&pending_path).map_err(|e| StoreError::io(&pending_path, e))?;
            warn!(table = %self.name, version = current, "recovered from interrupted commit");
        }
        for entry in fs::read_dir(&mdir).map_err(|e| StoreError::io(&mdir, e))? {
            let entry = entry.map_err(|e| StoreError::io(&mdir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let stale_version = name
                .strip_prefix("manifest-")
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u64>().ok())
                .is_some_and(|v| v > current);
            if name.ends_with(".tmp") || stale_version {
                fs::remove_file(entry.path()).map_err(|e| StoreError::io(entry.path(), e))?;
            }
        }
        Ok(())
    }

    /// Deletes manifests older than the newest `keep` versions and every data
    /// file no retained manifest references.
    pub fn gc(&self, keep: usize) -> Result<usize> {
        let _writer = self.writer()?;
        let versions = self.versions()?;
        let keep = keep.max(1);
        let cut = versions.len().saturating_sub(keep);
        let mut live: HashSet<String> = HashSet::new();
        for &v in &versions[cut..] {
            live.extend(self.load_manifest(v)?.file_paths().map(str::to_string));
        }
        let mut removed = 0;
        for &v in &versions[..cut] {
            let p = self.manifest_path(v);
            fs::remove_file(&p).map_err(|e| StoreError::io(&p, e))?;
        }
        for entry in fs::read_dir(&self.dir).map_err(|e| StoreError::io(&self.dir, e))? {
            let entry = entry.map_err(|e| StoreError::io(&self.dir, e))?;
            let dname = entry.file_name().to_string_lossy().into_owned();
            if !dname.starts_with("date=") {
                continue;
            }
            for f in fs::read_dir(entry.path()).map_err(|e| StoreError::io(entry.path(), e))? {
                let f = f.map_err(|e| StoreError::io(entry.path(), e))?;
                let rel = format!("{dname}/{}", f.file_name().to_string_lossy());
                if !live.contains(&rel) {
                    fs::remove_file(f.path()).map_err(|e| StoreError::io(f.path(), e))?;
                    removed += 1;
                }
            }
        }
        info!(table = %self.name, removed, "garbage collected data files");
        Ok(removed)
    }
}

/// Read view pinned to one manifest version.
#[derive(Debug, Clone)]
pub struct Snapshot {
    table_dir: PathBuf,
    manifest: Arc<Manifest>,
}

impl Snapshot {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn version(&self) -> u64 {
        self.manifest.version
    }

    pub fn table_dir(&self) -> &Path {
        &self.table_dir
    }

    pub fn prune(
        &self,
        range: &TimeRange,
        value: Option<&ValuePredicate>,
        elements: Option<&ElementPredicate>,
    ) -> Vec<&PartitionMeta> {
        super::prune_partitions(&self.manifest, range, value, elements)
    }

    pub fn scan(&self, request: ScanRequest) -> Result<Scan<'_>> {
        Scan::new(self, request)
    }

    /// Every stored row, bypassing all pruning. Used as a reference result.
    pub fn full_scan(&self) -> Result<Vec<EventRecord>> {
        let mut out = Vec::new();
        for p in self.manifest.partitions.values() {
            let mut day = Vec::new();
            for f in &p.files {
                let filter = FileFilter {
                    range: TimeRange::all(),
                    elements: None,
                    value: None,
                    projection: Projection::all(),
                };
                day.extend(read_file(&self.table_dir.join(&f.path), &filter)?.0.iter());
            }
            day.sort_by_key(|r| r.key());
            out.extend(day);
        }
        Ok(out)
    }
}

/// Single-writer transaction on a table. Data files are written eagerly;
/// nothing becomes visible until [`TableWriter::commit`].
pub struct TableWriter {
    table: Table,
    base: Arc<Manifest>,
    _lock: File,
    staged: BTreeMap<NaiveDate, PartitionMeta>,
    overwrite: bool,
    next_seq: HashMap<NaiveDate, u64>,
    rows_written: u64,
    pending: Option<File>,
}

impl TableWriter {
    pub fn base(&self) -> &Manifest {
        &self.base
    }

    pub fn table(&self) -> &Table {
        &self.table
    }

    /// Replace the whole table on commit instead of merging into the base.
    pub fn set_overwrite(&mut self, overwrite: bool) {
        self.overwrite = overwrite;
    }

    /// Rows that changed store contents so far (new keys plus changed
    /// payloads of existing keys).
    pub fn rows_written(&self) -> u64 {
        self.rows_written
    }

    pub fn staged_days(&self) -> Vec<NaiveDate> {
        self.staged.keys().copied().collect()
    }

    fn validate(&self, day: NaiveDate, records: &[EventRecord]) -> Result<()> {
        let epoch = self.table.config.epoch;
        for r in records {
            if !epoch.contains(r.ts) {
                return Err(StoreError::OutOfEpoch {
                    element_id: r.element_id,
                    ts: r.ts,
                    lo: epoch.start,
                    hi: epoch.end,
                });
            }
            if r.ts.day() != day {
                return Err(StoreError::PartitionBoundary {
                    element_id: r.element_id,
                    ts: r.ts,
                    day,
                });
            }
            if !r.value.is_finite() {
                return Err(StoreError::NonFiniteValue {
                    element_id: r.element_id,
                    ts: r.ts,
                });
            }
        }
        Ok(())
    }

    fn current_partition(&self, day: NaiveDate) -> Option<&PartitionMeta> {
        self.staged.get(&day).or_else(|| {
            if self.overwrite {
                None
            } else {
                self.base.partitions.get(&day)
            }
        })
    }

    fn allocate_file(&mut self, day: NaiveDate) -> Result<(String, PathBuf)> {
        let dir_name = format!("date={}", day.format("%Y-%m-%d"));
        let dir = self.table.dir.join(&dir_name);
        let seq = match self.next_seq.get(&day) {
            Some(s) => *s,
            None => {
                fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
                let mut max_seen: Option<u64> = None;
                for entry in fs::read_dir(&dir).map_err(|e| StoreError::io(&dir, e))? {
                    let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if let Some(n) = name
                        .strip_prefix("part-")
                        .and_then(|n| n.strip_suffix(&format!(".{DATA_EXT}")))
                        .and_then(|n| n.parse::<u64>().ok())
                    {
                        max_seen = Some(max_seen.map_or(n, |m| m.max(n)));
                    }
                }
                max_seen.map_or(0, |m| m + 1)
            }
        };
        self.next_seq.insert(day, seq + 1);
        let file_name = format!("part-{seq:05}.{DATA_EXT}");
        let rel = format!("{dir_name}/{file_name}");
        self.note_pending(&rel)?;
        Ok((rel, dir.join(file_name)))
    }

    fn note_pending(&mut self, rel: &str) -> Result<()> {
        let path = self.table.manifest_dir().join(PENDING);
        if self.pending.is_none() {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| StoreError::io(&path, e))?;
            self.pending = Some(f);
        }
        let f = self.pending.as_mut().expect("opened above");
        writeln!(f, "{rel}").map_err(|e| StoreError::io(&path, e))?;
        f.sync_data().map_err(|e| StoreError::io(&path, e))
    }

    fn write_new_file(&mut self, day: NaiveDate, rows: &[EventRecord]) -> Result<FileMeta> {
        let (rel, path) = self.allocate_file(day)?;
        write_file(&path, rows)?;
        Ok(FileMeta::from_sorted(rel, rows))
    }

    /// Stages `records` into the partition for `day` and returns the
    /// resulting partition statistics.
    ///
    /// Records are sorted by `(element_id, ts)` and deduplicated with the last
    /// occurrence winning. Keys already stored with an identical payload are
    /// dropped; keys stored with a different payload are replaced by
    /// rewriting the affected files. Everything else goes into one new file.
    pub fn write_partition(
        &mut self,
        day: NaiveDate,
        mut records: Vec<EventRecord>,
    ) -> Result<PartitionMeta> {
        self.validate(day, &records)?;
        sort_dedup(&mut records);
        let table_name = self.table.name.clone();
        let existing = self
            .current_partition(day)
            .cloned()
            .unwrap_or_else(|| PartitionMeta::empty(&table_name, day));
        if records.is_empty() {
            return Ok(existing);
        }

        let lo = records.iter().map(|r| r.ts).min().expect("non-empty");
        let hi = records.iter().map(|r| r.ts).max().expect("non-empty");
        let incoming = ElementPredicate::new(records.iter().map(|r| r.element_id));
        let range = TimeRange {
            start: lo,
            end: hi.saturating_add(1),
        };

        // Load only the files whose statistics overlap the incoming batch.
        let mut kept: Vec<FileMeta> = Vec::new();
        let mut loaded: Vec<(FileMeta, Vec<EventRecord>)> = Vec::new();
        for f in existing.files {
            if super::prune::file_may_match(&f, &range, None, Some(&incoming)) {
                let filter = FileFilter {
                    range: TimeRange::all(),
                    elements: None,
                    value: None,
                    projection: Projection::all(),
                };
                let (batch, _) = read_file(&self.table.dir.join(&f.path), &filter)?;
                loaded.push((f, batch.to_records()));
            } else {
                kept.push(f);
            }
        }

        let mut index: HashMap<(u32, Timestamp), (usize, usize)> = HashMap::new();
        for (fi, (_, rows)) in loaded.iter().enumerate() {
            for (ri, r) in rows.iter().enumerate() {
                index.insert(r.key(), (fi, ri));
            }
        }
        let mut dirty = vec![false; loaded.len()];
        let mut fresh: Vec<EventRecord> = Vec::new();
        let mut changed = 0u64;
        for r in records {
            match index.get(&r.key()) {
                Some(&(fi, ri)) => {
                    let old = &mut loaded[fi].1[ri];
                    if !old.same_payload(&r) {
                        *old = r;
                        dirty[fi] = true;
                        changed += 1;
                    }
                }
                None => fresh.push(r),
            }
        }

        let fresh_count = fresh.len() as u64;
        let mut merged = fresh;
        for (fi, (meta, rows)) in loaded.into_iter().enumerate() {
            if dirty[fi] {
                merged.extend(rows);
            } else {
                kept.push(meta);
            }
        }
        if !merged.is_empty() {
            merged.sort_by_key(|r| r.key());
            let file = self.write_new_file(day, &merged)?;
            kept.push(file);
        }
        self.rows_written += fresh_count + changed;

        let meta = PartitionMeta::from_files(&table_name, day, kept);
        self.staged.insert(day, meta.clone());
        Ok(meta)
    }

    /// Atomically publishes the staged partitions and `watermark` as the next
    /// manifest version.
    pub fn commit(self, watermark: Watermark) -> Result<Manifest> {
        let changes: Vec<PartitionMeta> = self.staged.values().cloned().collect();
        self.commit_manifest(changes, watermark)
    }

    /// Publishes `changes` (full replacement metadata per day) on top of the
    /// base version. Partitions with zero rows are dropped from the manifest.
    pub fn commit_manifest(
        mut self,
        changes: Vec<PartitionMeta>,
        watermark: Watermark,
    ) -> Result<Manifest> {
        self.fail(FailPoint::AfterDataWrite)?;

        let mut partitions = if self.overwrite {
            BTreeMap::new()
        } else {
            self.base.partitions.clone()
        };
        for p in changes {
            if p.row_count == 0 {
                partitions.remove(&p.day);
            } else {
                partitions.insert(p.day, p);
            }
        }
        let version = self.base.version + 1;
        let manifest = Manifest {
            version,
            table: self.table.name.clone(),
            partitions,
            watermark,
            created_at: Timestamp(chrono::Utc::now().timestamp_micros()),
        };

        let found = self.table.current_version()?;
        if found != self.base.version {
            return Err(StoreError::CommitConflict {
                table: self.table.name.clone(),
                expected: self.base.version,
                found,
            });
        }

        let mdir = self.table.manifest_dir();
        let final_path = self.table.manifest_path(version);
        let tmp_path = mdir.join(format!("manifest-{version}.json.tmp"));
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_synced(&tmp_path, &json)?;
        self.fail(FailPoint::BeforeManifestRename)?;
        fs::rename(&tmp_path, &final_path).map_err(|e| StoreError::io(&final_path, e))?;
        self.fail(FailPoint::BeforeCurrentSwap)?;

        let cur_tmp = mdir.join("CURRENT.tmp");
        write_synced(&cur_tmp, format!("{version}\n").as_bytes())?;
        let cur = mdir.join(CURRENT);
        fs::rename(&cur_tmp, &cur).map_err(|e| StoreError::io(&cur, e))?;
        if let Ok(d) = File::open(&mdir) {
            let _ = d.sync_all();
        }

        if self.pending.take().is_some() {
            let p = mdir.join(PENDING);
            fs::remove_file(&p).map_err(|e| StoreError::io(&p, e))?;
        }
        debug!(table = %self.table.name, version, "committed manifest");
        Ok(manifest)
    }

    fn fail(&self, at: FailPoint) -> Result<()> {
        match self.table.failpoint {
            Some((fp, action)) if fp == at => match action {
                FailAction::Error => Err(StoreError::Injected(at)),
                FailAction::Abort => std::process::abort(),
            },
            _ => Ok(()),
        }
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| StoreError::io(path, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(path, e))?;
    f.sync_all().map_err(|e| StoreError::io(path, e))
}
