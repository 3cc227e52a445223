//! `dcslake`: generate, sync, query and analyse detector-control telemetry.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod analyze;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dcslake::ingest::{Schedule, ScheduleConfig};
use dcslake::query::IntervalSet;
use dcslake::report::{query_table, run_query, Agg, Format, QuerySpec};
use dcslake::simgen::{GenConfig, Generator};
use dcslake::sources::read_run_file;
use dcslake::storage::{ElementPredicate, Snapshot, Store};
use dcslake::{Span, TimeRange, Timestamp};

#[derive(Parser)]
#[command(name = "dcslake", version, about = "Partitioned telemetry store, sync jobs and link analyses")]
struct Cli {
    /// Log to stderr; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with injected faults and ground truth.
    Gen(GenArgs),
    /// Run the configured sync jobs.
    Sync(SyncArgs),
    /// Scan a table, optionally filtered by runs or masks and binned.
    Query(QueryArgs),
    /// Link and HV analyses.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
}

#[derive(Args)]
struct GenArgs {
    /// Generator TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SyncArgs {
    #[arg(long)]
    config: PathBuf,
    /// Only sync this table (repeatable).
    #[arg(long)]
    table: Vec<String>,
    /// Run one cycle and exit (default).
    #[arg(long, conflicts_with = "loop")]
    once: bool,
    /// Run cycles forever, sleeping the configured cadence in between.
    #[arg(long = "loop")]
    r#loop: bool,
}

/// Store, table and time window shared by `query` and `analyze`.
#[derive(Args, Clone)]
pub(crate) struct Selection {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "eventhistory")]
    table: String,
    /// Inclusive start, ISO-8601 UTC (date or date-time).
    #[arg(long)]
    from: Option<Timestamp>,
    /// Exclusive end, ISO-8601 UTC.
    #[arg(long)]
    to: Option<Timestamp>,
    /// Element ids: `1,2,10-20`.
    #[arg(long, value_parser = parse_elements)]
    elements: Option<ElementPredicate>,
    /// Read this manifest version instead of the current one.
    #[arg(long)]
    at_version: Option<u64>,
    #[arg(long, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    sel: Selection,
    /// Bin width (`1h`, `1d`); raw records when omitted.
    #[arg(long)]
    bin: Option<Span>,
    /// Per-bin aggregate: count, min, max, mean, std, last or all.
    #[arg(long, default_value = "max")]
    agg: Agg,
    /// Keep only samples inside the runs of this run file.
    #[arg(long)]
    keep_runs: Option<PathBuf>,
    /// Drop samples inside the intervals of this mask file (repeatable).
    #[arg(long)]
    drop_mask: Vec<PathBuf>,
}

pub(crate) enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub(crate) type Outcome<T = ()> = Result<T, Failure>;

pub(crate) fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

pub(crate) fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn parse_elements(s: &str) -> Result<ElementPredicate, String> {
    let mut ids = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |x: &str| x.trim().parse::<u32>().map_err(|e| format!("bad element id {x:?}: {e}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty element range {part}"));
                }
                ids.extend(a..=b);
            }
            None => ids.push(num(part)?),
        }
    }
    if ids.is_empty() {
        return Err("no element ids given".into());
    }
    Ok(ElementPredicate::new(ids))
}

impl Selection {
    pub(crate) fn range(&self) -> Outcome<TimeRange> {
        let all = TimeRange::all();
        let start = self.from.unwrap_or(all.start);
        let end = self.to.unwrap_or(all.end);
        TimeRange::new(start, end).ok_or_else(|| usage(anyhow!("empty time range: --from {start} is not before --to {end}")))
    }

    pub(crate) fn snapshot(&self) -> Outcome<Snapshot> {
        if !self.store.is_dir() {
            return Err(usage(anyhow!("store {} does not exist", self.store.display())));
        }
        let store = Store::open(&self.store).map_err(runtime)?;
        let table = store.table(&self.table).map_err(usage)?;
        match self.at_version {
            Some(v) => table.snapshot_at(v).map_err(usage),
            None => table.snapshot().map_err(runtime),
        }
    }

    pub(crate) fn format(&self) -> Format {
        self.format
    }

    pub(crate) fn elements(&self) -> Option<&ElementPredicate> {
        self.elements.as_ref()
    }
}

pub(crate) fn read_mask(paths: &[PathBuf]) -> Outcome<IntervalSet> {
    let mut out = IntervalSet::empty("mask");
    for p in paths {
        let set = IntervalSet::read_tsv(p, "mask").map_err(usage)?;
        out = out.union(&set);
    }
    Ok(out)
}

pub(crate) fn read_runs(path: &Path) -> Outcome<IntervalSet> {
    let runs = read_run_file(path).map_err(usage)?;
    Ok(IntervalSet::from_runs("runs", &runs, &[]))
}

pub(crate) fn emit(table: &dcslake::report::Table, format: Format) -> Outcome {
    let stdout = std::io::stdout();
    table.write(stdout.lock(), format).context("writing output").map_err(runtime)
}

fn gen(args: GenArgs) -> Outcome {
    let mut config = match &args.config {
        Some(p) => GenConfig::load(p).map_err(usage)?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let generator = Generator::new(config).map_err(usage)?;
    let out = generator
        .write_outputs(&args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))
        .map_err(runtime)?;
    let summary = serde_json::json!({
        "seed": generator.config().seed,
        "rows": out.rows,
        "events": out.events,
        "truth": out.truth,
        "runs": out.runs,
        "mask": out.mask,
        "mapping": out.mapping,
        "config": out.config,
        "sync": out.sync,
    });
    println!("{summary}");
    Ok(())
}

fn sync(args: SyncArgs) -> Outcome {
    let mut config = ScheduleConfig::load(&args.config).map_err(usage)?;
    if !args.table.is_empty() {
        let unknown: Vec<_> = args
            .table
            .iter()
            .filter(|t| !config.tables.iter().any(|s| &s.name == *t))
            .collect();
        if !unknown.is_empty() {
            return Err(usage(anyhow!("tables not in {}: {unknown:?}", args.config.display())));
        }
        config.tables.retain(|s| args.table.contains(&s.name));
    }
    let store = Store::open(&config.store).map_err(runtime)?;
    let mut schedule = Schedule::new(config, store);
    if !args.r#loop {
        schedule = schedule.cycles(1);
    }
    let mut failed = 0;
    let stdout = std::io::stdout();
    for report in schedule {
        if !report.is_ok() {
            failed += 1;
        }
        let mut out = stdout.lock();
        let line = serde_json::to_string(&report).map_err(runtime)?;
        writeln!(out, "{line}").and_then(|_| out.flush()).map_err(runtime)?;
    }
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} table sync(s) failed")));
    }
    Ok(())
}

fn query(args: QueryArgs) -> Outcome {
    let range = args.sel.range()?;
    if args.bin.is_some_and(|b| b.micros() <= 0) {
        return Err(usage(anyhow!("--bin must be positive")));
    }
    let keep = args.keep_runs.as_deref().map(read_runs).transpose()?;
    let drop = (!args.drop_mask.is_empty()).then(|| read_mask(&args.drop_mask)).transpose()?;
    let snapshot = args.sel.snapshot()?;
    let spec = QuerySpec {
        range,
        elements: args.sel.elements.clone(),
        bin: args.bin,
        agg: args.agg,
        keep,
        drop,
    };
    let (output, stats) = run_query(&snapshot, &spec).map_err(runtime)?;
    eprintln!("{}", serde_json::to_string(&stats).map_err(runtime)?);
    emit(&query_table(&output, args.agg), args.sel.format)
}

/// The error chain, skipping causes already spelled out by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Sync(a) => sync(a),
        Command::Query(a) => query(a),
        Command::Analyze(a) => analyze::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
    }
}
