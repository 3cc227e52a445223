use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Args, Subcommand, ValueEnum};
use dcslake::analyses::pipeline::{failed_links, hv_nominal, oscillating_links, stale_links};
use dcslake::analyses::{
    geometry_grid, AnalysisError, Counting, ElementMapping, HighRssiParams, LinkFlag,
    OscillationParams, StaleParams, DEFAULT_MIN_BINS, DEFAULT_MIN_OCCURRENCES,
    DEFAULT_RSSI_THRESHOLD, DEFAULT_STALENESS, DEFAULT_STD_THRESHOLD, HV_NOMINAL_VOLTS, WHEELS,
};
use dcslake::report::{daily_counts_table, flags_table, grid_table, Table};
use dcslake::storage::{ScanStats, Snapshot};
use dcslake::{Span, TimeRange};

use crate::{emit, read_mask, read_runs, runtime, usage, Failure, Outcome, Selection};

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// RSSI links above threshold in more than N bins.
    FailedLinks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        high: HighArgs,
        #[arg(long, default_value = "1d")]
        bin: Span,
    },
    /// RSSI links whose per-bin spread exceeds the threshold.
    Oscillating {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        osc: OscArgs,
        #[arg(long, default_value = "1d")]
        bin: Span,
    },
    /// Links silent for longer than the staleness limit outside masks.
    Stale {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        stale: StaleArgs,
    },
    /// Daily count of HV channels at or above nominal during runs.
    HvNominal {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = HV_NOMINAL_VOLTS)]
        nominal: f64,
        /// Run interval file; only samples inside runs count.
        #[arg(long)]
        runs: PathBuf,
    },
    /// Flagged links on the layer x sector grid of each wheel.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        rule: RuleArg,
        #[command(flatten)]
        high: HighArgs,
        #[command(flatten)]
        osc: OscArgs,
        #[command(flatten)]
        stale: StaleArgs,
        #[arg(long, default_value = "1d")]
        bin: Span,
    },
}

#[derive(Args)]
pub struct Common {
    #[command(flatten)]
    sel: Selection,
    /// Element mapping TSV; restricts the analysis to elements of the
    /// matching kind.
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
pub struct HighArgs {
    #[arg(long, default_value_t = DEFAULT_RSSI_THRESHOLD)]
    threshold: f64,
    /// Flag when the count of occurrences exceeds this.
    #[arg(long, default_value_t = DEFAULT_MIN_OCCURRENCES)]
    min_occurrences: u64,
    #[arg(long, value_enum, default_value = "bins")]
    counting: CountingArg,
}

#[derive(Args)]
pub struct OscArgs {
    #[arg(long, default_value_t = DEFAULT_STD_THRESHOLD)]
    std_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_BINS)]
    min_bins: u64,
    /// Pool the whole window into one spread.
    #[arg(long)]
    whole_window: bool,
}

#[derive(Args)]
pub struct StaleArgs {
    #[arg(long, default_value_t = DEFAULT_STALENESS)]
    staleness: Span,
    /// Interval file excluded from staleness (repeatable).
    #[arg(long)]
    mask: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum CountingArg {
    Bins,
    Samples,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    All,
    HighRssi,
    Oscillating,
    Stale,
}

impl HighArgs {
    fn params(&self) -> HighRssiParams {
        HighRssiParams {
            threshold: self.threshold,
            min_occurrences: self.min_occurrences,
            counting: match self.counting {
                CountingArg::Bins => Counting::Bins,
                CountingArg::Samples => Counting::Samples,
            },
        }
    }

    fn describe(&self, t: Table) -> Table {
        let counting = match self.counting {
            CountingArg::Bins => "bins",
            CountingArg::Samples => "samples",
        };
        t.param("threshold", self.threshold)
            .param("min_occurrences", self.min_occurrences)
            .param("counting", counting)
    }
}

impl OscArgs {
    fn params(&self) -> OscillationParams {
        OscillationParams {
            std_threshold: self.std_threshold,
            min_bins: self.min_bins,
            whole_window: self.whole_window,
        }
    }

    fn describe(&self, t: Table) -> Table {
        t.param("std_threshold", self.std_threshold)
            .param("min_bins", self.min_bins)
            .param("whole_window", self.whole_window)
    }
}

impl StaleArgs {
    fn params(&self) -> StaleParams {
        StaleParams {
            staleness: self.staleness,
        }
    }

    fn describe(&self, t: Table) -> Table {
        let masks: Vec<String> = self.mask.iter().map(|p| p.display().to_string()).collect();
        t.param("staleness", self.staleness).param("masks", masks.join(";"))
    }
}

fn analysis(e: AnalysisError) -> Failure {
    match e {
        AnalysisError::Io { .. } | AnalysisError::Store(_) => runtime(e),
        _ => usage(e),
    }
}

struct Context {
    snapshot: Snapshot,
    range: TimeRange,
    mapping: Option<ElementMapping>,
}

impl Common {
    fn open(&self, require_mapping: bool) -> Outcome<Context> {
        let range = self.sel.range()?;
        let mapping = match &self.mapping {
            Some(p) => Some(ElementMapping::load(p).map_err(usage)?),
            None if require_mapping => return Err(usage(anyhow!("--mapping is required"))),
            None => None,
        };
        if mapping.is_none() && self.sel.elements().is_none() {
            return Err(usage(anyhow!(
                "give --mapping or --elements so that only channels of the right kind are analysed"
            )));
        }
        Ok(Context {
            snapshot: self.sel.snapshot()?,
            range,
            mapping,
        })
    }

    fn header(&self, t: Table, ctx: &Context) -> Table {
        t.param("table", &self.sel.table)
            .param("version", ctx.snapshot.version())
            .param("from", self.sel.from.map(|t| t.to_iso()).unwrap_or_default())
            .param("to", self.sel.to.map(|t| t.to_iso()).unwrap_or_default())
    }
}

fn report_stats(stats: &ScanStats) -> Outcome {
    eprintln!("{}", serde_json::to_string(stats).map_err(runtime)?);
    Ok(())
}

pub fn run(cmd: AnalyzeCommand) -> Outcome {
    match cmd {
        AnalyzeCommand::FailedLinks { common, high, bin } => {
            let ctx = common.open(false)?;
            let (flags, stats) = failed_links(
                &ctx.snapshot,
                ctx.range,
                common.sel.elements(),
                ctx.mapping.as_ref(),
                &high.params(),
                bin,
            )
            .map_err(analysis)?;
            report_stats(&stats)?;
            let t = high.describe(common.header(flags_table(&flags), &ctx)).param("bin", bin);
            emit(&t, common.sel.format())
        }
        AnalyzeCommand::Oscillating { common, osc, bin } => {
            let ctx = common.open(false)?;
            let (flags, stats) = oscillating_links(
                &ctx.snapshot,
                ctx.range,
                common.sel.elements(),
                ctx.mapping.as_ref(),
                &osc.params(),
                bin,
            )
            .map_err(analysis)?;
            report_stats(&stats)?;
            let t = osc.describe(common.header(flags_table(&flags), &ctx)).param("bin", bin);
            emit(&t, common.sel.format())
        }
        AnalyzeCommand::Stale { common, stale } => {
            let ctx = common.open(false)?;
            let masks = read_mask(&stale.mask)?;
            let (flags, stats) = stale_links(
                &ctx.snapshot,
                ctx.range,
                common.sel.elements(),
                ctx.mapping.as_ref(),
                &stale.params(),
                &masks,
            )
            .map_err(analysis)?;
            report_stats(&stats)?;
            let t = stale.describe(common.header(flags_table(&flags), &ctx));
            emit(&t, common.sel.format())
        }
        AnalyzeCommand::HvNominal { common, nominal, runs } => {
            let ctx = common.open(false)?;
            let intervals = read_runs(&runs)?;
            let (counts, stats) = hv_nominal(
                &ctx.snapshot,
                ctx.range,
                common.sel.elements(),
                ctx.mapping.as_ref(),
                nominal,
                &intervals,
            )
            .map_err(analysis)?;
            report_stats(&stats)?;
            let t = common
                .header(daily_counts_table(&counts), &ctx)
                .param("nominal", nominal)
                .param("runs", runs.display());
            emit(&t, common.sel.format())
        }
        AnalyzeCommand::Heatmap {
            common,
            rule,
            high,
            osc,
            stale,
            bin,
        } => {
            let ctx = common.open(true)?;
            let mapping = ctx.mapping.as_ref().expect("mapping required above");
            let elements = common.sel.elements();
            let mut flags: Vec<LinkFlag> = Vec::new();
            let mut stats = ScanStats::default();
            if matches!(rule, RuleArg::All | RuleArg::HighRssi) {
                let (f, s) = failed_links(&ctx.snapshot, ctx.range, elements, Some(mapping), &high.params(), bin)
                    .map_err(analysis)?;
                flags.extend(f);
                stats.merge(&s);
            }
            if matches!(rule, RuleArg::All | RuleArg::Oscillating) {
                let (f, s) = oscillating_links(&ctx.snapshot, ctx.range, elements, Some(mapping), &osc.params(), bin)
                    .map_err(analysis)?;
                flags.extend(f);
                stats.merge(&s);
            }
            if matches!(rule, RuleArg::All | RuleArg::Stale) {
                let masks = read_mask(&stale.mask)?;
                let (f, s) = stale_links(&ctx.snapshot, ctx.range, elements, Some(mapping), &stale.params(), &masks)
                    .map_err(analysis)?;
                flags.extend(f);
                stats.merge(&s);
            }
            report_stats(&stats)?;
            let grids = (1..=WHEELS)
                .map(|w| geometry_grid(&flags, mapping, w))
                .collect::<Result<Vec<_>, _>>()
                .map_err(analysis)?;
            let rule_name = match rule {
                RuleArg::All => "all",
                RuleArg::HighRssi => "high_rssi",
                RuleArg::Oscillating => "oscillating",
                RuleArg::Stale => "stale",
            };
            let mut t = common.header(grid_table(&grids), &ctx).param("rule", rule_name).param("bin", bin);
            t = stale.describe(osc.describe(high.describe(t)));
            emit(&t, common.sel.format())
        }
    }
}
