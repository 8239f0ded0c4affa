//! Command-line front end for the market-clustering pipeline.
//!
//! Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tradeclust::error::{Error, Result};
use tradeclust::graph::CapacityFilter;
use tradeclust::instability::WindowKind;
use tradeclust::month::MonthRange;
use tradeclust::pipeline::{self, RunConfig};
use tradeclust::synth;

#[derive(Parser)]
#[command(name = "tradeclust", version, about = "Market clustering vs price instability analytics")]
struct Cli {
    /// JSON run configuration; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and filter a trades CSV, reporting row-level diagnostics.
    Ingest(IngestArgs),
    /// Build monthly snapshots, solve the null model and score securities.
    Score(ScoreArgs),
    /// Compute tail/risk statistics from daily prices.
    Instability(InstabilityArgs),
    /// Compare low vs high clustering groups on written stage outputs.
    Compare(CompareArgs),
    /// Export the panel dataset for external econometric tooling.
    Panel(PanelArgs),
    /// Generate a synthetic scenario directory.
    Synth(SynthArgs),
    /// Run the full pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    trades: PathBuf,
    /// P (principal only, default), A (agent only) or all.
    #[arg(long, default_value = "P")]
    capacity: String,
    /// Write the accepted records back out as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trades: PathBuf,
    /// Inclusive month range, `YYYY-MM:YYYY-MM`.
    #[arg(long)]
    months: String,
    #[arg(long, default_value = "P")]
    capacity: String,
    /// Solver tolerance on degree residuals.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Include dense probability matrices in the model exports.
    #[arg(long)]
    export_link_prob: bool,
    /// Keep score -1 securities flagged instead of dropping them.
    #[arg(long)]
    keep_isolated: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InstabilityArgs {
    #[arg(long)]
    prices: PathBuf,
    #[arg(long)]
    months: String,
    /// annual or two-month.
    #[arg(long, default_value = "annual")]
    window: String,
    /// Restrict window statistics to a rank segment, e.g. `40:60`.
    #[arg(long)]
    segment: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    instability: PathBuf,
    #[arg(long)]
    months: String,
    #[arg(long, default_value = "annual")]
    window: String,
    /// Trades and turnover enable the coverage-group comparison.
    #[arg(long)]
    trades: Option<PathBuf>,
    #[arg(long)]
    turnover: Option<PathBuf>,
    #[arg(long, default_value_t = 0.10)]
    coverage_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PanelArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    prices: PathBuf,
    #[arg(long)]
    market: Option<PathBuf>,
    #[arg(long)]
    fundamentals: Option<PathBuf>,
    #[arg(long)]
    volumes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the descriptive summary next to the panel.
    #[arg(long)]
    describe: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    months: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_months(s: &str) -> Result<MonthRange> {
    s.parse().map_err(|e: Error| Error::Config(e.to_string()))
}

fn parse_capacity(s: &str) -> Result<CapacityFilter> {
    s.parse().map_err(|e: Error| Error::Config(e.to_string()))
}

fn parse_window(s: &str) -> Result<WindowKind> {
    s.parse().map_err(|e: Error| Error::Config(e.to_string()))
}

fn base_config(cli_config: &Option<PathBuf>) -> Result<Option<RunConfig>> {
    cli_config.as_ref().map(|p| RunConfig::from_json_path(p)).transpose()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => {
            let filter = parse_capacity(&args.capacity)?;
            let result = tradeclust::graph::ingest_trades_path(&args.trades, filter)?;
            for d in &result.diagnostics {
                eprintln!("reject {d}");
            }
            println!(
                "rows: {}, accepted: {}, rejected: {}, filtered by capacity: {}",
                result.rows_read,
                result.records.len(),
                result.diagnostics.len(),
                result.filtered_out
            );
            if let Some(out) = args.out {
                let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
                tradeclust::graph::write_trades_csv(file, &result.records)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::Score(args) => {
            let mut config = default_run_config(args.trades.clone(), parse_months(&args.months)?, args.out);
            config.capacity = parse_capacity(&args.capacity)?;
            config.export_link_prob = args.export_link_prob;
            config.seed = args.seed;
            if args.keep_isolated {
                config.isolated_policy = tradeclust::clustering::IsolatedPolicy::Flag;
            }
            if let Some(t) = args.tolerance {
                config.solver.tolerance = t;
            }
            let summary = pipeline::run_pipeline(&config)?;
            println!(
                "scored {} months, {} security-month scores -> {}",
                summary.months_scored,
                summary.scores,
                summary.output_dir.display()
            );
            Ok(())
        }
        Command::Instability(args) => {
            let months = parse_months(&args.months)?;
            let window = parse_window(&args.window)?;
            let base = base_config(&cli.config)?;
            let mut inst_config = base.map(|c| c.instability).unwrap_or_default();
            if let Some(segment) = &args.segment {
                let (lo, hi) = segment
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad segment '{segment}', expected LO:HI")))?;
                let lo: f64 = lo.parse().map_err(|_| Error::Config("bad segment bound".into()))?;
                let hi: f64 = hi.parse().map_err(|_| Error::Config("bad segment bound".into()))?;
                inst_config.segment = Some((lo, hi));
            }
            let out =
                pipeline::compute_instability(&args.prices, months, window, &inst_config, args.seed)?;
            std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
            let path = args.out.join("instability.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            tradeclust::instability::write_reports_csv(file, &out.reports)?;
            println!("{} report rows -> {}", out.reports.len(), path.display());
            Ok(())
        }
        Command::Compare(args) => {
            let mut config = default_run_config(
                args.trades.clone().unwrap_or_else(|| args.scores.clone()),
                parse_months(&args.months)?,
                args.out.clone(),
            );
            config.window = parse_window(&args.window)?;
            config.coverage_threshold = args.coverage_threshold;
            let (all, covered, control) = pipeline::compare_from_files(
                &args.scores,
                &args.instability,
                args.trades.as_deref(),
                args.turnover.as_deref(),
                &config,
            )?;
            std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
            let write = |name: &str, verdicts: &[tradeclust::grouptests::TestVerdict]| -> Result<()> {
                let path = args.out.join(name);
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                tradeclust::grouptests::write_verdicts_csv(file, verdicts)
            };
            write("verdicts.csv", &all)?;
            if args.turnover.is_some() {
                write("verdicts_covered.csv", &covered)?;
                write("verdicts_control.csv", &control)?;
            }
            println!(
                "{} verdicts ({} covered, {} control) -> {}",
                all.len(),
                covered.len(),
                control.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Panel(args) => {
            let covariates = pipeline::PanelCovariates::load(
                args.market.as_deref(),
                args.fundamentals.as_deref(),
                args.volumes.as_deref(),
            )?;
            let base = base_config(&cli.config)?;
            let (inst_config, seed) = base
                .map(|c| (c.instability, c.seed))
                .unwrap_or((Default::default(), 0));
            let rows = pipeline::panel_from_files(
                &args.scores,
                &args.prices,
                &covariates,
                &inst_config,
                seed,
            )?;
            if let Some(parent) = args.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            let file = std::fs::File::create(&args.out).map_err(|e| Error::io(&args.out, e))?;
            pipeline::write_panel_csv(file, &rows)?;
            println!("{} panel rows -> {}", rows.len(), args.out.display());
            if args.describe {
                let summary = pipeline::describe_panel(&rows);
                let path = args.out.with_extension("summary.csv");
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                pipeline::write_panel_summary_csv(file, &summary)?;
                println!("summary -> {}", path.display());
            }
            Ok(())
        }
        Command::Synth(args) => {
            let text = std::fs::read_to_string(&args.spec).map_err(|e| Error::io(&args.spec, e))?;
            let mut spec: synth::ScenarioSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad scenario spec: {e}")))?;
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let artifacts = synth::generate_scenario(&spec)?;
            synth::write_scenario(&args.out, &artifacts)?;
            println!(
                "{} trades, {} price rows, {} securities -> {}",
                artifacts.trades.len(),
                artifacts.prices.len(),
                artifacts.truth.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Run(args) => {
            let config_path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("run requires --config".into()))?;
            let mut config = RunConfig::from_json_path(config_path)?;
            if let Some(out) = args.out {
                config.output_dir = out;
            }
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(months) = args.months {
                config.months = parse_months(&months)?;
            }
            let summary = pipeline::run_pipeline(&config)?;
            println!(
                "ok: {} months scored, {} scores, {} instability rows, {} verdicts{} -> {}",
                summary.months_scored,
                summary.scores,
                summary.reports,
                summary.verdicts,
                summary
                    .panel_rows
                    .map(|n| format!(", {n} panel rows"))
                    .unwrap_or_default(),
                summary.output_dir.display()
            );
            Ok(())
        }
    }
}

fn default_run_config(trades: PathBuf, months: MonthRange, output_dir: PathBuf) -> RunConfig {
    RunConfig {
        trades,
        prices: None,
        turnover: None,
        market: None,
        fundamentals: None,
        volumes: None,
        months,
        capacity: CapacityFilter::default(),
        window: WindowKind::default(),
        solver: Default::default(),
        instability: Default::default(),
        critical: None,
        coverage_threshold: 0.10,
        isolated_policy: Default::default(),
        export_link_prob: false,
        output_dir,
        seed: 0,
    }
}
