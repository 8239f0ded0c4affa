//! End-to-end orchestration: ingest -> null model -> scores -> instability
//! -> group tests -> reports, plus the panel export consumed by external
//! econometric tooling.
//!
//! All stage outputs are flat CSV/JSON files in one run directory. A run is
//! deterministic: identical inputs, config and seed give byte-identical
//! outputs, and the manifest lists every file with its content hash.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{
    clustering_scores, drop_isolated_scores, ClusteringScore, IsolatedPolicy, ScoreStatus,
};
use crate::error::{Error, Result};
use crate::graph::{
    build_coverage_table, build_snapshot, coverage_split, ingest_trades_path, read_external_turnover,
    CapacityFilter, SnapshotExport, TradeRecord,
};
use crate::grouptests::{
    assign_terciles, cdf_curves, verdict_table, write_cdf_csv, write_verdicts_csv, CriticalValues,
    Group, GroupAssignment, TestVerdict, MEASURES,
};
use crate::instability::{
    normalize_returns, returns_from_closes, rolling_var_with, var_dynamics, window_report, windows,
    InstabilityConfig, InstabilityReport, ReturnSeries, RiskWindow, VarDynamics, Window,
    WindowKind,
};
use crate::month::{Month, MonthRange};
use crate::nullmodel::{solve_null_model, NullModelExport, SolverConfig};
use crate::stats;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub trades: PathBuf,
    #[serde(default)]
    pub prices: Option<PathBuf>,
    #[serde(default)]
    pub turnover: Option<PathBuf>,
    #[serde(default)]
    pub market: Option<PathBuf>,
    #[serde(default)]
    pub fundamentals: Option<PathBuf>,
    #[serde(default)]
    pub volumes: Option<PathBuf>,

    pub months: MonthRange,
    #[serde(default)]
    pub capacity: CapacityFilter,
    #[serde(default)]
    pub window: WindowKind,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub instability: InstabilityConfig,
    /// Overrides the per-window-kind default critical values when set.
    #[serde(default)]
    pub critical: Option<CriticalValues>,
    #[serde(default = "default_coverage_threshold")]
    pub coverage_threshold: f64,
    #[serde(default)]
    pub isolated_policy: IsolatedPolicy,
    /// Include the dense probability matrix in the model JSON exports.
    #[serde(default)]
    pub export_link_prob: bool,

    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_coverage_threshold() -> f64 {
    0.10
}

impl RunConfig {
    pub fn from_json_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    pub fn critical_values(&self) -> CriticalValues {
        self.critical.unwrap_or(match self.window {
            WindowKind::Annual => CriticalValues::annual(),
            WindowKind::TwoMonth => CriticalValues::two_month(),
        })
    }

    fn validate(&self) -> Result<()> {
        let mut required: Vec<&PathBuf> = vec![&self.trades];
        required.extend([&self.prices, &self.turnover, &self.market, &self.fundamentals, &self.volumes]
            .into_iter()
            .flatten());
        for path in required {
            if !path.exists() {
                return Err(Error::Config(format!("input not found: {}", path.display())));
            }
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold < 1.0) {
            return Err(Error::Config("coverage_threshold outside (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub months_scored: usize,
    pub scores: usize,
    pub reports: usize,
    pub verdicts: usize,
    pub panel_rows: Option<usize>,
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<&'a str>,
    seed: u64,
    config: &'a RunConfig,
    /// Input path -> sha256 of content.
    inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory -> sha256 of content.
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Exclusive ownership of a run directory for the duration of a run.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock> {
        let path = dir.join("run.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory is locked by another process ({})",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Files written so far, tracked for the manifest.
#[derive(Default)]
struct OutputTracker {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputTracker {
    fn create(&mut self, relative: &str) -> Result<std::fs::File> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.files.push(PathBuf::from(relative));
        Ok(file)
    }
}

/// Runs every stage the configured inputs allow and writes the artifact
/// directory. Partial outputs are kept on failure and the manifest records
/// the failed stage.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let _lock = RunLock::acquire(&config.output_dir)?;
    let mut outputs = OutputTracker {
        root: config.output_dir.clone(),
        files: Vec::new(),
    };

    let result = run_stages(config, &mut outputs);
    let (status, failed_stage) = match &result {
        Ok(_) => ("ok", None),
        Err(Error::Stage { stage, .. }) => ("failed", Some(*stage)),
        Err(_) => ("failed", Some("setup")),
    };
    write_manifest(config, &outputs, status, failed_stage)?;
    result
}

fn write_manifest(
    config: &RunConfig,
    outputs: &OutputTracker,
    status: &str,
    failed_stage: Option<&str>,
) -> Result<()> {
    let mut inputs = BTreeMap::new();
    for path in [
        Some(&config.trades),
        config.prices.as_ref(),
        config.turnover.as_ref(),
        config.market.as_ref(),
        config.fundamentals.as_ref(),
        config.volumes.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if path.exists() {
            inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
    }
    let mut output_hashes = BTreeMap::new();
    for rel in &outputs.files {
        let path = outputs.root.join(rel);
        output_hashes.insert(rel.display().to_string(), sha256_file(&path)?);
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        status,
        failed_stage,
        seed: config.seed,
        config,
        inputs,
        outputs: output_hashes,
    };
    let path = outputs.root.join("manifest.json");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

fn run_stages(config: &RunConfig, outputs: &mut OutputTracker) -> Result<RunSummary> {
    // Stage: ingest.
    let ingest = ingest_trades_path(&config.trades, config.capacity).map_err(Error::stage("ingest"))?;
    if !ingest.diagnostics.is_empty() {
        let mut wtr = csv::Writer::from_writer(outputs.create("ingest_diagnostics.csv")?);
        wtr.write_record(["row", "reason"]).map_err(Error::from).map_err(Error::stage("ingest"))?;
        for d in &ingest.diagnostics {
            wtr.write_record([d.row.to_string(), d.reason.clone()])
                .map_err(Error::from)
                .map_err(Error::stage("ingest"))?;
        }
        wtr.flush().map_err(|e| Error::stage("ingest")(Error::io("ingest_diagnostics.csv", e)))?;
    }
    let trades = ingest.records;

    // Stage: score.
    let scored = score_months(config, &trades, outputs).map_err(Error::stage("score"))?;
    let scores = scored.scores;

    // Stage: instability (needs prices).
    let mut reports = Vec::new();
    let mut risk_by_month: BTreeMap<(String, Month), RiskWindow> = BTreeMap::new();
    let mut closes = BTreeMap::new();
    if let Some(prices_path) = &config.prices {
        let stage = instability_stage(config, prices_path, outputs).map_err(Error::stage("instability"))?;
        reports = stage.reports;
        risk_by_month = stage.risk_by_month;
        closes = stage.closes;
    }

    // Stage: compare (needs instability output).
    let mut verdict_count = 0usize;
    if !reports.is_empty() {
        verdict_count =
            compare_stage(config, &scores, &reports, &trades, outputs).map_err(Error::stage("compare"))?;
    }

    // Stage: panel (needs covariates). Risk windows are extended from the
    // window ends to every month in range so the panel is monthly.
    let mut panel_rows = None;
    if config.market.is_some() || config.fundamentals.is_some() || config.volumes.is_some() {
        let covariates = PanelCovariates::load(
            config.market.as_deref(),
            config.fundamentals.as_deref(),
            config.volumes.as_deref(),
        )
        .map_err(Error::stage("panel"))?;
        let series = returns_from_closes(&closes)?;
        let mut panel_months: BTreeSet<Month> = config.months.iter().collect();
        panel_months.insert(config.months.start.add_months(-1));
        for &month in &panel_months {
            for (id, s) in &series {
                if risk_by_month.contains_key(&(id.clone(), month)) {
                    continue;
                }
                if let Some(rw) = rolling_var_with(
                    s,
                    month,
                    config.instability.var_level,
                    config.instability.var_window_months,
                    config.instability.var_method,
                    config.seed,
                )
                .map_err(Error::stage("panel"))?
                {
                    risk_by_month.insert((id.clone(), month), rw);
                }
            }
        }
        let dynamics = all_var_dynamics(&risk_by_month);
        let rows =
            export_panel(&scores, &dynamics, &closes, &series, &covariates).map_err(Error::stage("panel"))?;
        write_panel_csv(outputs.create("panel.csv").map_err(Error::stage("panel"))?, &rows)
            .map_err(Error::stage("panel"))?;
        let summary = describe_panel(&rows);
        write_panel_summary_csv(
            outputs.create("panel_summary.csv").map_err(Error::stage("panel"))?,
            &summary,
        )
        .map_err(Error::stage("panel"))?;
        panel_rows = Some(rows.len());
    }

    Ok(RunSummary {
        months_scored: scored.months_scored,
        scores: scores.len(),
        reports: reports.len(),
        verdicts: verdict_count,
        panel_rows,
        output_dir: config.output_dir.clone(),
    })
}

struct ScoreStage {
    scores: Vec<ClusteringScore>,
    months_scored: usize,
}

fn score_months(
    config: &RunConfig,
    trades: &[TradeRecord],
    outputs: &mut OutputTracker,
) -> Result<ScoreStage> {
    let months: Vec<Month> = config.months.iter().collect();
    let solved: Vec<_> = months
        .par_iter()
        .map(|&month| {
            let snapshot = build_snapshot(trades, month);
            if snapshot.is_empty() {
                return Ok(None);
            }
            let model = solve_null_model(&snapshot, &config.solver)?;
            let scores = clustering_scores(&snapshot, &model)?;
            Ok(Some((month, snapshot, model, scores)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut all_scores = Vec::new();
    let mut months_scored = 0usize;
    for entry in solved.into_iter().flatten() {
        let (month, snapshot, model, scores) = entry;
        months_scored += 1;
        serde_json::to_writer_pretty(
            outputs.create(&format!("snapshots/{month}.json"))?,
            &SnapshotExport::from(&snapshot),
        )?;
        serde_json::to_writer_pretty(
            outputs.create(&format!("nullmodels/{month}.json"))?,
            &NullModelExport::new(&model, config.export_link_prob),
        )?;
        all_scores.extend(scores);
    }
    let kept = drop_isolated_scores(all_scores, config.isolated_policy);
    crate::clustering::write_scores_csv(outputs.create("scores.csv")?, &kept)?;
    Ok(ScoreStage {
        scores: kept,
        months_scored,
    })
}

/// Instability stage output: the per-window reports plus the raw material
/// the panel export reuses.
pub struct InstabilityOutput {
    pub reports: Vec<InstabilityReport>,
    pub risk_by_month: BTreeMap<(String, Month), RiskWindow>,
    pub closes: BTreeMap<String, Vec<(NaiveDate, f64)>>,
}

/// Computes all per-window instability reports from a daily price CSV.
pub fn compute_instability(
    prices_path: &Path,
    months: MonthRange,
    window_kind: WindowKind,
    config: &InstabilityConfig,
    seed: u64,
) -> Result<InstabilityOutput> {
    let file = std::fs::File::open(prices_path).map_err(|e| Error::io(prices_path, e))?;
    let closes = crate::instability::read_prices_csv(file)?;
    let series = returns_from_closes(&closes)?;
    let window_list = windows(months, window_kind);
    let years: BTreeSet<i32> = months.iter().map(|m| m.year()).collect();

    // Normalize each calendar year independently; years with too few
    // observations are skipped (their windows show up as missing cells).
    let normalized: BTreeMap<String, ReturnSeries> = series
        .iter()
        .filter_map(|(id, s)| {
            let mut dates = Vec::new();
            let mut returns = Vec::new();
            for &year in &years {
                if let Ok(part) = normalize_returns(s, year) {
                    dates.extend(part.dates);
                    returns.extend(part.log_returns);
                }
            }
            ReturnSeries::new(id.clone(), dates, returns).ok().map(|ns| (id.clone(), ns))
        })
        .collect();

    let mut reports: Vec<InstabilityReport> = Vec::new();
    for window in &window_list {
        let mut window_reports: Vec<InstabilityReport> = normalized
            .par_iter()
            .map(|(id, ns)| window_report(id, window, ns, config))
            .collect();
        window_reports.retain(|r| {
            r.mad.is_some() || r.hill_pos.is_some() || r.hill_neg.is_some() || r.outliers_pos.is_some()
        });
        reports.extend(window_reports);
    }

    // Rolling VaR windows on raw returns at each window end and the month
    // before; the dynamics join uses the cross-section per month.
    let mut risk_by_month: BTreeMap<(String, Month), RiskWindow> = BTreeMap::new();
    let ends: BTreeSet<Month> = window_list
        .iter()
        .filter_map(|w| w.months.last().copied())
        .flat_map(|m| [m.add_months(-1), m])
        .collect();
    for &month in &ends {
        for (id, s) in &series {
            if let Some(rw) = rolling_var_with(
                s,
                month,
                config.var_level,
                config.var_window_months,
                config.var_method,
                seed,
            )? {
                risk_by_month.insert((id.clone(), month), rw);
            }
        }
    }
    for window in &window_list {
        let Some(&end) = window.months.last() else { continue };
        let current = slice_month(&risk_by_month, end);
        let previous = slice_month(&risk_by_month, end.add_months(-1));
        let dynamics = var_dynamics(&current, &previous);
        for report in reports.iter_mut().filter(|r| r.window == window.label) {
            if let Some(d) = dynamics.get(&report.security_id) {
                report.var_chg = d.var_chg;
                report.var_dev = d.var_dev;
                report.vluck_chg = d.vluck_chg;
            }
        }
    }

    Ok(InstabilityOutput {
        reports,
        risk_by_month,
        closes,
    })
}

fn instability_stage(
    config: &RunConfig,
    prices_path: &Path,
    outputs: &mut OutputTracker,
) -> Result<InstabilityOutput> {
    let stage = compute_instability(
        prices_path,
        config.months,
        config.window,
        &config.instability,
        config.seed,
    )?;
    crate::instability::write_reports_csv(outputs.create("instability.csv")?, &stage.reports)?;
    Ok(stage)
}

fn slice_month(
    risk: &BTreeMap<(String, Month), RiskWindow>,
    month: Month,
) -> BTreeMap<String, RiskWindow> {
    risk.iter()
        .filter(|((_, m), _)| *m == month)
        .map(|((id, _), rw)| (id.clone(), *rw))
        .collect()
}

fn all_var_dynamics(
    risk: &BTreeMap<(String, Month), RiskWindow>,
) -> BTreeMap<(String, Month), VarDynamics> {
    let months: BTreeSet<Month> = risk.keys().map(|(_, m)| *m).collect();
    let mut out = BTreeMap::new();
    for &month in &months {
        let current = slice_month(risk, month);
        let previous = slice_month(risk, month.add_months(-1));
        for (id, d) in var_dynamics(&current, &previous) {
            out.insert((id, month), d);
        }
    }
    out
}

/// Scores of one window's months, for tercile assignment.
fn window_scores(scores: &[ClusteringScore], window: &Window) -> Vec<ClusteringScore> {
    scores
        .iter()
        .filter(|sc| window.months.contains(&sc.month))
        .cloned()
        .collect()
}

fn compare_stage(
    config: &RunConfig,
    scores: &[ClusteringScore],
    reports: &[InstabilityReport],
    trades: &[TradeRecord],
    outputs: &mut OutputTracker,
) -> Result<usize> {
    let critical = config.critical_values();
    let window_list = windows(config.months, config.window);

    let mut verdicts = Vec::new();
    for window in &window_list {
        let in_window = window_scores(scores, window);
        let Ok(assignment) = assign_terciles(&window.label, &in_window) else {
            continue;
        };
        verdicts.extend(verdict_table(reports, &assignment, &critical));
        write_window_cdfs(reports, &assignment, window, outputs)?;
    }
    write_verdicts_csv(outputs.create("verdicts.csv")?, &verdicts)?;
    let mut total = verdicts.len();

    if let Some(turnover_path) = &config.turnover {
        let file = std::fs::File::open(turnover_path).map_err(|e| Error::io(turnover_path, e))?;
        let external = read_external_turnover(file)?;
        let table = build_coverage_table(trades, &external);

        let mut coverage_rows = Vec::new();
        let mut covered_verdicts = Vec::new();
        let mut control_verdicts = Vec::new();
        let years: BTreeSet<i32> = config.months.iter().map(|m| m.year()).collect();
        let mut splits = BTreeMap::new();
        for &year in &years {
            let split = coverage_split(&table, year, config.coverage_threshold)?;
            for sec in &split.covered {
                coverage_rows.push((sec.clone(), year, "covered"));
            }
            for sec in &split.control {
                coverage_rows.push((sec.clone(), year, "control"));
            }
            for (sec, reason) in &split.excluded {
                coverage_rows.push((
                    sec.clone(),
                    year,
                    match reason {
                        crate::graph::ExclusionReason::MissingTotal => "excluded_missing_total",
                        crate::graph::ExclusionReason::Inconsistent => "excluded_inconsistent",
                    },
                ));
            }
            splits.insert(year, split);
        }
        let mut wtr = csv::Writer::from_writer(outputs.create("coverage.csv")?);
        wtr.write_record(["security_id", "year", "group"])?;
        for (sec, year, group) in &coverage_rows {
            wtr.write_record([sec.as_str(), &year.to_string(), group])?;
        }
        wtr.flush().map_err(|e| Error::io("coverage.csv", e))?;

        for window in &window_list {
            let year = window.months.first().map(|m| m.year()).unwrap_or_default();
            let Some(split) = splits.get(&year) else { continue };
            let in_window = window_scores(scores, window);
            for (members, sink) in [
                (&split.covered, &mut covered_verdicts),
                (&split.control, &mut control_verdicts),
            ] {
                let subset: Vec<ClusteringScore> = in_window
                    .iter()
                    .filter(|sc| members.contains(&sc.security_id))
                    .cloned()
                    .collect();
                if let Ok(assignment) = assign_terciles(&window.label, &subset) {
                    sink.extend(verdict_table(reports, &assignment, &critical));
                }
            }
        }
        total += covered_verdicts.len() + control_verdicts.len();
        write_verdicts_csv(outputs.create("verdicts_covered.csv")?, &covered_verdicts)?;
        write_verdicts_csv(outputs.create("verdicts_control.csv")?, &control_verdicts)?;
    }
    Ok(total)
}

fn write_window_cdfs(
    reports: &[InstabilityReport],
    assignment: &GroupAssignment,
    window: &Window,
    outputs: &mut OutputTracker,
) -> Result<()> {
    let by_security: BTreeMap<&str, &InstabilityReport> = reports
        .iter()
        .filter(|r| r.window == assignment.window)
        .map(|r| (r.security_id.as_str(), r))
        .collect();
    for measure in &MEASURES {
        let collect = |group: Group| -> Vec<f64> {
            assignment
                .members(group)
                .iter()
                .filter_map(|id| by_security.get(id).and_then(|r| measure.extract(r)))
                .collect()
        };
        let low = collect(Group::Low);
        let high = collect(Group::High);
        if low.is_empty() || high.is_empty() {
            continue;
        }
        let points = cdf_curves(&low, &high)?;
        write_cdf_csv(
            outputs.create(&format!("cdf/{}_{}.csv", measure.name(), window.label))?,
            &points,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Panel export
// ---------------------------------------------------------------------------

/// One row of the externally consumed panel dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub security_id: String,
    pub month: Month,
    pub clust: f64,
    pub var_chg: Option<f64>,
    pub var_dev: Option<f64>,
    pub vluck_chg: Option<f64>,
    pub mktf: Option<f64>,
    pub vix: Option<f64>,
    pub mom12: Option<f64>,
    pub mom6: Option<f64>,
    pub mcap: Option<f64>,
    pub illiq: Option<f64>,
    pub pb3: Option<f64>,
    /// Trailing dividend yield; unavailable values are set to zero.
    pub dy: f64,
    pub lev3: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Fundamentals {
    pub mcap: Option<f64>,
    pub pb3: Option<f64>,
    pub dy: Option<f64>,
    pub lev3: Option<f64>,
}

#[derive(Debug, Default)]
pub struct PanelCovariates {
    pub market: BTreeMap<Month, (f64, f64)>,
    pub fundamentals: BTreeMap<(String, Month), Fundamentals>,
    pub volumes: BTreeMap<(String, NaiveDate), f64>,
}

impl PanelCovariates {
    pub fn load(
        market: Option<&Path>,
        fundamentals: Option<&Path>,
        volumes: Option<&Path>,
    ) -> Result<PanelCovariates> {
        let mut cov = PanelCovariates::default();
        if let Some(path) = market {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            cov.market = read_market_csv(file)?;
        }
        if let Some(path) = fundamentals {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            cov.fundamentals = read_fundamentals_csv(file)?;
        }
        if let Some(path) = volumes {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            cov.volumes = read_volumes_csv(file)?;
        }
        Ok(cov)
    }
}

pub fn read_market_csv<R: Read>(r: R) -> Result<BTreeMap<Month, (f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        month: String,
        #[serde(rename = "MKTF")]
        mktf: f64,
        #[serde(rename = "VIX")]
        vix: f64,
    }
    let mut out = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(r);
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        let month: Month = row.month.parse()?;
        if out.insert(month, (row.mktf, row.vix)).is_some() {
            return Err(Error::InvalidInput(format!("duplicate market row for {month}")));
        }
    }
    Ok(out)
}

pub fn read_fundamentals_csv<R: Read>(r: R) -> Result<BTreeMap<(String, Month), Fundamentals>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let expected = ["security_id", "month", "MCAP", "PB3", "DY", "LEV3"];
    if headers.iter().ne(expected) {
        return Err(Error::InvalidInput("unexpected fundamentals header".into()));
    }
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let key = (
            row.get(0).unwrap_or_default().to_string(),
            row.get(1).unwrap_or_default().parse::<Month>()?,
        );
        let parse = |i: usize| -> Result<Option<f64>> {
            match row.get(i) {
                None | Some("") => Ok(None),
                Some(s) => s
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::InvalidInput(format!("bad numeric '{s}'"))),
            }
        };
        let value = Fundamentals {
            mcap: parse(2)?,
            pb3: parse(3)?,
            dy: parse(4)?,
            lev3: parse(5)?,
        };
        if out.insert(key.clone(), value).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate fundamentals row for {}/{}",
                key.0, key.1
            )));
        }
    }
    Ok(out)
}

pub fn read_volumes_csv<R: Read>(r: R) -> Result<BTreeMap<(String, NaiveDate), f64>> {
    #[derive(Deserialize)]
    struct Row {
        security_id: String,
        date: String,
        euro_volume: f64,
    }
    let mut out = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(r);
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| Error::InvalidInput(format!("bad date '{}': {e}", row.date)))?;
        out.insert((row.security_id, date), row.euro_volume);
    }
    Ok(out)
}

/// Month-end closes per security per month.
fn month_end_closes(closes: &[(NaiveDate, f64)]) -> BTreeMap<Month, f64> {
    let mut out = BTreeMap::new();
    for (date, close) in closes {
        out.insert(Month::of(*date), *close); // last write per month wins
    }
    out
}

/// Monthly simple returns in percent from month-end closes.
fn monthly_returns(ends: &BTreeMap<Month, f64>) -> BTreeMap<Month, f64> {
    let mut out = BTreeMap::new();
    let mut prev: Option<(Month, f64)> = None;
    for (&month, &close) in ends {
        if let Some((pm, pc)) = prev {
            if pm.next() == month && pc > 0.0 {
                out.insert(month, 100.0 * (close / pc - 1.0));
            }
        }
        prev = Some((month, close));
    }
    out
}

/// Trailing mean over the last `k` months including `month`; None unless
/// all `k` values exist.
fn trailing_mean(returns: &BTreeMap<Month, f64>, month: Month, k: i32) -> Option<f64> {
    let mut sum = 0.0;
    for back in 0..k {
        sum += returns.get(&month.add_months(-back))?;
    }
    Some(sum / k as f64)
}

/// Amihud illiquidity: ln(mean of daily |return|/euro-volume + 1e-6) over
/// the month's days with volume data; None when no day qualifies.
fn illiquidity(series: &ReturnSeries, volumes: &BTreeMap<(String, NaiveDate), f64>, month: Month) -> Option<f64> {
    let mut sum = 0.0;
    let mut days = 0usize;
    for (date, ret) in series.dates.iter().zip(&series.log_returns) {
        if !month.contains(*date) {
            continue;
        }
        let Some(&volume) = volumes.get(&(series.security_id.clone(), *date)) else {
            continue;
        };
        if volume > 0.0 {
            sum += ret.abs() / volume;
            days += 1;
        }
    }
    (days > 0).then(|| (sum / days as f64 + 1e-6).ln())
}

/// Builds the panel: one row per (security, month) carrying an ok clustering
/// score and a computable VaR window, with covariates joined from the
/// user-supplied files. Missing covariates stay blank except DY, which the
/// data convention zeroes.
pub fn export_panel(
    scores: &[ClusteringScore],
    dynamics: &BTreeMap<(String, Month), VarDynamics>,
    closes: &BTreeMap<String, Vec<(NaiveDate, f64)>>,
    series: &BTreeMap<String, ReturnSeries>,
    covariates: &PanelCovariates,
) -> Result<Vec<PanelRow>> {
    let monthly: BTreeMap<&String, BTreeMap<Month, f64>> = closes
        .iter()
        .map(|(id, c)| (id, monthly_returns(&month_end_closes(c))))
        .collect();

    let mut rows = Vec::new();
    for sc in scores {
        if sc.status != ScoreStatus::Ok {
            continue;
        }
        let Some(clust) = sc.score else { continue };
        let key = (sc.security_id.clone(), sc.month);
        let Some(dyn_entry) = dynamics.get(&key) else {
            continue; // no instability window available at this month
        };
        let fundamentals = covariates.fundamentals.get(&key).copied().unwrap_or_default();
        let market = covariates.market.get(&sc.month);
        let returns = monthly.get(&sc.security_id);
        rows.push(PanelRow {
            security_id: sc.security_id.clone(),
            month: sc.month,
            clust,
            var_chg: dyn_entry.var_chg,
            var_dev: dyn_entry.var_dev,
            vluck_chg: dyn_entry.vluck_chg,
            mktf: market.map(|m| m.0),
            vix: market.map(|m| m.1),
            mom12: returns.and_then(|r| trailing_mean(r, sc.month, 12)),
            mom6: returns.and_then(|r| trailing_mean(r, sc.month, 6)),
            mcap: fundamentals.mcap,
            illiq: series
                .get(&sc.security_id)
                .and_then(|s| illiquidity(s, &covariates.volumes, sc.month)),
            pb3: fundamentals.pb3,
            dy: fundamentals.dy.unwrap_or(0.0),
            lev3: fundamentals.lev3,
        });
    }
    rows.sort_by(|a, b| (&a.security_id, a.month).cmp(&(&b.security_id, b.month)));
    Ok(rows)
}

pub const PANEL_HEADER: [&str; 15] = [
    "security_id",
    "month",
    "CLUST",
    "VaR_chg",
    "VaR_dev",
    "VLuck_chg",
    "MKTF",
    "VIX",
    "MOM12",
    "MOM6",
    "MCAP",
    "ILLIQ",
    "PB3",
    "DY",
    "LEV3",
];

pub fn write_panel_csv<W: std::io::Write>(w: W, rows: &[PanelRow]) -> Result<()> {
    fn cell(v: &Option<f64>) -> String {
        v.map(|x| format!("{x}")).unwrap_or_default()
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PANEL_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.security_id.clone(),
            r.month.to_string(),
            format!("{}", r.clust),
            cell(&r.var_chg),
            cell(&r.var_dev),
            cell(&r.vluck_chg),
            cell(&r.mktf),
            cell(&r.vix),
            cell(&r.mom12),
            cell(&r.mom6),
            cell(&r.mcap),
            cell(&r.illiq),
            cell(&r.pb3),
            format!("{}", r.dy),
            cell(&r.lev3),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

/// Summary line of one panel variable.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableSummary {
    pub variable: &'static str,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    /// Share of overall variance explained by variation across securities
    /// (unweighted between-security variance over overall variance).
    pub between_share: f64,
    /// Share from variation within securities over time. The shares need
    /// not sum to one on unbalanced panels.
    pub within_share: f64,
}

/// Descriptive statistics with between/within variation decomposition.
pub fn describe_panel(rows: &[PanelRow]) -> Vec<VariableSummary> {
    let columns: [(&'static str, fn(&PanelRow) -> Option<f64>); 13] = [
        ("CLUST", |r| Some(r.clust)),
        ("VaR_chg", |r| r.var_chg),
        ("VaR_dev", |r| r.var_dev),
        ("VLuck_chg", |r| r.vluck_chg),
        ("MKTF", |r| r.mktf),
        ("VIX", |r| r.vix),
        ("MOM12", |r| r.mom12),
        ("MOM6", |r| r.mom6),
        ("MCAP", |r| r.mcap),
        ("ILLIQ", |r| r.illiq),
        ("PB3", |r| r.pb3),
        ("DY", |r| Some(r.dy)),
        ("LEV3", |r| r.lev3),
    ];

    columns
        .iter()
        .filter_map(|(name, extract)| {
            let mut values = Vec::new();
            let mut by_security: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for row in rows {
                if let Some(v) = extract(row) {
                    values.push(v);
                    by_security.entry(&row.security_id).or_default().push(v);
                }
            }
            if values.len() < 2 {
                return None;
            }
            let overall_var = stats::sample_variance(&values);
            let sec_means: Vec<f64> = by_security.values().map(|vs| stats::mean(vs)).collect();
            let between_var = if sec_means.len() >= 2 {
                stats::sample_variance(&sec_means)
            } else {
                0.0
            };
            let demeaned: Vec<f64> = by_security
                .values()
                .flat_map(|vs| {
                    let m = stats::mean(vs);
                    vs.iter().map(move |v| v - m)
                })
                .collect();
            let within_var = stats::sample_variance(&demeaned);

            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            Some(VariableSummary {
                variable: name,
                n: values.len(),
                mean: stats::mean(&values),
                median: stats::median_sorted(&sorted),
                sd: overall_var.sqrt(),
                min: sorted[0],
                max: *sorted.last().unwrap(),
                between_share: if overall_var > 0.0 { between_var / overall_var } else { 0.0 },
                within_share: if overall_var > 0.0 { within_var / overall_var } else { 0.0 },
            })
        })
        .collect()
}

pub fn write_panel_summary_csv<W: std::io::Write>(w: W, summary: &[VariableSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "variable",
        "n",
        "mean",
        "median",
        "sd",
        "min",
        "max",
        "between_share",
        "within_share",
    ])?;
    for s in summary {
        wtr.write_record([
            s.variable.to_string(),
            s.n.to_string(),
            format!("{}", s.mean),
            format!("{}", s.median),
            format!("{}", s.sd),
            format!("{}", s.min),
            format!("{}", s.max),
            format!("{}", s.between_share),
            format!("{}", s.within_share),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

/// Builds the panel from previously written stage outputs plus the raw
/// covariate files. Risk windows are recomputed per score month.
pub fn panel_from_files(
    scores_path: &Path,
    prices_path: &Path,
    covariates: &PanelCovariates,
    instability: &InstabilityConfig,
    seed: u64,
) -> Result<Vec<PanelRow>> {
    let scores = {
        let file = std::fs::File::open(scores_path).map_err(|e| Error::io(scores_path, e))?;
        crate::clustering::read_scores_csv(file)?
    };
    let file = std::fs::File::open(prices_path).map_err(|e| Error::io(prices_path, e))?;
    let closes = crate::instability::read_prices_csv(file)?;
    let series = returns_from_closes(&closes)?;

    let months: BTreeSet<Month> = scores
        .iter()
        .flat_map(|sc| [sc.month.add_months(-1), sc.month])
        .collect();
    let mut risk_by_month = BTreeMap::new();
    for &month in &months {
        for (id, s) in &series {
            if let Some(rw) = rolling_var_with(
                s,
                month,
                instability.var_level,
                instability.var_window_months,
                instability.var_method,
                seed,
            )? {
                risk_by_month.insert((id.clone(), month), rw);
            }
        }
    }
    let dynamics = all_var_dynamics(&risk_by_month);
    export_panel(&scores, &dynamics, &closes, &series, covariates)
}

// Used by the CLI's compare subcommand, which reads stage outputs back from
// disk instead of recomputing them.
pub fn compare_from_files(
    scores_path: &Path,
    instability_path: &Path,
    trades_path: Option<&Path>,
    turnover_path: Option<&Path>,
    config: &RunConfig,
) -> Result<(Vec<TestVerdict>, Vec<TestVerdict>, Vec<TestVerdict>)> {
    let scores = {
        let file = std::fs::File::open(scores_path).map_err(|e| Error::io(scores_path, e))?;
        crate::clustering::read_scores_csv(file)?
    };
    let reports = {
        let file = std::fs::File::open(instability_path).map_err(|e| Error::io(instability_path, e))?;
        crate::instability::read_reports_csv(file)?
    };
    let critical = config.critical_values();
    let window_list = windows(config.months, config.window);

    let mut all = Vec::new();
    for window in &window_list {
        let in_window = window_scores(&scores, window);
        if let Ok(assignment) = assign_terciles(&window.label, &in_window) {
            all.extend(verdict_table(&reports, &assignment, &critical));
        }
    }

    let mut covered = Vec::new();
    let mut control = Vec::new();
    if let (Some(trades_path), Some(turnover_path)) = (trades_path, turnover_path) {
        let trades = ingest_trades_path(trades_path, config.capacity)?.records;
        let file = std::fs::File::open(turnover_path).map_err(|e| Error::io(turnover_path, e))?;
        let external = read_external_turnover(file)?;
        let table = build_coverage_table(&trades, &external);
        for window in &window_list {
            let year = window.months.first().map(|m| m.year()).unwrap_or_default();
            let split = coverage_split(&table, year, config.coverage_threshold)?;
            let in_window = window_scores(&scores, window);
            for (members, sink) in [(&split.covered, &mut covered), (&split.control, &mut control)] {
                let subset: Vec<ClusteringScore> = in_window
                    .iter()
                    .filter(|sc| members.contains(&sc.security_id))
                    .cloned()
                    .collect();
                if let Ok(assignment) = assign_terciles(&window.label, &subset) {
                    sink.extend(verdict_table(&reports, &assignment, &critical));
                }
            }
        }
    }
    Ok((all, covered, control))
}
