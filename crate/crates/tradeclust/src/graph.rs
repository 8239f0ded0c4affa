//! Trade ingestion and monthly bipartite trading networks.
//!
//! A snapshot records, for one calendar month, which firm traded which
//! security at least once (either side). Degrees are the only structure
//! the downstream null model preserves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::Month;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Side> {
        match s {
            "B" => Ok(Side::Buy),
            "S" => Ok(Side::Sell),
            other => Err(Error::InvalidInput(format!("bad side '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capacity {
    Principal,
    Agent,
}

impl FromStr for Capacity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Capacity> {
        match s {
            "P" => Ok(Capacity::Principal),
            "A" => Ok(Capacity::Agent),
            other => Err(Error::InvalidInput(format!("bad capacity '{other}'"))),
        }
    }
}

/// Which reporting capacities to keep at ingestion. The main analysis uses
/// principal trades only; agent trades are retained behind a flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityFilter {
    #[default]
    PrincipalOnly,
    AgentOnly,
    All,
}

impl CapacityFilter {
    pub fn accepts(&self, c: Capacity) -> bool {
        match self {
            CapacityFilter::PrincipalOnly => c == Capacity::Principal,
            CapacityFilter::AgentOnly => c == Capacity::Agent,
            CapacityFilter::All => true,
        }
    }
}

impl FromStr for CapacityFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<CapacityFilter> {
        match s {
            "P" | "principal" => Ok(CapacityFilter::PrincipalOnly),
            "A" | "agent" => Ok(CapacityFilter::AgentOnly),
            "all" => Ok(CapacityFilter::All),
            other => Err(Error::InvalidInput(format!(
                "bad capacity filter '{other}' (expected P, A or all)"
            ))),
        }
    }
}

/// One reported transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub firm_id: String,
    pub security_id: String,
    pub date: NaiveDate,
    pub side: Side,
    pub units: u64,
    pub price: f64,
    pub capacity: Capacity,
}

impl TradeRecord {
    /// Notional value of the trade, used for turnover coverage.
    pub fn turnover(&self) -> f64 {
        self.units as f64 * self.price
    }
}

/// Row-level rejection produced while ingesting a trades file.
#[derive(Debug, Clone)]
pub struct RowDiagnostic {
    /// 1-based data-row number (header excluded).
    pub row: usize,
    pub reason: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.reason)
    }
}

#[derive(Debug)]
pub struct IngestResult {
    pub records: Vec<TradeRecord>,
    pub diagnostics: Vec<RowDiagnostic>,
    /// Rows skipped by the capacity filter (well-formed, just not selected).
    pub filtered_out: usize,
    pub rows_read: usize,
}

#[derive(Debug, Deserialize)]
struct RawTradeRow {
    firm_id: String,
    security_id: String,
    date: String,
    side: String,
    units: i64,
    price: f64,
    capacity: String,
}

fn validate_row(raw: RawTradeRow) -> Result<TradeRecord> {
    if raw.firm_id.is_empty() {
        return Err(Error::InvalidInput("empty firm_id".into()));
    }
    if raw.security_id.is_empty() {
        return Err(Error::InvalidInput("empty security_id".into()));
    }
    let date = NaiveDate::parse_from_str(&raw.date, "%Y-%m-%d")
        .map_err(|e| Error::InvalidInput(format!("bad date '{}': {e}", raw.date)))?;
    if raw.units < 0 {
        return Err(Error::InvalidInput(format!("negative units {}", raw.units)));
    }
    if !(raw.price >= 0.0) || !raw.price.is_finite() {
        return Err(Error::InvalidInput(format!("bad price {}", raw.price)));
    }
    Ok(TradeRecord {
        firm_id: raw.firm_id,
        security_id: raw.security_id,
        date,
        side: raw.side.parse()?,
        units: raw.units as u64,
        price: raw.price,
        capacity: raw.capacity.parse()?,
    })
}

/// Reads trade records from CSV (`firm_id,security_id,date,side,units,price,capacity`).
///
/// Malformed rows are rejected with row-level diagnostics. If more than 10%
/// of the data rows are malformed (and at least 6 rows are), the whole file
/// is rejected: that pattern indicates a schema mismatch rather than stray
/// bad records.
pub fn ingest_trades<R: Read>(reader: R, filter: CapacityFilter) -> Result<IngestResult> {
    let mut csv_reader = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut filtered_out = 0usize;
    let mut rows_read = 0usize;

    for (i, row) in csv_reader.deserialize::<RawTradeRow>().enumerate() {
        rows_read += 1;
        let parsed = row
            .map_err(Error::from)
            .and_then(validate_row);
        match parsed {
            Ok(record) => {
                if filter.accepts(record.capacity) {
                    records.push(record);
                } else {
                    filtered_out += 1;
                }
            }
            Err(e) => diagnostics.push(RowDiagnostic {
                row: i + 1,
                reason: e.to_string(),
            }),
        }
    }

    let limit = (rows_read / 10).max(5);
    if diagnostics.len() > limit {
        return Err(Error::TooManyBadRows {
            rejected: diagnostics.len(),
            total: rows_read,
            limit,
            first: diagnostics[0].to_string(),
        });
    }

    Ok(IngestResult {
        records,
        diagnostics,
        filtered_out,
        rows_read,
    })
}

pub fn ingest_trades_path(path: &Path, filter: CapacityFilter) -> Result<IngestResult> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_trades(file, filter)
}

pub fn write_trades_csv<W: std::io::Write>(w: W, trades: &[TradeRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["firm_id", "security_id", "date", "side", "units", "price", "capacity"])?;
    for t in trades {
        wtr.write_record([
            t.firm_id.as_str(),
            t.security_id.as_str(),
            &t.date.format("%Y-%m-%d").to_string(),
            match t.side {
                Side::Buy => "B",
                Side::Sell => "S",
            },
            &t.units.to_string(),
            &format!("{}", t.price),
            match t.capacity {
                Capacity::Principal => "P",
                Capacity::Agent => "A",
            },
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

/// Binary bipartite trading network for one month.
///
/// `adjacency` is security-major: entry `(s, f)` is 1 iff firm `f` traded
/// security `s` at least once during the month. Nodes with degree zero are
/// never present. Node lists are sorted, so snapshots are a pure function
/// of the trade set.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteSnapshot {
    month: Month,
    firms: Vec<String>,
    securities: Vec<String>,
    adjacency: Vec<bool>,
    firm_degrees: Vec<u32>,
    security_degrees: Vec<u32>,
}

impl BipartiteSnapshot {
    /// Builds a snapshot from explicit node lists and (security, firm) index
    /// edges. Zero-degree nodes are dropped; duplicate edges collapse.
    pub fn from_edges(
        month: Month,
        securities: Vec<String>,
        firms: Vec<String>,
        edges: &[(usize, usize)],
    ) -> Result<BipartiteSnapshot> {
        let n_s = securities.len();
        let n_f = firms.len();
        let mut adjacency = vec![false; n_s * n_f];
        for &(s, f) in edges {
            if s >= n_s || f >= n_f {
                return Err(Error::InvalidInput(format!(
                    "edge ({s},{f}) out of bounds for {n_s}x{n_f}"
                )));
            }
            adjacency[s * n_f + f] = true;
        }

        // Drop zero-degree nodes, preserving order.
        let keep_s: Vec<usize> = (0..n_s)
            .filter(|&s| (0..n_f).any(|f| adjacency[s * n_f + f]))
            .collect();
        let keep_f: Vec<usize> = (0..n_f)
            .filter(|&f| (0..n_s).any(|s| adjacency[s * n_f + f]))
            .collect();

        let mut compact = vec![false; keep_s.len() * keep_f.len()];
        for (si, &s) in keep_s.iter().enumerate() {
            for (fi, &f) in keep_f.iter().enumerate() {
                compact[si * keep_f.len() + fi] = adjacency[s * n_f + f];
            }
        }

        let securities: Vec<String> = keep_s.iter().map(|&s| securities[s].clone()).collect();
        let firms: Vec<String> = keep_f.iter().map(|&f| firms[f].clone()).collect();
        Ok(Self::from_parts(month, securities, firms, compact))
    }

    fn from_parts(
        month: Month,
        securities: Vec<String>,
        firms: Vec<String>,
        adjacency: Vec<bool>,
    ) -> BipartiteSnapshot {
        let n_f = firms.len();
        let n_s = securities.len();
        debug_assert_eq!(adjacency.len(), n_f * n_s);
        let security_degrees: Vec<u32> = (0..n_s)
            .map(|s| (0..n_f).filter(|&f| adjacency[s * n_f + f]).count() as u32)
            .collect();
        let firm_degrees: Vec<u32> = (0..n_f)
            .map(|f| (0..n_s).filter(|&s| adjacency[s * n_f + f]).count() as u32)
            .collect();
        BipartiteSnapshot {
            month,
            firms,
            securities,
            adjacency,
            firm_degrees,
            security_degrees,
        }
    }

    pub fn month(&self) -> Month {
        self.month
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn n_securities(&self) -> usize {
        self.securities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.firms.is_empty()
    }

    pub fn firms(&self) -> &[String] {
        &self.firms
    }

    pub fn securities(&self) -> &[String] {
        &self.securities
    }

    pub fn firm_degrees(&self) -> &[u32] {
        &self.firm_degrees
    }

    pub fn security_degrees(&self) -> &[u32] {
        &self.security_degrees
    }

    pub fn edge(&self, security: usize, firm: usize) -> bool {
        self.adjacency[security * self.firms.len() + firm]
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n_f = self.firms.len();
        (0..self.securities.len())
            .flat_map(|s| (0..n_f).filter(move |&f| self.adjacency[s * n_f + f]).map(move |f| (s, f)))
            .collect()
    }

    /// Per-firm bitsets over securities, used for fast pair overlap counts.
    pub fn firm_security_bitsets(&self) -> Vec<Vec<u64>> {
        let n_f = self.firms.len();
        let n_s = self.securities.len();
        let words = n_s.div_ceil(64);
        let mut sets = vec![vec![0u64; words]; n_f];
        for s in 0..n_s {
            for f in 0..n_f {
                if self.adjacency[s * n_f + f] {
                    sets[f][s / 64] |= 1 << (s % 64);
                }
            }
        }
        sets
    }
}

/// Aggregates trades of one calendar month into a binary bipartite snapshot.
///
/// Only in-month rows contribute. Both buy and sell trades create edges; the
/// graph does not distinguish sides. An empty month yields an empty snapshot.
pub fn build_snapshot(trades: &[TradeRecord], month: Month) -> BipartiteSnapshot {
    let mut firms = BTreeSet::new();
    let mut securities = BTreeSet::new();
    for t in trades {
        if month.contains(t.date) {
            firms.insert(t.firm_id.as_str());
            securities.insert(t.security_id.as_str());
        }
    }
    let firms: Vec<String> = firms.into_iter().map(str::to_owned).collect();
    let securities: Vec<String> = securities.into_iter().map(str::to_owned).collect();
    let f_idx: BTreeMap<&str, usize> = firms.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let s_idx: BTreeMap<&str, usize> =
        securities.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let n_f = firms.len();
    let mut adjacency = vec![false; n_f * securities.len()];
    for t in trades {
        if month.contains(t.date) {
            let s = s_idx[t.security_id.as_str()];
            let f = f_idx[t.firm_id.as_str()];
            adjacency[s * n_f + f] = true;
        }
    }
    BipartiteSnapshot::from_parts(month, securities, firms, adjacency)
}

/// JSON export form of a snapshot: node lists, (security, firm) edge list,
/// degree arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct SnapshotExport {
    pub month: Month,
    pub firms: Vec<String>,
    pub securities: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub firm_degrees: Vec<u32>,
    pub security_degrees: Vec<u32>,
}

impl From<&BipartiteSnapshot> for SnapshotExport {
    fn from(s: &BipartiteSnapshot) -> SnapshotExport {
        SnapshotExport {
            month: s.month,
            firms: s.firms.clone(),
            securities: s.securities.clone(),
            edges: s.edges(),
            firm_degrees: s.firm_degrees.clone(),
            security_degrees: s.security_degrees.clone(),
        }
    }
}

impl TryFrom<SnapshotExport> for BipartiteSnapshot {
    type Error = Error;
    fn try_from(e: SnapshotExport) -> Result<BipartiteSnapshot> {
        BipartiteSnapshot::from_edges(e.month, e.securities, e.firms, &e.edges)
    }
}

/// Per (security, year) turnover coverage against externally reported totals.
#[derive(Debug, Clone, Default)]
pub struct CoverageTable {
    /// Keyed by (security_id, year).
    pub entries: BTreeMap<(String, i32), CoverageEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct CoverageEntry {
    pub covered_turnover: f64,
    pub total_turnover: Option<f64>,
}

impl CoverageEntry {
    pub fn coverage_ratio(&self) -> Option<f64> {
        match self.total_turnover {
            Some(total) if total > 0.0 => Some(self.covered_turnover / total),
            _ => None,
        }
    }
}

/// External per-security yearly turnover totals
/// (CSV `security_id,year,total_turnover`).
pub type ExternalTurnover = BTreeMap<(String, i32), f64>;

pub fn read_external_turnover<R: Read>(reader: R) -> Result<ExternalTurnover> {
    #[derive(Deserialize)]
    struct Row {
        security_id: String,
        year: i32,
        total_turnover: f64,
    }
    let mut out = ExternalTurnover::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        if !(row.total_turnover > 0.0) {
            return Err(Error::InvalidInput(format!(
                "non-positive total_turnover for {}/{}",
                row.security_id, row.year
            )));
        }
        out.insert((row.security_id, row.year), row.total_turnover);
    }
    Ok(out)
}

pub fn build_coverage_table(trades: &[TradeRecord], external: &ExternalTurnover) -> CoverageTable {
    let mut entries: BTreeMap<(String, i32), CoverageEntry> = BTreeMap::new();
    for t in trades {
        let key = (t.security_id.clone(), chrono::Datelike::year(&t.date));
        let entry = entries.entry(key).or_insert(CoverageEntry {
            covered_turnover: 0.0,
            total_turnover: None,
        });
        entry.covered_turnover += t.turnover();
    }
    for (key, entry) in entries.iter_mut() {
        entry.total_turnover = external.get(key).copied();
    }
    // Securities with external totals but no in-sample trades have zero coverage.
    for (key, &total) in external {
        entries.entry(key.clone()).or_insert(CoverageEntry {
            covered_turnover: 0.0,
            total_turnover: Some(total),
        });
    }
    CoverageTable { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// No external total for that year.
    MissingTotal,
    /// Covered turnover exceeds the reported total.
    Inconsistent,
}

/// Year split of securities by turnover coverage.
#[derive(Debug, Clone, Default)]
pub struct CoverageSplit {
    pub year: i32,
    /// Coverage ratio at or above the threshold.
    pub covered: BTreeSet<String>,
    /// Coverage ratio strictly below the threshold: mainly traded elsewhere.
    pub control: BTreeSet<String>,
    pub excluded: BTreeMap<String, ExclusionReason>,
}

/// Partitions the securities seen in `year` into covered vs control by
/// turnover coverage. The control group holds securities whose coverage
/// ratio is strictly below `threshold` (exactly at the threshold counts as
/// covered). Securities with missing or inconsistent totals are excluded
/// and reported.
pub fn coverage_split(table: &CoverageTable, year: i32, threshold: f64) -> Result<CoverageSplit> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "coverage threshold {threshold} outside (0,1)"
        )));
    }
    let mut split = CoverageSplit {
        year,
        ..CoverageSplit::default()
    };
    for ((security, y), entry) in &table.entries {
        if *y != year {
            continue;
        }
        match entry.total_turnover {
            None => {
                split.excluded.insert(security.clone(), ExclusionReason::MissingTotal);
            }
            Some(total) if entry.covered_turnover > total => {
                split.excluded.insert(security.clone(), ExclusionReason::Inconsistent);
            }
            Some(total) => {
                if entry.covered_turnover / total < threshold {
                    split.control.insert(security.clone());
                } else {
                    split.covered.insert(security.clone());
                }
            }
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trade(firm: &str, sec: &str, date: &str) -> TradeRecord {
        TradeRecord {
            firm_id: firm.into(),
            security_id: sec.into(),
            date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            side: Side::Buy,
            units: 10,
            price: 5.0,
            capacity: Capacity::Principal,
        }
    }

    #[test]
    fn ingest_empty_file_ok() {
        let csv = "firm_id,security_id,date,side,units,price,capacity\n";
        let out = ingest_trades(csv.as_bytes(), CapacityFilter::PrincipalOnly).unwrap();
        assert!(out.records.is_empty());
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn ingest_rejects_bad_rows_with_diagnostics() {
        let csv = "firm_id,security_id,date,side,units,price,capacity\n\
                   f1,s1,2009-01-05,B,10,5.0,P\n\
                   f2,s1,2009-01-06,S,-3,5.0,P\n\
                   f3,s2,2009-01-07,B,2,1.5,P\n\
                   f4,s2,2009-01-08,S,1,2.0,P\n";
        let out = ingest_trades(csv.as_bytes(), CapacityFilter::PrincipalOnly).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(out.diagnostics[0].row, 2);
        assert!(out.diagnostics[0].reason.contains("negative units"));
    }

    #[test]
    fn ingest_aborts_on_schema_mismatch() {
        let mut csv = String::from("firm_id,security_id,date,side,units,price,capacity\n");
        for i in 0..100 {
            if i < 80 {
                csv.push_str(&format!("f{i},s1,bad-date,B,1,1.0,P\n"));
            } else {
                csv.push_str(&format!("f{i},s1,2009-01-05,B,1,1.0,P\n"));
            }
        }
        let err = ingest_trades(csv.as_bytes(), CapacityFilter::All).unwrap_err();
        assert!(matches!(err, Error::TooManyBadRows { rejected: 80, .. }));
    }

    #[test]
    fn capacity_filter_applies() {
        let csv = "firm_id,security_id,date,side,units,price,capacity\n\
                   f1,s1,2009-01-05,B,10,5.0,P\n\
                   f2,s1,2009-01-06,S,3,5.0,A\n";
        let out = ingest_trades(csv.as_bytes(), CapacityFilter::PrincipalOnly).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.filtered_out, 1);
        let all = ingest_trades(csv.as_bytes(), CapacityFilter::All).unwrap();
        assert_eq!(all.records.len(), 2);
    }

    #[test]
    fn single_trade_snapshot() {
        let trades = vec![trade("f1", "s1", "2009-01-05")];
        let snap = build_snapshot(&trades, "2009-01".parse().unwrap());
        assert_eq!(snap.n_firms(), 1);
        assert_eq!(snap.n_securities(), 1);
        assert_eq!(snap.firm_degrees(), &[1]);
        assert_eq!(snap.security_degrees(), &[1]);
        assert!(snap.edge(0, 0));
    }

    #[test]
    fn binarization_is_idempotent() {
        let mut trades = vec![
            trade("f1", "s1", "2009-01-05"),
            trade("f1", "s2", "2009-01-09"),
            trade("f2", "s1", "2009-01-11"),
        ];
        let once = build_snapshot(&trades, "2009-01".parse().unwrap());
        let mut doubled = trades.clone();
        doubled.extend(trades.drain(..));
        // Repeating the same pair five more times changes nothing either.
        for _ in 0..5 {
            doubled.push(trade("f1", "s1", "2009-01-20"));
        }
        let twice = build_snapshot(&doubled, "2009-01".parse().unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn snapshot_uses_only_in_month_rows() {
        let trades = vec![
            trade("f1", "s1", "2009-01-05"),
            trade("f2", "s2", "2009-02-05"),
            trade("f3", "s1", "2009-01-28"),
        ];
        let month: Month = "2009-01".parse().unwrap();
        let snap = build_snapshot(&trades, month);
        // Hand-filtered oracle: build from the pre-filtered subset instead.
        let filtered: Vec<TradeRecord> = trades
            .iter()
            .filter(|t| month.contains(t.date))
            .cloned()
            .collect();
        assert_eq!(snap, build_snapshot(&filtered, month));
        assert_eq!(snap.n_firms(), 2);
        assert!(!snap.firms().contains(&"f2".to_string()));
    }

    #[test]
    fn empty_month_gives_empty_snapshot() {
        let trades = vec![trade("f1", "s1", "2009-01-05")];
        let snap = build_snapshot(&trades, "2010-06".parse().unwrap());
        assert!(snap.is_empty());
        assert_eq!(snap.n_securities(), 0);
    }

    #[test]
    fn degree_sums_match_edge_count() {
        let trades = vec![
            trade("f1", "s1", "2009-01-05"),
            trade("f1", "s2", "2009-01-05"),
            trade("f2", "s2", "2009-01-06"),
            trade("f3", "s3", "2009-01-07"),
        ];
        let snap = build_snapshot(&trades, "2009-01".parse().unwrap());
        let df: u32 = snap.firm_degrees().iter().sum();
        let ds: u32 = snap.security_degrees().iter().sum();
        assert_eq!(df, ds);
        assert_eq!(df as usize, snap.n_edges());
    }

    #[test]
    fn snapshot_json_round_trips() {
        let trades = vec![
            trade("f1", "s1", "2009-01-05"),
            trade("f1", "s2", "2009-01-05"),
            trade("f2", "s2", "2009-01-06"),
        ];
        let snap = build_snapshot(&trades, "2009-01".parse().unwrap());
        let json = serde_json::to_string(&SnapshotExport::from(&snap)).unwrap();
        let parsed: SnapshotExport = serde_json::from_str(&json).unwrap();
        let back = BipartiteSnapshot::try_from(parsed).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn coverage_split_threshold_is_strict() {
        let mut external = ExternalTurnover::new();
        external.insert(("low".into(), 2009), 1000.0);
        external.insert(("edge".into(), 2009), 1000.0);
        external.insert(("high".into(), 2009), 1000.0);
        let trades = vec![
            TradeRecord { units: 10, price: 5.0, ..trade("f1", "low", "2009-03-02") },   // 50 => 5%
            TradeRecord { units: 10, price: 10.0, ..trade("f1", "edge", "2009-03-02") }, // 100 => 10%
            TradeRecord { units: 100, price: 5.0, ..trade("f1", "high", "2009-03-02") }, // 500 => 50%
        ];
        let table = build_coverage_table(&trades, &external);
        let split = coverage_split(&table, 2009, 0.10).unwrap();
        assert!(split.control.contains("low"));
        assert!(split.covered.contains("edge"), "coverage of exactly 10% is covered");
        assert!(split.covered.contains("high"));
    }

    #[test]
    fn coverage_split_reports_missing_and_inconsistent() {
        let mut external = ExternalTurnover::new();
        external.insert(("tiny".into(), 2009), 10.0);
        let trades = vec![
            TradeRecord { units: 100, price: 5.0, ..trade("f1", "tiny", "2009-03-02") }, // 500 > 10
            trade("f1", "orphan", "2009-03-02"),
        ];
        let table = build_coverage_table(&trades, &external);
        let split = coverage_split(&table, 2009, 0.10).unwrap();
        assert_eq!(split.excluded["tiny"], ExclusionReason::Inconsistent);
        assert_eq!(split.excluded["orphan"], ExclusionReason::MissingTotal);
        assert!(split.covered.is_empty() && split.control.is_empty());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::SeedableRng;

        fn arb_trades() -> impl Strategy<Value = Vec<TradeRecord>> {
            proptest::collection::vec(
                (0..6u8, 0..8u8, 1..28u32).prop_map(|(f, s, day)| {
                    trade(
                        &format!("f{f}"),
                        &format!("s{s}"),
                        &format!("2009-01-{day:02}"),
                    )
                }),
                1..40,
            )
        }

        proptest! {
            #[test]
            fn snapshot_is_permutation_invariant(trades in arb_trades(), seed in 0..u64::MAX) {
                use rand::seq::SliceRandom;
                let month: Month = "2009-01".parse().unwrap();
                let base = build_snapshot(&trades, month);
                let mut shuffled = trades.clone();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                shuffled.shuffle(&mut rng);
                prop_assert_eq!(&base, &build_snapshot(&shuffled, month));

                // Duplicating every trade changes nothing either.
                let mut doubled = trades.clone();
                doubled.extend(trades.iter().cloned());
                prop_assert_eq!(&base, &build_snapshot(&doubled, month));
            }

            #[test]
            fn degree_sums_always_match(trades in arb_trades()) {
                let snap = build_snapshot(&trades, "2009-01".parse().unwrap());
                let df: u32 = snap.firm_degrees().iter().sum();
                let ds: u32 = snap.security_degrees().iter().sum();
                prop_assert_eq!(df, ds);
                prop_assert_eq!(df as usize, snap.n_edges());
            }
        }
    }

    #[test]
    fn coverage_split_partitions() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut external = ExternalTurnover::new();
        let mut trades = Vec::new();
        let mut expect_control = BTreeSet::new();
        let mut expect_covered = BTreeSet::new();
        for i in 0..20 {
            let sec = format!("s{i:02}");
            let ratio: f64 = rng.random_range(0.0..0.5);
            external.insert((sec.clone(), 2009), 1000.0);
            trades.push(TradeRecord {
                units: 1,
                price: ratio * 1000.0,
                ..trade("f1", &sec, "2009-05-07")
            });
            if ratio < 0.10 {
                expect_control.insert(sec);
            } else {
                expect_covered.insert(sec);
            }
        }
        let split = coverage_split(&build_coverage_table(&trades, &external), 2009, 0.10).unwrap();
        assert_eq!(split.control, expect_control);
        assert_eq!(split.covered, expect_covered);
        assert!(split.excluded.is_empty());
    }
}
