//! Tercile grouping by clustering score and nonparametric distribution
//! comparisons between the low and high groups.
//!
//! Kolmogorov-Smirnov probes any CDF discrepancy (first-order dominance),
//! Mann-Whitney-Wilcoxon the location shift (second-order), and a binned
//! chi-squared homogeneity test replaces KS for tied count data. Verdicts
//! are signed the way the result tables read: '+' means the high-clustering
//! group's distribution exceeds the low one.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusteringScore, ScoreStatus};
use crate::error::{Error, Result};
use crate::instability::InstabilityReport;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Low,
    Middle,
    High,
}

/// Tercile assignment for one comparison window.
#[derive(Debug, Clone)]
pub struct GroupAssignment {
    pub window: String,
    pub groups: BTreeMap<String, Group>,
    /// (highest low-group score, lowest high-group score).
    pub boundaries: (f64, f64),
}

impl GroupAssignment {
    pub fn members(&self, group: Group) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, g)| **g == group)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Ranks securities by score and splits off the bottom and top thirds.
///
/// Scores spanning several months are averaged per security first; only
/// status-ok scores participate. Ranking is stable with ties broken by
/// security id, so the assignment is a pure function of the score multiset.
/// The middle third is kept in the assignment but ignored by comparisons.
pub fn assign_terciles(window: &str, scores: &[ClusteringScore]) -> Result<GroupAssignment> {
    let mut per_security: BTreeMap<&str, (f64, u32)> = BTreeMap::new();
    for sc in scores {
        if sc.status != ScoreStatus::Ok {
            continue;
        }
        let Some(score) = sc.score else { continue };
        let entry = per_security.entry(&sc.security_id).or_insert((0.0, 0));
        entry.0 += score;
        entry.1 += 1;
    }
    let mut ranked: Vec<(String, f64)> = per_security
        .into_iter()
        .map(|(id, (sum, n))| (id.to_string(), sum / n as f64))
        .collect();
    if ranked.len() < 9 {
        return Err(Error::Insufficient {
            what: format!("securities with ok scores in window {window}"),
            needed: 9,
            got: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));

    let n = ranked.len();
    let third = n / 3;
    let mut groups = BTreeMap::new();
    for (i, (id, _)) in ranked.iter().enumerate() {
        let group = if i < third {
            Group::Low
        } else if i >= n - third {
            Group::High
        } else {
            Group::Middle
        };
        groups.insert(id.clone(), group);
    }
    Ok(GroupAssignment {
        window: window.to_string(),
        groups,
        boundaries: (ranked[third - 1].1, ranked[n - third].1),
    })
}

/// Which side dominates, from the perspective of the second sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleOrder {
    /// The second sample tends to exceed the first.
    SecondLarger,
    /// The first sample tends to exceed the second.
    FirstLarger,
    Even,
}

#[derive(Debug, Clone, Copy)]
pub struct KsOutcome {
    /// sup |F_a - F_b|
    pub statistic: f64,
    /// Asymptotic Kolmogorov p-value with the effective-n correction.
    pub p_value: f64,
    /// Sign of F_a - F_b at the supremum: F_a above F_b means the second
    /// sample is stochastically larger there.
    pub order: SampleOrder,
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsOutcome> {
    require_sample("ks", a, 5)?;
    require_sample("ks", b, 5)?;
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|x, y| x.total_cmp(y));
    xb.sort_by(|x, y| x.total_cmp(y));

    let na = xa.len() as f64;
    let nb = xb.len() as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    let mut signed_at_sup = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        let diff = i as f64 / na - j as f64 / nb;
        if diff.abs() > d {
            d = diff.abs();
            signed_at_sup = diff;
        }
    }

    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let p_value = stats::kolmogorov_sf(lambda);
    let order = if d == 0.0 {
        SampleOrder::Even
    } else if signed_at_sup > 0.0 {
        // F_a above F_b: a's mass sits lower, so b is larger.
        SampleOrder::SecondLarger
    } else {
        SampleOrder::FirstLarger
    };
    Ok(KsOutcome {
        statistic: d,
        p_value,
        order,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MwwOutcome {
    /// U statistic of the second sample.
    pub statistic: f64,
    /// Two-sided normal-approximation p with tie correction and continuity
    /// correction.
    pub p_value: f64,
    /// Sign of the second sample's rank sum against its null mean.
    pub order: SampleOrder,
}

/// Two-sample Mann-Whitney-Wilcoxon rank test.
pub fn mww_test(a: &[f64], b: &[f64]) -> Result<MwwOutcome> {
    require_sample("mww", a, 5)?;
    require_sample("mww", b, 5)?;
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let n = na + nb;

    // Midranks over the pooled sample.
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, false))
        .chain(b.iter().map(|&x| (x, true)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_b = 0.0f64;
    let mut tie_term = 0.0f64;
    let mut i = 0usize;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i) as f64;
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &pooled[i..j] {
            if item.1 {
                rank_sum_b += midrank;
            }
        }
        tie_term += t * t * t - t;
        i = j;
    }

    let u_b = rank_sum_b - nb * (nb + 1.0) / 2.0;
    let mean = na * nb / 2.0;
    let variance = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if variance <= 0.0 {
        // All observations tied: no evidence either way.
        return Ok(MwwOutcome {
            statistic: u_b,
            p_value: 1.0,
            order: SampleOrder::Even,
        });
    }
    let continuity = 0.5 * (u_b - mean).signum();
    let z = (u_b - mean - continuity) / variance.sqrt();
    let p_value = (2.0 * (1.0 - stats::standard_normal_cdf(z.abs()))).clamp(0.0, 1.0);
    let order = if u_b > mean {
        SampleOrder::SecondLarger
    } else if u_b < mean {
        SampleOrder::FirstLarger
    } else {
        SampleOrder::Even
    };
    Ok(MwwOutcome {
        statistic: u_b,
        p_value,
        order,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Chi2Outcome {
    pub statistic: f64,
    pub p_value: f64,
    /// Bins remaining after merging.
    pub bins: usize,
    /// True when merging collapsed everything into one bin; the test then
    /// carries no information and the verdict defaults to '='.
    pub degenerate: bool,
}

/// Chi-squared homogeneity test over small nonnegative integer outcomes
/// (outlier counts). Adjacent bins are merged from the right (highest
/// counts first) until every expected cell reaches five.
pub fn chi2_binned(a: &[u32], b: &[u32]) -> Result<Chi2Outcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Insufficient {
            what: "chi2 samples".into(),
            needed: 1,
            got: 0,
        });
    }
    let max = a.iter().chain(b).copied().max().unwrap_or(0) as usize;
    let mut counts_a = vec![0.0f64; max + 1];
    let mut counts_b = vec![0.0f64; max + 1];
    for &x in a {
        counts_a[x as usize] += 1.0;
    }
    for &x in b {
        counts_b[x as usize] += 1.0;
    }

    let na: f64 = counts_a.iter().sum();
    let nb: f64 = counts_b.iter().sum();
    let total = na + nb;
    let expected_ok = |ca: &[f64], cb: &[f64]| {
        ca.iter().zip(cb).all(|(x, y)| {
            let col = x + y;
            col * na / total >= 5.0 && col * nb / total >= 5.0
        })
    };
    while counts_a.len() > 1 && !expected_ok(&counts_a, &counts_b) {
        let k = counts_a.len();
        counts_a[k - 2] += counts_a[k - 1];
        counts_b[k - 2] += counts_b[k - 1];
        counts_a.pop();
        counts_b.pop();
    }
    if counts_a.len() < 2 {
        return Ok(Chi2Outcome {
            statistic: 0.0,
            p_value: 1.0,
            bins: counts_a.len(),
            degenerate: true,
        });
    }

    let mut statistic = 0.0f64;
    for (x, y) in counts_a.iter().zip(&counts_b) {
        let col = x + y;
        let ea = col * na / total;
        let eb = col * nb / total;
        statistic += (x - ea) * (x - ea) / ea + (y - eb) * (y - eb) / eb;
    }
    let dof = (counts_a.len() - 1) as f64;
    Ok(Chi2Outcome {
        statistic,
        p_value: stats::chi_squared_sf(statistic, dof),
        bins: counts_a.len(),
        degenerate: false,
    })
}

fn require_sample(test: &str, xs: &[f64], needed: usize) -> Result<()> {
    if xs.len() < needed {
        return Err(Error::Insufficient {
            what: format!("{test} sample"),
            needed,
            got: xs.len(),
        });
    }
    Ok(())
}

/// Signed verdict in the result-table notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
    Equal,
    NotEqual,
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
            Sign::Equal => "=",
            Sign::NotEqual => "≠",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Sign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Sign> {
        match s {
            "+" => Ok(Sign::Plus),
            "-" => Ok(Sign::Minus),
            "=" => Ok(Sign::Equal),
            "≠" => Ok(Sign::NotEqual),
            other => Err(Error::InvalidInput(format!("bad sign '{other}'"))),
        }
    }
}

fn significant_sign(order: SampleOrder, p: f64, critical: f64) -> Sign {
    if p >= critical {
        return Sign::Equal;
    }
    match order {
        SampleOrder::SecondLarger => Sign::Plus,
        SampleOrder::FirstLarger => Sign::Minus,
        SampleOrder::Even => Sign::Equal,
    }
}

/// Critical values per test family.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CriticalValues {
    pub ks: f64,
    pub mww: f64,
    pub chi2: f64,
}

impl CriticalValues {
    /// Annual-window convention.
    pub fn annual() -> Self {
        CriticalValues {
            ks: 0.025,
            mww: 0.025,
            chi2: 0.05,
        }
    }

    /// Two-month-window convention.
    pub fn two_month() -> Self {
        CriticalValues {
            ks: 0.05,
            mww: 0.05,
            chi2: 0.05,
        }
    }
}

/// The instability measures compared between groups, in result-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Mad,
    Variance,
    Skewness,
    Kurtosis,
    HillNeg,
    HillPos,
    OutliersNeg,
    OutliersPos,
}

pub const MEASURES: [Measure; 8] = [
    Measure::Mad,
    Measure::Variance,
    Measure::Skewness,
    Measure::Kurtosis,
    Measure::HillNeg,
    Measure::HillPos,
    Measure::OutliersNeg,
    Measure::OutliersPos,
];

impl Measure {
    pub fn name(&self) -> &'static str {
        match self {
            Measure::Mad => "mad",
            Measure::Variance => "variance",
            Measure::Skewness => "skewness",
            Measure::Kurtosis => "kurtosis",
            Measure::HillNeg => "hill_neg",
            Measure::HillPos => "hill_pos",
            Measure::OutliersNeg => "outliers_neg",
            Measure::OutliersPos => "outliers_pos",
        }
    }

    /// Count measures use the chi-squared test in place of KS.
    pub fn is_count(&self) -> bool {
        matches!(self, Measure::OutliersNeg | Measure::OutliersPos)
    }

    pub fn extract(&self, r: &InstabilityReport) -> Option<f64> {
        match self {
            Measure::Mad => r.mad,
            Measure::Variance => r.variance,
            Measure::Skewness => r.skewness,
            Measure::Kurtosis => r.kurtosis,
            Measure::HillNeg => r.hill_neg,
            Measure::HillPos => r.hill_pos,
            Measure::OutliersNeg => r.outliers_neg.map(f64::from),
            Measure::OutliersPos => r.outliers_pos.map(f64::from),
        }
    }
}

/// One measure-window comparison: test1 is KS (or chi-squared for counts),
/// test2 is MWW.
#[derive(Debug, Clone, PartialEq)]
pub struct TestVerdict {
    pub measure: String,
    pub window: String,
    pub test1: &'static str,
    pub sign1: Sign,
    pub p1: Option<f64>,
    pub sign2: Sign,
    pub p2: Option<f64>,
    /// Securities in the compared groups whose metric was missing.
    pub dropped: usize,
}

/// Runs the test pair for every measure on one window's reports.
///
/// Group samples collect the measure per security for low and high groups;
/// missing values are dropped pairwise and counted. Too-small samples leave
/// the verdict at '=' with no p-values.
pub fn verdict_table(
    reports: &[InstabilityReport],
    assignment: &GroupAssignment,
    critical: &CriticalValues,
) -> Vec<TestVerdict> {
    let by_security: BTreeMap<&str, &InstabilityReport> = reports
        .iter()
        .filter(|r| r.window == assignment.window)
        .map(|r| (r.security_id.as_str(), r))
        .collect();

    MEASURES
        .iter()
        .map(|measure| {
            let mut low = Vec::new();
            let mut high = Vec::new();
            let mut dropped = 0usize;
            for (id, group) in &assignment.groups {
                let bucket = match group {
                    Group::Low => &mut low,
                    Group::High => &mut high,
                    Group::Middle => continue,
                };
                match by_security.get(id.as_str()).and_then(|r| measure.extract(r)) {
                    Some(v) => bucket.push(v),
                    None => dropped += 1,
                }
            }

            let mut verdict = TestVerdict {
                measure: measure.name().to_string(),
                window: assignment.window.clone(),
                test1: if measure.is_count() { "chi2" } else { "ks" },
                sign1: Sign::Equal,
                p1: None,
                sign2: Sign::Equal,
                p2: None,
                dropped,
            };

            if measure.is_count() {
                let low_counts: Vec<u32> = low.iter().map(|v| *v as u32).collect();
                let high_counts: Vec<u32> = high.iter().map(|v| *v as u32).collect();
                if !low_counts.is_empty() && !high_counts.is_empty() {
                    if let Ok(chi2) = chi2_binned(&low_counts, &high_counts) {
                        verdict.p1 = Some(chi2.p_value);
                        verdict.sign1 = if !chi2.degenerate && chi2.p_value < critical.chi2 {
                            Sign::NotEqual
                        } else {
                            Sign::Equal
                        };
                    }
                }
            } else if let Ok(ks) = ks_two_sample(&low, &high) {
                verdict.p1 = Some(ks.p_value);
                verdict.sign1 = significant_sign(ks.order, ks.p_value, critical.ks);
            }
            if let Ok(mww) = mww_test(&low, &high) {
                verdict.p2 = Some(mww.p_value);
                verdict.sign2 = significant_sign(mww.order, mww.p_value, critical.mww);
            }
            verdict
        })
        .collect()
}

pub fn write_verdicts_csv<W: std::io::Write>(w: W, verdicts: &[TestVerdict]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["measure", "window", "test1_sign", "test1_p", "test2_sign", "test2_p"])?;
    for v in verdicts {
        wtr.write_record([
            v.measure.clone(),
            v.window.clone(),
            v.sign1.to_string(),
            v.p1.map(|p| format!("{p}")).unwrap_or_default(),
            v.sign2.to_string(),
            v.p2.map(|p| format!("{p}")).unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

/// Paired empirical CDF step tables for plotting, with the sign of
/// (F_high - F_low) on each segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfPoint {
    pub x: f64,
    pub f_low: f64,
    pub f_high: f64,
    /// Sign of f_high - f_low on [x, next x).
    pub sign: i8,
}

pub fn cdf_curves(low: &[f64], high: &[f64]) -> Result<Vec<CdfPoint>> {
    if low.is_empty() || high.is_empty() {
        return Err(Error::Insufficient {
            what: "cdf samples".into(),
            needed: 1,
            got: 0,
        });
    }
    let mut xs: Vec<f64> = low.iter().chain(high).copied().collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    let mut sorted_low = low.to_vec();
    let mut sorted_high = high.to_vec();
    sorted_low.sort_by(|a, b| a.total_cmp(b));
    sorted_high.sort_by(|a, b| a.total_cmp(b));

    let ecdf = |sorted: &[f64], x: f64| {
        let count = sorted.partition_point(|v| *v <= x);
        count as f64 / sorted.len() as f64
    };
    Ok(xs
        .into_iter()
        .map(|x| {
            let f_low = ecdf(&sorted_low, x);
            let f_high = ecdf(&sorted_high, x);
            let diff = f_high - f_low;
            CdfPoint {
                x,
                f_low,
                f_high,
                sign: if diff > 0.0 {
                    1
                } else if diff < 0.0 {
                    -1
                } else {
                    0
                },
            }
        })
        .collect())
}

pub fn write_cdf_csv<W: std::io::Write>(w: W, points: &[CdfPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x", "F_low", "F_high", "sign"])?;
    for p in points {
        wtr.write_record([
            format!("{}", p.x),
            format!("{}", p.f_low),
            format!("{}", p.f_high),
            p.sign.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}
