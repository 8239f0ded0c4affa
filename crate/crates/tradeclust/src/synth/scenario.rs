//! End-to-end synthetic scenarios.
//!
//! A scenario emits the exact file set the pipeline consumes: a trades CSV,
//! a daily price CSV, external turnover totals, optional covariate files,
//! and a ground-truth JSON. The treated population mixes planted cluster
//! blocks (whose securities receive fat-tailed returns) with diffuse
//! randomly-traded securities (normal returns); the optional control
//! population has the same trading structure but effect-free returns and a
//! turnover coverage below the split threshold.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::Datelike;
use rand::prelude::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream_rng, trading_days, PriceRow, ReturnDistribution};
use crate::error::{Error, Result};
use crate::graph::{Capacity, Side, TradeRecord};
use crate::month::Month;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_blocks: usize,
    pub firms_per_block: usize,
    pub securities_per_block: usize,
    pub diffuse_securities: usize,
    pub diffuse_firms: usize,
    /// Firms per diffuse security, redrawn every month.
    pub diffuse_degree: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnSpec {
    pub daily_sigma: f64,
    pub distribution: ReturnDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub start_month: Month,
    pub n_months: u32,
    pub seed: u64,
    pub treated: PopulationSpec,
    #[serde(default)]
    pub control: Option<PopulationSpec>,
    /// Returns for treated block securities.
    pub clustered_returns: ReturnSpec,
    /// Returns for treated diffuse securities.
    pub diffuse_returns: ReturnSpec,
    /// Returns for every control security (effect-free by design).
    #[serde(default)]
    pub control_returns: Option<ReturnSpec>,
    /// Fraction of yearly turnover covered by the generated trades.
    #[serde(default = "default_treated_coverage")]
    pub treated_coverage: f64,
    #[serde(default = "default_control_coverage")]
    pub control_coverage: f64,
    #[serde(default)]
    pub emit_covariates: bool,
}

fn default_treated_coverage() -> f64 {
    0.5
}

fn default_control_coverage() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityRole {
    TreatedBlock,
    TreatedDiffuse,
    ControlBlock,
    ControlDiffuse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecurityTruth {
    pub role: SecurityRole,
    pub block: Option<usize>,
}

#[derive(Debug)]
pub struct ScenarioArtifacts {
    pub trades: Vec<TradeRecord>,
    pub prices: Vec<PriceRow>,
    /// (security, year) -> reported total turnover.
    pub turnover: BTreeMap<(String, i32), f64>,
    pub truth: BTreeMap<String, SecurityTruth>,
    pub months: Vec<Month>,
    pub covariates: Option<CovariateFiles>,
}

#[derive(Debug, Default)]
pub struct CovariateFiles {
    /// month -> (MKTF, VIX)
    pub market: BTreeMap<Month, (f64, f64)>,
    /// (security, month) -> (MCAP, PB3, DY, LEV3); DY None = not reported.
    pub fundamentals: BTreeMap<(String, Month), (f64, f64, Option<f64>, f64)>,
    /// (security, date) -> euro volume
    pub volumes: BTreeMap<(String, chrono::NaiveDate), f64>,
}

struct Population<'a> {
    prefix: &'a str,
    spec: &'a PopulationSpec,
    role_block: SecurityRole,
    role_diffuse: SecurityRole,
    stream_base: u64,
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<ScenarioArtifacts> {
    if spec.n_months == 0 {
        return Err(Error::InfeasibleSpec("scenario needs at least one month".into()));
    }
    if spec.control.is_some() && spec.control_returns.is_none() {
        return Err(Error::InfeasibleSpec(
            "control population declared without control_returns".into(),
        ));
    }
    let months: Vec<Month> = (0..spec.n_months as i32)
        .map(|i| spec.start_month.add_months(i))
        .collect();

    let mut trades = Vec::new();
    let mut truth = BTreeMap::new();
    let mut price_groups: Vec<(Vec<String>, &ReturnSpec)> = Vec::new();

    let mut populations = vec![Population {
        prefix: "T",
        spec: &spec.treated,
        role_block: SecurityRole::TreatedBlock,
        role_diffuse: SecurityRole::TreatedDiffuse,
        stream_base: 0,
    }];
    if let Some(control) = &spec.control {
        populations.push(Population {
            prefix: "C",
            spec: control,
            role_block: SecurityRole::ControlBlock,
            role_diffuse: SecurityRole::ControlDiffuse,
            stream_base: 1 << 32,
        });
    }

    for pop in &populations {
        let p = pop.spec;
        let block_secs: Vec<String> = (0..p.n_blocks * p.securities_per_block)
            .map(|i| format!("{}B{:03}", pop.prefix, i))
            .collect();
        let diffuse_secs: Vec<String> = (0..p.diffuse_securities)
            .map(|i| format!("{}D{:03}", pop.prefix, i))
            .collect();
        let block_firms: Vec<String> = (0..p.n_blocks * p.firms_per_block)
            .map(|i| format!("{}BF{:03}", pop.prefix, i))
            .collect();
        let diffuse_firms: Vec<String> = (0..p.diffuse_firms)
            .map(|i| format!("{}DF{:03}", pop.prefix, i))
            .collect();
        if p.diffuse_securities > 0 && p.diffuse_degree > p.diffuse_firms {
            return Err(Error::InfeasibleSpec(
                "diffuse_degree exceeds the diffuse firm pool".into(),
            ));
        }

        for (i, sec) in block_secs.iter().enumerate() {
            truth.insert(
                sec.clone(),
                SecurityTruth {
                    role: pop.role_block,
                    block: Some(i / p.securities_per_block),
                },
            );
        }
        for sec in &diffuse_secs {
            truth.insert(sec.clone(), SecurityTruth { role: pop.role_diffuse, block: None });
        }

        for (mi, &month) in months.iter().enumerate() {
            let mut rng = stream_rng(spec.seed, pop.stream_base + mi as u64);
            let mut emit = |firm: &str, sec: &str, rng: &mut rand_chacha::ChaCha8Rng| {
                let day = rng.random_range(1..=28);
                trades.push(TradeRecord {
                    firm_id: firm.to_string(),
                    security_id: sec.to_string(),
                    date: chrono::NaiveDate::from_ymd_opt(month.year(), month.month(), day)
                        .expect("day <= 28"),
                    side: if rng.random::<bool>() { Side::Buy } else { Side::Sell },
                    units: rng.random_range(1..=1000),
                    price: (rng.random_range(1.0..100.0f64) * 100.0).round() / 100.0,
                    capacity: Capacity::Principal,
                });
            };
            for b in 0..p.n_blocks {
                for j in 0..p.securities_per_block {
                    let sec = &block_secs[b * p.securities_per_block + j];
                    for i in 0..p.firms_per_block {
                        let firm = block_firms[b * p.firms_per_block + i].clone();
                        emit(&firm, sec, &mut rng);
                    }
                }
            }
            let pool: Vec<&String> = diffuse_firms.iter().collect();
            for sec in &diffuse_secs {
                let chosen: Vec<&&String> =
                    pool.choose_multiple(&mut rng, p.diffuse_degree).collect();
                for firm in chosen {
                    emit(firm, sec, &mut rng);
                }
            }
        }

        let (block_returns, diffuse_returns) = if pop.prefix == "T" {
            (&spec.clustered_returns, &spec.diffuse_returns)
        } else {
            let r = spec.control_returns.as_ref().expect("checked above");
            (r, r)
        };
        price_groups.push((block_secs, block_returns));
        price_groups.push((diffuse_secs, diffuse_returns));
    }

    let price_spec = super::PricePanelSpec {
        start_month: spec.start_month,
        n_months: spec.n_months,
        groups: price_groups
            .iter()
            .map(|(securities, r)| super::PriceGroup {
                securities: securities.clone(),
                daily_sigma: r.daily_sigma,
                distribution: r.distribution.clone(),
            })
            .collect(),
        initial_price: 100.0,
    };
    let prices = super::generate_price_panel(&price_spec, spec.seed ^ 0x9e3779b97f4a7c15);

    // Reported totals imply the desired coverage ratio per (security, year).
    let mut covered: BTreeMap<(String, i32), f64> = BTreeMap::new();
    for t in &trades {
        *covered.entry((t.security_id.clone(), t.date.year())).or_insert(0.0) += t.turnover();
    }
    let mut turnover = BTreeMap::new();
    for ((sec, year), value) in &covered {
        let ratio = match truth[sec].role {
            SecurityRole::TreatedBlock | SecurityRole::TreatedDiffuse => spec.treated_coverage,
            SecurityRole::ControlBlock | SecurityRole::ControlDiffuse => spec.control_coverage,
        };
        turnover.insert((sec.clone(), *year), value / ratio);
    }

    let covariates = spec.emit_covariates.then(|| {
        let mut files = CovariateFiles::default();
        let mut rng = stream_rng(spec.seed, 0xC0F);
        for &month in &months {
            let mktf = rng.random_range(-4.0..5.0f64);
            let vix = rng.random_range(12.0..45.0f64);
            files.market.insert(month, (mktf, vix));
        }
        let securities: Vec<&String> = truth.keys().collect();
        for sec in &securities {
            let base_mcap = rng.random_range(4.0..10.0f64);
            let pays_dividends = rng.random::<f64>() < 0.7;
            for &month in &months {
                let mcap = base_mcap + rng.random_range(-0.2..0.2);
                let pb3 = rng.random_range(0.5..4.0);
                let dy = pays_dividends.then(|| rng.random_range(0.0..6.0));
                let lev3 = rng.random_range(0.0..0.8);
                files
                    .fundamentals
                    .insert(((*sec).clone(), month), (mcap, pb3, dy, lev3));
            }
        }
        for day in trading_days(spec.start_month, spec.n_months) {
            for sec in &securities {
                let volume = rng.random_range(1.0e4..1.0e6f64);
                files.volumes.insert(((*sec).clone(), day), volume);
            }
        }
        files
    });

    Ok(ScenarioArtifacts {
        trades,
        prices,
        turnover,
        truth,
        months,
        covariates,
    })
}

/// Writes `trades.csv`, `prices.csv`, `turnover.csv`, `ground_truth.json`
/// and, when present, `market.csv`, `fundamentals.csv`, `volumes.csv`.
pub fn write_scenario(dir: &Path, artifacts: &ScenarioArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| -> Result<std::fs::File> {
        let path = dir.join(name);
        std::fs::File::create(&path).map_err(|e| Error::io(path, e))
    };

    crate::graph::write_trades_csv(open("trades.csv")?, &artifacts.trades)?;
    super::write_prices_csv(open("prices.csv")?, &artifacts.prices)?;

    let mut wtr = csv::Writer::from_writer(open("turnover.csv")?);
    wtr.write_record(["security_id", "year", "total_turnover"])
        .map_err(Error::from)?;
    for ((sec, year), total) in &artifacts.turnover {
        wtr.write_record([sec.as_str(), &year.to_string(), &format!("{total}")])?;
    }
    wtr.flush().map_err(|e| Error::io(dir.join("turnover.csv"), e))?;

    serde_json::to_writer_pretty(open("ground_truth.json")?, &artifacts.truth)?;

    if let Some(cov) = &artifacts.covariates {
        let mut market = csv::Writer::from_writer(open("market.csv")?);
        market.write_record(["month", "MKTF", "VIX"])?;
        for (month, (mktf, vix)) in &cov.market {
            market.write_record([month.to_string(), format!("{mktf}"), format!("{vix}")])?;
        }
        market.flush().map_err(|e| Error::io(dir.join("market.csv"), e))?;

        let mut fundamentals = csv::Writer::from_writer(open("fundamentals.csv")?);
        fundamentals.write_record(["security_id", "month", "MCAP", "PB3", "DY", "LEV3"])?;
        for ((sec, month), (mcap, pb3, dy, lev3)) in &cov.fundamentals {
            fundamentals.write_record([
                sec.clone(),
                month.to_string(),
                format!("{mcap}"),
                format!("{pb3}"),
                dy.map(|v| format!("{v}")).unwrap_or_default(),
                format!("{lev3}"),
            ])?;
        }
        fundamentals
            .flush()
            .map_err(|e| Error::io(dir.join("fundamentals.csv"), e))?;

        let mut volumes = csv::Writer::from_writer(open("volumes.csv")?);
        volumes.write_record(["security_id", "date", "euro_volume"])?;
        for ((sec, date), volume) in &cov.volumes {
            volumes.write_record([
                sec.clone(),
                date.format("%Y-%m-%d").to_string(),
                format!("{volume}"),
            ])?;
        }
        volumes.flush().map_err(|e| Error::io(dir.join("volumes.csv"), e))?;
    }
    Ok(())
}
