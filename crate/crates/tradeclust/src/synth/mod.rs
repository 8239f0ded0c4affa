//! Synthetic data generators and oracles.
//!
//! Everything here exists to make the analytic modules testable without
//! proprietary data: structured snapshot generators with ground-truth
//! labels, degree-preserving rewiring, exhaustive ensemble enumeration for
//! tiny graphs, Monte-Carlo sampling from solved null models, and seeded
//! daily price panels.
//!
//! All randomness flows from one explicit 64-bit seed. Independent streams
//! are derived with a counter (ChaCha stream splitting), so parallel use is
//! reproducible.

mod enumerate;
pub mod reference;
mod scenario;

pub use enumerate::{enumerate_ensemble, motif_counts_of_config, EnsembleEnumeration, ENUMERATION_CAP};
pub use scenario::{
    generate_scenario, write_scenario, PopulationSpec, ReturnSpec, ScenarioArtifacts, ScenarioSpec,
    SecurityRole, SecurityTruth,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteSnapshot;
use crate::month::Month;
use crate::nullmodel::NullModel;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Disjoint groups of firms each trading a disjoint group of securities
    /// (complete within the block).
    PlantedBlocks {
        n_blocks: usize,
        firms_per_block: usize,
        securities_per_block: usize,
    },
    /// Two complete clusters plus one security traded by firms from both.
    BridgeSecurity {
        firms_per_cluster: usize,
        securities_per_cluster: usize,
        bridge_firms_per_side: usize,
    },
    /// One three-firm cluster with core securities traded by all of it and
    /// probe securities of decreasing cluster involvement (2, 1), padded to
    /// degree three with otherwise inactive outside firms.
    PartialCluster { core_securities: usize },
    /// Degree-preserving randomization of another generated snapshot.
    RandomDegreeMatched {
        base: Box<GeneratorKind>,
        swaps_per_edge: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub seed: u64,
}

/// Labels carried alongside a generated snapshot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Block membership for planted/bridge cluster securities.
    pub block_of_security: BTreeMap<String, usize>,
    pub bridge_security: Option<String>,
    /// Number of cluster firms trading each security (partial-cluster).
    pub involvement: BTreeMap<String, u32>,
}

fn month0() -> Month {
    Month::new(2009, 1).unwrap()
}

pub fn generate(spec: &GeneratorSpec) -> Result<(BipartiteSnapshot, GroundTruth)> {
    match &spec.kind {
        GeneratorKind::PlantedBlocks {
            n_blocks,
            firms_per_block,
            securities_per_block,
        } => planted_blocks(*n_blocks, *firms_per_block, *securities_per_block),
        GeneratorKind::BridgeSecurity {
            firms_per_cluster,
            securities_per_cluster,
            bridge_firms_per_side,
        } => bridge_security(
            *firms_per_cluster,
            *securities_per_cluster,
            *bridge_firms_per_side,
            spec.seed,
        ),
        GeneratorKind::PartialCluster { core_securities } => partial_cluster(*core_securities),
        GeneratorKind::RandomDegreeMatched { base, swaps_per_edge } => {
            let inner = GeneratorSpec {
                kind: (**base).clone(),
                seed: spec.seed,
            };
            let (snapshot, truth) = generate(&inner)?;
            Ok((
                rewire_degree_matched(&snapshot, *swaps_per_edge, spec.seed ^ 0x5eed),
                truth,
            ))
        }
    }
}

fn planted_blocks(
    n_blocks: usize,
    firms_per_block: usize,
    securities_per_block: usize,
) -> Result<(BipartiteSnapshot, GroundTruth)> {
    if n_blocks == 0 || firms_per_block == 0 || securities_per_block == 0 {
        return Err(Error::InfeasibleSpec("planted blocks need nonzero sizes".into()));
    }
    let securities: Vec<String> = (0..n_blocks * securities_per_block)
        .map(|i| format!("S{i:03}"))
        .collect();
    let firms: Vec<String> = (0..n_blocks * firms_per_block)
        .map(|i| format!("F{i:03}"))
        .collect();
    let mut edges = Vec::new();
    let mut truth = GroundTruth::default();
    for b in 0..n_blocks {
        for j in 0..securities_per_block {
            let s = b * securities_per_block + j;
            truth.block_of_security.insert(securities[s].clone(), b);
            for i in 0..firms_per_block {
                edges.push((s, b * firms_per_block + i));
            }
        }
    }
    let snapshot = BipartiteSnapshot::from_edges(month0(), securities, firms, &edges)?;
    Ok((snapshot, truth))
}

fn bridge_security(
    firms_per_cluster: usize,
    securities_per_cluster: usize,
    bridge_firms_per_side: usize,
    seed: u64,
) -> Result<(BipartiteSnapshot, GroundTruth)> {
    if firms_per_cluster < 2 || securities_per_cluster < 1 {
        return Err(Error::InfeasibleSpec(
            "bridge clusters need >=2 firms and >=1 security".into(),
        ));
    }
    if bridge_firms_per_side == 0 || bridge_firms_per_side > firms_per_cluster {
        return Err(Error::InfeasibleSpec(
            "bridge firms per side must be in 1..=firms_per_cluster".into(),
        ));
    }
    let n_s = 2 * securities_per_cluster + 1;
    let securities: Vec<String> = (0..n_s).map(|i| format!("S{i:03}")).collect();
    let firms: Vec<String> = (0..2 * firms_per_cluster).map(|i| format!("F{i:03}")).collect();
    let bridge = 2 * securities_per_cluster;

    let mut edges = Vec::new();
    let mut truth = GroundTruth {
        bridge_security: Some(securities[bridge].clone()),
        ..GroundTruth::default()
    };
    for side in 0..2 {
        for j in 0..securities_per_cluster {
            let s = side * securities_per_cluster + j;
            truth.block_of_security.insert(securities[s].clone(), side);
            for i in 0..firms_per_cluster {
                edges.push((s, side * firms_per_cluster + i));
            }
        }
    }
    let mut rng = stream_rng(seed, 0);
    for side in 0..2 {
        let mut pool: Vec<usize> =
            (side * firms_per_cluster..(side + 1) * firms_per_cluster).collect();
        pool.shuffle(&mut rng);
        for &f in pool.iter().take(bridge_firms_per_side) {
            edges.push((bridge, f));
        }
    }
    let snapshot = BipartiteSnapshot::from_edges(month0(), securities, firms, &edges)?;
    Ok((snapshot, truth))
}

fn partial_cluster(core_securities: usize) -> Result<(BipartiteSnapshot, GroundTruth)> {
    if core_securities < 1 {
        return Err(Error::InfeasibleSpec("need at least one core security".into()));
    }
    // Cluster firms 0..3; probe-2 borrows one outside firm, probe-1 two.
    let n_s = core_securities + 2;
    let securities: Vec<String> = (0..n_s).map(|i| format!("S{i:03}")).collect();
    let firms: Vec<String> = (0..6).map(|i| format!("F{i:03}")).collect();
    let mut edges = Vec::new();
    let mut truth = GroundTruth::default();
    for s in 0..core_securities {
        truth.involvement.insert(securities[s].clone(), 3);
        for f in 0..3 {
            edges.push((s, f));
        }
    }
    let probe2 = core_securities;
    truth.involvement.insert(securities[probe2].clone(), 2);
    edges.extend([(probe2, 0), (probe2, 1), (probe2, 3)]);
    let probe1 = core_securities + 1;
    truth.involvement.insert(securities[probe1].clone(), 1);
    edges.extend([(probe1, 0), (probe1, 4), (probe1, 5)]);

    let snapshot = BipartiteSnapshot::from_edges(month0(), securities, firms, &edges)?;
    Ok((snapshot, truth))
}

/// Degree-preserving randomization by checkerboard edge swaps.
///
/// Attempts `swaps_per_edge * n_edges` swaps: two edges (s1,f1), (s2,f2)
/// with distinct endpoints are rewired to (s1,f2), (s2,f1) when both target
/// slots are free. Every node keeps its exact degree.
pub fn rewire_degree_matched(
    snapshot: &BipartiteSnapshot,
    swaps_per_edge: usize,
    seed: u64,
) -> BipartiteSnapshot {
    let n_f = snapshot.n_firms();
    let n_s = snapshot.n_securities();
    let mut edges = snapshot.edges();
    let mut present = vec![false; n_s * n_f];
    for &(s, f) in &edges {
        present[s * n_f + f] = true;
    }
    let mut rng = stream_rng(seed, 0);
    let attempts = swaps_per_edge * edges.len();
    for _ in 0..attempts {
        let i = rng.random_range(0..edges.len());
        let j = rng.random_range(0..edges.len());
        if i == j {
            continue;
        }
        let (s1, f1) = edges[i];
        let (s2, f2) = edges[j];
        if s1 == s2 || f1 == f2 {
            continue;
        }
        if present[s1 * n_f + f2] || present[s2 * n_f + f1] {
            continue;
        }
        present[s1 * n_f + f1] = false;
        present[s2 * n_f + f2] = false;
        present[s1 * n_f + f2] = true;
        present[s2 * n_f + f1] = true;
        edges[i] = (s1, f2);
        edges[j] = (s2, f1);
    }
    BipartiteSnapshot::from_edges(
        snapshot.month(),
        snapshot.securities().to_vec(),
        snapshot.firms().to_vec(),
        &edges,
    )
    .expect("rewiring preserves a valid edge set")
}

/// Random bipartite snapshot with iid Bernoulli(p) edges, patched so no
/// node ends up with degree zero.
pub fn random_snapshot(
    n_securities: usize,
    n_firms: usize,
    edge_prob: f64,
    seed: u64,
) -> BipartiteSnapshot {
    let mut rng = stream_rng(seed, 0);
    let mut edges = Vec::new();
    let mut sec_deg = vec![0u32; n_securities];
    let mut firm_deg = vec![0u32; n_firms];
    for s in 0..n_securities {
        for f in 0..n_firms {
            if rng.random::<f64>() < edge_prob {
                edges.push((s, f));
                sec_deg[s] += 1;
                firm_deg[f] += 1;
            }
        }
    }
    for s in 0..n_securities {
        if sec_deg[s] == 0 {
            let f = rng.random_range(0..n_firms);
            edges.push((s, f));
            firm_deg[f] += 1;
            sec_deg[s] += 1;
        }
    }
    for f in 0..n_firms {
        if firm_deg[f] == 0 {
            let s = rng.random_range(0..n_securities);
            edges.push((s, f));
            sec_deg[s] += 1;
            firm_deg[f] += 1;
        }
    }
    BipartiteSnapshot::from_edges(
        month0(),
        (0..n_securities).map(|i| format!("S{i:03}")).collect(),
        (0..n_firms).map(|i| format!("F{i:03}")).collect(),
        &edges,
    )
    .expect("patched random graph has no zero-degree nodes")
}

/// Per-security sample statistics of motif counts under independent
/// Bernoulli draws from a solved model.
#[derive(Debug, Clone)]
pub struct NullSampleStats {
    pub draws: u64,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Draws `draws` independent snapshots edge-by-edge from the model's link
/// probabilities (no conditioning) and reports the per-security mean and
/// standard error of the motif count. Draw `i` uses stream `i` of the seed,
/// so the result does not depend on thread scheduling.
pub fn sample_null(model: &NullModel, draws: u64, seed: u64) -> NullSampleStats {
    let n_f = model.n_firms();
    let n_s = model.n_securities();
    let words = n_s.div_ceil(64);

    let (sum, sum_sq) = (0..draws)
        .into_par_iter()
        .fold(
            || (vec![0u64; n_s], vec![u128::from(0u8); n_s]),
            |(mut sum, mut sum_sq), draw| {
                let mut rng = stream_rng(seed, draw);
                // Firm-major bitsets over securities for pair popcounts.
                let mut sets = vec![0u64; n_f * words];
                for s in 0..n_s {
                    let row = model.link_prob_row(s);
                    for (f, &p) in row.iter().enumerate() {
                        let hit = if p >= 1.0 {
                            true
                        } else if p <= 0.0 {
                            false
                        } else {
                            rng.random::<f64>() < p
                        };
                        if hit {
                            sets[f * words + s / 64] |= 1 << (s % 64);
                        }
                    }
                }
                let mut motifs = vec![0u64; n_s];
                for f in 0..n_f {
                    for g in (f + 1)..n_f {
                        let mut shared = 0u32;
                        for w in 0..words {
                            shared += (sets[f * words + w] & sets[g * words + w]).count_ones();
                        }
                        if shared < 2 {
                            continue;
                        }
                        for w in 0..words {
                            let mut bits = sets[f * words + w] & sets[g * words + w];
                            while bits != 0 {
                                let s = w * 64 + bits.trailing_zeros() as usize;
                                motifs[s] += (shared - 1) as u64;
                                bits &= bits - 1;
                            }
                        }
                    }
                }
                for s in 0..n_s {
                    sum[s] += motifs[s];
                    sum_sq[s] += u128::from(motifs[s]) * u128::from(motifs[s]);
                }
                (sum, sum_sq)
            },
        )
        .reduce(
            || (vec![0u64; n_s], vec![u128::from(0u8); n_s]),
            |(mut a, mut a2), (b, b2)| {
                for s in 0..n_s {
                    a[s] += b[s];
                    a2[s] += b2[s];
                }
                (a, a2)
            },
        );

    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|&s| s as f64 / n).collect();
    let std_error: Vec<f64> = (0..n_s)
        .map(|s| {
            if draws < 2 {
                return 0.0;
            }
            let m = mean[s];
            let var = (sum_sq[s] as f64 - n * m * m) / (n - 1.0);
            (var.max(0.0) / n).sqrt()
        })
        .collect();
    NullSampleStats {
        draws,
        mean,
        std_error,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReturnDistribution {
    Normal,
    /// Student-t scaled to unit variance (requires dof > 2).
    StudentT { dof: f64 },
}

impl ReturnDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ReturnDistribution::Normal => {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }
            ReturnDistribution::StudentT { dof } => {
                let t = rand_distr::StudentT::new(*dof).expect("valid dof");
                let raw: f64 = rng.sample(t);
                raw * ((dof - 2.0) / dof).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceGroup {
    pub securities: Vec<String>,
    pub daily_sigma: f64,
    pub distribution: ReturnDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricePanelSpec {
    pub start_month: Month,
    pub n_months: u32,
    pub groups: Vec<PriceGroup>,
    #[serde(default = "default_initial_price")]
    pub initial_price: f64,
}

fn default_initial_price() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriceRow {
    pub security_id: String,
    pub date: chrono::NaiveDate,
    pub close: f64,
}

/// Weekdays of the month range, the synthetic trading calendar.
pub fn trading_days(start_month: Month, n_months: u32) -> Vec<chrono::NaiveDate> {
    use chrono::Datelike;
    let mut days = Vec::new();
    let end = start_month.add_months(n_months as i32);
    let mut day = start_month.first_day();
    while day < end.first_day() {
        let wd = day.weekday().num_days_from_monday();
        if wd < 5 {
            days.push(day);
        }
        day = day.succ_opt().expect("date in range");
    }
    days
}

/// Simulates seeded daily log returns per security and accumulates prices.
/// Security `i` (in group order) uses stream `i`, so adding a group never
/// changes the paths of earlier securities.
pub fn generate_price_panel(spec: &PricePanelSpec, seed: u64) -> Vec<PriceRow> {
    let days = trading_days(spec.start_month, spec.n_months);
    let mut rows = Vec::new();
    let mut stream = 0u64;
    for group in &spec.groups {
        for security in &group.securities {
            let mut rng = stream_rng(seed, stream);
            stream += 1;
            let mut log_price = spec.initial_price.ln();
            for &date in &days {
                let r = group.daily_sigma * group.distribution.sample(&mut rng);
                log_price += r;
                rows.push(PriceRow {
                    security_id: security.clone(),
                    date,
                    close: log_price.exp(),
                });
            }
        }
    }
    rows.sort_by(|a, b| (&a.security_id, a.date).cmp(&(&b.security_id, b.date)));
    rows
}

pub fn write_prices_csv<W: std::io::Write>(w: W, rows: &[PriceRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["security_id", "date", "close"])?;
    for r in rows {
        wtr.write_record([
            r.security_id.as_str(),
            &r.date.format("%Y-%m-%d").to_string(),
            &format!("{}", r.close),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}
