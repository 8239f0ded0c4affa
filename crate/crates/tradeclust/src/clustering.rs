//! Per-security market-clustering scores.
//!
//! The observed motif count of a security counts, over all pairs of firms
//! trading it, the other securities each pair also trades jointly. Its
//! expectation under the null model follows from the same sum with link
//! probabilities in place of adjacency entries. The score is
//! observed / expected - 1, so 0 means benchmark-level overlap and -1 means
//! the security's traders share nothing else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteSnapshot;
use crate::month::Month;
use crate::nullmodel::NullModel;

/// Expected counts at or below this level cannot support a ratio score.
pub const DEGENERACY_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStatus {
    Ok,
    /// Expected motif count is (numerically) zero; the ratio is undefined.
    DegenerateNoExpectation,
    /// The security shares no co-trading with the rest of the market
    /// (score -1), or has no trading pairs at all.
    Isolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScore {
    pub security_id: String,
    pub month: Month,
    pub observed: u64,
    pub expected: f64,
    /// observed/expected - 1 when defined.
    pub score: Option<f64>,
    pub status: ScoreStatus,
}

/// Firm-pair co-trading counts and pair probability sums.
///
/// `count(f, f')` is the number of securities both firms trade;
/// `prob_sum(f, f')` is the sum over securities of p_sf * p_sf'. Both are
/// the regrouped inner sums of the motif formulas: with them each
/// security's observed and expected counts cost O(n_firms^2).
#[derive(Debug, Clone)]
pub struct CoTradeTable {
    n_firms: usize,
    counts: Vec<u32>,
    prob_sums: Vec<f64>,
}

impl CoTradeTable {
    pub fn new(snapshot: &BipartiteSnapshot, model: &NullModel) -> Result<CoTradeTable> {
        check_dimensions(snapshot, model)?;
        let counts = co_trade_counts(snapshot);
        let prob_sums = pair_prob_sums(model);
        Ok(CoTradeTable {
            n_firms: snapshot.n_firms(),
            counts,
            prob_sums,
        })
    }

    pub fn count(&self, f: usize, g: usize) -> u32 {
        self.counts[f * self.n_firms + g]
    }

    pub fn prob_sum(&self, f: usize, g: usize) -> f64 {
        self.prob_sums[f * self.n_firms + g]
    }
}

fn check_dimensions(snapshot: &BipartiteSnapshot, model: &NullModel) -> Result<()> {
    if snapshot.n_firms() != model.n_firms() || snapshot.n_securities() != model.n_securities() {
        return Err(Error::DimensionMismatch {
            snapshot: snapshot.n_securities() * snapshot.n_firms(),
            model: model.n_securities() * model.n_firms(),
        });
    }
    Ok(())
}

fn co_trade_counts(snapshot: &BipartiteSnapshot) -> Vec<u32> {
    let n_f = snapshot.n_firms();
    let bitsets = snapshot.firm_security_bitsets();
    let mut counts = vec![0u32; n_f * n_f];
    for f in 0..n_f {
        for g in (f + 1)..n_f {
            let shared: u32 = bitsets[f]
                .iter()
                .zip(&bitsets[g])
                .map(|(a, b)| (a & b).count_ones())
                .sum();
            counts[f * n_f + g] = shared;
            counts[g * n_f + f] = shared;
        }
    }
    counts
}

fn pair_prob_sums(model: &NullModel) -> Vec<f64> {
    let n_f = model.n_firms();
    let mut sums = vec![0.0f64; n_f * n_f];
    for s in 0..model.n_securities() {
        let row = model.link_prob_row(s);
        for f in 0..n_f {
            if row[f] == 0.0 {
                continue;
            }
            for g in (f + 1)..n_f {
                sums[f * n_f + g] += row[f] * row[g];
            }
        }
    }
    for f in 0..n_f {
        for g in 0..f {
            sums[f * n_f + g] = sums[g * n_f + f];
        }
    }
    sums
}

/// Observed motif counts per security.
pub fn observed_clustering(snapshot: &BipartiteSnapshot) -> Vec<u64> {
    let n_f = snapshot.n_firms();
    let counts = co_trade_counts(snapshot);
    (0..snapshot.n_securities())
        .map(|s| {
            let traders: Vec<usize> = (0..n_f).filter(|&f| snapshot.edge(s, f)).collect();
            let mut m = 0u64;
            for (i, &f) in traders.iter().enumerate() {
                for &g in &traders[i + 1..] {
                    // Both trade s, so the shared count includes s itself.
                    m += (counts[f * n_f + g] - 1) as u64;
                }
            }
            m
        })
        .collect()
}

/// Expected motif counts per security under the null model.
pub fn expected_clustering(model: &NullModel) -> Vec<f64> {
    let n_f = model.n_firms();
    let prob_sums = pair_prob_sums(model);
    (0..model.n_securities())
        .map(|s| {
            let row = model.link_prob_row(s);
            let mut m = 0.0f64;
            for f in 0..n_f {
                if row[f] == 0.0 {
                    continue;
                }
                for g in (f + 1)..n_f {
                    let pp = row[f] * row[g];
                    m += pp * (prob_sums[f * n_f + g] - pp);
                }
            }
            m
        })
        .collect()
}

/// Scores every security of a snapshot against its solved null model.
pub fn clustering_scores(
    snapshot: &BipartiteSnapshot,
    model: &NullModel,
) -> Result<Vec<ClusteringScore>> {
    check_dimensions(snapshot, model)?;
    let observed = observed_clustering(snapshot);
    let expected = expected_clustering(model);
    Ok(snapshot
        .securities()
        .iter()
        .enumerate()
        .map(|(s, id)| {
            let (score, status) = if snapshot.security_degrees()[s] == 0 {
                (None, ScoreStatus::Isolated)
            } else if expected[s] <= DEGENERACY_EPSILON {
                (None, ScoreStatus::DegenerateNoExpectation)
            } else {
                (Some(observed[s] as f64 / expected[s] - 1.0), ScoreStatus::Ok)
            };
            ClusteringScore {
                security_id: id.clone(),
                month: snapshot.month(),
                observed: observed[s],
                expected: expected[s],
                score,
                status,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedPolicy {
    /// Remove securities whose traders share nothing else (score -1).
    #[default]
    Drop,
    /// Keep them, re-labelled with the isolated status.
    Flag,
}

/// Applies the drop policy for score -1 observations.
pub fn drop_isolated_scores(
    scores: Vec<ClusteringScore>,
    policy: IsolatedPolicy,
) -> Vec<ClusteringScore> {
    match policy {
        IsolatedPolicy::Drop => scores
            .into_iter()
            .filter(|sc| sc.score != Some(-1.0))
            .collect(),
        IsolatedPolicy::Flag => scores
            .into_iter()
            .map(|mut sc| {
                if sc.score == Some(-1.0) {
                    sc.status = ScoreStatus::Isolated;
                }
                sc
            })
            .collect(),
    }
}

pub fn write_scores_csv<W: std::io::Write>(w: W, scores: &[ClusteringScore]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["month", "security_id", "observed", "expected", "score", "status"])?;
    for sc in scores {
        wtr.write_record([
            sc.month.to_string(),
            sc.security_id.clone(),
            sc.observed.to_string(),
            format!("{}", sc.expected),
            sc.score.map(|v| format!("{v}")).unwrap_or_default(),
            match sc.status {
                ScoreStatus::Ok => "ok".to_string(),
                ScoreStatus::DegenerateNoExpectation => "degenerate_no_expectation".to_string(),
                ScoreStatus::Isolated => "isolated".to_string(),
            },
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<writer>", e))?;
    Ok(())
}

pub fn read_scores_csv<R: std::io::Read>(r: R) -> Result<Vec<ClusteringScore>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let month: Month = row
            .get(0)
            .ok_or_else(|| Error::InvalidInput("missing month".into()))?
            .parse()?;
        let security_id = row.get(1).unwrap_or_default().to_string();
        let observed: u64 = row
            .get(2)
            .unwrap_or_default()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad observed: {e}")))?;
        let expected: f64 = row
            .get(3)
            .unwrap_or_default()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad expected: {e}")))?;
        let score_field = row.get(4).unwrap_or_default();
        let score = if score_field.is_empty() {
            None
        } else {
            Some(
                score_field
                    .parse()
                    .map_err(|e| Error::InvalidInput(format!("bad score: {e}")))?,
            )
        };
        let status = match row.get(5).unwrap_or_default() {
            "ok" => ScoreStatus::Ok,
            "degenerate_no_expectation" => ScoreStatus::DegenerateNoExpectation,
            "isolated" => ScoreStatus::Isolated,
            other => return Err(Error::InvalidInput(format!("bad status '{other}'"))),
        };
        out.push(ClusteringScore {
            security_id,
            month,
            observed,
            expected,
            score,
            status,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nullmodel::{solve_null_model, SolverConfig};
    use crate::synth::reference;

    fn snapshot(n_s: usize, n_f: usize, edges: &[(usize, usize)]) -> BipartiteSnapshot {
        BipartiteSnapshot::from_edges(
            Month::new(2009, 1).unwrap(),
            (0..n_s).map(|s| format!("s{s}")).collect(),
            (0..n_f).map(|f| format!("f{f}")).collect(),
            edges,
        )
        .unwrap()
    }

    fn complete(n_s: usize, n_f: usize) -> BipartiteSnapshot {
        let edges: Vec<(usize, usize)> =
            (0..n_s).flat_map(|s| (0..n_f).map(move |f| (s, f))).collect();
        snapshot(n_s, n_f, &edges)
    }

    #[test]
    fn single_trader_security_has_zero_motifs() {
        // s1 is traded only by f0: no firm pair, so M = 0.
        let snap = snapshot(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let observed = observed_clustering(&snap);
        assert_eq!(observed[1], 0);
    }

    #[test]
    fn no_shared_other_security_means_zero_motifs() {
        // Both firms trade s0 but share nothing else.
        let snap = snapshot(3, 2, &[(0, 0), (0, 1), (1, 0), (2, 1)]);
        let observed = observed_clustering(&snap);
        assert_eq!(observed[0], 0);
    }

    #[test]
    fn complete_3x3_has_six_motifs_each() {
        let snap = complete(3, 3);
        assert_eq!(observed_clustering(&snap), vec![6, 6, 6]);
    }

    #[test]
    fn observed_matches_literal_quadruple_sum() {
        let snap = snapshot(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (0, 3)]);
        assert_eq!(observed_clustering(&snap), reference::observed_motifs_naive(&snap));
    }

    #[test]
    fn zero_probability_row_gives_zero_expectation() {
        // Security 1's probabilities are pinned to (1, 0); the pair product
        // with only one nonzero entry leaves no motif mass.
        let snap = snapshot(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let expected = expected_clustering(&model);
        // Pair (f0, f1): p_{1,f1} = 0, so both securities' expectations use
        // q - pp with the forced entries; exactness checked by literal sum.
        let naive = reference::expected_motifs_naive(&model);
        for (a, b) in expected.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_half_probability_expectation() {
        // Uniform p = 1/2 on 3x3: 3 firm pairs x 2 other securities x 0.5^4.
        let model =
            crate::nullmodel::NullModel::from_link_probabilities(3, 3, vec![0.5; 9]).unwrap();
        let expected = expected_clustering(&model);
        for e in &expected {
            assert!((e - 0.375).abs() < 1e-12, "expected {e}");
        }

        // Solved diagonal model, p = 1/3 everywhere by symmetry.
        let snap = snapshot(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        let solved = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let expected = expected_clustering(&solved);
        let p: f64 = 1.0 / 3.0;
        let per_security = 3.0 * p * p * 2.0 * (p * p);
        for e in &expected {
            assert!((e - per_security).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_probability_rows_have_zero_expectation() {
        let mut probs = vec![0.4; 12];
        for f in 0..4 {
            probs[2 * 4 + f] = 0.0; // security 2 cannot link at all
        }
        let model = crate::nullmodel::NullModel::from_link_probabilities(3, 4, probs).unwrap();
        let expected = expected_clustering(&model);
        assert_eq!(expected[2], 0.0);
        assert!(expected[0] > 0.0);
    }

    #[test]
    fn score_arithmetic_and_minus_one() {
        let snap = complete(3, 3);
        let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let scores = clustering_scores(&snap, &model).unwrap();
        // Complete graph: observed 6, expected 6 (all probabilities one).
        for sc in &scores {
            assert_eq!(sc.observed, 6);
            assert!((sc.expected - 6.0).abs() < 1e-12);
            assert_eq!(sc.score, Some(0.0));
            assert_eq!(sc.status, ScoreStatus::Ok);
        }

        // Traders of s0 share no other security: score exactly -1.
        let snap = snapshot(3, 4, &[(0, 0), (0, 1), (1, 0), (1, 2), (2, 1), (2, 3)]);
        let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let scores = clustering_scores(&snap, &model).unwrap();
        assert_eq!(scores[0].observed, 0);
        assert!(scores[0].expected > 0.0);
        assert_eq!(scores[0].score, Some(-1.0));
    }

    #[test]
    fn dimension_mismatch_is_fatal() {
        let snap = complete(3, 3);
        let other = complete(2, 2);
        let model = solve_null_model(&other, &SolverConfig::default()).unwrap();
        assert!(matches!(
            clustering_scores(&snap, &model),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn drop_policy_removes_minus_one_rows() {
        let mk = |id: &str, score: Option<f64>| ClusteringScore {
            security_id: id.into(),
            month: Month::new(2009, 1).unwrap(),
            observed: 0,
            expected: 1.0,
            score,
            status: ScoreStatus::Ok,
        };
        let scores: Vec<ClusteringScore> = (0..10)
            .map(|i| {
                if i < 3 {
                    mk(&format!("s{i}"), Some(-1.0))
                } else {
                    mk(&format!("s{i}"), Some(i as f64 / 10.0))
                }
            })
            .collect();
        let kept = drop_isolated_scores(scores.clone(), IsolatedPolicy::Drop);
        assert_eq!(kept.len(), 7);
        let flagged = drop_isolated_scores(scores, IsolatedPolicy::Flag);
        assert_eq!(flagged.len(), 10);
        assert_eq!(
            flagged.iter().filter(|s| s.status == ScoreStatus::Isolated).count(),
            3
        );

        let all_isolated: Vec<ClusteringScore> =
            (0..4).map(|i| mk(&format!("s{i}"), Some(-1.0))).collect();
        assert!(drop_isolated_scores(all_isolated, IsolatedPolicy::Drop).is_empty());
    }

    #[test]
    fn scores_csv_round_trips() {
        let snap = complete(3, 3);
        let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let scores = clustering_scores(&snap, &model).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &scores).unwrap();
        let back = read_scores_csv(&buf[..]).unwrap();
        assert_eq!(scores, back);
    }

    #[test]
    fn label_permutation_permutes_scores() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let edges = vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 1), (2, 2), (3, 0), (3, 2)];
        let snap = snapshot(4, 3, &edges);
        let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let base = clustering_scores(&snap, &model).unwrap();

        // Permute both node orders; values must follow their labels.
        let mut sec_perm: Vec<usize> = (0..4).collect();
        let mut firm_perm: Vec<usize> = (0..3).collect();
        sec_perm.shuffle(&mut rng);
        firm_perm.shuffle(&mut rng);
        let permuted_edges: Vec<(usize, usize)> =
            edges.iter().map(|&(s, f)| (sec_perm[s], firm_perm[f])).collect();
        let mut sec_names = vec![String::new(); 4];
        let mut firm_names = vec![String::new(); 3];
        for s in 0..4 {
            sec_names[sec_perm[s]] = format!("s{s}");
        }
        for f in 0..3 {
            firm_names[firm_perm[f]] = format!("f{f}");
        }
        let permuted = BipartiteSnapshot::from_edges(
            Month::new(2009, 1).unwrap(),
            sec_names,
            firm_names,
            &permuted_edges,
        )
        .unwrap();
        let permuted_model = solve_null_model(&permuted, &SolverConfig::default()).unwrap();
        let shuffled = clustering_scores(&permuted, &permuted_model).unwrap();

        for sc in &base {
            let other = shuffled
                .iter()
                .find(|o| o.security_id == sc.security_id)
                .expect("same label present");
            assert_eq!(sc.observed, other.observed, "{}", sc.security_id);
            assert!((sc.expected - other.expected).abs() < 1e-9);
            match (sc.score, other.score) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn cotrade_table_bounds() {
        let snap = snapshot(4, 3, &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 1), (2, 2), (3, 0)]);
        let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
        let table = CoTradeTable::new(&snap, &model).unwrap();
        let (ef, _) = model.expected_degrees();
        for f in 0..3 {
            for g in 0..3 {
                if f == g {
                    continue;
                }
                let cap = snap.firm_degrees()[f].min(snap.firm_degrees()[g]);
                assert!(table.count(f, g) <= cap);
                assert!(table.prob_sum(f, g) <= ef[f].min(ef[g]) + 1e-9);
            }
        }
    }
}
