//! Literal, unoptimized evaluations of the motif formulas.
//!
//! These walk every (firm pair, other security) combination exactly as the
//! defining sums are written, with no algebraic regrouping. They exist to
//! pin down the fast implementations in `clustering` and stay deliberately
//! naive.

use crate::graph::BipartiteSnapshot;
use crate::nullmodel::NullModel;

/// Observed motif count per security by the literal quadruple sum.
pub fn observed_motifs_naive(snapshot: &BipartiteSnapshot) -> Vec<u64> {
    let n_f = snapshot.n_firms();
    let n_s = snapshot.n_securities();
    (0..n_s)
        .map(|s| {
            let mut total = 0u64;
            for f in 0..n_f {
                for g in (f + 1)..n_f {
                    if snapshot.edge(s, f) && snapshot.edge(s, g) {
                        for s2 in 0..n_s {
                            if s2 != s && snapshot.edge(s2, f) && snapshot.edge(s2, g) {
                                total += 1;
                            }
                        }
                    }
                }
            }
            total
        })
        .collect()
}

/// Expected motif count per security by the literal quadruple sum over
/// link probabilities.
pub fn expected_motifs_naive(model: &NullModel) -> Vec<f64> {
    let n_f = model.n_firms();
    let n_s = model.n_securities();
    (0..n_s)
        .map(|s| {
            let mut total = 0.0f64;
            for f in 0..n_f {
                for g in (f + 1)..n_f {
                    let pair = model.link_prob(s, f) * model.link_prob(s, g);
                    if pair == 0.0 {
                        continue;
                    }
                    for s2 in 0..n_s {
                        if s2 != s {
                            total += pair * model.link_prob(s2, f) * model.link_prob(s2, g);
                        }
                    }
                }
            }
            total
        })
        .collect()
}
