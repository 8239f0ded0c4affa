//! Exhaustive maximum-entropy oracle for small snapshots.
//!
//! For graphs with at most [`ENUMERATION_CAP`] cells, the entropy-maximizing
//! distribution over all 2^(n_F*n_S) configurations is found by iterative
//! proportional fitting directly on the enumerated probability vector. The
//! routine never uses the factorized per-link form, so its marginals are an
//! independent check of that form.
//!
//! Nodes whose degree constraint sits at the extreme of what the ensemble
//! can produce (full or, after filtering, constant) force a support
//! restriction instead of a finite multiplier: the expectation can only
//! reach the extreme when all probability mass sits on configurations
//! attaining it.

use crate::error::{Error, Result};
use crate::graph::BipartiteSnapshot;

/// Largest number of cells the oracle enumerates (65536 configurations).
pub const ENUMERATION_CAP: usize = 16;

#[derive(Debug, Clone)]
pub struct EnsembleEnumeration {
    pub n_firms: usize,
    pub n_securities: usize,
    /// Configurations with nonzero probability, ascending bitmask order.
    /// Bit `s * n_firms + f` encodes the (security s, firm f) link.
    pub support: Vec<u32>,
    /// Probabilities aligned with `support`; sums to one.
    pub probabilities: Vec<f64>,
    /// Lagrange multipliers; zero for nodes resolved by support restriction.
    pub beta_firm: Vec<f64>,
    pub beta_security: Vec<f64>,
    /// Z over the support with the finite multipliers above.
    pub partition_function: f64,
    /// Shannon entropy of the distribution.
    pub entropy: f64,
    /// Exact marginal link probabilities, security-major.
    pub marginals: Vec<f64>,
    /// Exact expected motif counts per security.
    pub expected_motifs: Vec<f64>,
    pub sweeps: u32,
    pub max_violation: f64,
}

impl EnsembleEnumeration {
    pub fn marginal(&self, security: usize, firm: usize) -> f64 {
        self.marginals[security * self.n_firms + firm]
    }

    pub fn hamiltonian(&self, config: u32) -> f64 {
        let mut h = 0.0;
        for f in 0..self.n_firms {
            h += self.beta_firm[f] * degree_of(config, firm_mask(f, self.n_firms, self.n_securities));
        }
        for s in 0..self.n_securities {
            h += self.beta_security[s] * degree_of(config, security_mask(s, self.n_firms));
        }
        h
    }

    pub fn probability_of(&self, config: u32) -> f64 {
        match self.support.binary_search(&config) {
            Ok(i) => self.probabilities[i],
            Err(_) => 0.0,
        }
    }
}

fn firm_mask(f: usize, n_firms: usize, n_securities: usize) -> u32 {
    let mut m = 0u32;
    for s in 0..n_securities {
        m |= 1 << (s * n_firms + f);
    }
    m
}

fn security_mask(s: usize, n_firms: usize) -> u32 {
    ((1u32 << n_firms) - 1) << (s * n_firms)
}

fn degree_of(config: u32, mask: u32) -> f64 {
    (config & mask).count_ones() as f64
}

/// Motif counts per security of one configuration.
pub fn motif_counts_of_config(config: u32, n_securities: usize, n_firms: usize) -> Vec<u32> {
    let mut m = vec![0u32; n_securities];
    for f in 0..n_firms {
        for g in (f + 1)..n_firms {
            let both = ((config >> f) & (config >> g)) & column_positions(n_securities, n_firms);
            let shared = both.count_ones();
            if shared < 2 {
                continue;
            }
            let mut bits = both;
            while bits != 0 {
                let pos = bits.trailing_zeros() as usize;
                m[pos / n_firms] += shared - 1;
                bits &= bits - 1;
            }
        }
    }
    m
}

fn column_positions(n_securities: usize, n_firms: usize) -> u32 {
    let mut m = 0u32;
    for s in 0..n_securities {
        m |= 1 << (s * n_firms);
    }
    m
}

struct Constraint {
    mask: u32,
    observed: f64,
    is_firm: bool,
    index: usize,
}

/// Solves the degree-constrained maximum-entropy distribution by direct
/// iterative proportional fitting over the enumerated ensemble.
pub fn enumerate_ensemble(snapshot: &BipartiteSnapshot, tolerance: f64) -> Result<EnsembleEnumeration> {
    let n_f = snapshot.n_firms();
    let n_s = snapshot.n_securities();
    let cells = n_f * n_s;
    if cells == 0 {
        return Err(Error::EmptySnapshot);
    }
    if cells > ENUMERATION_CAP {
        return Err(Error::EnumerationCapExceeded {
            cells,
            cap: ENUMERATION_CAP,
        });
    }

    let mut constraints = Vec::with_capacity(n_f + n_s);
    for f in 0..n_f {
        constraints.push(Constraint {
            mask: firm_mask(f, n_f, n_s),
            observed: snapshot.firm_degrees()[f] as f64,
            is_firm: true,
            index: f,
        });
    }
    for s in 0..n_s {
        constraints.push(Constraint {
            mask: security_mask(s, n_f),
            observed: snapshot.security_degrees()[s] as f64,
            is_firm: false,
            index: s,
        });
    }

    // Support restriction for constraints at the boundary of the achievable
    // range. Iterate until stable: filtering one node can tighten another's
    // achievable range.
    let mut support: Vec<u32> = (0u32..(1u32 << cells)).collect();
    let mut resolved = vec![false; constraints.len()];
    loop {
        let mut changed = false;
        for (ci, c) in constraints.iter().enumerate() {
            if resolved[ci] {
                continue;
            }
            let mut lo = u32::MAX;
            let mut hi = 0u32;
            for &x in &support {
                let d = (x & c.mask).count_ones();
                lo = lo.min(d);
                hi = hi.max(d);
            }
            let d0 = c.observed as u32;
            if lo == hi {
                // Degree is constant over the support; the constraint holds
                // automatically (the observed configuration is in support).
                resolved[ci] = true;
                changed = true;
            } else if d0 == lo || d0 == hi {
                support.retain(|&x| (x & c.mask).count_ones() == d0);
                resolved[ci] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut weights = vec![1.0f64; support.len()];
    let mut multipliers = vec![1.0f64; constraints.len()];

    let max_sweeps = 20_000u32;
    let mut sweeps = 0u32;
    let mut max_violation;
    loop {
        sweeps += 1;
        for (ci, c) in constraints.iter().enumerate() {
            if resolved[ci] {
                continue;
            }
            // Histogram of current weight by this node's degree.
            let mut hist = [0.0f64; ENUMERATION_CAP + 1];
            for (&x, &w) in support.iter().zip(&weights) {
                hist[(x & c.mask).count_ones() as usize] += w;
            }
            let tau = solve_tilt(&hist, c.observed);
            if (tau - 1.0).abs() > 1e-15 {
                let mut pows = [1.0f64; ENUMERATION_CAP + 1];
                for d in 1..=ENUMERATION_CAP {
                    pows[d] = pows[d - 1] * tau;
                }
                for (x, w) in support.iter().zip(weights.iter_mut()) {
                    *w *= pows[(x & c.mask).count_ones() as usize];
                }
                multipliers[ci] *= tau;
            }
        }

        // Renormalize to keep weights O(1) across sweeps; the partition
        // function is recomputed from the multipliers at the end.
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        max_violation = 0.0f64;
        for (ci, c) in constraints.iter().enumerate() {
            if resolved[ci] {
                continue;
            }
            let expected: f64 = support
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| w * (x & c.mask).count_ones() as f64)
                .sum::<f64>();
            max_violation = max_violation.max((expected - c.observed).abs());
        }
        if max_violation <= tolerance || sweeps >= max_sweeps {
            break;
        }
    }

    let total: f64 = weights.iter().sum();
    let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut beta_firm = vec![0.0f64; n_f];
    let mut beta_security = vec![0.0f64; n_s];
    for (ci, c) in constraints.iter().enumerate() {
        if resolved[ci] {
            continue;
        }
        let beta = -multipliers[ci].ln();
        if c.is_firm {
            beta_firm[c.index] = beta;
        } else {
            beta_security[c.index] = beta;
        }
    }

    let mut marginals = vec![0.0f64; cells];
    for (&x, &p) in support.iter().zip(&probabilities) {
        let mut bits = x;
        while bits != 0 {
            let pos = bits.trailing_zeros() as usize;
            marginals[pos] += p;
            bits &= bits - 1;
        }
    }

    let mut expected_motifs = vec![0.0f64; n_s];
    for (&x, &p) in support.iter().zip(&probabilities) {
        for (s, &m) in motif_counts_of_config(x, n_s, n_f).iter().enumerate() {
            expected_motifs[s] += p * m as f64;
        }
    }

    let entropy: f64 = probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();

    let enumeration = EnsembleEnumeration {
        n_firms: n_f,
        n_securities: n_s,
        support,
        probabilities,
        beta_firm,
        beta_security,
        partition_function: f64::NAN,
        entropy,
        marginals,
        expected_motifs,
        sweeps,
        max_violation,
    };
    let partition_function: f64 = enumeration
        .support
        .iter()
        .map(|&x| (-enumeration.hamiltonian(x)).exp())
        .sum();

    Ok(EnsembleEnumeration {
        partition_function,
        ..enumeration
    })
}

/// Finds tau > 0 with sum_d hist[d] * tau^d * (d - target) = 0.
///
/// The tilted mean is strictly increasing in tau, so the root is unique;
/// safeguarded Newton in u = ln(tau) with a bisection bracket.
fn solve_tilt(hist: &[f64; ENUMERATION_CAP + 1], target: f64) -> f64 {
    let occupied: Vec<usize> = (0..hist.len()).filter(|&d| hist[d] > 0.0).collect();
    let min_d = *occupied.first().expect("nonempty histogram") as f64;
    let max_d = *occupied.last().unwrap() as f64;
    // Targets at (or beyond) the attainable extremes were already handled by
    // support filtering; the tilted mean then covers (min_d, max_d) as u
    // sweeps the real line.
    if !(min_d < target && target < max_d) {
        return 1.0;
    }

    // Centering on the target keeps exponents within f64 range over the
    // bracket (|u| * |d - target| <= 40 * 16 < 709).
    let phi = |u: f64| -> (f64, f64) {
        let mut value = 0.0;
        let mut slope = 0.0;
        for &d in &occupied {
            let gap = d as f64 - target;
            let e = hist[d] * (u * gap).exp();
            value += e * gap;
            slope += e * gap * gap;
        }
        (value, slope)
    };

    let mut lo = -40.0f64;
    let mut hi = 40.0f64;
    let mut u = 0.0f64;
    for _ in 0..200 {
        let (value, slope) = phi(u);
        if value.abs() < 1e-15 {
            break;
        }
        if value > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let newton = if slope > 0.0 { u - value / slope } else { f64::NAN };
        u = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            break;
        }
    }
    u.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::month::Month;

    fn snapshot(n_s: usize, n_f: usize, edges: &[(usize, usize)]) -> BipartiteSnapshot {
        BipartiteSnapshot::from_edges(
            Month::new(2009, 1).unwrap(),
            (0..n_s).map(|s| format!("s{s}")).collect(),
            (0..n_f).map(|f| format!("f{f}")).collect(),
            edges,
        )
        .unwrap()
    }

    #[test]
    fn single_cell_is_deterministic() {
        let snap = snapshot(1, 1, &[(0, 0)]);
        let e = enumerate_ensemble(&snap, 1e-11).unwrap();
        assert_eq!(e.support, vec![1]);
        assert!((e.marginal(0, 0) - 1.0).abs() < 1e-15);
        assert!((e.probabilities[0] - 1.0).abs() < 1e-15);
        assert!(e.entropy.abs() < 1e-12);
    }

    #[test]
    fn probabilities_normalize_and_match_hamiltonian_form() {
        let snap = snapshot(2, 2, &[(0, 0), (1, 1)]);
        let e = enumerate_ensemble(&snap, 1e-12).unwrap();
        let total: f64 = e.probabilities.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (i, &x) in e.support.iter().enumerate() {
            let p = (-e.hamiltonian(x)).exp() / e.partition_function;
            assert!((p - e.probabilities[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_degrees_give_symmetric_marginals() {
        let snap = snapshot(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        let e = enumerate_ensemble(&snap, 1e-12).unwrap();
        for s in 0..3 {
            for f in 0..3 {
                assert!(
                    (e.marginal(s, f) - 1.0 / 3.0).abs() < 1e-9,
                    "marginal ({s},{f}) = {}",
                    e.marginal(s, f)
                );
            }
        }
        // Degree-2 ring: marginals 2/3 everywhere by the same symmetry.
        let ring = snapshot(3, 3, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)]);
        let e = enumerate_ensemble(&ring, 1e-12).unwrap();
        for s in 0..3 {
            for f in 0..3 {
                assert!((e.marginal(s, f) - 2.0 / 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_degrees_resolve_by_support_filtering() {
        // 2x2 with degrees (2,1)/(2,1): a single feasible weighting.
        let snap = snapshot(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let e = enumerate_ensemble(&snap, 1e-12).unwrap();
        assert_eq!(e.support.len(), 1);
        assert!((e.marginal(0, 0) - 1.0).abs() < 1e-15);
        assert!((e.marginal(0, 1) - 1.0).abs() < 1e-15);
        assert!((e.marginal(1, 0) - 1.0).abs() < 1e-15);
        assert!(e.marginal(1, 1).abs() < 1e-15);
    }

    #[test]
    fn marginals_satisfy_degree_constraints() {
        let snap = snapshot(3, 4, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (0, 3)]);
        let e = enumerate_ensemble(&snap, 1e-11).unwrap();
        for f in 0..4 {
            let sum: f64 = (0..3).map(|s| e.marginal(s, f)).sum();
            assert!(
                (sum - snap.firm_degrees()[f] as f64).abs() <= 1e-10,
                "firm {f}: {sum}"
            );
        }
        for s in 0..3 {
            let sum: f64 = (0..4).map(|f| e.marginal(s, f)).sum();
            assert!(
                (sum - snap.security_degrees()[s] as f64).abs() <= 1e-10,
                "security {s}: {sum}"
            );
        }
    }

    #[test]
    fn motif_counts_of_config_matches_naive() {
        // Complete 3x3 configuration.
        let n_s = 3;
        let n_f = 3;
        let full = (1u32 << 9) - 1;
        assert_eq!(motif_counts_of_config(full, n_s, n_f), vec![6, 6, 6]);
        // Single pair of firms sharing two securities.
        // Edges: (0,0),(0,1),(1,0),(1,1) => bits 0,1,3,4.
        let x = 0b011011 & !(1 << 2) & !(1 << 5);
        let m = motif_counts_of_config(x, 2, 3);
        assert_eq!(m, vec![1, 1]);
    }

    #[test]
    fn factorized_solver_matches_enumeration_marginals() {
        use crate::nullmodel::{solve_null_model, SolverConfig};
        let cases: Vec<(usize, usize, Vec<(usize, usize)>)> = vec![
            (3, 4, vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (0, 3)]),
            (4, 4, vec![(0, 0), (0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2), (3, 3), (0, 2)]),
            (2, 2, vec![(0, 0), (0, 1), (1, 0)]),
            (4, 2, vec![(0, 0), (1, 0), (1, 1), (2, 1), (3, 0), (3, 1)]),
        ];
        for (n_s, n_f, edges) in cases {
            let snap = snapshot(n_s, n_f, &edges);
            let oracle = enumerate_ensemble(&snap, 1e-12).unwrap();
            let model = solve_null_model(&snap, &SolverConfig::default()).unwrap();
            for s in 0..n_s {
                for f in 0..n_f {
                    let diff = (model.link_prob(s, f) - oracle.marginal(s, f)).abs();
                    assert!(
                        diff <= 1e-8,
                        "{n_s}x{n_f} ({s},{f}): solver {} vs oracle {}",
                        model.link_prob(s, f),
                        oracle.marginal(s, f)
                    );
                }
            }
        }
    }

    #[test]
    fn expected_motifs_match_regrouped_formula() {
        use crate::clustering::expected_clustering;
        use crate::nullmodel::{solve_null_model, SolverConfig};
        let snap = snapshot(3, 4, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (0, 3), (1, 0)]);
        let oracle = enumerate_ensemble(&snap, 1e-13).unwrap();
        let tight = SolverConfig {
            tolerance: 1e-13,
            ..SolverConfig::default()
        };
        let model = solve_null_model(&snap, &tight).unwrap();
        let regrouped = expected_clustering(&model);
        for s in 0..3 {
            assert!(
                (oracle.expected_motifs[s] - regrouped[s]).abs() <= 1e-10,
                "security {s}: enumeration {} vs formula {}",
                oracle.expected_motifs[s],
                regrouped[s]
            );
        }
    }

    #[test]
    fn cap_is_enforced() {
        let edges: Vec<(usize, usize)> = (0..5).map(|s| (s, s % 4)).collect();
        let snap = snapshot(5, 4, &edges);
        assert!(matches!(
            enumerate_ensemble(&snap, 1e-10),
            Err(Error::EnumerationCapExceeded { cells: 20, .. })
        ));
    }
}
