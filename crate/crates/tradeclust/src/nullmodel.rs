//! Maximum-entropy bipartite ensemble under degree constraints.
//!
//! The ensemble assigns each firm-security pair an independent link
//! probability p_sf = x_f*x_s / (1 + x_f*x_s), with per-node hidden
//! variables x chosen so that expected degrees equal observed degrees.
//! The hidden variables are found by a damped fixed-point iteration on
//! the degree equations; full-degree and (reduced) zero-degree nodes are
//! peeled off first, because their hidden variables diverge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::BipartiteSnapshot;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Max-norm tolerance on degree residuals.
    pub tolerance: f64,
    pub max_iterations: u32,
    /// Initial damping in (0,1]; halved automatically when the residual
    /// oscillates.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-10,
            max_iterations: 100_000,
            damping: 1.0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerance must be > 0".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput("damping must be in (0,1]".into()));
        }
        Ok(())
    }
}

/// Converged hidden variables and the link-probability matrix.
///
/// Hidden variables of pinned nodes are stored as `f64::INFINITY`
/// (full-degree, probability 1 forced) or `0.0` (no free capacity left);
/// `link_prob` is always the authoritative probability source.
#[derive(Debug, Clone)]
pub struct NullModel {
    n_firms: usize,
    n_securities: usize,
    pub x_firm: Vec<f64>,
    pub x_security: Vec<f64>,
    /// Security-major, `n_securities x n_firms`.
    link_prob: Vec<f64>,
    /// Max absolute degree violation at the returned iterate.
    pub residual: f64,
    pub iterations: u32,
    /// (security, firm) pairs forced to probability one by degree degeneracy.
    pub forced_ones: Vec<(usize, usize)>,
}

impl NullModel {
    /// Builds a model directly from a dense probability matrix
    /// (security-major). Meant for synthetic checks and sampling; the
    /// hidden-variable vectors are left empty since a general matrix has
    /// no product-form factorization.
    pub fn from_link_probabilities(
        n_securities: usize,
        n_firms: usize,
        link_prob: Vec<f64>,
    ) -> Result<NullModel> {
        if link_prob.len() != n_securities * n_firms {
            return Err(Error::InvalidInput(format!(
                "probability matrix has {} entries, expected {}",
                link_prob.len(),
                n_securities * n_firms
            )));
        }
        if !link_prob.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("probabilities outside [0,1]".into()));
        }
        Ok(NullModel {
            n_firms,
            n_securities,
            x_firm: Vec::new(),
            x_security: Vec::new(),
            link_prob,
            residual: 0.0,
            iterations: 0,
            forced_ones: Vec::new(),
        })
    }

    pub fn n_firms(&self) -> usize {
        self.n_firms
    }

    pub fn n_securities(&self) -> usize {
        self.n_securities
    }

    pub fn link_prob(&self, security: usize, firm: usize) -> f64 {
        self.link_prob[security * self.n_firms + firm]
    }

    pub fn link_prob_row(&self, security: usize) -> &[f64] {
        &self.link_prob[security * self.n_firms..(security + 1) * self.n_firms]
    }

    pub fn link_probs(&self) -> &[f64] {
        &self.link_prob
    }

    /// Lagrange multiplier diagnostics: beta = -ln x.
    pub fn beta_firm(&self, firm: usize) -> f64 {
        -self.x_firm[firm].ln()
    }

    pub fn beta_security(&self, security: usize) -> f64 {
        -self.x_security[security].ln()
    }

    /// Row/column sums of the link probabilities.
    pub fn expected_degrees(&self) -> (Vec<f64>, Vec<f64>) {
        let mut firm = vec![0.0; self.n_firms];
        let mut security = vec![0.0; self.n_securities];
        for s in 0..self.n_securities {
            let row = self.link_prob_row(s);
            for (f, &p) in row.iter().enumerate() {
                firm[f] += p;
                security[s] += p;
            }
        }
        (firm, security)
    }
}

/// JSON export of a solved model. The dense probability matrix is included
/// only on request (it is `n_securities x n_firms`).
#[derive(Debug, Serialize, Deserialize)]
pub struct NullModelExport {
    pub x_firm: Vec<f64>,
    pub x_security: Vec<f64>,
    pub forced_ones: Vec<(usize, usize)>,
    pub residual: f64,
    pub iterations: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub link_prob: Option<Vec<f64>>,
}

impl NullModelExport {
    pub fn new(model: &NullModel, include_link_prob: bool) -> NullModelExport {
        NullModelExport {
            x_firm: model.x_firm.clone(),
            x_security: model.x_security.clone(),
            forced_ones: model.forced_ones.clone(),
            residual: model.residual,
            iterations: model.iterations,
            link_prob: include_link_prob.then(|| model.link_prob.clone()),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum NodeState {
    Active,
    PinnedFull,
    PinnedEmpty,
}

/// Solves the maximum-entropy null model for one snapshot.
///
/// Deterministic: iteration order is fixed and no randomness is involved.
/// Non-convergence returns the best iterate inside the error so callers can
/// relax the tolerance.
pub fn solve_null_model(snapshot: &BipartiteSnapshot, config: &SolverConfig) -> Result<NullModel> {
    config.validate()?;
    let n_f = snapshot.n_firms();
    let n_s = snapshot.n_securities();
    if n_f == 0 || n_s == 0 {
        return Err(Error::EmptySnapshot);
    }

    let mut link_prob = vec![0.0f64; n_s * n_f];
    let mut forced_ones = Vec::new();
    let mut firm_state = vec![NodeState::Active; n_f];
    let mut sec_state = vec![NodeState::Active; n_s];
    let mut eff_df: Vec<i64> = snapshot.firm_degrees().iter().map(|&d| d as i64).collect();
    let mut eff_ds: Vec<i64> = snapshot.security_degrees().iter().map(|&d| d as i64).collect();

    // Peel degenerate nodes. A node whose (reduced) degree equals the number
    // of active counterparts has all remaining links forced on; a node whose
    // reduced degree hits zero has them forced off.
    loop {
        let n_active_f = firm_state.iter().filter(|s| **s == NodeState::Active).count() as i64;
        let n_active_s = sec_state.iter().filter(|s| **s == NodeState::Active).count() as i64;
        let mut changed = false;

        for f in 0..n_f {
            if firm_state[f] != NodeState::Active {
                continue;
            }
            if eff_df[f] == n_active_s && n_active_s > 0 {
                for s in 0..n_s {
                    if sec_state[s] == NodeState::Active {
                        link_prob[s * n_f + f] = 1.0;
                        forced_ones.push((s, f));
                        eff_ds[s] -= 1;
                    }
                }
                firm_state[f] = NodeState::PinnedFull;
                changed = true;
            } else if eff_df[f] == 0 {
                firm_state[f] = NodeState::PinnedEmpty;
                changed = true;
            }
        }
        if changed {
            continue;
        }

        for s in 0..n_s {
            if sec_state[s] != NodeState::Active {
                continue;
            }
            if eff_ds[s] == n_active_f && n_active_f > 0 {
                for f in 0..n_f {
                    if firm_state[f] == NodeState::Active {
                        link_prob[s * n_f + f] = 1.0;
                        forced_ones.push((s, f));
                        eff_df[f] -= 1;
                    }
                }
                sec_state[s] = NodeState::PinnedFull;
                changed = true;
            } else if eff_ds[s] == 0 {
                sec_state[s] = NodeState::PinnedEmpty;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let active_f: Vec<usize> = (0..n_f).filter(|&f| firm_state[f] == NodeState::Active).collect();
    let active_s: Vec<usize> = (0..n_s).filter(|&s| sec_state[s] == NodeState::Active).collect();

    let mut x_firm = vec![0.0f64; n_f];
    let mut x_security = vec![0.0f64; n_s];
    for f in 0..n_f {
        if firm_state[f] == NodeState::PinnedFull {
            x_firm[f] = f64::INFINITY;
        }
    }
    for s in 0..n_s {
        if sec_state[s] == NodeState::PinnedFull {
            x_security[s] = f64::INFINITY;
        }
    }

    let mut iterations = 0u32;
    let mut residual = 0.0f64;

    if !active_f.is_empty() && !active_s.is_empty() {
        let edges: i64 = active_f.iter().map(|&f| eff_df[f]).sum();
        let sqrt_e = (edges as f64).sqrt();
        for &f in &active_f {
            x_firm[f] = eff_df[f] as f64 / sqrt_e;
        }
        for &s in &active_s {
            x_security[s] = eff_ds[s] as f64 / sqrt_e;
        }

        let mut damping = config.damping;
        let mut prev_residual = f64::INFINITY;
        loop {
            iterations += 1;
            for &f in &active_f {
                let xf = x_firm[f];
                let denom: f64 = active_s.iter().map(|&s| x_security[s] / (1.0 + xf * x_security[s])).sum();
                let target = eff_df[f] as f64 / denom;
                x_firm[f] = (1.0 - damping) * xf + damping * target;
            }
            for &s in &active_s {
                let xs = x_security[s];
                let denom: f64 = active_f.iter().map(|&f| x_firm[f] / (1.0 + x_firm[f] * xs)).sum();
                let target = eff_ds[s] as f64 / denom;
                x_security[s] = (1.0 - damping) * xs + damping * target;
            }

            residual = 0.0f64;
            for &f in &active_f {
                let expected: f64 = active_s
                    .iter()
                    .map(|&s| {
                        let xx = x_firm[f] * x_security[s];
                        xx / (1.0 + xx)
                    })
                    .sum();
                residual = residual.max((expected - eff_df[f] as f64).abs());
            }
            for &s in &active_s {
                let expected: f64 = active_f
                    .iter()
                    .map(|&f| {
                        let xx = x_firm[f] * x_security[s];
                        xx / (1.0 + xx)
                    })
                    .sum();
                residual = residual.max((expected - eff_ds[s] as f64).abs());
            }

            if residual <= config.tolerance {
                break;
            }
            if residual > prev_residual {
                damping = (damping * 0.5).max(1.0 / 64.0);
            }
            prev_residual = residual;

            if iterations >= config.max_iterations {
                for &s in &active_s {
                    for &f in &active_f {
                        let xx = x_firm[f] * x_security[s];
                        link_prob[s * n_f + f] = xx / (1.0 + xx);
                    }
                }
                let best = NullModel {
                    n_firms: n_f,
                    n_securities: n_s,
                    x_firm,
                    x_security,
                    link_prob,
                    residual,
                    iterations,
                    forced_ones,
                };
                return Err(Error::SolverDidNotConverge {
                    residual,
                    iterations,
                    best: Box::new(best),
                });
            }
        }

        for &s in &active_s {
            for &f in &active_f {
                let xx = x_firm[f] * x_security[s];
                link_prob[s * n_f + f] = xx / (1.0 + xx);
            }
        }
    }

    Ok(NullModel {
        n_firms: n_f,
        n_securities: n_s,
        x_firm,
        x_security,
        link_prob,
        residual,
        iterations,
        forced_ones,
    })
}
