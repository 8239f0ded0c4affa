//! Python bindings for the market-clustering core: snapshots, the
//! maximum-entropy null model, clustering scores, tail statistics and the
//! two-sample tests. Lists in, plain Python values out; heavy lifting stays
//! in the Rust library.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tradeclust::clustering;
use tradeclust::error::Error;
use tradeclust::graph::{BipartiteSnapshot, CapacityFilter};
use tradeclust::grouptests;
use tradeclust::instability;
use tradeclust::month::Month;
use tradeclust::nullmodel;
use tradeclust::synth;

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Monthly binary bipartite trading network.
#[pyclass(name = "Snapshot", from_py_object)]
#[derive(Clone)]
struct PySnapshot {
    inner: BipartiteSnapshot,
}

#[pymethods]
impl PySnapshot {
    /// Build from node lists and (security_index, firm_index) edges.
    #[new]
    #[pyo3(signature = (securities, firms, edges, month="2009-01"))]
    fn new(
        securities: Vec<String>,
        firms: Vec<String>,
        edges: Vec<(usize, usize)>,
        month: &str,
    ) -> PyResult<Self> {
        let month: Month = month.parse().map_err(py_err)?;
        let inner =
            BipartiteSnapshot::from_edges(month, securities, firms, &edges).map_err(py_err)?;
        Ok(PySnapshot { inner })
    }

    #[getter]
    fn n_firms(&self) -> usize {
        self.inner.n_firms()
    }

    #[getter]
    fn n_securities(&self) -> usize {
        self.inner.n_securities()
    }

    #[getter]
    fn firms(&self) -> Vec<String> {
        self.inner.firms().to_vec()
    }

    #[getter]
    fn securities(&self) -> Vec<String> {
        self.inner.securities().to_vec()
    }

    #[getter]
    fn firm_degrees(&self) -> Vec<u32> {
        self.inner.firm_degrees().to_vec()
    }

    #[getter]
    fn security_degrees(&self) -> Vec<u32> {
        self.inner.security_degrees().to_vec()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges()
    }

    fn __repr__(&self) -> String {
        format!(
            "Snapshot({} securities x {} firms, {} edges)",
            self.inner.n_securities(),
            self.inner.n_firms(),
            self.inner.n_edges()
        )
    }
}

/// Converged hidden variables and link probabilities.
#[pyclass(name = "NullModel")]
struct PyNullModel {
    inner: nullmodel::NullModel,
}

#[pymethods]
impl PyNullModel {
    #[getter]
    fn x_firm(&self) -> Vec<f64> {
        self.inner.x_firm.clone()
    }

    #[getter]
    fn x_security(&self) -> Vec<f64> {
        self.inner.x_security.clone()
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }

    #[getter]
    fn iterations(&self) -> u32 {
        self.inner.iterations
    }

    #[getter]
    fn forced_ones(&self) -> Vec<(usize, usize)> {
        self.inner.forced_ones.clone()
    }

    /// Dense link-probability matrix, securities x firms.
    fn link_prob(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_securities())
            .map(|s| self.inner.link_prob_row(s).to_vec())
            .collect()
    }

    fn expected_degrees(&self) -> (Vec<f64>, Vec<f64>) {
        self.inner.expected_degrees()
    }

    fn __repr__(&self) -> String {
        format!(
            "NullModel({}x{}, residual={:.2e}, iterations={})",
            self.inner.n_securities(),
            self.inner.n_firms(),
            self.inner.residual,
            self.inner.iterations
        )
    }
}

/// Solve the degree-constrained maximum-entropy null model.
#[pyfunction]
#[pyo3(signature = (snapshot, tolerance=1e-10, max_iterations=100_000, damping=1.0))]
fn solve_null_model(
    snapshot: &PySnapshot,
    tolerance: f64,
    max_iterations: u32,
    damping: f64,
) -> PyResult<PyNullModel> {
    let config = nullmodel::SolverConfig {
        tolerance,
        max_iterations,
        damping,
    };
    let inner = nullmodel::solve_null_model(&snapshot.inner, &config).map_err(py_err)?;
    Ok(PyNullModel { inner })
}

/// Observed motif count per security.
#[pyfunction]
fn observed_clustering(snapshot: &PySnapshot) -> Vec<u64> {
    clustering::observed_clustering(&snapshot.inner)
}

/// Expected motif count per security under a solved model.
#[pyfunction]
fn expected_clustering(model: &PyNullModel) -> Vec<f64> {
    clustering::expected_clustering(&model.inner)
}

/// Per-security clustering scores as dicts with security_id, observed,
/// expected, score and status.
#[pyfunction]
fn clustering_scores<'py>(
    py: Python<'py>,
    snapshot: &PySnapshot,
    model: &PyNullModel,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let scores = clustering::clustering_scores(&snapshot.inner, &model.inner).map_err(py_err)?;
    scores
        .iter()
        .map(|sc| {
            let d = PyDict::new(py);
            d.set_item("security_id", &sc.security_id)?;
            d.set_item("observed", sc.observed)?;
            d.set_item("expected", sc.expected)?;
            d.set_item("score", sc.score)?;
            d.set_item(
                "status",
                match sc.status {
                    clustering::ScoreStatus::Ok => "ok",
                    clustering::ScoreStatus::DegenerateNoExpectation => "degenerate_no_expectation",
                    clustering::ScoreStatus::Isolated => "isolated",
                },
            )?;
            Ok(d)
        })
        .collect()
}

/// Exhaustive-enumeration oracle for tiny snapshots (at most 16 cells):
/// exact marginals, expected motifs and ensemble entropy.
#[pyfunction]
#[pyo3(signature = (snapshot, tolerance=1e-11))]
fn enumerate_ensemble<'py>(
    py: Python<'py>,
    snapshot: &PySnapshot,
    tolerance: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let e = synth::enumerate_ensemble(&snapshot.inner, tolerance).map_err(py_err)?;
    let marginals: Vec<Vec<f64>> = (0..e.n_securities)
        .map(|s| (0..e.n_firms).map(|f| e.marginal(s, f)).collect())
        .collect();
    let d = PyDict::new(py);
    d.set_item("marginals", marginals)?;
    d.set_item("expected_motifs", e.expected_motifs.clone())?;
    d.set_item("entropy", e.entropy)?;
    d.set_item("support_size", e.support.len())?;
    Ok(d)
}

/// Read a trades CSV and build the snapshot of one month.
#[pyfunction]
#[pyo3(signature = (path, month, capacity="P"))]
fn snapshot_from_trades_csv(path: &str, month: &str, capacity: &str) -> PyResult<PySnapshot> {
    let filter: CapacityFilter = capacity.parse().map_err(py_err)?;
    let month: Month = month.parse().map_err(py_err)?;
    let result =
        tradeclust::graph::ingest_trades_path(std::path::Path::new(path), filter).map_err(py_err)?;
    Ok(PySnapshot {
        inner: tradeclust::graph::build_snapshot(&result.records, month),
    })
}

/// (mad, variance, skewness, kurtosis) of a sample.
#[pyfunction]
fn moments(xs: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    let m = instability::moments(&xs).map_err(py_err)?;
    Ok((m.mad, m.variance, m.skewness, m.kurtosis))
}

/// Hill tail index; None when the tail subsample is too small.
#[pyfunction]
#[pyo3(signature = (xs, tail="positive", k_fraction=0.05, k_min=10))]
fn hill_index(xs: Vec<f64>, tail: &str, k_fraction: f64, k_min: usize) -> PyResult<Option<f64>> {
    let side = match tail {
        "positive" => instability::TailSide::Positive,
        "negative" => instability::TailSide::Negative,
        other => return Err(PyValueError::new_err(format!("bad tail '{other}'"))),
    };
    let config = instability::HillConfig { k_fraction, k_min };
    Ok(instability::hill_index(&xs, side, &config))
}

/// Sequential generalized Grubbs outlier counts (positive, negative).
#[pyfunction]
#[pyo3(signature = (xs, alpha=0.05, max_removals=0.20))]
fn outlier_counts(xs: Vec<f64>, alpha: f64, max_removals: f64) -> PyResult<(u32, u32)> {
    let config = instability::OutlierTestConfig { alpha, max_removals };
    instability::outlier_counts(&xs, &config).map_err(py_err)
}

/// Historical (VaR, VLuck) magnitudes of a return sample.
#[pyfunction]
#[pyo3(signature = (xs, level=0.05))]
fn var_vluck(xs: Vec<f64>, level: f64) -> PyResult<(f64, f64)> {
    if xs.is_empty() {
        return Err(PyValueError::new_err("empty sample"));
    }
    if !(level > 0.0 && level < 0.5) {
        return Err(PyValueError::new_err("level outside (0, 0.5)"));
    }
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let var = -tradeclust::stats::quantile_sorted(&sorted, level);
    let mut reflected: Vec<f64> = xs.iter().map(|r| -r).collect();
    reflected.sort_by(|a, b| a.total_cmp(b));
    let vluck = -tradeclust::stats::quantile_sorted(&reflected, level);
    Ok((var, vluck))
}

fn order_to_int(order: grouptests::SampleOrder) -> i8 {
    match order {
        grouptests::SampleOrder::SecondLarger => 1,
        grouptests::SampleOrder::FirstLarger => -1,
        grouptests::SampleOrder::Even => 0,
    }
}

/// Two-sample Kolmogorov-Smirnov test: (D, p, direction) with direction
/// +1 when the second sample is stochastically larger at the supremum.
#[pyfunction]
fn ks_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, i8)> {
    let out = grouptests::ks_two_sample(&a, &b).map_err(py_err)?;
    Ok((out.statistic, out.p_value, order_to_int(out.order)))
}

/// Mann-Whitney-Wilcoxon test: (U of the second sample, p, direction).
#[pyfunction]
fn mww_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, i8)> {
    let out = grouptests::mww_test(&a, &b).map_err(py_err)?;
    Ok((out.statistic, out.p_value, order_to_int(out.order)))
}

/// Chi-squared homogeneity test on count data: (statistic, p, degenerate).
#[pyfunction]
fn chi2_binned(a: Vec<u32>, b: Vec<u32>) -> PyResult<(f64, f64, bool)> {
    let out = grouptests::chi2_binned(&a, &b).map_err(py_err)?;
    Ok((out.statistic, out.p_value, out.degenerate))
}

/// Tercile assignment by score: security_id -> "L" | "M" | "H".
#[pyfunction]
fn assign_terciles<'py>(
    py: Python<'py>,
    ids: Vec<String>,
    scores: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    if ids.len() != scores.len() {
        return Err(PyValueError::new_err("ids and scores length mismatch"));
    }
    let month = Month::new(2009, 1).expect("valid month");
    let as_scores: Vec<clustering::ClusteringScore> = ids
        .iter()
        .zip(&scores)
        .map(|(id, &score)| clustering::ClusteringScore {
            security_id: id.clone(),
            month,
            observed: 0,
            expected: 1.0,
            score: Some(score),
            status: clustering::ScoreStatus::Ok,
        })
        .collect();
    let assignment = grouptests::assign_terciles("py", &as_scores).map_err(py_err)?;
    let d = PyDict::new(py);
    for (id, group) in &assignment.groups {
        d.set_item(
            id,
            match group {
                grouptests::Group::Low => "L",
                grouptests::Group::Middle => "M",
                grouptests::Group::High => "H",
            },
        )?;
    }
    Ok(d)
}

#[pymodule]
fn tradeclust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySnapshot>()?;
    m.add_class::<PyNullModel>()?;
    m.add_function(wrap_pyfunction!(solve_null_model, m)?)?;
    m.add_function(wrap_pyfunction!(observed_clustering, m)?)?;
    m.add_function(wrap_pyfunction!(expected_clustering, m)?)?;
    m.add_function(wrap_pyfunction!(clustering_scores, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(snapshot_from_trades_csv, m)?)?;
    m.add_function(wrap_pyfunction!(moments, m)?)?;
    m.add_function(wrap_pyfunction!(hill_index, m)?)?;
    m.add_function(wrap_pyfunction!(outlier_counts, m)?)?;
    m.add_function(wrap_pyfunction!(var_vluck, m)?)?;
    m.add_function(wrap_pyfunction!(ks_test, m)?)?;
    m.add_function(wrap_pyfunction!(mww_test, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_binned, m)?)?;
    m.add_function(wrap_pyfunction!(assign_terciles, m)?)?;
    Ok(())
}
