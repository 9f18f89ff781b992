//! Python bindings for spectral-nj.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spectral_nj::bench::{self, Estimator};
use spectral_nj::generate::GenSpec;
use spectral_nj::markov::{model_from_affinities, population_similarity, SiteRates};
use spectral_nj::properties::{self, BatteryConfig};
use spectral_nj::reconstruct::Method;
use spectral_nj::similarity::{affinity_to_distance, floor_similarity};
use spectral_nj::tree::{parse_newick_with_affinities, write_newick, write_newick_with_affinities};
use spectral_nj::{EdgeAffinities, Topology, TreeKind};

fn err(e: spectral_nj::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Unrooted bifurcating tree, optionally with edge affinities.
#[pyclass(module = "spectral_nj_py", frozen)]
struct Tree {
    topology: Topology,
    affinities: Option<EdgeAffinities>,
}

#[pymethods]
impl Tree {
    /// Parses Newick text; `:value` annotations become edge affinities.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let (topology, affinities) = parse_newick_with_affinities(text).map_err(err)?;
        Ok(Tree { topology, affinities })
    }

    #[getter]
    fn leaf_count(&self) -> usize {
        self.topology.leaf_count()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.topology.labels().to_vec()
    }

    #[pyo3(signature = (with_affinities = true))]
    fn newick(&self, with_affinities: bool) -> String {
        match (&self.affinities, with_affinities) {
            (Some(aff), true) => write_newick_with_affinities(&self.topology, aff),
            _ => write_newick(&self.topology),
        }
    }

    fn rf_distance(&self, other: &Tree) -> PyResult<usize> {
        spectral_nj::rf_distance(&self.topology, &other.topology).map_err(err)
    }

    /// Exact similarity matrix implied by the edge affinities.
    fn population_similarity(&self) -> PyResult<Similarity> {
        let aff = self.affinities.as_ref().ok_or_else(|| PyValueError::new_err("tree has no edge affinities"))?;
        Ok(Similarity { inner: population_similarity(&self.topology, aff) })
    }

    fn __repr__(&self) -> String {
        format!("Tree({})", write_newick(&self.topology))
    }
}

/// Symmetric affinity matrix with entries in [0, 1].
#[pyclass(name = "SimilarityMatrix", module = "spectral_nj_py", frozen)]
struct Similarity {
    inner: spectral_nj::SimilarityMatrix,
}

#[pymethods]
impl Similarity {
    #[new]
    fn new(labels: Vec<String>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(PyValueError::new_err("matrix must be square"));
        }
        let data = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
        Ok(Similarity { inner: spectral_nj::SimilarityMatrix::from_matrix(labels, data).map_err(err)? })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        let m = self.inner.size();
        (0..m).map(|i| (0..m).map(|j| self.inner.get(i, j)).collect()).collect()
    }
}

/// Observed leaf states, `rows` leaves by `sites` sites.
#[pyclass(module = "spectral_nj_py", frozen)]
struct CharacterMatrix {
    inner: spectral_nj::CharacterMatrix,
}

#[pymethods]
impl CharacterMatrix {
    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn sites(&self) -> usize {
        self.inner.sites()
    }

    #[getter]
    fn states(&self) -> usize {
        self.inner.states()
    }

    /// Similarity estimate and the number of clamped pairs. `estimator` is
    /// `"jc"` or `"logdet"`.
    #[pyo3(signature = (estimator = "jc"))]
    fn estimate(&self, estimator: &str) -> PyResult<(Similarity, usize)> {
        let est: Estimator = estimator.parse().map_err(err)?;
        let (r, diag) = bench::estimate(&self.inner, est).map_err(err)?;
        Ok((Similarity { inner: r }, diag.clamp_count))
    }

    fn to_text(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_to(&mut buf).map_err(err)?;
        Ok(String::from_utf8(buf).expect("character files are ASCII"))
    }
}

/// Generates a tree with constant affinity `delta` (tight example: `xi` on the central edge).
#[pyfunction]
#[pyo3(signature = (kind, m, delta = 0.9, seed = 0, xi = None))]
fn generate_tree(kind: &str, m: usize, delta: f64, seed: u64, xi: Option<f64>) -> PyResult<Tree> {
    let kind: TreeKind = kind.parse().map_err(err)?;
    let spec = GenSpec { xi, ..GenSpec::new(kind, m, seed, delta) };
    let (topology, aff) = spec.generate().map_err(err)?;
    Ok(Tree { topology, affinities: Some(aff) })
}

/// Simulates `n` Jukes-Cantor sites over `d` states on a tree with affinities.
#[pyfunction]
#[pyo3(signature = (tree, n, d = 4, seed = 0, gamma_shape = None))]
fn simulate(tree: &Tree, n: usize, d: usize, seed: u64, gamma_shape: Option<f64>) -> PyResult<CharacterMatrix> {
    let aff = tree.affinities.as_ref().ok_or_else(|| PyValueError::new_err("tree has no edge affinities"))?;
    let model = model_from_affinities(&tree.topology, aff, d).map_err(err)?;
    let rates = gamma_shape.map(|s| SiteRates::gamma(n, s, seed)).transpose().map_err(err)?;
    let inner = spectral_nj::simulate(&model, n, seed, rates.as_ref()).map_err(err)?;
    Ok(CharacterMatrix { inner })
}

/// Reconstructs a tree with `method` in {"snj", "nj", "maxq"}. NJ runs on
/// `-ln R` with entries floored at `floor`. Returns the tree and the merge
/// trace as JSON lines.
#[pyfunction]
#[pyo3(signature = (similarity, method = "snj", floor = 1e-12))]
fn reconstruct(py: Python<'_>, similarity: &Similarity, method: &str, floor: f64) -> PyResult<(Tree, String)> {
    let method: Method = method.parse().map_err(err)?;
    let r = similarity.inner.clone();
    let (topology, trace) = py
        .detach(move || match method {
            Method::Nj => spectral_nj::nj(&affinity_to_distance(&floor_similarity(&r, floor))?),
            _ => method.run(&r),
        })
        .map_err(err)?;
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).map_err(err)?;
    Ok((Tree { topology, affinities: None }, String::from_utf8(buf).expect("trace is UTF-8")))
}

/// Runs the invariant battery; one dict per property.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify<'py>(py: Python<'py>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = py.detach(|| properties::run_battery(&BatteryConfig { seed, ..Default::default() }));
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("passed", r.passed)?;
            d.set_item("checked", r.checked)?;
            d.set_item("worst", r.worst)?;
            d.set_item("tolerance", r.tolerance)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn spectral_nj_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tree>()?;
    m.add_class::<Similarity>()?;
    m.add_class::<CharacterMatrix>()?;
    m.add_function(wrap_pyfunction!(generate_tree, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
