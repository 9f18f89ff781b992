//! Benchmark grids and the concentration experiment behind `snj benchmark`
//! and `snj concentration`.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::generate::{assign_gamma_affinity, GenSpec, TreeKind};
use crate::markov::{model_from_affinities, population_similarity, simulate, CharacterMatrix, SiteRates};
use crate::reconstruct::{max_quartet_nj, nj, singular_values, snj, Method};
use crate::rng;
use crate::similarity::{
    affinity_to_distance, estimate_jc_similarity, estimate_logdet_similarity, floor_similarity, jc_resolution_floor,
    EstimatorDiagnostics, SimilarityMatrix,
};
use crate::tree::{cherry_count, rf_distance, EdgeAffinities, Topology};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Jc,
    Logdet,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Jc => "jc",
            Estimator::Logdet => "logdet",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jc" => Ok(Estimator::Jc),
            "logdet" | "general" => Ok(Estimator::Logdet),
            other => Err(param(format!("unknown estimator '{other}' (expected jc or logdet)"))),
        }
    }
}

/// Where Gamma heterogeneity enters: one draw per edge or one per site.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    #[default]
    Edge,
    Site,
}

/// One experiment cell: every `(m, n)` combination, `trials` times, with
/// every listed method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    #[serde(default)]
    pub name: Option<String>,
    pub tree_kind: TreeKind,
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    #[serde(default = "default_d")]
    pub d: usize,
    pub delta: f64,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub gamma_shape: Option<f64>,
    #[serde(default)]
    pub rate_model: RateModel,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    pub methods: Vec<Method>,
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
}

fn default_d() -> usize {
    4
}

fn default_estimator() -> Estimator {
    Estimator::Jc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub schema: u32,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(rename = "cell")]
    pub cells: Vec<Cell>,
}

const DESK_PRESET: &str = include_str!("../configs/desk.toml");
const PAPER_PRESET: &str = include_str!("../configs/paper.toml");

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| param(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Built-in grids: `desk` (acceptance scale) and `paper` (m = 512).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Self::from_toml(DESK_PRESET),
            "paper" => Self::from_toml(PAPER_PRESET),
            other => Err(param(format!("unknown preset '{other}' (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(param(format!("config schema {} is not supported (expected {SCHEMA})", self.schema)));
        }
        if self.cells.is_empty() {
            return Err(param("config has no cells"));
        }
        for (i, c) in self.cells.iter().enumerate() {
            let fail = |msg: &str| Err(param(format!("cell {i}: {msg}")));
            if c.trials == 0 {
                return fail("trials must be at least 1");
            }
            if c.methods.is_empty() {
                return fail("methods must be non-empty");
            }
            if c.m.is_empty() || c.n.is_empty() {
                return fail("m and n lists must be non-empty");
            }
            if c.m.iter().any(|&m| m < 4) {
                return fail("m must be at least 4");
            }
            if c.n.contains(&0) {
                return fail("n must be at least 1");
            }
            if c.d < 2 {
                return fail("d must be at least 2");
            }
            if !(c.delta > 0.0 && c.delta < 1.0) {
                return fail("delta must lie in (0,1)");
            }
            if c.tree_kind == TreeKind::TightExample && c.xi.is_none() {
                return fail("tight example needs xi");
            }
            if let Some(s) = c.gamma_shape {
                if !(s > 0.0 && s.is_finite()) {
                    return fail("gamma_shape must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn row_count(&self) -> usize {
        self.cells.iter().map(|c| c.m.len() * c.n.len() * c.trials * c.methods.len()).sum()
    }
}

/// One reconstruction, as written to the benchmark CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub tree_kind: String,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub xi: Option<f64>,
    pub shape: Option<f64>,
    pub estimator: String,
    pub trial_seed: u64,
    pub rf_distance: Option<usize>,
    pub normalized_rf: Option<f64>,
    pub runtime_ms: f64,
    pub cherries_true: Option<usize>,
    pub cherries_est: Option<usize>,
    pub clamp_count: Option<usize>,
    /// Empty unless the trial failed.
    pub error: String,
}

/// Tree and edge affinities for one trial.
pub fn cell_tree(cell: &Cell, m: usize, seed: u64) -> Result<(Topology, EdgeAffinities)> {
    let spec = GenSpec { xi: cell.xi, ..GenSpec::new(cell.tree_kind, m, seed, cell.delta) };
    match (cell.gamma_shape, cell.rate_model) {
        (Some(shape), RateModel::Edge) if cell.tree_kind != TreeKind::TightExample => {
            let t = spec.topology()?;
            let aff = assign_gamma_affinity(&t, cell.delta, shape, seed)?;
            Ok((t, aff))
        }
        _ => spec.generate(),
    }
}

/// Similarity estimate from character data.
pub fn estimate(x: &CharacterMatrix, estimator: Estimator) -> Result<(SimilarityMatrix, EstimatorDiagnostics)> {
    match estimator {
        Estimator::Jc => Ok(estimate_jc_similarity(x)),
        Estimator::Logdet => estimate_logdet_similarity(x, 0.0),
    }
}

/// Runs `method` on an estimated similarity from `n` sites over `d` states.
/// NJ sees `-ln` of the estimate floored at the JC resolution floor, so a
/// saturated pair maps to a large finite distance. Returns the topology and
/// the wall-clock time of the reconstruction call alone.
pub fn reconstruct_estimated(method: Method, r: &SimilarityMatrix, n: usize, d: usize) -> Result<(Topology, f64)> {
    match method {
        Method::Nj => {
            let dist = affinity_to_distance(&floor_similarity(r, jc_resolution_floor(n, d)))?;
            let start = Instant::now();
            let (t, _) = nj(&dist)?;
            Ok((t, start.elapsed().as_secs_f64() * 1e3))
        }
        Method::Snj | Method::Maxq => {
            let start = Instant::now();
            let (t, _) = if method == Method::Snj { snj(r)? } else { max_quartet_nj(r)? };
            Ok((t, start.elapsed().as_secs_f64() * 1e3))
        }
    }
}

fn simulation_seed(trial_seed: u64, n: usize) -> u64 {
    rng::derive_seed(trial_seed, &[rng::tag("bench_simulate"), n as u64])
}

struct Job<'a> {
    cell_index: usize,
    cell: &'a Cell,
    m_index: usize,
    n_index: usize,
    trial: usize,
}

fn run_job(job: &Job) -> Vec<ResultRow> {
    let cell = job.cell;
    let m = cell.m[job.m_index];
    let n = cell.n[job.n_index];
    let trial_seed = cell.base_seed + job.trial as u64;
    let blank = |method: Method| ResultRow {
        method: method.name().into(),
        tree_kind: cell.tree_kind.name().into(),
        m,
        n,
        d: cell.d,
        delta: cell.delta,
        xi: cell.xi,
        shape: cell.gamma_shape,
        estimator: cell.estimator.name().into(),
        trial_seed,
        rf_distance: None,
        normalized_rf: None,
        runtime_ms: 0.0,
        cherries_true: None,
        cherries_est: None,
        clamp_count: None,
        error: String::new(),
    };
    let prepared = (|| -> Result<_> {
        let (t, aff) = cell_tree(cell, m, trial_seed)?;
        let model = model_from_affinities(&t, &aff, cell.d)?;
        let sim_seed = simulation_seed(trial_seed, n);
        let rates = match (cell.gamma_shape, cell.rate_model) {
            (Some(shape), RateModel::Site) => Some(SiteRates::gamma(n, shape, sim_seed)?),
            _ => None,
        };
        let x = simulate(&model, n, sim_seed, rates.as_ref())?;
        let (r, diag) = estimate(&x, cell.estimator)?;
        Ok((t, r, diag))
    })();
    let (t, r, diag) = match prepared {
        Ok(p) => p,
        Err(e) => {
            return cell.methods.iter().map(|&method| ResultRow { error: e.to_string(), ..blank(method) }).collect();
        }
    };
    let cherries_true = cherry_count(&t);
    cell.methods
        .iter()
        .map(|&method| {
            let mut row = ResultRow { cherries_true: Some(cherries_true), clamp_count: Some(diag.clamp_count), ..blank(method) };
            match reconstruct_estimated(method, &r, n, cell.d).and_then(|(est, ms)| Ok((rf_distance(&t, &est)?, est, ms))) {
                Ok((rf, est, ms)) => {
                    row.rf_distance = Some(rf);
                    row.normalized_rf = Some(rf as f64 / (2 * (m - 3)) as f64);
                    row.runtime_ms = ms;
                    row.cherries_est = Some(cherry_count(&est));
                }
                Err(e) => row.error = e.to_string(),
            }
            row
        })
        .collect()
}

/// Runs every cell. Trials run concurrently; rows come back ordered by
/// cell, m, n, trial and then the cell's method order.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (cell_index, cell) in cfg.cells.iter().enumerate() {
        for m_index in 0..cell.m.len() {
            for n_index in 0..cell.n.len() {
                for trial in 0..cell.trials {
                    jobs.push(Job { cell_index, cell, m_index, n_index, trial });
                }
            }
        }
    }
    type Key = (usize, usize, usize, usize);
    let mut results: Vec<(Key, Vec<ResultRow>)> = jobs
        .par_iter()
        .map(|j| ((j.cell_index, j.m_index, j.n_index, j.trial), run_job(j)))
        .collect();
    results.sort_by_key(|(k, _)| *k);
    Ok(results.into_iter().flat_map(|(_, rows)| rows).collect())
}

pub fn write_rows<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Io(e.to_string()))
}

/// Mean RF distance of `method` per `n`, over rows without errors.
pub fn mean_rf_by_n(rows: &[ResultRow], method: &str) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let rf: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.method == method)
                .filter_map(|r| r.rf_distance.map(|v| v as f64))
                .collect();
            (n, rf.iter().sum::<f64>() / rf.len().max(1) as f64)
        })
        .collect()
}

/// Settings for the concentration experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationConfig {
    pub m: usize,
    pub d: usize,
    pub delta: f64,
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub n: usize,
    pub trials: usize,
    pub mean_max_error: f64,
    pub mean_spectral_error: f64,
}

/// For each `n`, simulates `trials` JC samples on a caterpillar with `m`
/// leaves (the quartet when `m = 4`) and constant affinity `delta`, and
/// averages `||R_hat - R||_max` and `||R_hat - R||_2` over off-diagonal entries.
pub fn concentration(cfg: &ConcentrationConfig) -> Result<Vec<ConcentrationRow>> {
    if cfg.n_list.is_empty() {
        return Err(param("n list is empty"));
    }
    if cfg.n_list.contains(&0) {
        return Err(param("n must be at least 1"));
    }
    if cfg.trials == 0 {
        return Err(param("trials must be at least 1"));
    }
    let (t, aff) = GenSpec::new(TreeKind::Caterpillar, cfg.m, cfg.seed, cfg.delta).generate()?;
    let model = model_from_affinities(&t, &aff, cfg.d)?;
    let truth = population_similarity(&t, &aff);
    cfg.n_list
        .iter()
        .map(|&n| {
            let errors: Vec<(f64, f64)> = (0..cfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let seed = rng::derive_seed(cfg.seed, &[rng::tag("concentration"), n as u64, trial as u64]);
                    let x = simulate(&model, n, seed, None)?;
                    let (r, _) = estimate_jc_similarity(&x);
                    let diff = r.matrix() - truth.matrix();
                    let max = diff.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let spectral = singular_values(&diff)[0];
                    Ok((max, spectral))
                })
                .collect::<Result<_>>()?;
            let k = errors.len() as f64;
            Ok(ConcentrationRow {
                n,
                trials: cfg.trials,
                mean_max_error: errors.iter().map(|e| e.0).sum::<f64>() / k,
                mean_spectral_error: errors.iter().map(|e| e.1).sum::<f64>() / k,
            })
        })
        .collect()
}

pub fn write_concentration<W: Write>(rows: &[ConcentrationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(param("slope needs at least two positive points"));
    }
    let k = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / k, sy / k);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x.ln() - mx, y.ln() - my);
        sxy += dx * dy;
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cell() -> Cell {
        Cell {
            name: None,
            tree_kind: TreeKind::Coalescent,
            m: vec![8],
            n: vec![200, 400],
            d: 4,
            delta: 0.85,
            xi: None,
            gamma_shape: None,
            rate_model: RateModel::Edge,
            estimator: Estimator::Jc,
            methods: vec![Method::Snj, Method::Nj],
            trials: 3,
            base_seed: 10,
        }
    }

    #[test]
    fn presets_parse() {
        let desk = BenchConfig::preset("desk").unwrap();
        assert_eq!(desk.cells[0].tree_kind, TreeKind::Caterpillar);
        assert_eq!(desk.cells[0].trials, 20);
        assert_eq!(desk.cells[0].m.len() * desk.cells[0].n.len() * desk.cells[0].trials * 2, 4 * 20 * 2);
        BenchConfig::preset("paper").unwrap();
        assert!(BenchConfig::preset("nope").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = BenchConfig { schema: 1, output: None, cells: vec![small_cell()] };
        assert_eq!(BenchConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BenchConfig { schema: 2, output: None, cells: vec![small_cell()] };
        assert!(cfg.validate().is_err());
        cfg.schema = 1;
        cfg.cells[0].trials = 0;
        assert!(cfg.validate().is_err());
        cfg.cells[0].trials = 1;
        cfg.cells[0].methods.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rows_are_ordered_and_deterministic() {
        let cfg = BenchConfig { schema: 1, output: None, cells: vec![small_cell()] };
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(a.len(), cfg.row_count());
        let strip = |rows: &[ResultRow]| rows.iter().map(|r| ResultRow { runtime_ms: 0.0, ..r.clone() }).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        let keys: Vec<(usize, u64)> = a.iter().map(|r| (r.n, r.trial_seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for r in &a {
            let rf = r.rf_distance.unwrap();
            assert!(rf % 2 == 0 && rf <= 2 * (r.m - 3));
            assert!(r.runtime_ms >= 0.0 && r.error.is_empty());
        }
    }

    #[test]
    fn failures_become_rows() {
        let mut cell = small_cell();
        cell.estimator = Estimator::Logdet;
        cell.n = vec![1];
        cell.trials = 1;
        let rows = run_benchmark(&BenchConfig { schema: 1, output: None, cells: vec![cell] }).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.error.is_empty() && r.rf_distance.is_none()));
    }

    #[test]
    fn csv_round_trip_keeps_columns() {
        let cfg = BenchConfig { schema: 1, output: None, cells: vec![small_cell()] };
        let rows = run_benchmark(&cfg).unwrap();
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "method,tree_kind,m,n,d,delta,xi,shape,estimator,trial_seed,rf_distance,normalized_rf,runtime_ms,cherries_true,cherries_est,clamp_count,error\n"
        ));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 4.0, 16.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-0.5))).collect();
        assert!((log_log_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn concentration_rejects_zero_n() {
        let cfg = ConcentrationConfig { m: 4, d: 4, delta: 0.9, n_list: vec![0], trials: 1, seed: 0 };
        assert!(concentration(&cfg).is_err());
    }

    #[test]
    fn concentration_errors_shrink() {
        let cfg = ConcentrationConfig { m: 4, d: 4, delta: 0.9, n_list: vec![500, 8000], trials: 10, seed: 1 };
        let rows = concentration(&cfg).unwrap();
        assert!(rows[1].mean_max_error < rows[0].mean_max_error);
        assert!(rows[1].mean_spectral_error < rows[0].mean_spectral_error);
    }
}
