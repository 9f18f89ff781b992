//! Markov random fields on trees: Jukes–Cantor transition matrices, sequence
//! simulation and the exact population similarity matrix.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::generate::gamma_mean_one;
use crate::rng;
use crate::similarity::SimilarityMatrix;
use crate::tree::{EdgeAffinities, Topology};

/// Column-stochastic `d x d` matrix; entry `(a, b)` is `Pr[child = a | parent = b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    /// Row-major entries. Columns must sum to one.
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        if d < 2 || entries.len() != d * d {
            return Err(param(format!("need a {d}x{d} matrix with d >= 2")));
        }
        if entries.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(param("transition probabilities must lie in [0,1]"));
        }
        for b in 0..d {
            let s: f64 = (0..d).map(|a| entries[a * d + b]).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(param(format!("column {b} sums to {s}")));
            }
        }
        Ok(TransitionMatrix { d, entries })
    }

    pub fn states(&self) -> usize {
        self.d
    }

    pub fn get(&self, child: usize, parent: usize) -> f64 {
        self.entries[child * self.d + parent]
    }

    pub fn determinant(&self) -> f64 {
        nalgebra::DMatrix::from_row_slice(self.d, self.d, &self.entries).determinant()
    }

    fn sample_child<R: rand::Rng>(&self, parent: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for a in 0..self.d {
            acc += self.get(a, parent);
            if u < acc {
                return a;
            }
        }
        // Rounding left a sliver above the last cumulative sum.
        (0..self.d).rev().find(|&a| self.get(a, parent) > 0.0).unwrap_or(parent)
    }
}

fn check_theta(theta: f64, d: usize) -> Result<()> {
    if d < 2 {
        return Err(param(format!("need at least 2 states, got {d}")));
    }
    let max = (d - 1) as f64 / d as f64;
    if !(theta >= 0.0 && theta < max) {
        return Err(param(format!("theta must lie in [0, {max}), got {theta}")));
    }
    Ok(())
}

/// JC matrix: `1 - theta` on the diagonal, `theta / (d - 1)` elsewhere.
pub fn jc_transition(theta: f64, d: usize) -> Result<TransitionMatrix> {
    check_theta(theta, d)?;
    let off = theta / (d - 1) as f64;
    let entries = (0..d * d)
        .map(|k| if k / d == k % d { 1.0 - theta } else { off })
        .collect();
    Ok(TransitionMatrix { d, entries })
}

/// Affinity of a JC edge with mutation probability `theta`.
pub fn affinity_from_theta(theta: f64, d: usize) -> Result<f64> {
    check_theta(theta, d)?;
    let k = d as f64 / (d - 1) as f64;
    Ok((1.0 - k * theta).powi(d as i32 - 1))
}

/// Inverse of [`affinity_from_theta`].
pub fn theta_from_affinity(r: f64, d: usize) -> Result<f64> {
    if d < 2 {
        return Err(param(format!("need at least 2 states, got {d}")));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(param(format!("affinity must lie in (0,1], got {r}")));
    }
    Ok(jc_theta(r, d))
}

fn jc_theta(r: f64, d: usize) -> f64 {
    let dm1 = (d - 1) as f64;
    dm1 / d as f64 * (1.0 - r.powf(1.0 / dm1))
}

/// A Markov random field on a tree, simulated from an internal root node.
#[derive(Clone, Debug)]
pub struct MarkovTreeModel {
    topology: Topology,
    d: usize,
    /// Per edge `(u, v)`: matrix for `v | u` and matrix for `u | v`.
    transitions: Vec<(TransitionMatrix, TransitionMatrix)>,
    root: usize,
    root_distribution: Vec<f64>,
    /// Edge affinities when the model is JC; needed for per-site rates.
    jc_affinities: Option<EdgeAffinities>,
}

impl MarkovTreeModel {
    /// General model from user-supplied directed transition matrices.
    pub fn new(
        topology: Topology,
        d: usize,
        transitions: Vec<(TransitionMatrix, TransitionMatrix)>,
        root: usize,
        root_distribution: Vec<f64>,
    ) -> Result<Self> {
        if transitions.len() != topology.edge_count() {
            return Err(param("one transition pair per edge required"));
        }
        if transitions.iter().any(|(a, b)| a.states() != d || b.states() != d) {
            return Err(param("transition matrices must all be d x d"));
        }
        if root >= topology.node_count() {
            return Err(param("root node out of range"));
        }
        if root_distribution.len() != d
            || root_distribution.iter().any(|&p| p < 0.0)
            || (root_distribution.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(param("root distribution must be a probability vector of length d"));
        }
        Ok(MarkovTreeModel {
            topology,
            d,
            transitions,
            root,
            root_distribution,
            jc_affinities: None,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn states(&self) -> usize {
        self.d
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// `(P[v | u], P[u | v])` for edge `(u, v)`.
    pub fn transition(&self, edge: usize) -> &(TransitionMatrix, TransitionMatrix) {
        &self.transitions[edge]
    }

    pub fn jc_affinities(&self) -> Option<&EdgeAffinities> {
        self.jc_affinities.as_ref()
    }
}

/// JC model whose edge mutation probabilities reproduce the given affinities.
pub fn model_from_affinities(t: &Topology, aff: &EdgeAffinities, d: usize) -> Result<MarkovTreeModel> {
    if aff.len() != t.edge_count() {
        return Err(param("affinities do not match the topology"));
    }
    let transitions = aff
        .values()
        .iter()
        .map(|&r| {
            let m = jc_transition(theta_from_affinity(r, d)?, d)?;
            Ok((m.clone(), m))
        })
        .collect::<Result<Vec<_>>>()?;
    let root = if t.node_count() > t.leaf_count() { t.leaf_count() } else { 0 };
    let mut model = MarkovTreeModel::new(t.clone(), d, transitions, root, vec![1.0 / d as f64; d])?;
    model.jc_affinities = Some(aff.clone());
    Ok(model)
}

/// Observed states at the terminal nodes: `m` rows, `n` sites.
///
/// States are stored zero-based (`0..d`); the text format writes them as
/// `1..=d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacterMatrix {
    labels: Vec<String>,
    n: usize,
    d: usize,
    data: Vec<u8>,
}

impl CharacterMatrix {
    pub fn new(labels: Vec<String>, n: usize, d: usize, data: Vec<u8>) -> Result<Self> {
        if labels.is_empty() || n == 0 {
            return Err(param("character matrix dimensions must be positive"));
        }
        if !(2..=255).contains(&d) {
            return Err(param(format!("state count {d} unsupported")));
        }
        if data.len() != labels.len() * n {
            return Err(param("data length does not match m x n"));
        }
        if data.iter().any(|&s| s as usize >= d) {
            return Err(param("state out of range"));
        }
        Ok(CharacterMatrix { labels, n, d, data })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn sites(&self) -> usize {
        self.n
    }

    pub fn states(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Zero-based state of leaf `i` at site `s`.
    pub fn get(&self, i: usize, s: usize) -> usize {
        self.data[i * self.n + s] as usize
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Text form: `#labels ...`, then `m n d`, then one row per leaf of
    /// space-separated states in `1..=d`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#labels {}", self.labels.join(" "))?;
        writeln!(w, "{} {} {}", self.rows(), self.n, self.d)?;
        let mut line = String::with_capacity(self.n * 3);
        for i in 0..self.rows() {
            line.clear();
            for (s, &x) in self.row(i).iter().enumerate() {
                if s > 0 {
                    line.push(' ');
                }
                write!(line, "{}", x as usize + 1).unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let fmt_err = |line: usize, message: &str| Error::Format {
            line,
            message: message.to_string(),
        };
        let mut labels: Option<Vec<String>> = None;
        let mut header: Option<(usize, usize, usize)> = None;
        let mut data = Vec::new();
        let mut rows = 0;
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = k + 1;
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix("#labels") {
                labels = Some(rest.split_whitespace().map(str::to_string).collect());
                continue;
            }
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((m, n, d)) = header else {
                let nums: Vec<usize> = trimmed
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| fmt_err(lineno, "header must be 'm n d'")))
                    .collect::<Result<_>>()?;
                if nums.len() != 3 {
                    return Err(fmt_err(lineno, "header must be 'm n d'"));
                }
                header = Some((nums[0], nums[1], nums[2]));
                data.reserve(nums[0] * nums[1]);
                continue;
            };
            if rows == m {
                return Err(fmt_err(lineno, "more rows than declared"));
            }
            let before = data.len();
            for tok in trimmed.split_whitespace() {
                let s: usize = tok.parse().map_err(|_| fmt_err(lineno, "non-integer state"))?;
                if s == 0 || s > d {
                    return Err(fmt_err(lineno, "state outside 1..=d"));
                }
                data.push((s - 1) as u8);
            }
            if data.len() - before != n {
                return Err(fmt_err(lineno, "row length differs from n"));
            }
            rows += 1;
        }
        let (m, n, d) = header.ok_or_else(|| fmt_err(0, "missing header"))?;
        if rows != m {
            return Err(fmt_err(0, "fewer rows than declared"));
        }
        let labels = labels.unwrap_or_else(|| (1..=m).map(|i| format!("x{i}")).collect());
        if labels.len() != m {
            return Err(fmt_err(0, "label count differs from m"));
        }
        CharacterMatrix::new(labels, n, d, data)
    }
}

/// Positive per-site rate multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRates(Vec<f64>);

impl SiteRates {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(param("site rates must be positive and finite"));
        }
        Ok(SiteRates(rates))
    }

    /// `n` i.i.d. draws from the mean-one Gamma distribution.
    pub fn gamma(n: usize, shape: f64, seed: u64) -> Result<Self> {
        let g = gamma_mean_one(shape)?;
        let mut r = rng::stream(seed, &[rng::tag("site_rates"), n as u64]);
        Self::new((0..n).map(|_| g.sample(&mut r).max(f64::MIN_POSITIVE)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws `n` i.i.d. sites from the model and returns the leaf rows.
///
/// Each site has its own RNG stream keyed by `(seed, site)`, so the output
/// does not depend on how sites are scheduled across threads. With
/// `site_rates`, site `s` uses JC edges of affinity `r(e)^{rate_s}`.
pub fn simulate(model: &MarkovTreeModel, n: usize, seed: u64, site_rates: Option<&SiteRates>) -> Result<CharacterMatrix> {
    if n == 0 {
        return Err(param("n must be at least 1"));
    }
    if let Some(r) = site_rates {
        if r.len() != n {
            return Err(param(format!("{} site rates for {n} sites", r.len())));
        }
        if model.jc_affinities.is_none() {
            return Err(param("site rates require a Jukes-Cantor model"));
        }
    }
    let t = &model.topology;
    let m = t.leaf_count();
    let d = model.d;
    let rooted = t.preorder(model.root);
    // (parent, child, edge, child is the second endpoint of the edge)
    let steps: Vec<(usize, usize, usize, bool)> = rooted
        .order
        .iter()
        .filter_map(|&v| rooted.parent[v].map(|(p, e)| (p, v, e, t.edges()[e].1 == v)))
        .collect();
    let root_cdf: Vec<f64> = model
        .root_distribution
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let columns: Vec<Vec<u8>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::stream(seed, &[rng::tag("simulate"), s as u64]);
            let mut state = vec![0usize; t.node_count()];
            let u: f64 = rng.random();
            state[model.root] = root_cdf.iter().position(|&c| u < c).unwrap_or(d - 1);
            match site_rates {
                None => {
                    for &(p, c, e, forward) in &steps {
                        let (fwd, bwd) = &model.transitions[e];
                        let mat = if forward { fwd } else { bwd };
                        state[c] = mat.sample_child(state[p], &mut rng);
                    }
                }
                Some(rates) => {
                    let aff = model.jc_affinities.as_ref().unwrap();
                    let rate = rates.0[s];
                    for &(p, c, e, _) in &steps {
                        let theta = jc_theta(aff.get(e).powf(rate), d);
                        state[c] = if rng.random::<f64>() < theta {
                            // Uniform over the d - 1 other states.
                            let k = rng.random_range(0..d - 1);
                            if k >= state[p] { k + 1 } else { k }
                        } else {
                            state[p]
                        };
                    }
                }
            }
            state[..m].iter().map(|&x| x as u8).collect()
        })
        .collect();

    let mut data = vec![0u8; m * n];
    for (s, col) in columns.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data[i * n + s] = x;
        }
    }
    CharacterMatrix::new(t.labels().to_vec(), n, d, data)
}

/// Exact similarity: `R(i,j)` is the product of edge affinities along the
/// path from leaf `i` to leaf `j`; the diagonal is 1.
pub fn population_similarity(t: &Topology, aff: &EdgeAffinities) -> SimilarityMatrix {
    let m = t.leaf_count();
    let mut r = nalgebra::DMatrix::from_element(m, m, 1.0);
    for i in 0..m {
        let rooted = t.preorder(i);
        let mut prod = vec![1.0; t.node_count()];
        for &v in &rooted.order {
            if let Some((p, e)) = rooted.parent[v] {
                prod[v] = prod[p] * aff.get(e);
            }
        }
        for j in 0..m {
            if j != i {
                r[(i, j)] = prod[j];
            }
        }
    }
    // Enforce exact symmetry against rounding in the two traversal orders.
    for i in 0..m {
        for j in i + 1..m {
            r[(j, i)] = r[(i, j)];
        }
    }
    SimilarityMatrix::from_matrix(t.labels().to_vec(), r).expect("population similarity is valid")
}
