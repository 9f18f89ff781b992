//! Tree generators and affinity assignment schemes.
//!
//! Leaves are labeled `x1..xm`. Deterministic generators ignore the seed;
//! random ones draw from a stream keyed by `(seed, kind, m)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng;
use crate::tree::{EdgeAffinities, Topology};

/// Lower clamp used by the Gamma affinity scheme; values are kept inside
/// `[GAMMA_CLAMP, 1 - GAMMA_CLAMP]`.
pub const GAMMA_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Caterpillar,
    PerfectBinary,
    Coalescent,
    BirthDeath,
    TightExample,
}

impl TreeKind {
    pub fn name(self) -> &'static str {
        match self {
            TreeKind::Caterpillar => "caterpillar",
            TreeKind::PerfectBinary => "perfect_binary",
            TreeKind::Coalescent => "coalescent",
            TreeKind::BirthDeath => "birth_death",
            TreeKind::TightExample => "tight_example",
        }
    }
}

impl fmt::Display for TreeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TreeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "caterpillar" | "cat" => Ok(TreeKind::Caterpillar),
            "perfect_binary" | "binary" => Ok(TreeKind::PerfectBinary),
            "coalescent" => Ok(TreeKind::Coalescent),
            "birth_death" | "bd" => Ok(TreeKind::BirthDeath),
            "tight_example" | "tight" => Ok(TreeKind::TightExample),
            other => Err(param(format!("unknown tree kind '{other}'"))),
        }
    }
}

/// Full description of a generated tree model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: TreeKind,
    pub m: usize,
    pub seed: u64,
    pub birth_rate: f64,
    pub death_rate: f64,
    pub delta: f64,
    pub xi: Option<f64>,
}

impl GenSpec {
    pub fn new(kind: TreeKind, m: usize, seed: u64, delta: f64) -> Self {
        GenSpec {
            kind,
            m,
            seed,
            birth_rate: 1.0,
            death_rate: 0.5,
            delta,
            xi: None,
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        match self.kind {
            TreeKind::Caterpillar => caterpillar(self.m),
            TreeKind::PerfectBinary | TreeKind::TightExample => perfect_binary(self.m),
            TreeKind::Coalescent => coalescent(self.m, self.seed),
            TreeKind::BirthDeath => birth_death(self.m, self.seed, self.birth_rate, self.death_rate),
        }
    }

    /// Topology with constant affinity `delta`, or the tight-example
    /// affinities when `kind` is [`TreeKind::TightExample`].
    pub fn generate(&self) -> Result<(Topology, EdgeAffinities)> {
        if self.kind == TreeKind::TightExample {
            let xi = self.xi.ok_or_else(|| param("tight example needs xi"))?;
            let tight = tight_example_tree(self.m, self.delta, xi)?;
            return Ok((tight.topology, tight.affinities));
        }
        let t = self.topology()?;
        let aff = assign_constant_affinity(&t, self.delta)?;
        Ok((t, aff))
    }
}

fn leaf_labels(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("x{i}")).collect()
}

fn check_m(m: usize) -> Result<()> {
    if m < 4 {
        return Err(param(format!("m must be at least 4, got {m}")));
    }
    Ok(())
}

fn check_power_of_two(m: usize) -> Result<()> {
    check_m(m)?;
    if !m.is_power_of_two() {
        return Err(param(format!("m must be a power of two, got {m}")));
    }
    Ok(())
}

/// Internal nodes form a path; each end of the path carries two leaves and
/// every other path node one, labeled in path order.
pub fn caterpillar(m: usize) -> Result<Topology> {
    check_m(m)?;
    let path = |k: usize| m + k;
    let mut edges = vec![(0, path(0)), (1, path(0))];
    for leaf in 2..m - 2 {
        edges.push((leaf, path(leaf - 1)));
    }
    edges.push((m - 2, path(m - 3)));
    edges.push((m - 1, path(m - 3)));
    for k in 0..m - 3 {
        edges.push((path(k), path(k + 1)));
    }
    Topology::from_edges(leaf_labels(m), edges)
}

/// Two complete binary trees of `m/2` leaves joined by a central edge.
pub fn perfect_binary(m: usize) -> Result<Topology> {
    Ok(perfect_binary_with_center(m)?.0)
}

fn perfect_binary_with_center(m: usize) -> Result<(Topology, usize)> {
    check_power_of_two(m)?;
    fn build(lo: usize, hi: usize, next: &mut usize, edges: &mut Vec<(usize, usize)>) -> usize {
        if hi - lo == 1 {
            return lo;
        }
        let mid = (lo + hi) / 2;
        let left = build(lo, mid, next, edges);
        let right = build(mid, hi, next, edges);
        let v = *next;
        *next += 1;
        edges.push((v, left));
        edges.push((v, right));
        v
    }
    let mut next = m;
    let mut edges = Vec::with_capacity(2 * m - 3);
    let left = build(0, m / 2, &mut next, &mut edges);
    let right = build(m / 2, m, &mut next, &mut edges);
    edges.push((left, right));
    let center = edges.len() - 1;
    Ok((Topology::from_edges(leaf_labels(m), edges)?, center))
}

/// Random-merge topology: repeatedly join two uniformly chosen active
/// lineages under a new internal node until three remain, then join those
/// three at a final internal node.
pub fn coalescent(m: usize, seed: u64) -> Result<Topology> {
    check_m(m)?;
    let mut rng = rng::stream(seed, &[rng::tag("coalescent"), m as u64]);
    let mut active: Vec<usize> = (0..m).collect();
    let mut next = m;
    let mut edges = Vec::with_capacity(2 * m - 3);
    while active.len() > 3 {
        let i = rng.random_range(0..active.len());
        let a = active.swap_remove(i);
        let j = rng.random_range(0..active.len());
        let b = active.swap_remove(j);
        edges.push((next, a));
        edges.push((next, b));
        active.push(next);
        next += 1;
    }
    for &a in &active {
        edges.push((next, a));
    }
    Topology::from_edges(leaf_labels(m), edges)
}

/// Forward birth–death process run until `m` lineages are extant, with
/// extinct lineages pruned and the root suppressed.
///
/// Only the topology matters, so the jump chain is simulated directly: every
/// extant lineage is equally likely to carry the next event, which is a
/// birth with probability `birth_rate / (birth_rate + death_rate)`. Runs that
/// go extinct are restarted from the same stream.
pub fn birth_death(m: usize, seed: u64, birth_rate: f64, death_rate: f64) -> Result<Topology> {
    check_m(m)?;
    if !(death_rate >= 0.0 && birth_rate > death_rate && birth_rate.is_finite()) {
        return Err(param(format!(
            "need birth_rate > death_rate >= 0, got ({birth_rate}, {death_rate})"
        )));
    }
    let p_birth = birth_rate / (birth_rate + death_rate);
    let mut rng = rng::stream(seed, &[rng::tag("birth_death"), m as u64]);
    const MAX_RESTARTS: usize = 100_000;
    for _ in 0..MAX_RESTARTS {
        // children[v] is empty for a lineage that never split.
        let mut children: Vec<[usize; 2]> = vec![[usize::MAX; 2]];
        let mut extant = vec![0usize];
        while !extant.is_empty() && extant.len() < m {
            let k = rng.random_range(0..extant.len());
            if rng.random::<f64>() < p_birth {
                let v = extant[k];
                let (a, b) = (children.len(), children.len() + 1);
                children.push([usize::MAX; 2]);
                children.push([usize::MAX; 2]);
                children[v] = [a, b];
                extant[k] = a;
                extant.push(b);
            } else {
                extant.swap_remove(k);
            }
        }
        if extant.len() == m {
            return prune_rooted(&children, &extant);
        }
    }
    Err(param("birth–death process went extinct on every restart"))
}

/// Prunes dead tips, suppresses unary nodes and the root, and returns the
/// unrooted topology with leaves numbered in `extant` order.
fn prune_rooted(children: &[[usize; 2]], extant: &[usize]) -> Result<Topology> {
    let m = extant.len();
    let mut leaf_id = vec![usize::MAX; children.len()];
    for (i, &v) in extant.iter().enumerate() {
        leaf_id[v] = i;
    }
    // Postorder over the raw tree: map each raw node to its pruned node.
    let mut order = Vec::with_capacity(children.len());
    let mut stack = vec![0usize];
    while let Some(v) = stack.pop() {
        order.push(v);
        if children[v][0] != usize::MAX {
            stack.extend(children[v]);
        }
    }
    let mut mapped: Vec<Option<usize>> = vec![None; children.len()];
    let mut kids: Vec<Option<(usize, usize)>> = vec![None; children.len()];
    let mut next = m;
    let mut edges = Vec::with_capacity(2 * m - 2);
    for &v in order.iter().rev() {
        if children[v][0] == usize::MAX {
            mapped[v] = (leaf_id[v] != usize::MAX).then_some(leaf_id[v]);
            continue;
        }
        let [a, b] = children[v];
        mapped[v] = match (mapped[a], mapped[b]) {
            (Some(x), Some(y)) => {
                kids[v] = Some((x, y));
                let id = next;
                next += 1;
                edges.push((id, x));
                edges.push((id, y));
                Some(id)
            }
            (x, y) => x.or(y),
        };
    }
    // The pruned root is binary; replace it by a single edge between its
    // two children.
    let root_raw = order
        .iter()
        .find(|&&v| kids[v].is_some() && mapped[v] == Some(next - 1))
        .copied()
        .expect("pruned tree has a binary root");
    let (x, y) = kids[root_raw].unwrap();
    let root = next - 1;
    edges.retain(|&(u, _)| u != root);
    edges.push((x, y));
    Topology::from_edges(leaf_labels(m), edges)
}

/// Every edge receives affinity `delta`.
pub fn assign_constant_affinity(t: &Topology, delta: f64) -> Result<EdgeAffinities> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param(format!("delta must lie in (0,1), got {delta}")));
    }
    EdgeAffinities::constant(t, delta)
}

/// Edge affinities `delta * r_e` with `r_e ~ Gamma(shape, 1/shape)` i.i.d.
/// (mean one), clamped into `[GAMMA_CLAMP, 1 - GAMMA_CLAMP]`.
pub fn assign_gamma_affinity(t: &Topology, delta: f64, shape: f64, seed: u64) -> Result<EdgeAffinities> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param(format!("delta must lie in (0,1), got {delta}")));
    }
    let gamma = gamma_mean_one(shape)?;
    let mut rng = rng::stream(seed, &[rng::tag("gamma_affinity"), t.leaf_count() as u64]);
    let values = (0..t.edge_count())
        .map(|_| (delta * gamma.sample(&mut rng)).clamp(GAMMA_CLAMP, 1.0 - GAMMA_CLAMP))
        .collect();
    EdgeAffinities::new(t, values)
}

pub(crate) fn gamma_mean_one(shape: f64) -> Result<Gamma<f64>> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(param(format!("gamma shape must be positive, got {shape}")));
    }
    Gamma::new(shape, 1.0 / shape).map_err(|e| param(e.to_string()))
}

/// Perfect binary tree with affinity `delta` everywhere except `xi` on the
/// central edge, plus the two same-position quarters `a` and `c` taken from
/// opposite halves.
#[derive(Clone, Debug)]
pub struct TightExample {
    pub topology: Topology,
    pub affinities: EdgeAffinities,
    pub clan_a: Vec<usize>,
    pub clan_c: Vec<usize>,
}

pub fn tight_example_tree(m: usize, delta: f64, xi: f64) -> Result<TightExample> {
    let (topology, center) = perfect_binary_with_center(m)?;
    if !(delta > 0.0 && delta < 1.0 && xi > 0.0 && xi < 1.0) {
        return Err(param(format!("delta and xi must lie in (0,1), got ({delta}, {xi})")));
    }
    let mut values = vec![delta; topology.edge_count()];
    values[center] = xi;
    let affinities = EdgeAffinities::new(&topology, values)?;
    let q = m / 4;
    Ok(TightExample {
        topology,
        affinities,
        clan_a: (0..q.max(1)).collect(),
        clan_c: (m / 2..m / 2 + q.max(1)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{bipartitions, cherry_count, is_clan, rf_distance, tree_depth, tree_diameter, LeafSet};

    #[test]
    fn caterpillar_shapes() {
        let q = caterpillar(4).unwrap();
        assert_eq!(bipartitions(&q).len(), 1);
        let t5 = caterpillar(5).unwrap();
        let bps = bipartitions(&t5);
        let want = vec![
            LeafSet::from_indices(5, [0, 1]),
            LeafSet::from_indices(5, [0, 1, 2]),
        ];
        let mut got: Vec<LeafSet> = bps.iter().map(|b| b.side_a().clone()).collect();
        got.sort_by_key(|s| s.len());
        assert_eq!(got, want);
        assert_eq!(tree_diameter(&caterpillar(64).unwrap()), 63);
        assert!(caterpillar(3).is_err());
    }

    #[test]
    fn perfect_binary_shapes() {
        let t8 = perfect_binary(8).unwrap();
        assert_eq!(cherry_count(&t8), 4);
        assert_eq!(tree_depth(&t8).unwrap(), 2);
        // Two height-2 halves joined by the central edge.
        assert_eq!(tree_diameter(&t8), 5);
        assert!(is_clan(&t8, &[0, 1, 2, 3]).unwrap());
        assert_eq!(tree_depth(&perfect_binary(16).unwrap()).unwrap(), 3);
        assert_eq!(rf_distance(&perfect_binary(4).unwrap(), &caterpillar(4).unwrap()).unwrap(), 0);
        let err = perfect_binary(12).unwrap_err();
        assert!(err.to_string().contains("power of two"));
    }

    #[test]
    fn coalescent_is_seeded() {
        let a = coalescent(16, 7).unwrap();
        let b = coalescent(16, 7).unwrap();
        assert_eq!(a, b);
        let distinct = (0..20)
            .map(|s| crate::tree::write_newick(&coalescent(16, s).unwrap()))
            .collect::<std::collections::HashSet<_>>();
        assert!(distinct.len() > 10);
        for s in 0..200 {
            let t = coalescent(8, s).unwrap();
            assert_eq!(t.leaf_count(), 8);
        }
        let q = coalescent(4, 99).unwrap();
        assert_eq!(rf_distance(&q, &caterpillar(4).unwrap()).unwrap() <= 2, true);
        assert_eq!(bipartitions(&q).len(), 1);
    }

    #[test]
    fn birth_death_invariants() {
        for s in 0..100 {
            let t = birth_death(16, s, 1.0, 0.5).unwrap();
            assert_eq!(t.leaf_count(), 16);
            assert_eq!(t.edge_count(), 29);
        }
        let yule = birth_death(10, 3, 1.0, 0.0).unwrap();
        assert_eq!(yule.leaf_count(), 10);
        assert_eq!(birth_death(12, 5, 2.0, 1.0).unwrap(), birth_death(12, 5, 2.0, 1.0).unwrap());
        assert!(birth_death(8, 0, 0.5, 0.5).is_err());
        assert!(birth_death(8, 0, 1.0, -0.1).is_err());
    }

    #[test]
    fn affinity_schemes() {
        let t = caterpillar(8).unwrap();
        let c = assign_constant_affinity(&t, 0.85).unwrap();
        assert_eq!(c.delta(), 0.85);
        assert_eq!(c.xi(), 0.85);
        assert!(assign_constant_affinity(&t, 0.0).is_err());
        assert!(assign_constant_affinity(&t, 1.0).is_err());

        let sharp = assign_gamma_affinity(&t, 0.9, 1e6, 1).unwrap();
        assert!(sharp.values().iter().all(|v| (v - 0.9).abs() < 1e-2));
        let wide = assign_gamma_affinity(&t, 0.99, 0.5, 3).unwrap();
        assert!(wide.values().iter().all(|&v| v <= 1.0 - GAMMA_CLAMP && v >= GAMMA_CLAMP));
        assert!(assign_gamma_affinity(&t, 0.9, 0.0, 1).is_err());
        assert_eq!(
            assign_gamma_affinity(&t, 0.9, 5.0, 11).unwrap(),
            assign_gamma_affinity(&t, 0.9, 5.0, 11).unwrap()
        );
    }

    #[test]
    fn gamma_is_mean_one() {
        let g = gamma_mean_one(2.0).unwrap();
        let mut r = rng::stream(5, &[]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| g.sample(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn tight_example_layout() {
        let te = tight_example_tree(8, 0.9, 0.8).unwrap();
        assert_eq!(te.clan_a, vec![0, 1]);
        assert_eq!(te.clan_c, vec![4, 5]);
        assert_eq!(te.affinities.delta(), 0.8);
        assert_eq!(te.affinities.xi(), 0.9);
        let te4 = tight_example_tree(4, 0.9, 0.8).unwrap();
        assert_eq!((te4.clan_a, te4.clan_c), (vec![0], vec![2]));
        assert!(tight_example_tree(12, 0.9, 0.8).is_err());
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("binary".parse::<TreeKind>().unwrap(), TreeKind::PerfectBinary);
        assert_eq!("birth-death".parse::<TreeKind>().unwrap(), TreeKind::BirthDeath);
        assert!("star".parse::<TreeKind>().is_err());
    }
}
