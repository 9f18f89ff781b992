//! Numerical checks of the structural facts spectral neighbor joining rests
//! on: low-rank clan blocks, the quartet and Frobenius identities, the
//! tight-example closed form, population consistency and robustness to
//! bounded perturbations.
//!
//! Every check returns a [`PropertyReport`]. Randomized checks draw their
//! instances from streams keyed by the caller's seed and the check name;
//! fixed structural cases ignore the seed.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::generate::{assign_constant_affinity, tight_example_tree, GenSpec, TreeKind};
use crate::markov::population_similarity;
use crate::reconstruct::{
    cross_similarity, max_quartet_nj, nj, quartet_square_sum, singular_values, snj, snj_exhaustive, MergeTrace,
};
use crate::rng;
use crate::similarity::{affinity_to_distance, DistanceMatrix, SimilarityMatrix};
use crate::tree::{is_clan, rf_distance, write_newick_with_affinities, EdgeAffinities, LeafSet, Topology};

/// Generator kinds used by the population checks.
pub const POPULATION_KINDS: [TreeKind; 4] =
    [TreeKind::Caterpillar, TreeKind::PerfectBinary, TreeKind::Coalescent, TreeKind::BirthDeath];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    /// `sigma2/sigma1` of clan blocks and `sigma3/sigma1` of clan-pair blocks.
    pub rank: f64,
    /// Relative error of the tight-example closed form.
    pub tight: f64,
    /// Quartet identity residual relative to `sigma1^4`.
    pub quartet: f64,
    /// Frobenius identity residual relative to `||R^C||_F^4`.
    pub frobenius: f64,
    /// Slack of the rank-two inequality, relative to `||M||_F^2`.
    pub inequality_slack: f64,
    /// Largest criterion value accepted for a merged pair on population input.
    pub merge: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rank: 1e-10, tight: 1e-10, quartet: 1e-8, frobenius: 1e-10, inequality_slack: 1e-12, merge: 1e-10 }
    }
}

/// A failing instance, serialized so it can be rebuilt and rerun.
#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub property: String,
    pub instance: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyReport {
    pub name: String,
    pub checked: usize,
    /// Largest observed error measure, in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_ms: f64,
    pub failure: Option<Failure>,
}

impl PropertyReport {
    pub fn status_line(&self) -> String {
        format!(
            "{} {:<22} checked={:<5} worst={:.3e} tol={:.1e} ({:.0} ms)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.worst,
            self.tolerance,
            self.elapsed_ms
        )
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    checked: usize,
    worst: f64,
    failure: Option<Failure>,
    start: Instant,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker { name, tolerance, checked: 0, worst: 0.0, failure: None, start: Instant::now() }
    }

    /// Records one instance whose error measure is `err`; it fails when
    /// `err > tolerance` or `ok` is false.
    fn record(&mut self, err: f64, ok: bool, instance: impl FnOnce() -> Value) {
        self.checked += 1;
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
        let pass = ok && err <= self.tolerance;
        if !pass && self.failure.is_none() {
            self.failure = Some(Failure { property: self.name.to_string(), instance: instance() });
        }
    }

    fn error(&mut self, e: &Error, instance: Value) {
        self.checked += 1;
        self.worst = f64::NAN;
        if self.failure.is_none() {
            let mut inst = instance;
            inst["error"] = json!(e.to_string());
            self.failure = Some(Failure { property: self.name.to_string(), instance: inst });
        }
    }

    fn finish(self) -> PropertyReport {
        PropertyReport {
            name: self.name.to_string(),
            checked: self.checked,
            worst: self.worst,
            tolerance: self.tolerance,
            passed: self.failure.is_none(),
            elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
            failure: self.failure,
        }
    }
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn tree_json(t: &Topology, aff: &EdgeAffinities) -> Value {
    json!(write_newick_with_affinities(t, aff))
}

/// Coalescent topology with independent edge affinities in `[0.55, 0.95]`.
pub fn random_model(rng: &mut rng::Rng, m: usize) -> Result<(Topology, EdgeAffinities)> {
    let t = crate::generate::coalescent(m, rng.random())?;
    let values = (0..t.edge_count()).map(|_| rng.random_range(0.55..0.95)).collect();
    let aff = EdgeAffinities::new(&t, values)?;
    Ok((t, aff))
}

/// Clans with at least two leaves on each side.
fn proper_clans(t: &Topology) -> Vec<LeafSet> {
    let m = t.leaf_count();
    t.clans().into_iter().filter(|c| c.len() >= 2 && c.len() + 2 <= m).collect()
}

/// Disjoint clans `(A, B)` whose union leaves at least `outside` leaves.
/// With `non_adjacent`, the union must not itself be a clan.
fn clan_pairs(t: &Topology, outside: usize, min_union: usize, non_adjacent: bool) -> Vec<(LeafSet, LeafSet)> {
    let m = t.leaf_count();
    let clans = t.clans();
    let mut pairs = Vec::new();
    for (i, a) in clans.iter().enumerate() {
        for b in &clans[i + 1..] {
            if !a.is_disjoint(b) {
                continue;
            }
            let c = a.union(b);
            if c.len() < min_union || c.len() + outside > m {
                continue;
            }
            if non_adjacent && is_clan(t, &c.to_vec()).unwrap_or(true) {
                continue;
            }
            pairs.push((a.clone(), b.clone()));
        }
    }
    pairs
}

/// `sigma2/sigma1 <= tol` for the block of a random clan against its complement.
pub fn rank_one_clans(seed: u64, count: usize, tol: f64) -> PropertyReport {
    let mut tr = Tracker::new("rank_one_clans", tol);
    let mut rng = rng::stream(seed, &[rng::tag("rank_one_clans")]);
    for index in 0..count {
        let m = rng.random_range(6..=32);
        let (t, aff) = match random_model(&mut rng, m) {
            Ok(x) => x,
            Err(e) => {
                tr.error(&e, json!({ "seed": seed, "index": index }));
                continue;
            }
        };
        let clans = proper_clans(&t);
        let a = clans[rng.random_range(0..clans.len())].to_vec();
        let r = population_similarity(&t, &aff);
        let block = cross_similarity(&r, &a).expect("clan is a proper subset");
        let sv = singular_values(&block);
        let ratio = sv[1] / sv[0];
        tr.record(ratio, true, || {
            json!({ "seed": seed, "index": index, "tree": tree_json(&t, &aff), "a": a, "matrix": matrix_json(&block) })
        });
    }
    tr.finish()
}

/// For disjoint non-adjacent clans: `sigma3/sigma1 <= tol` and `sigma2/sigma1 > tol`.
pub fn rank_two_pairs(seed: u64, count: usize, tol: f64) -> PropertyReport {
    let mut tr = Tracker::new("rank_two_pairs", tol);
    let mut rng = rng::stream(seed, &[rng::tag("rank_two_pairs")]);
    let mut index = 0;
    while index < count {
        let m = rng.random_range(8..=32);
        let Ok((t, aff)) = random_model(&mut rng, m) else { continue };
        let pairs = clan_pairs(&t, 3, 3, true);
        if pairs.is_empty() {
            continue;
        }
        let (a, b) = &pairs[rng.random_range(0..pairs.len())];
        let c = a.union(b).to_vec();
        let r = population_similarity(&t, &aff);
        let block = cross_similarity(&r, &c).expect("union is a proper subset");
        let sv = singular_values(&block);
        let (s3, s2) = (sv[2] / sv[0], sv[1] / sv[0]);
        tr.record(s3, s2 > tol, || {
            json!({
                "seed": seed, "index": index, "tree": tree_json(&t, &aff),
                "a": a.to_vec(), "b": b.to_vec(), "sigma2_ratio": s2, "matrix": matrix_json(&block),
            })
        });
        index += 1;
    }
    tr.finish()
}

/// `sigma2(R^{A u C})` on the tight example against `(m/4) delta^(2 log2(m/2)) (1 - xi)`.
pub fn tight_example(tol: f64) -> PropertyReport {
    let mut tr = Tracker::new("tight_example", tol);
    for m in [4usize, 8, 16] {
        for (delta, xi) in [(0.9, 0.8), (0.6, 0.95)] {
            let inst = json!({ "m": m, "delta": delta, "xi": xi });
            let tight = match tight_example_tree(m, delta, xi) {
                Ok(t) => t,
                Err(e) => {
                    tr.error(&e, inst);
                    continue;
                }
            };
            let r = population_similarity(&tight.topology, &tight.affinities);
            let mut c: Vec<usize> = tight.clan_a.iter().chain(&tight.clan_c).copied().collect();
            c.sort_unstable();
            let block = cross_similarity(&r, &c).expect("tight clans are proper");
            let sigma2 = singular_values(&block)[1];
            let levels = (m as f64 / 2.0).log2();
            let expected = m as f64 / 4.0 * delta.powf(2.0 * levels) * (1.0 - xi);
            let rel = (sigma2 - expected).abs() / expected;
            tr.record(rel, true, || {
                json!({
                    "m": m, "delta": delta, "xi": xi, "a": tight.clan_a, "c": tight.clan_c,
                    "sigma2": sigma2, "expected": expected, "matrix": matrix_json(&block),
                })
            });
        }
    }
    tr.finish()
}

/// `|4 sigma1^2 sigma2^2 - sum w^2| / sigma1^4` on random clan pairs of
/// coalescent trees with `m = 16`.
pub fn quartet_identity(seed: u64, count: usize, tol: f64) -> PropertyReport {
    let mut tr = Tracker::new("quartet_identity", tol);
    let mut rng = rng::stream(seed, &[rng::tag("quartet_identity")]);
    let mut index = 0;
    while index < count {
        let Ok((t, aff)) = random_model(&mut rng, 16) else { continue };
        let pairs = clan_pairs(&t, 2, 2, false);
        let (a, b) = &pairs[rng.random_range(0..pairs.len())];
        let c = a.union(b).to_vec();
        let r = population_similarity(&t, &aff);
        let block = cross_similarity(&r, &c).expect("union is a proper subset");
        let sv = singular_values(&block);
        let lhs = 4.0 * sv[0] * sv[0] * sv[1] * sv[1];
        let rhs = quartet_square_sum(&block);
        let rel = (lhs - rhs).abs() / sv[0].powi(4);
        tr.record(rel, true, || {
            json!({ "seed": seed, "index": index, "tree": tree_json(&t, &aff), "a": a.to_vec(), "b": b.to_vec(), "lhs": lhs, "rhs": rhs })
        });
        index += 1;
    }
    tr.finish()
}

/// Groups the leaves outside `A u B` by the node of the path between the
/// clans' attachment nodes that they hang from. Returns one leaf list per
/// path node, in path order.
pub fn path_blocks(t: &Topology, a: &LeafSet, b: &LeafSet) -> Result<Vec<Vec<usize>>> {
    let (ha, _, _) = t.clan_edge(a).ok_or_else(|| Error::Subset("A is not a clan".into()))?;
    let (hb, _, _) = t.clan_edge(b).ok_or_else(|| Error::Subset("B is not a clan".into()))?;
    let path = t.path(ha, hb);
    let dist: Vec<Vec<usize>> = path.iter().map(|&p| t.hop_distances(p)).collect();
    let c = a.union(b);
    let mut blocks = vec![Vec::new(); path.len()];
    for x in (0..t.leaf_count()).filter(|&x| !c.contains(x)) {
        let nearest = (0..path.len()).min_by_key(|&j| dist[j][x]).expect("path is nonempty");
        blocks[nearest].push(x);
    }
    Ok(blocks)
}

fn block_norm(r: &SimilarityMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    rows.iter().flat_map(|&i| cols.iter().map(move |&j| r.get(i, j).powi(2))).sum::<f64>().sqrt()
}

/// Both sides of the Frobenius identity for clans `a`, `b`:
/// `||R^C||_F^4 - ||(R^C)^T R^C||_F^2` and the path-block sum.
pub fn frobenius_sides(r: &SimilarityMatrix, t: &Topology, a: &LeafSet, b: &LeafSet) -> Result<(f64, f64, f64)> {
    let c = a.union(b).to_vec();
    let block = cross_similarity(r, &c)?;
    let f2 = block.norm_squared();
    let gram = block.transpose() * &block;
    let lhs = f2 * f2 - gram.norm_squared();
    let blocks = path_blocks(t, a, b)?;
    let (av, bv) = (a.to_vec(), b.to_vec());
    let na: Vec<f64> = blocks.iter().map(|cols| block_norm(r, &av, cols)).collect();
    let nb: Vec<f64> = blocks.iter().map(|cols| block_norm(r, &bv, cols)).collect();
    let mut rhs = 0.0;
    for j in 0..blocks.len() {
        for k in 0..blocks.len() {
            let v = na[j] * nb[k] - nb[j] * na[k];
            rhs += v * v;
        }
    }
    Ok((lhs, rhs, f2 * f2))
}

/// Frobenius identity on random disjoint clan pairs, relative to `||R^C||_F^4`.
pub fn frobenius_identity(seed: u64, count: usize, tol: f64) -> PropertyReport {
    let mut tr = Tracker::new("frobenius_identity", tol);
    let mut rng = rng::stream(seed, &[rng::tag("frobenius_identity")]);
    let mut index = 0;
    while index < count {
        let m = rng.random_range(6..=24);
        let Ok((t, aff)) = random_model(&mut rng, m) else { continue };
        let pairs = clan_pairs(&t, 2, 2, false);
        let (a, b) = &pairs[rng.random_range(0..pairs.len())];
        let r = population_similarity(&t, &aff);
        let inst = || json!({ "seed": seed, "index": index, "tree": tree_json(&t, &aff), "a": a.to_vec(), "b": b.to_vec() });
        match frobenius_sides(&r, &t, a, b) {
            Ok((lhs, rhs, scale)) => tr.record((lhs - rhs).abs() / scale, true, inst),
            Err(e) => tr.error(&e, inst()),
        }
        index += 1;
    }
    tr.finish()
}

/// `sigma2^2 >= (||M||_F^4 - ||M^T M||_F^2) / (2 ||M||_F^2)` on random
/// matrices of rank one or two. The error measure is the violation relative
/// to `||M||_F^2`.
pub fn rank_two_inequality(seed: u64, count: usize, slack: f64) -> PropertyReport {
    let mut tr = Tracker::new("rank_two_inequality", slack);
    let mut rng = rng::stream(seed, &[rng::tag("rank_two_inequality")]);
    for index in 0..count {
        let rows = rng.random_range(2..=12);
        let cols = rng.random_range(2..=12);
        let rank = rng.random_range(1..=2);
        let mut mat = DMatrix::zeros(rows, cols);
        for _ in 0..rank {
            let u = DMatrix::from_fn(rows, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = DMatrix::from_fn(1, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
            mat += u * v;
        }
        let f2 = mat.norm_squared();
        let gram = mat.transpose() * &mat;
        let bound = 0.5 * (f2 * f2 - gram.norm_squared()) / f2;
        let s2 = singular_values(&mat)[1];
        let violation = ((bound - s2 * s2) / f2).max(0.0);
        tr.record(violation, true, || json!({ "seed": seed, "index": index, "rank": rank, "matrix": matrix_json(&mat) }));
    }
    tr.finish()
}

/// Population tree used by the consistency and separation checks.
pub fn population_tree(kind: TreeKind, m: usize, delta: f64, seed: u64) -> Result<(Topology, EdgeAffinities)> {
    let t = GenSpec::new(kind, m, seed, delta).topology()?;
    let aff = assign_constant_affinity(&t, delta)?;
    Ok((t, aff))
}

/// Kinds that can build a tree with `m` leaves.
pub fn kind_supports(kind: TreeKind, m: usize) -> bool {
    m >= 4 && (!matches!(kind, TreeKind::PerfectBinary | TreeKind::TightExample) || m.is_power_of_two())
}

/// SNJ, NJ on `-ln R` and max-quartet NJ recover every population tree.
/// Max-quartet NJ runs only for `m <= maxq_limit`. The error measure is the
/// largest RF distance seen.
pub fn consistency(seed: u64, ms: &[usize], deltas: &[f64], seeds_per_cell: usize, maxq_limit: usize) -> PropertyReport {
    let mut tr = Tracker::new("consistency", 0.0);
    for kind in POPULATION_KINDS {
        for &m in ms.iter().filter(|&&m| kind_supports(kind, m)) {
            for &delta in deltas {
                for s in 0..seeds_per_cell as u64 {
                    let tree_seed = rng::derive_seed(seed, &[rng::tag("consistency"), s]);
                    let inst = json!({ "kind": kind.name(), "m": m, "delta": delta, "tree_seed": tree_seed });
                    match consistency_case(kind, m, delta, tree_seed, m <= maxq_limit) {
                        Ok(worst) => tr.record(worst.0 as f64, true, || {
                            let mut inst = inst.clone();
                            inst["method"] = json!(worst.1);
                            inst
                        }),
                        Err(e) => tr.error(&e, inst),
                    }
                }
            }
        }
    }
    tr.finish()
}

/// Largest RF distance over the methods and the method that produced it.
fn consistency_case(kind: TreeKind, m: usize, delta: f64, seed: u64, with_maxq: bool) -> Result<(usize, &'static str)> {
    let (t, aff) = population_tree(kind, m, delta, seed)?;
    let r = population_similarity(&t, &aff);
    let mut worst = (0, "snj");
    let mut note = |rf: usize, name: &'static str| {
        if rf > worst.0 {
            worst = (rf, name);
        }
    };
    note(rf_distance(&t, &snj(&r)?.0)?, "snj");
    note(rf_distance(&t, &nj(&affinity_to_distance(&r)?)?.0)?, "nj");
    if with_maxq {
        note(rf_distance(&t, &max_quartet_nj(&r)?.0)?, "maxq");
    }
    Ok(worst)
}

/// Criterion values along a population SNJ trace, recomputed by full SVD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceGap {
    /// Largest criterion value of a merged pair.
    pub merged_max: f64,
    /// Smallest criterion value over active pairs whose union is not a clan.
    pub non_adjacent_min: f64,
}

/// Replays `trace` and evaluates `sigma2(R^{A_i u A_j})` for every active
/// pair at every step, classifying pairs by whether their union is a clan of `t`.
pub fn trace_gap(r: &SimilarityMatrix, t: &Topology, trace: &MergeTrace) -> Result<TraceGap> {
    let m = r.size();
    let mut active: Vec<(usize, Vec<usize>)> = (0..m).map(|i| (i, vec![i])).collect();
    let mut gap = TraceGap { merged_max: 0.0, non_adjacent_min: f64::INFINITY };
    for e in &trace.events {
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                let mut c: Vec<usize> = active[i].1.iter().chain(&active[j].1).copied().collect();
                c.sort_unstable();
                let sigma2 = singular_values(&cross_similarity(r, &c)?)[1];
                let ids = (active[i].0, active[j].0);
                if ids == (e.left, e.right) || ids == (e.right, e.left) {
                    gap.merged_max = gap.merged_max.max(sigma2);
                }
                if !is_clan(t, &c)? {
                    gap.non_adjacent_min = gap.non_adjacent_min.min(sigma2);
                }
            }
        }
        active.retain(|(id, _)| *id != e.left && *id != e.right);
        active.push((e.merged, e.members.clone()));
    }
    Ok(gap)
}

/// At every SNJ step on population input the merged pair scores at most
/// `tol` and every non-adjacent pair scores above it.
pub fn clan_separation(seed: u64, ms: &[usize], deltas: &[f64], tol: f64) -> PropertyReport {
    let mut tr = Tracker::new("clan_separation", tol);
    for kind in POPULATION_KINDS {
        for &m in ms.iter().filter(|&&m| kind_supports(kind, m)) {
            for &delta in deltas {
                let tree_seed = rng::derive_seed(seed, &[rng::tag("clan_separation"), m as u64]);
                let inst = json!({ "kind": kind.name(), "m": m, "delta": delta, "tree_seed": tree_seed });
                let run = || -> Result<TraceGap> {
                    let (t, aff) = population_tree(kind, m, delta, tree_seed)?;
                    let r = population_similarity(&t, &aff);
                    let (_, trace) = snj_exhaustive(&r)?;
                    trace_gap(&r, &t, &trace)
                };
                match run() {
                    Ok(g) => tr.record(g.merged_max, g.non_adjacent_min > tol, || {
                        let mut inst = inst.clone();
                        inst["gap"] = json!(g);
                        inst
                    }),
                    Err(e) => tr.error(&e, inst),
                }
            }
        }
    }
    tr.finish()
}

/// Random symmetric matrix with zero diagonal and spectral norm `norm`.
pub fn symmetric_perturbation(rng: &mut rng::Rng, m: usize, norm: f64) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let v: f64 = rng.sample(StandardNormal);
            e[(i, j)] = v;
            e[(j, i)] = v;
        }
    }
    let current = e.clone().symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    e * (norm / current)
}

/// SNJ keeps the population topology under symmetric perturbations whose
/// spectral norm stays below half the smallest non-adjacent criterion value
/// met along the population trace. Instances are drawn over the generator
/// kinds, `m` in `ms` and three values of delta, keeping only those where
/// every perturbed entry provably stays inside `[0, 1]`: since
/// `|E_ij| <= ||E||`, that holds when half the gap is at most the smallest
/// entry and at most one minus the largest. The error measure is the RF distance.
pub fn noise_robustness(seed: u64, trials: usize, ms: &[usize]) -> PropertyReport {
    let mut tr = Tracker::new("noise_robustness", 0.0);
    let mut rng = rng::stream(seed, &[rng::tag("noise_robustness")]);
    let deltas = [0.7, 0.85, 0.95];
    let mut trial = 0;
    let mut draws = 0;
    while trial < trials && draws < 100 * trials {
        draws += 1;
        let kind = POPULATION_KINDS[rng.random_range(0..POPULATION_KINDS.len())];
        let m = ms[rng.random_range(0..ms.len())];
        let delta = deltas[rng.random_range(0..deltas.len())];
        let tree_seed: u64 = rng.random();
        let fraction: f64 = rng.random_range(0.5..1.0);
        let pert_seed: u64 = rng.random();
        if !kind_supports(kind, m) {
            continue;
        }
        let mut inst = json!({ "trial": trial, "kind": kind.name(), "m": m, "delta": delta, "tree_seed": tree_seed,
                               "fraction": fraction, "perturbation_seed": pert_seed });
        let prepared = (|| -> Result<_> {
            let (t, aff) = population_tree(kind, m, delta, tree_seed)?;
            let r = population_similarity(&t, &aff);
            let (_, trace) = snj_exhaustive(&r)?;
            let gap = trace_gap(&r, &t, &trace)?.non_adjacent_min;
            Ok((t, r, gap))
        })();
        let (t, r, gap) = match prepared {
            Ok(x) => x,
            Err(e) => {
                tr.error(&e, inst);
                trial += 1;
                continue;
            }
        };
        let off_diagonal = (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)));
        let (lo, hi) = off_diagonal.fold((1.0f64, 0.0f64), |(lo, hi), (i, j)| (lo.min(r.get(i, j)), hi.max(r.get(i, j))));
        if 0.5 * gap > lo || hi + 0.5 * gap > 1.0 {
            continue;
        }
        let norm = fraction * 0.5 * gap;
        inst["norm"] = json!(norm);
        let run = || -> Result<usize> {
            let e = symmetric_perturbation(&mut rng::stream(pert_seed, &[]), m, norm);
            let noisy = SimilarityMatrix::from_matrix(r.labels().to_vec(), r.matrix() + e)?;
            rf_distance(&t, &snj(&noisy)?.0)
        };
        match run() {
            Ok(rf) => tr.record(rf as f64, true, || inst.clone()),
            Err(e) => tr.error(&e, inst.clone()),
        }
        trial += 1;
    }
    if trial < trials {
        tr.error(&Error::Parameter(format!("only {trial} admissible instances in {draws} draws")), json!({ "seed": seed }));
    }
    tr.finish()
}

/// Shortest edge length `-ln a_e`.
pub fn min_edge_length(aff: &EdgeAffinities) -> f64 {
    aff.values().iter().map(|a| -a.ln()).fold(f64::INFINITY, f64::min)
}

/// NJ keeps the true topology when every distance moves by less than half
/// the shortest edge length. Trees have random edge affinities and
/// `8 <= m <= 32`. The error measure is the RF distance.
pub fn atteson_nj(seed: u64, trials: usize) -> PropertyReport {
    let mut tr = Tracker::new("atteson_nj", 0.0);
    let mut rng = rng::stream(seed, &[rng::tag("atteson_nj")]);
    for trial in 0..trials {
        let kind = POPULATION_KINDS[trial % POPULATION_KINDS.len()];
        let m = if kind == TreeKind::PerfectBinary { [8, 16, 32][rng.random_range(0..3)] } else { rng.random_range(8..=32) };
        let tree_seed: u64 = rng.random();
        let noise_seed: u64 = rng.random();
        let inst = json!({ "trial": trial, "kind": kind.name(), "m": m, "tree_seed": tree_seed, "noise_seed": noise_seed });
        let run = || -> Result<usize> {
            let t = GenSpec::new(kind, m, tree_seed, 0.9).topology()?;
            let mut local = rng::stream(noise_seed, &[]);
            let values = (0..t.edge_count()).map(|_| local.random_range(0.6..0.95)).collect();
            let aff = EdgeAffinities::new(&t, values)?;
            let d = affinity_to_distance(&population_similarity(&t, &aff))?;
            let bound = 0.5 * min_edge_length(&aff);
            let mut data = d.matrix().clone();
            for i in 0..m {
                for j in i + 1..m {
                    // Strictly inside (-bound, bound).
                    let v = local.random_range(-1.0..1.0) * bound * (1.0 - 1e-9);
                    data[(i, j)] += v;
                    data[(j, i)] = data[(i, j)];
                }
            }
            let noisy = DistanceMatrix::from_matrix(d.labels().to_vec(), data)?;
            rf_distance(&t, &nj(&noisy)?.0)
        };
        match run() {
            Ok(rf) => tr.record(rf as f64, true, || inst.clone()),
            Err(e) => tr.error(&e, inst),
        }
    }
    tr.finish()
}

/// Settings for [`run_battery`].
#[derive(Clone, Debug, Default)]
pub struct BatteryConfig {
    pub seed: u64,
    pub tolerances: Tolerances,
}

/// The full invariant battery run by `snj verify`.
pub fn run_battery(cfg: &BatteryConfig) -> Vec<PropertyReport> {
    let tol = &cfg.tolerances;
    let seed = cfg.seed;
    vec![
        rank_one_clans(seed, 100, tol.rank),
        rank_two_pairs(seed, 100, tol.rank),
        quartet_identity(seed, 50, tol.quartet),
        frobenius_identity(seed, 1000, tol.frobenius),
        rank_two_inequality(seed, 1000, tol.inequality_slack),
        tight_example(tol.tight),
        consistency(seed, &[4, 8, 16, 32], &[0.7, 0.85, 0.95], 1, 32),
        clan_separation(seed, &[8, 16], &[0.7, 0.95], tol.merge),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_newick;

    #[test]
    fn quartet_path_blocks() {
        // ((a,b),(c,d)) with a and c as the clans: b hangs off a's parent, d off c's.
        let t = parse_newick("((a,b),(c,d));").unwrap();
        let a = LeafSet::from_indices(4, [0]);
        let c = LeafSet::from_indices(4, [2]);
        let blocks = path_blocks(&t, &a, &c).unwrap();
        let nonempty: Vec<&Vec<usize>> = blocks.iter().filter(|b| !b.is_empty()).collect();
        assert_eq!(nonempty, vec![&vec![1], &vec![3]]);
    }

    #[test]
    fn frobenius_sides_agree_on_quartet() {
        let t = parse_newick("((a,b),(c,d));").unwrap();
        let aff = EdgeAffinities::new(&t, vec![0.9, 0.8, 0.7, 0.6, 0.5]).unwrap();
        let r = population_similarity(&t, &aff);
        let (lhs, rhs, scale) =
            frobenius_sides(&r, &t, &LeafSet::from_indices(4, [0]), &LeafSet::from_indices(4, [2])).unwrap();
        assert!(lhs > 1e-6);
        assert!((lhs - rhs).abs() <= 1e-12 * scale);
    }

    #[test]
    fn adjacent_clans_give_zero_on_both_sides() {
        let t = parse_newick("((a,b),(c,d));").unwrap();
        let aff = EdgeAffinities::constant(&t, 0.8).unwrap();
        let r = population_similarity(&t, &aff);
        let (lhs, rhs, scale) =
            frobenius_sides(&r, &t, &LeafSet::from_indices(4, [0]), &LeafSet::from_indices(4, [1])).unwrap();
        assert!(lhs.abs() <= 1e-12 * scale && rhs.abs() <= 1e-12 * scale);
    }

    #[test]
    fn small_battery_passes() {
        let tol = Tolerances::default();
        for report in [
            rank_one_clans(3, 10, tol.rank),
            rank_two_pairs(3, 10, tol.rank),
            quartet_identity(3, 5, tol.quartet),
            frobenius_identity(3, 50, tol.frobenius),
            rank_two_inequality(3, 50, tol.inequality_slack),
            tight_example(tol.tight),
        ] {
            assert!(report.passed, "{}: {:?}", report.status_line(), report.failure);
        }
    }

    #[test]
    fn tight_example_fails_under_impossible_tolerance() {
        let report = tight_example(1e-20);
        assert!(!report.passed);
        let failure = report.failure.unwrap();
        assert!(failure.instance["matrix"].is_array());
    }

    #[test]
    fn seed_changes_random_instances_only() {
        let a = rank_two_inequality(1, 20, 1e-12);
        let b = rank_two_inequality(2, 20, 1e-12);
        assert_ne!(a.worst, b.worst);
        assert_eq!(tight_example(1e-10).worst, tight_example(1e-10).worst);
    }

    #[test]
    fn perturbation_has_requested_norm() {
        let mut rng = rng::stream(5, &[]);
        let e = symmetric_perturbation(&mut rng, 9, 0.25);
        let norm = e.clone().symmetric_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((norm - 0.25).abs() < 1e-12);
        assert!((0..9).all(|i| e[(i, i)] == 0.0));
        assert_eq!(e, e.transpose());
    }
}
