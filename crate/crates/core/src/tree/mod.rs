//! Unrooted bifurcating trees over labeled terminal nodes.
//!
//! Nodes `0..m` are the terminal nodes (leaves), in label order as supplied
//! at construction; nodes `m..2m-2` are the anonymous internal nodes. Edges
//! are numbered `0..2m-3` and that numbering is what [`EdgeAffinities`]
//! indexes into.

mod leafset;
mod newick;

use std::collections::{HashMap, HashSet, VecDeque};

pub use leafset::LeafSet;
pub use newick::{parse_newick, parse_newick_with_affinities, write_newick, write_newick_with_affinities};

use crate::error::{param, Error, Result};

/// Unrooted bifurcating tree topology.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    labels: Vec<String>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Topology {
    /// Builds a topology from an explicit edge list and checks every
    /// structural invariant: unique labels, leaves of degree one, internal
    /// nodes of degree three, `2m-3` edges, connected and acyclic.
    pub fn from_edges(labels: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let m = labels.len();
        if m < 2 {
            return Err(Error::Topology(format!("need at least 2 leaves, got {m}")));
        }
        let mut seen = HashSet::with_capacity(m);
        for l in &labels {
            if l.is_empty() {
                return Err(Error::Topology("empty leaf label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::Topology(format!("duplicate leaf label '{l}'")));
            }
        }
        let n_nodes = if m == 2 { 2 } else { 2 * m - 2 };
        if edges.len() != 2 * m - 3 {
            return Err(Error::Topology(format!(
                "expected {} edges for {m} leaves, got {}",
                2 * m - 3,
                edges.len()
            )));
        }
        let mut adjacency = vec![Vec::with_capacity(3); n_nodes];
        for (id, &(u, v)) in edges.iter().enumerate() {
            if u >= n_nodes || v >= n_nodes || u == v {
                return Err(Error::Topology(format!("invalid edge ({u},{v})")));
            }
            adjacency[u].push((v, id));
            adjacency[v].push((u, id));
        }
        for (v, nbrs) in adjacency.iter().enumerate() {
            let want = if v < m { 1 } else { 3 };
            if nbrs.len() != want {
                return Err(Error::Topology(format!(
                    "node {v} has degree {}, expected {want}",
                    nbrs.len()
                )));
            }
        }
        let t = Topology {
            labels,
            edges,
            adjacency,
        };
        // n-1 edges plus connectivity implies a tree.
        let reached = t.preorder(0).order.len();
        if reached != n_nodes {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(t)
    }

    /// Number of terminal nodes.
    pub fn leaf_count(&self) -> usize {
        self.labels.len()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, leaf: usize) -> &str {
        &self.labels[leaf]
    }

    pub fn leaf_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Neighbors of `node` as `(neighbor, edge id)` pairs.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node < self.leaf_count()
    }

    /// Internal edges are those whose endpoints are both internal nodes.
    pub fn is_internal_edge(&self, edge: usize) -> bool {
        let (u, v) = self.edges[edge];
        !self.is_leaf(u) && !self.is_leaf(v)
    }

    /// Preorder traversal from `root` with parent links.
    pub(crate) fn preorder(&self, root: usize) -> Rooted {
        let n = self.node_count();
        let mut parent = vec![None; n];
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        let mut stack = vec![root];
        visited[root] = true;
        while let Some(v) = stack.pop() {
            order.push(v);
            for &(w, e) in self.adjacency[v].iter().rev() {
                if !visited[w] {
                    visited[w] = true;
                    parent[w] = Some((v, e));
                    stack.push(w);
                }
            }
        }
        Rooted { parent, order }
    }

    /// Leaf set below every node when the tree is hung from leaf 0.
    fn subtree_leafsets(&self) -> (Rooted, Vec<LeafSet>) {
        let m = self.leaf_count();
        let rooted = self.preorder(0);
        let mut sets = vec![LeafSet::empty(m); self.node_count()];
        for &v in rooted.order.iter().rev() {
            if v < m && v != 0 {
                sets[v].insert(v);
            }
            if let Some((p, _)) = rooted.parent[v] {
                let child = std::mem::replace(&mut sets[v], LeafSet::empty(m));
                sets[p].union_with(&child);
                sets[v] = child;
            }
        }
        (rooted, sets)
    }

    /// For every edge, the set of leaves on the side away from leaf 0.
    pub fn edge_splits(&self) -> Vec<LeafSet> {
        let (rooted, sets) = self.subtree_leafsets();
        let mut splits = vec![LeafSet::empty(self.leaf_count()); self.edge_count()];
        for v in 0..self.node_count() {
            if let Some((_, e)) = rooted.parent[v] {
                splits[e] = sets[v].clone();
            }
        }
        splits
    }

    /// Every clan of the tree: both sides of every edge, deduplicated,
    /// sorted by size then content.
    pub fn clans(&self) -> Vec<LeafSet> {
        let mut all: Vec<LeafSet> = self
            .edge_splits()
            .into_iter()
            .flat_map(|s| {
                let c = s.complement();
                [s, c]
            })
            .collect();
        all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        all.dedup();
        all
    }

    /// Hop distances from `source` to every node.
    pub fn hop_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.node_count()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            for &(w, _) in &self.adjacency[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Node sequence of the unique path from `from` to `to`, inclusive.
    pub fn path(&self, from: usize, to: usize) -> Vec<usize> {
        let rooted = self.preorder(from);
        let mut path = vec![to];
        let mut v = to;
        while let Some((p, _)) = rooted.parent[v] {
            path.push(p);
            v = p;
        }
        path.reverse();
        path
    }

    /// Edge ids along the unique path from `from` to `to`.
    pub fn path_edges(&self, from: usize, to: usize) -> Vec<usize> {
        let rooted = self.preorder(from);
        let mut edges = Vec::new();
        let mut v = to;
        while let Some((p, e)) = rooted.parent[v] {
            edges.push(e);
            v = p;
        }
        edges.reverse();
        edges
    }

    /// Locates the edge that separates `clan` from the rest of the tree and
    /// returns `(inside, outside, edge)`: the endpoint on the clan's side, the
    /// endpoint on the other side and the edge id.
    pub fn clan_edge(&self, clan: &LeafSet) -> Option<(usize, usize, usize)> {
        let splits = self.edge_splits();
        let comp = clan.complement();
        let rooted = self.preorder(0);
        for v in 0..self.node_count() {
            if let Some((p, e)) = rooted.parent[v] {
                if splits[e] == *clan {
                    return Some((v, p, e));
                }
                if splits[e] == comp {
                    return Some((p, v, e));
                }
            }
        }
        None
    }
}

pub(crate) struct Rooted {
    /// `(parent, edge id)` for every node except the root.
    pub parent: Vec<Option<(usize, usize)>>,
    pub order: Vec<usize>,
}

/// A nontrivial split of the leaves induced by an internal edge, stored with
/// the side containing leaf 0 first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bipartition {
    side_a: LeafSet,
}

impl Bipartition {
    /// Canonicalizes a split given either side.
    pub fn new(side: LeafSet) -> Self {
        if side.contains(0) {
            Bipartition { side_a: side }
        } else {
            Bipartition {
                side_a: side.complement(),
            }
        }
    }

    pub fn side_a(&self) -> &LeafSet {
        &self.side_a
    }

    pub fn side_b(&self) -> LeafSet {
        self.side_a.complement()
    }

    pub fn is_trivial(&self) -> bool {
        let a = self.side_a.len();
        a < 2 || self.side_a.universe() - a < 2
    }
}

/// The `m-3` nontrivial bipartitions of `t`, one per internal edge.
pub fn bipartitions(t: &Topology) -> Vec<Bipartition> {
    if t.leaf_count() < 4 {
        return Vec::new();
    }
    let mut out: Vec<Bipartition> = t
        .edge_splits()
        .into_iter()
        .enumerate()
        .filter(|(e, _)| t.is_internal_edge(*e))
        .map(|(_, s)| Bipartition::new(s))
        .collect();
    out.sort();
    out
}

/// Robinson-Foulds distance: size of the symmetric difference of the
/// nontrivial bipartition sets. Leaves are matched by label.
pub fn rf_distance(t1: &Topology, t2: &Topology) -> Result<usize> {
    let m = t1.leaf_count();
    if t2.leaf_count() != m {
        return Err(Error::LeafMismatch(format!(
            "{m} leaves vs {} leaves",
            t2.leaf_count()
        )));
    }
    let index: HashMap<&str, usize> = t1
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut perm = Vec::with_capacity(m);
    for l in t2.labels() {
        match index.get(l.as_str()) {
            Some(&i) => perm.push(i),
            None => return Err(Error::LeafMismatch(format!("label '{l}' missing from first tree"))),
        }
    }
    let a: HashSet<Bipartition> = bipartitions(t1).into_iter().collect();
    let b: HashSet<Bipartition> = bipartitions(t2)
        .into_iter()
        .map(|bp| Bipartition::new(LeafSet::from_indices(m, bp.side_a().iter().map(|i| perm[i]))))
        .collect();
    Ok(a.symmetric_difference(&b).count())
}

/// Whether `subset` is exactly the leaf set on one side of some edge.
pub fn is_clan(t: &Topology, subset: &[usize]) -> Result<bool> {
    let set = checked_subset(t, subset)?;
    let comp = set.complement();
    Ok(t.edge_splits().iter().any(|s| *s == set || *s == comp))
}

pub(crate) fn checked_subset(t: &Topology, subset: &[usize]) -> Result<LeafSet> {
    let m = t.leaf_count();
    if let Some(&bad) = subset.iter().find(|&&i| i >= m) {
        return Err(Error::Subset(format!("leaf index {bad} out of range for {m} leaves")));
    }
    let set = LeafSet::from_indices(m, subset.iter().copied());
    if set.is_empty() {
        return Err(Error::Subset("empty subset".into()));
    }
    if set.len() == m {
        return Err(Error::Subset("subset contains every leaf".into()));
    }
    Ok(set)
}

/// Maximum over internal edges of the larger of the two hop counts from each
/// endpoint to the nearest leaf on its own side of the edge.
pub fn tree_depth(t: &Topology) -> Result<usize> {
    if t.leaf_count() < 4 {
        return Err(param("tree depth needs at least 4 leaves"));
    }
    let mut depth = 0;
    for (e, &(u, v)) in t.edges().iter().enumerate() {
        if !t.is_internal_edge(e) {
            continue;
        }
        let g = nearest_leaf_avoiding(t, u, e).max(nearest_leaf_avoiding(t, v, e));
        depth = depth.max(g);
    }
    Ok(depth)
}

fn nearest_leaf_avoiding(t: &Topology, start: usize, banned_edge: usize) -> usize {
    let mut dist = vec![usize::MAX; t.node_count()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    while let Some(v) = queue.pop_front() {
        if t.is_leaf(v) {
            return dist[v];
        }
        for &(w, e) in t.neighbors(v) {
            if e != banned_edge && dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    unreachable!("every side of an edge contains a leaf")
}

/// Maximum leaf-to-leaf hop count.
pub fn tree_diameter(t: &Topology) -> usize {
    // Double sweep: the farthest leaf from any leaf is a diameter endpoint.
    let far_leaf = |src: usize| {
        let d = t.hop_distances(src);
        (0..t.leaf_count())
            .max_by_key(|&i| (d[i], std::cmp::Reverse(i)))
            .map(|i| (i, d[i]))
            .unwrap()
    };
    let (a, _) = far_leaf(0);
    far_leaf(a).1
}

/// Number of internal nodes adjacent to exactly two leaves.
pub fn cherry_count(t: &Topology) -> usize {
    (t.leaf_count()..t.node_count())
        .filter(|&v| t.neighbors(v).iter().filter(|(w, _)| t.is_leaf(*w)).count() == 2)
        .count()
}

/// Affinity `r(e)` in the open interval (0,1) for every edge of a topology.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAffinities {
    values: Vec<f64>,
}

impl EdgeAffinities {
    pub fn new(t: &Topology, values: Vec<f64>) -> Result<Self> {
        if values.len() != t.edge_count() {
            return Err(param(format!(
                "{} affinities for {} edges",
                values.len(),
                t.edge_count()
            )));
        }
        if let Some((e, v)) = values.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
            return Err(param(format!("edge {e} affinity {v} outside (0,1)")));
        }
        Ok(EdgeAffinities { values })
    }

    pub fn constant(t: &Topology, value: f64) -> Result<Self> {
        Self::new(t, vec![value; t.edge_count()])
    }

    pub fn get(&self, edge: usize) -> f64 {
        self.values[edge]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Smallest edge affinity.
    pub fn delta(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest edge affinity.
    pub fn xi(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
