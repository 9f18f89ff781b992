//! Tree reconstruction: spectral neighbor joining, canonical NJ and
//! max-quartet NJ.

mod agglomerate;
mod nj;
mod quartet;
mod snj;
mod spectral;
mod trace;

pub use nj::nj;
pub use quartet::{
    four_point_check, max_quartet_criterion, quartet_determinant, quartet_identity_residual, quartet_square_sum,
    FourPointVerdict, Pairing, QuartetScore,
};
pub use spectral::{cross_similarity, dense_top2, iterative_top2, second_singular_value, singular_values, DENSE_LIMIT};
pub use trace::{Criterion, MergeEvent, MergeTrace, RowEntry, GAP_WARNING};


use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{affinity_to_distance, SimilarityMatrix};
use crate::tree::Topology;

/// Merges by `sigma2(R^{A_i u A_j})`.
///
/// Pairs carry a cheap lower bound on their criterion and are evaluated
/// exactly only when they could be the minimum, so merge rows in the trace
/// mix exact values and bounds. The selected pairs are those of [`snj_exhaustive`].
pub fn snj(r: &SimilarityMatrix) -> Result<(Topology, MergeTrace)> {
    run_spectral(r, false)
}

/// [`snj`] with every criterion entry evaluated exactly.
pub fn snj_exhaustive(r: &SimilarityMatrix) -> Result<(Topology, MergeTrace)> {
    run_spectral(r, true)
}

fn run_spectral(r: &SimilarityMatrix, exhaustive: bool) -> Result<(Topology, MergeTrace)> {
    let scorer = snj::Spectral { r: r.matrix() };
    let trace = agglomerate::agglomerate(r.size(), Criterion::Sigma2, &scorer, exhaustive)?;
    Ok((trace.topology(r.labels().to_vec())?, trace))
}

/// Merges by the largest quartet determinant across `A_i u A_j`.
pub fn max_quartet_nj(r: &SimilarityMatrix) -> Result<(Topology, MergeTrace)> {
    let scorer = snj::MaxQuartet { r };
    let trace = agglomerate::agglomerate(r.size(), Criterion::MaxQuartet, &scorer, true)?;
    Ok((trace.topology(r.labels().to_vec())?, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Snj,
    Nj,
    Maxq,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Snj, Method::Nj, Method::Maxq];

    pub fn name(self) -> &'static str {
        match self {
            Method::Snj => "snj",
            Method::Nj => "nj",
            Method::Maxq => "maxq",
        }
    }

    /// Runs the method on a similarity matrix; NJ sees `-ln R`.
    pub fn run(self, r: &SimilarityMatrix) -> Result<(Topology, MergeTrace)> {
        match self {
            Method::Snj => snj(r),
            Method::Nj => nj(&affinity_to_distance(r)?),
            Method::Maxq => max_quartet_nj(r),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "snj" | "spectral" => Ok(Method::Snj),
            "nj" => Ok(Method::Nj),
            "maxq" | "max_quartet" | "max-quartet" => Ok(Method::Maxq),
            other => Err(Error::Parameter(format!("unknown method '{other}' (expected snj, nj or maxq)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{GenSpec, TreeKind};
    use crate::markov::population_similarity;
    use crate::similarity::DistanceMatrix;
    use crate::tree::{parse_newick, rf_distance, EdgeAffinities};

    fn population(kind: TreeKind, m: usize, seed: u64, delta: f64) -> (Topology, SimilarityMatrix) {
        let (t, aff) = GenSpec::new(kind, m, seed, delta).generate().unwrap();
        let r = population_similarity(&t, &aff);
        (t, r)
    }

    #[test]
    fn quartet_first_merge_is_a_cherry() {
        let t = parse_newick("((x1,x2),(x3,x4));").unwrap();
        let r = population_similarity(&t, &EdgeAffinities::constant(&t, 0.9).unwrap());
        let (est, trace) = snj(&r).unwrap();
        assert_eq!(rf_distance(&t, &est).unwrap(), 0);
        let e = &trace.events[0];
        assert_eq!((e.left, e.right), (0, 1));
        assert!(e.value.abs() < 1e-12);
        let to_2 = e.row.iter().find(|p| p.id == 2).unwrap().value;
        assert!((to_2 - 0.081).abs() < 1e-12);
        assert_eq!(trace.events.len(), 1);
        assert_eq!(trace.final_join, [2, 3, 4]);
    }

    #[test]
    fn nj_hand_example() {
        let labels: Vec<String> = (1..=4).map(|i| format!("x{i}")).collect();
        let d = DistanceMatrix::from_matrix(
            labels,
            nalgebra::DMatrix::from_row_slice(4, 4, &[0., 2., 3., 3., 2., 0., 3., 3., 3., 3., 0., 2., 3., 3., 2., 0.]),
        )
        .unwrap();
        let (t, trace) = nj(&d).unwrap();
        let e = &trace.events[0];
        assert_eq!((e.left, e.right), (0, 1));
        // Q(1,2) = 2*2 - 8 - 8, Q(1,3) = 2*3 - 8 - 8 with full row sums.
        assert_eq!(e.value, -12.0);
        assert_eq!(e.row.iter().find(|p| p.id == 2).unwrap().value, -10.0);
        assert_eq!(crate::tree::write_newick(&t), "(x1,x2,(x3,x4));");
    }

    #[test]
    fn engines_consistent_on_small_population_trees() {
        for kind in [TreeKind::Caterpillar, TreeKind::Coalescent, TreeKind::BirthDeath] {
            for m in [4, 5, 7, 12] {
                let (t, r) = population(kind, m, 11, 0.8);
                for method in Method::ALL {
                    let (est, trace) = method.run(&r).unwrap();
                    assert_eq!(rf_distance(&t, &est).unwrap(), 0, "{kind} m={m} {method}");
                    assert_eq!(trace.events.len(), m - 3);
                }
            }
        }
    }

    #[test]
    fn traces_are_deterministic_and_round_trip() {
        let (_, r) = population(TreeKind::Coalescent, 16, 5, 0.85);
        let (_, a) = snj(&r).unwrap();
        let (_, b) = snj(&r).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 14);
        let back = MergeTrace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn lazy_and_exhaustive_select_the_same_pairs() {
        use crate::markov::{model_from_affinities, simulate};
        use crate::similarity::estimate_jc_similarity;
        for (kind, m) in [(TreeKind::Caterpillar, 24), (TreeKind::Coalescent, 40), (TreeKind::PerfectBinary, 32)] {
            let (t, aff) = GenSpec::new(kind, m, 2, 0.8).generate().unwrap();
            let x = simulate(&model_from_affinities(&t, &aff, 4).unwrap(), 300, 9, None).unwrap();
            for r in [population_similarity(&t, &aff), estimate_jc_similarity(&x).0] {
                let (ta, a) = snj(&r).unwrap();
                let (tb, b) = snj_exhaustive(&r).unwrap();
                assert_eq!(rf_distance(&ta, &tb).unwrap(), 0);
                for (ea, eb) in a.events.iter().zip(&b.events) {
                    assert_eq!((ea.left, ea.right), (eb.left, eb.right), "{kind} step {}", ea.step);
                    assert!((ea.value - eb.value).abs() <= 1e-12, "{kind} step {}", ea.step);
                    for (pa, pb) in ea.row.iter().zip(&eb.row) {
                        assert!(pb.exact);
                        assert!(pa.value <= pb.value + 1e-12 * (1.0 + pb.value));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_inputs_and_bad_names() {
        let t = parse_newick("(a,b,c);").unwrap();
        let r = population_similarity(&t, &EdgeAffinities::constant(&t, 0.9).unwrap());
        assert!(snj(&r).is_err());
        assert!("upgma".parse::<Method>().is_err());
        assert_eq!("MaxQ".parse::<Method>().unwrap(), Method::Maxq);
    }
}
