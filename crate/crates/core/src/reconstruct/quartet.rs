//! Quartet determinants, the four-point check and the max-quartet criterion.

use serde::Serialize;

use super::spectral::{cross_block, dense_top2};
use crate::error::{Error, Result};
use crate::similarity::{DistanceMatrix, SimilarityMatrix};
use crate::tree::{is_clan, Topology};

/// `w(ik;jl) = R(i,j) R(k,l) - R(i,l) R(k,j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuartetScore {
    pub indices: (usize, usize, usize, usize),
    pub value: f64,
}

fn check_distinct(m: usize, idx: [usize; 4]) -> Result<()> {
    for (a, &x) in idx.iter().enumerate() {
        if x >= m {
            return Err(Error::Subset(format!("index {x} out of range for {m} leaves")));
        }
        if idx[..a].contains(&x) {
            return Err(Error::Subset(format!("repeated index {x} in quartet")));
        }
    }
    Ok(())
}

pub fn quartet_determinant(r: &SimilarityMatrix, i: usize, k: usize, j: usize, l: usize) -> Result<QuartetScore> {
    check_distinct(r.size(), [i, k, j, l])?;
    Ok(QuartetScore {
        indices: (i, k, j, l),
        value: w(r, i, k, j, l),
    })
}

#[inline]
fn w(r: &SimilarityMatrix, i: usize, k: usize, j: usize, l: usize) -> f64 {
    r.get(i, j) * r.get(k, l) - r.get(i, l) * r.get(k, j)
}

/// One of the three ways to split a quartet into two pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Pairing {
    /// `ik | jl`
    IkJl,
    /// `ij | kl`
    IjKl,
    /// `il | kj`
    IlKj,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FourPointVerdict {
    /// Pair sums for `[ik|jl, ij|kl, il|kj]`.
    pub sums: [f64; 3],
    /// Pairing with the smallest sum; ties go to the earlier pairing.
    pub best: Pairing,
}

pub fn four_point_check(d: &DistanceMatrix, i: usize, k: usize, j: usize, l: usize) -> Result<FourPointVerdict> {
    check_distinct(d.size(), [i, k, j, l])?;
    let sums = [
        d.get(i, k) + d.get(j, l),
        d.get(i, j) + d.get(k, l),
        d.get(i, l) + d.get(k, j),
    ];
    let pairings = [Pairing::IkJl, Pairing::IjKl, Pairing::IlKj];
    let mut best = 0;
    for p in 1..3 {
        if sums[p] < sums[best] {
            best = p;
        }
    }
    Ok(FourPointVerdict {
        sums,
        best: pairings[best],
    })
}

fn union_checked(m: usize, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Subset("both subsets must be nonempty".into()));
    }
    let mut c: Vec<usize> = a.iter().chain(b).copied().collect();
    c.sort_unstable();
    if c.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::Subset("subsets overlap or repeat an index".into()));
    }
    if let Some(&bad) = c.iter().find(|&&x| x >= m) {
        return Err(Error::Subset(format!("index {bad} out of range")));
    }
    if c.len() + 2 > m {
        return Err(Error::Subset(format!("|A u B| = {} leaves fewer than 2 outside", c.len())));
    }
    Ok(c)
}

/// `M(A,B) = max |w(ik;jl)|` over `i,k` in `A u B` and `j,l` outside it.
pub fn max_quartet_criterion(r: &SimilarityMatrix, a: &[usize], b: &[usize]) -> Result<f64> {
    let c = union_checked(r.size(), a, b)?;
    Ok(max_quartet_of(r, &c))
}

/// Max-quartet score for a sorted union `c` with at least two outside leaves.
pub(crate) fn max_quartet_of(r: &SimilarityMatrix, c: &[usize]) -> f64 {
    let block = cross_block(r.matrix(), c);
    let (rows, cols) = block.shape();
    let mut best = 0.0f64;
    // |w| is invariant under swapping i<->k or j<->l.
    for i in 0..rows {
        for k in i + 1..rows {
            for j in 0..cols {
                let (rij, rkj) = (block[(i, j)], block[(k, j)]);
                for l in j + 1..cols {
                    let v = (rij * block[(k, l)] - block[(i, l)] * rkj).abs();
                    if v > best {
                        best = v;
                    }
                }
            }
        }
    }
    best
}

/// `|4 sigma1^2 sigma2^2 - sum w(ik;jl)^2|` on `R^{A u B}`, summing over
/// ordered `i,k` inside and ordered `j,l` outside. Vanishes when the cross
/// block has rank at most two. When a topology is given, both subsets must be
/// clans of it.
pub fn quartet_identity_residual(r: &SimilarityMatrix, a: &[usize], b: &[usize], topology: Option<&Topology>) -> Result<f64> {
    let c = union_checked(r.size(), a, b)?;
    if let Some(t) = topology {
        for (name, s) in [("A", a), ("B", b)] {
            if !is_clan(t, s)? {
                return Err(Error::Subset(format!("subset {name} is not a clan")));
            }
        }
    }
    let block = cross_block(r.matrix(), &c);
    let (s1, s2) = dense_top2(&block);
    Ok((4.0 * s1 * s1 * s2 * s2 - quartet_square_sum(&block)).abs())
}

/// Sum of squared 2x2 minors over ordered row pairs and ordered column pairs.
pub fn quartet_square_sum(block: &nalgebra::DMatrix<f64>) -> f64 {
    let (rows, cols) = block.shape();
    let mut sum = 0.0;
    for i in 0..rows {
        for k in i + 1..rows {
            for j in 0..cols {
                for l in j + 1..cols {
                    let v = block[(i, j)] * block[(k, l)] - block[(i, l)] * block[(k, j)];
                    sum += v * v;
                }
            }
        }
    }
    // Each unordered minor appears four times among ordered index pairs.
    4.0 * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::population_similarity;
    use crate::similarity::affinity_to_distance;
    use crate::tree::{parse_newick, EdgeAffinities};

    fn quartet_r() -> SimilarityMatrix {
        let t = parse_newick("((x1,x2),(x3,x4));").unwrap();
        population_similarity(&t, &EdgeAffinities::constant(&t, 0.9).unwrap())
    }

    #[test]
    fn determinant_values() {
        let r = quartet_r();
        assert!(quartet_determinant(&r, 0, 1, 2, 3).unwrap().value.abs() < 1e-15);
        let w = quartet_determinant(&r, 0, 2, 1, 3).unwrap().value;
        assert!((w - (0.81f64 * 0.81 - 0.729 * 0.729)).abs() < 1e-15);
        assert!((w - 0.124659).abs() < 1e-12);
        let swapped = quartet_determinant(&r, 0, 2, 3, 1).unwrap().value;
        assert!((w + swapped).abs() < 1e-15);
        assert!(quartet_determinant(&r, 0, 0, 1, 2).is_err());
    }

    #[test]
    fn four_point_on_additive_quartet() {
        let labels: Vec<String> = (1..=4).map(|i| format!("x{i}")).collect();
        let d = DistanceMatrix::from_matrix(
            labels,
            nalgebra::DMatrix::from_row_slice(4, 4, &[0., 2., 3., 3., 2., 0., 3., 3., 3., 3., 0., 2., 3., 3., 2., 0.]),
        )
        .unwrap();
        let v = four_point_check(&d, 0, 1, 2, 3).unwrap();
        assert_eq!(v.sums, [4.0, 6.0, 6.0]);
        assert_eq!(v.best, Pairing::IkJl);

        let pd = affinity_to_distance(&quartet_r()).unwrap();
        let v = four_point_check(&pd, 0, 1, 2, 3).unwrap();
        assert_eq!(v.best, Pairing::IkJl);
        assert!((v.sums[1] - v.sums[2]).abs() < 1e-12);
        assert!(quartet_determinant(&quartet_r(), 0, 1, 2, 3).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn max_quartet_values() {
        let r = quartet_r();
        assert!(max_quartet_criterion(&r, &[0], &[1]).unwrap() < 1e-12);
        assert!(max_quartet_criterion(&r, &[0], &[2]).unwrap() > 0.1);
        assert!(max_quartet_criterion(&r, &[0], &[0]).is_err());
        assert!(max_quartet_criterion(&r, &[0, 1], &[2]).is_err());
    }

    #[test]
    fn identity_residual_two_by_two() {
        let r = quartet_r();
        let res = quartet_identity_residual(&r, &[0], &[2], None).unwrap();
        assert!(res <= 1e-10, "residual {res}");
        let block = cross_block(r.matrix(), &[0, 2]);
        let (s1, s2) = dense_top2(&block);
        assert!((s1 - 1.539).abs() < 1e-12 && (s2 - 0.081).abs() < 1e-12);
        assert!(quartet_identity_residual(&r, &[0], &[1], None).unwrap() < 1e-12);
        let t = parse_newick("((x1,x2),(x3,x4));").unwrap();
        assert!(quartet_identity_residual(&r, &[0, 2], &[1], Some(&t)).is_err());
    }
}
