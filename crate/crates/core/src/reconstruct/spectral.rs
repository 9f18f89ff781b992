//! Second-singular-value computation and cross-similarity blocks.

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::similarity::SimilarityMatrix;

/// Blocks whose smaller dimension exceeds this go through subspace iteration.
pub const DENSE_LIMIT: usize = 64;

const SUBSPACE_BLOCK: usize = 8;
const SUBSPACE_MAX_ITERS: usize = 500;

/// Second largest singular value of `m`.
pub fn second_singular_value(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() < 2 || m.ncols() < 2 {
        return Err(Error::Matrix(format!(
            "second singular value needs at least 2x2, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(sigma2(m))
}

pub(crate) fn sigma2(m: &DMatrix<f64>) -> f64 {
    let k = m.nrows().min(m.ncols());
    if k == 2 {
        two_row_sigma2(m)
    } else if k <= DENSE_LIMIT {
        dense_top2(m).1
    } else {
        iterative_top2(m).unwrap_or_else(|| dense_top2(m)).1
    }
}

/// Largest two singular values by a full decomposition. Long, thin blocks are
/// first reduced to their triangular QR factor, which has the same singular
/// values.
pub fn dense_top2(m: &DMatrix<f64>) -> (f64, f64) {
    let (r, c) = m.shape();
    let sv = if r >= 2 * c {
        m.clone().qr().r().singular_values()
    } else if c >= 2 * r {
        m.transpose().qr().r().singular_values()
    } else {
        m.singular_values()
    };
    top_two(sv.as_slice())
}

/// All singular values, descending, by a full decomposition.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn top_two(values: &[f64]) -> (f64, f64) {
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    for &v in values {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    (a, b)
}

/// Closed form for a matrix with two rows (or two columns).
fn two_row_sigma2(m: &DMatrix<f64>) -> f64 {
    let (mut u, mut v): (Vec<f64>, Vec<f64>) = if m.nrows() == 2 {
        (m.row(0).iter().copied().collect(), m.row(1).iter().copied().collect())
    } else {
        (m.column(0).iter().copied().collect(), m.column(1).iter().copied().collect())
    };
    pair_sigma2(&mut u, &mut v)
}

/// `sigma2` of the `2 x n` matrix with rows `u`, `v`, using
/// `sigma1 sigma2 = |u| |v - proj_u v|` and `sigma1^2 + sigma2^2 = |u|^2 + |v|^2`.
/// The projection is applied twice so the residual is accurate to rounding
/// relative to `|v|`. Both slices are overwritten.
pub(crate) fn pair_sigma2(u: &mut [f64], v: &mut [f64]) -> f64 {
    let norm2 = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
    let (u, v) = if norm2(u) >= norm2(v) { (u, v) } else { (v, u) };
    let uu = norm2(u);
    if uu == 0.0 {
        return 0.0;
    }
    let vv = norm2(v);
    for _ in 0..2 {
        let c = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / uu;
        for (b, a) in v.iter_mut().zip(u.iter()) {
            *b -= c * a;
        }
    }
    let q = norm2(v).sqrt();
    let s = uu + vv;
    let p = uu * q * q;
    let sigma1 = ((s + (s * s - 4.0 * p).max(0.0).sqrt()) / 2.0).sqrt();
    if sigma1 == 0.0 {
        0.0
    } else {
        uu.sqrt() * q / sigma1
    }
}

/// Top two singular values by block subspace iteration with Rayleigh–Ritz
/// extraction. Returns `None` when the iteration does not settle, in which
/// case callers fall back to the dense path.
pub fn iterative_top2(m: &DMatrix<f64>) -> Option<(f64, f64)> {
    let a = if m.nrows() >= m.ncols() { m.clone() } else { m.transpose() };
    let c = a.ncols();
    let b = SUBSPACE_BLOCK.min(c);
    let mut r = rng::stream(0x5eed, &[c as u64]);
    let start = DMatrix::from_fn(a.nrows(), b, |_, _| r.random::<f64>() - 0.5);
    let mut q = (a.transpose() * start).qr().q();
    let mut prev = (f64::NAN, f64::NAN);
    for _ in 0..SUBSPACE_MAX_ITERS {
        let y = &a * &q;
        let (s1, s2) = top_two(y.clone().qr().r().singular_values().as_slice());
        let tol = 1e-14 * s1.max(f64::MIN_POSITIVE);
        if (s1 - prev.0).abs() <= tol && (s2 - prev.1).abs() <= tol {
            return Some((s1, s2));
        }
        prev = (s1, s2);
        q = (a.transpose() * y).qr().q();
    }
    None
}

/// Below this ratio `lambda2 / lambda1` the Gram estimate is recomputed on
/// the explicit block.
const GRAM_REFINE: f64 = 1e-5;

/// `sigma2(R^C)` for a sorted union `c`, read from the `|C| x |C|` Gram matrix
/// of the cross block. The Gram eigenvalue carries absolute error near
/// `eps * sigma1^2`, so small ratios fall back to the explicit block.
pub(crate) fn union_sigma2(r: &DMatrix<f64>, c: &[usize]) -> f64 {
    let m = r.nrows();
    let mut inside = vec![false; m];
    for &i in c {
        inside[i] = true;
    }
    let outside: Vec<usize> = (0..m).filter(|&l| !inside[l]).collect();
    // Gram on the smaller side: rows C over outside columns, or the reverse.
    let (small, large) = if c.len() <= outside.len() { (c, outside.as_slice()) } else { (outside.as_slice(), c) };
    let (k, len) = (small.len(), large.len());
    // R is symmetric, so each small-side vector is a gather from one column.
    let mut vecs = vec![0.0; k * len];
    for (p, &i) in small.iter().enumerate() {
        let col = r.column(i);
        for (dst, &l) in vecs[p * len..(p + 1) * len].iter_mut().zip(large) {
            *dst = col[l];
        }
    }
    let mut g = vec![0.0; k * k];
    for p in 0..k {
        let x = &vecs[p * len..(p + 1) * len];
        for q in p..k {
            g[p * k + q] = dot(x, &vecs[q * len..(q + 1) * len]);
        }
    }
    let (l1, l2) = if k == 2 {
        let (a, b, d) = (g[0], g[1], g[3]);
        let half = 0.5 * (a + d);
        let root = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let l1 = half + root;
        (l1, if l1 > 0.0 { ((a * d - b * b) / l1).max(0.0) } else { 0.0 })
    } else {
        let (d, e) = tridiagonalize(&mut g, k);
        let (l1, l2) = tridiagonal_top2(&d, &e);
        (l1, l2.max(0.0))
    };
    if l2 > GRAM_REFINE * l1 {
        l2.sqrt()
    } else {
        sigma2(&cross_block(r, c))
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    for (x, y) in x.chunks_exact(4).zip(y.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail = x.len() / 4 * 4;
    for (a, b) in x[tail..].iter().zip(&y[tail..]) {
        acc[0] += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Householder reduction of the symmetric `n x n` matrix whose lower triangle
/// is stored column major in `a` (overwritten) to tridiagonal form. Returns the
/// diagonal and off-diagonal.
fn tridiagonalize(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n.saturating_sub(1)];
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    for j in 0..n.saturating_sub(2) {
        let r = n - j - 1;
        let s = j + 1;
        d[j] = a[j * n + j];
        let x = &a[j * n + s..j * n + n];
        let alpha = x.iter().map(|t| t * t).sum::<f64>().sqrt();
        if alpha == 0.0 {
            e[j] = 0.0;
            continue;
        }
        let beta = if x[0] >= 0.0 { -alpha } else { alpha };
        let v = &mut v[..r];
        v.copy_from_slice(x);
        v[0] -= beta;
        let tau = 1.0 / (alpha * (alpha + x[0].abs()));
        e[j] = beta;
        // p = tau S v from the lower triangle of the trailing block.
        let w = &mut w[..r];
        w.fill(0.0);
        for c in 0..r {
            let col = &a[(s + c) * n + s + c..(s + c) * n + n];
            w[c] += dot(col, &v[c..]);
            let vc = v[c];
            for (wi, &t) in w[c + 1..].iter_mut().zip(&col[1..]) {
                *wi += t * vc;
            }
        }
        for wc in w.iter_mut() {
            *wc *= tau;
        }
        // w = p - (tau/2)(p.v) v, then S -= v w^T + w v^T on the lower triangle.
        let k = 0.5 * tau * dot(w, v);
        for (wc, &vc) in w.iter_mut().zip(v.iter()) {
            *wc -= k * vc;
        }
        for c in 0..r {
            let col = &mut a[(s + c) * n + s + c..(s + c) * n + n];
            let (wc, vc) = (w[c], v[c]);
            for ((t, &vi), &wi) in col.iter_mut().zip(&v[c..]).zip(&w[c..]) {
                *t -= vi * wc + wi * vc;
            }
        }
    }
    if n >= 2 {
        d[n - 2] = a[(n - 2) * n + n - 2];
        e[n - 2] = a[(n - 2) * n + n - 1];
    }
    d[n - 1] = a[n * n - 1];
    (d, e)
}

/// Eigenvalue counts below each of four shifts for the symmetric tridiagonal
/// matrix with diagonal `d` and squared off-diagonal `e2`. The four
/// recurrences are independent, so their divisions overlap.
fn sturm_counts(d: &[f64], e2: &[f64], x: [f64; 4], tiny: f64) -> [usize; 4] {
    let mut count = [0; 4];
    let mut q = [0.0; 4];
    for i in 0..d.len() {
        for l in 0..4 {
            q[l] = if i == 0 { d[0] - x[l] } else { d[i] - x[l] - e2[i - 1] / q[l] };
            if q[l].abs() < tiny {
                q[l] = -tiny;
            }
            count[l] += (q[l] < 0.0) as usize;
        }
    }
    count
}

/// Largest two eigenvalues of a symmetric tridiagonal matrix by multisection.
fn tridiagonal_top2(d: &[f64], e: &[f64]) -> (f64, f64) {
    let n = d.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let r = if i > 0 { e[i - 1].abs() } else { 0.0 } + if i + 1 < n { e[i].abs() } else { 0.0 };
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    let norm = lo.abs().max(hi.abs());
    if norm == 0.0 {
        return (0.0, 0.0);
    }
    let e2: Vec<f64> = e.iter().map(|v| v * v).collect();
    let tiny = f64::MIN_POSITIVE.sqrt() * norm;
    // Smallest x with at least `below` eigenvalues under it.
    let find = |below: usize, mut a: f64, mut b: f64| {
        while b - a > 2.0 * f64::EPSILON * norm {
            let step = (b - a) / 5.0;
            let x = [a + step, a + 2.0 * step, a + 3.0 * step, a + 4.0 * step];
            if !(x[0] > a && x[3] < b) {
                break;
            }
            let counts = sturm_counts(d, &e2, x, tiny);
            match counts.iter().position(|&c| c >= below) {
                Some(0) => b = x[0],
                Some(j) => (a, b) = (x[j - 1], x[j]),
                None => a = x[3],
            }
        }
        0.5 * (a + b)
    };
    let l1 = find(n, lo, hi);
    let l2 = find(n - 1, lo, l1);
    (l1, l2)
}

/// Rows `a` (ascending) against columns outside `a` (ascending).
pub fn cross_similarity(r: &SimilarityMatrix, a: &[usize]) -> Result<DMatrix<f64>> {
    let m = r.size();
    let mut rows: Vec<usize> = a.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if rows.is_empty() || rows.len() >= m {
        return Err(Error::Subset(format!("need 1 <= |A| <= {} , got {}", m - 1, rows.len())));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= m) {
        return Err(Error::Subset(format!("index {bad} out of range")));
    }
    Ok(cross_block(r.matrix(), &rows))
}

/// Cross block for sorted, in-range `rows`.
pub(crate) fn cross_block(r: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let m = r.nrows();
    let mut inside = vec![false; m];
    for &i in rows {
        inside[i] = true;
    }
    let cols: Vec<usize> = (0..m).filter(|&j| !inside[j]).collect();
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| r[(rows[a], cols[b])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale
    }

    #[test]
    fn tridiagonal_top_two_match_full_eigen() {
        let mut r = rng::stream(6, &[]);
        for n in [1usize, 2, 3, 4, 7, 16, 33] {
            for _ in 0..20 {
                let b = DMatrix::from_fn(n, n + 3, |_, _| r.random::<f64>() - 0.3);
                let g = &b * b.transpose();
                let mut values: Vec<f64> = g.symmetric_eigenvalues().iter().copied().collect();
                values.sort_by(|a, b| b.total_cmp(a));
                let mut a = g.as_slice().to_vec();
                let (d, e) = tridiagonalize(&mut a, n);
                let (l1, l2) = tridiagonal_top2(&d, &e);
                let scale = values[0];
                assert!((l1 - values[0]).abs() <= 1e-13 * scale, "n={n}");
                let want2 = if n > 1 { values[1] } else { l1 };
                assert!((l2 - want2).abs() <= 1e-13 * scale, "n={n} {l2} {want2}");
            }
        }
    }

    #[test]
    fn simple_values() {
        let m = DMatrix::from_row_slice(2, 2, &[0.81, 0.729, 0.729, 0.81]);
        assert!((second_singular_value(&m).unwrap() - 0.081).abs() < 1e-15);
        assert!((second_singular_value(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-15);
        let u = DVector::from_vec(vec![0.3, 0.5, 0.9, 0.1]);
        let v = DVector::from_vec(vec![0.7, 0.2, 0.4]);
        let outer = &u * v.transpose();
        let s1 = dense_top2(&outer).0;
        assert!(second_singular_value(&outer).unwrap() <= 1e-12 * s1);
        assert!(second_singular_value(&DMatrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn two_row_form_agrees_with_svd() {
        let mut r = rng::stream(3, &[]);
        for _ in 0..200 {
            let n = r.random_range(2..40);
            let m = DMatrix::from_fn(2, n, |_, _| r.random::<f64>());
            let fast = two_row_sigma2(&m);
            let (s1, s2) = top_two(m.singular_values().as_slice());
            assert!(rel_err(fast, s2, s1) < 1e-13);
            let t = m.transpose();
            assert!(rel_err(two_row_sigma2(&t), s2, s1) < 1e-13);
        }
        // Rank one to rounding.
        let m = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.6, 0.1, 0.2, 0.3]);
        assert!(two_row_sigma2(&m) < 1e-16);
    }

    #[test]
    fn iterative_matches_dense() {
        let mut r = rng::stream(4, &[]);
        for trial in 0..6 {
            let (rows, cols) = (70 + 5 * trial, 90 + trial);
            let rank = 2 + trial % 3;
            let u = DMatrix::from_fn(rows, rank, |_, _| r.random::<f64>());
            let v = DMatrix::from_fn(rank, cols, |_, _| r.random::<f64>());
            let noise = DMatrix::from_fn(rows, cols, |_, _| 1e-6 * (r.random::<f64>() - 0.5));
            let m = u * v + noise;
            let dense = top_two(m.singular_values().as_slice());
            let it = iterative_top2(&m).expect("converges on low-rank input");
            assert!(rel_err(it.1, dense.1, dense.0) < 1e-10, "trial {trial}");
            assert!(rel_err(sigma2(&m), dense.1, dense.0) < 1e-10);
        }
    }

    #[test]
    fn gram_path_matches_dense() {
        let mut r = rng::stream(5, &[]);
        for trial in 0..300 {
            let m = r.random_range(6..60);
            let raw = DMatrix::from_fn(m, m, |_, _| r.random::<f64>());
            let mut sym = (&raw + raw.transpose()) / 2.0;
            sym.fill_diagonal(1.0);
            let k = r.random_range(2..m - 1);
            let mut c: Vec<usize> = (0..m).collect();
            for i in 0..k {
                let j = r.random_range(i..m);
                c.swap(i, j);
            }
            c.truncate(k);
            c.sort_unstable();
            let block = cross_block(&sym, &c);
            let (s1, s2) = top_two(block.singular_values().as_slice());
            assert!(rel_err(union_sigma2(&sym, &c), s2, s1) < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn gram_path_exact_on_rank_one() {
        let u = DVector::from_fn(12, |i, _| 0.3 + 0.05 * i as f64);
        let sym = &u * u.transpose();
        for c in [vec![0, 1], vec![2, 5, 7], vec![0, 3, 4, 9, 10]] {
            assert!(union_sigma2(&sym, &c) < 1e-15);
        }
    }

    #[test]
    fn cross_block_layout() {
        let data = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { (i * 4 + j) as f64 / 100.0 });
        let data = (&data + data.transpose()) / 2.0;
        let labels = (0..4).map(|i| i.to_string()).collect();
        let r = SimilarityMatrix::from_matrix(labels, data.clone()).unwrap();
        let c = cross_similarity(&r, &[2, 0]).unwrap();
        assert_eq!(c.shape(), (2, 2));
        assert_eq!(c[(0, 0)], data[(0, 1)]);
        assert_eq!(c[(1, 1)], data[(2, 3)]);
        assert_eq!(cross_similarity(&r, &[1]).unwrap().shape(), (1, 3));
        assert!(cross_similarity(&r, &[]).is_err());
        assert!(cross_similarity(&r, &[0, 1, 2, 3]).is_err());
    }
}
