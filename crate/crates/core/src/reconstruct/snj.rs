//! Scorers for the spectral and max-quartet merge criteria.
//!
//! Each subset `A` keeps a unit vector `u_A` near the top left singular vector
//! of its cross block and the row `y_A = u_A^T R[A, :]`. For a pair `A, S` with
//! outside columns `O`, the rows `y_A|O`, `y_S|O` are an orthonormal row
//! combination of the union's block, so their second singular value bounds
//! `sigma2` from below. The residual `E` of each block after removing its
//! `u`-component gives `sigma2^2 <= lb^2 + |E|_F^2`.

use std::cell::RefCell;

use nalgebra::DMatrix;

use super::agglomerate::Scorer;
use super::quartet::max_quartet_of;
use super::spectral::union_sigma2;
use crate::similarity::SimilarityMatrix;

const POWER_ITERS: usize = 1;
/// Rounding allowance for the two-row bound and the certificate, relative to
/// the bound's own scale.
const BOUND_SLACK: f64 = 1e-13;
/// Power iteration stops once the norm estimate settles to this relative change.
const POWER_TOL: f64 = 1e-14;

thread_local! {
    /// 1 on outside columns, 0 inside; kept all ones between calls.
    static WEIGHT: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` with weights zeroed on the given leaves.
fn with_outside<T>(m: usize, sets: &[&[usize]], f: impl FnOnce(&[f64]) -> T) -> T {
    WEIGHT.with(|cell| {
        let mut w = cell.borrow_mut();
        if w.len() != m {
            *w = vec![1.0; m];
        }
        for set in sets {
            for &i in *set {
                w[i] = 0.0;
            }
        }
        let out = f(&w);
        for set in sets {
            for &i in *set {
                w[i] = 1.0;
            }
        }
        out
    })
}

fn lanes(v: [f64; 4]) -> f64 {
    (v[0] + v[1]) + (v[2] + v[3])
}

/// Weighted `(x.x, y.y, x.y)`, accumulated in four lanes.
fn weighted_dots(w: &[f64], x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mut xx, mut yy, mut xy) = ([0.0; 4], [0.0; 4], [0.0; 4]);
    let chunks = w.chunks_exact(4).zip(x.chunks_exact(4)).zip(y.chunks_exact(4));
    for ((w, x), y) in chunks {
        for l in 0..4 {
            let (a, b) = (w[l] * x[l], w[l] * y[l]);
            xx[l] += a * a;
            yy[l] += b * b;
            xy[l] += a * b;
        }
    }
    let tail = w.len() / 4 * 4;
    for ((&w, &x), &y) in w[tail..].iter().zip(&x[tail..]).zip(&y[tail..]) {
        let (a, b) = (w * x, w * y);
        xx[0] += a * a;
        yy[0] += b * b;
        xy[0] += a * b;
    }
    (lanes(xx), lanes(yy), lanes(xy))
}

/// Weighted `(r.r, u.r)` for `r = v - c u`.
fn weighted_residual(w: &[f64], u: &[f64], v: &[f64], c: f64) -> (f64, f64) {
    let (mut rr, mut ur) = ([0.0; 4], [0.0; 4]);
    let chunks = w.chunks_exact(4).zip(u.chunks_exact(4)).zip(v.chunks_exact(4));
    for ((w, u), v) in chunks {
        for l in 0..4 {
            let r = w[l] * (v[l] - c * u[l]);
            rr[l] += r * r;
            ur[l] += w[l] * u[l] * r;
        }
    }
    let tail = w.len() / 4 * 4;
    for ((&w, &u), &v) in w[tail..].iter().zip(&u[tail..]).zip(&v[tail..]) {
        let r = w * (v - c * u);
        rr[0] += r * r;
        ur[0] += w * u * r;
    }
    (lanes(rr), lanes(ur))
}

/// Weighted `|x - c y|^2`.
fn weighted_dist2(w: &[f64], x: &[f64], y: &[f64], c: f64) -> f64 {
    let mut s = [0.0; 4];
    let chunks = w.chunks_exact(4).zip(x.chunks_exact(4)).zip(y.chunks_exact(4));
    for ((w, x), y) in chunks {
        for l in 0..4 {
            let e = w[l] * (x[l] - c * y[l]);
            s[l] += e * e;
        }
    }
    let tail = w.len() / 4 * 4;
    for ((&w, &x), &y) in w[tail..].iter().zip(&x[tail..]).zip(&y[tail..]) {
        let e = w * (x - c * y);
        s[0] += e * e;
    }
    lanes(s)
}

pub(crate) struct Profile {
    members: Vec<usize>,
    u: Vec<f64>,
    y: Vec<f64>,
}

pub(crate) struct Spectral<'a> {
    pub r: &'a DMatrix<f64>,
}

/// Scales `u` to unit length and returns its former norm.
fn normalize(u: &mut [f64]) -> f64 {
    let norm = u.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|w| *w /= norm);
    }
    norm
}

impl Spectral<'_> {
    fn mask(&self, sets: &[&[usize]]) -> Vec<bool> {
        let mut inside = vec![false; self.r.nrows()];
        for set in sets {
            for &i in *set {
                inside[i] = true;
            }
        }
        inside
    }

    fn project(&self, members: &[usize], u: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.r.nrows()];
        for (&i, &w) in members.iter().zip(u) {
            for (yl, &x) in y.iter_mut().zip(self.r.column(i).as_slice()) {
                *yl += w * x;
            }
        }
        y
    }

    fn profile(&self, members: &[usize], mut u: Vec<f64>) -> Profile {
        if members.len() > 1 {
            let inside = self.mask(&[members]);
            let mut last = 0.0;
            for _ in 0..POWER_ITERS {
                let mut y = self.project(members, &u);
                for (yl, &x) in y.iter_mut().zip(&inside) {
                    if x {
                        *yl = 0.0;
                    }
                }
                for (w, &i) in u.iter_mut().zip(members) {
                    *w = self.r.column(i).as_slice().iter().zip(&y).map(|(a, b)| a * b).sum();
                }
                let norm = normalize(&mut u);
                if norm == 0.0 || (norm - last).abs() <= POWER_TOL * norm {
                    break;
                }
                last = norm;
            }
        }
        let y = self.project(members, &u);
        Profile {
            members: members.to_vec(),
            u,
            y,
        }
    }

    /// Two-row lower bound and its scale `|y_A|O|^2 + |y_S|O|^2`.
    /// With `careful` unset, a well-conditioned determinant is taken from the
    /// dot products alone, lowered by its rounding error.
    fn pair_bound(&self, a: &Profile, b: &Profile, w: &[f64], careful: bool) -> (f64, f64) {
        let (aa, bb, ab) = weighted_dots(w, &a.y, &b.y);
        let (u, v, uu, uv) = if aa >= bb { (&a.y, &b.y, aa, ab) } else { (&b.y, &a.y, bb, ab) };
        let scale = aa + bb;
        if uu == 0.0 {
            return (0.0, scale);
        }
        let rounding = 8.0 * w.len() as f64 * f64::EPSILON;
        let det = aa * bb - ab * ab;
        let p = if !careful && det > 1e3 * rounding * aa * bb {
            det - rounding * aa * bb
        } else {
            // Residual of v against u, projected twice for accuracy.
            let c = uv / uu;
            let (ww, uw) = weighted_residual(w, u, v, c);
            uu * (ww - uw * uw / uu).max(0.0)
        };
        // A larger scale only lowers the result.
        let scale = scale * (1.0 + rounding);
        let sigma1 = ((scale + (scale * scale - 4.0 * p).max(0.0).sqrt()) / 2.0).sqrt();
        let lb = if sigma1 == 0.0 { 0.0 } else { p.sqrt() / sigma1 };
        ((lb - BOUND_SLACK * scale.sqrt()).max(0.0), scale)
    }

    /// `|R[A, O] - u_A y_A|O|_F^2`.
    /// Stops early once the sum passes `limit`.
    fn residual2(&self, p: &Profile, w: &[f64], limit: f64) -> f64 {
        let mut s = 0.0;
        if p.members.len() > 1 {
            for (&i, &ui) in p.members.iter().zip(&p.u) {
                s += weighted_dist2(w, self.r.column(i).as_slice(), &p.y, ui);
                if s > limit {
                    break;
                }
            }
        }
        s
    }
}

impl Scorer for Spectral<'_> {
    type Summary = Profile;

    fn summarize(&self, members: &[usize], parts: Option<(&Profile, &Profile)>) -> Profile {
        let uniform = || vec![(members.len() as f64).sqrt().recip(); members.len()];
        let start = match parts {
            Some((a, b)) => {
                // Children's vectors weighted by their row scale outside the
                // merged subset.
                let inside = self.mask(&[members]);
                let scale = |p: &Profile| {
                    let s: f64 = p.y.iter().zip(&inside).filter(|(_, &x)| !x).map(|(v, _)| v * v).sum();
                    s.sqrt()
                };
                let mut by_leaf = vec![0.0; self.r.nrows()];
                for p in [a, b] {
                    let w = scale(p);
                    for (&i, &x) in p.members.iter().zip(&p.u) {
                        by_leaf[i] = w * x;
                    }
                }
                let mut u: Vec<f64> = members.iter().map(|&i| by_leaf[i]).collect();
                if normalize(&mut u) > 0.0 {
                    u
                } else {
                    uniform()
                }
            }
            None => uniform(),
        };
        self.profile(members, start)
    }

    fn bound(&self, a: (&[usize], &Profile), b: (&[usize], &Profile)) -> Option<f64> {
        Some(with_outside(self.r.nrows(), &[a.0, b.0], |w| self.pair_bound(a.1, b.1, w, false).0))
    }

    fn exact(&self, a: (&[usize], &Profile), b: (&[usize], &Profile), union: &[usize]) -> f64 {
        let certified = with_outside(self.r.nrows(), &[a.0, b.0], |w| {
            let (lb, scale) = self.pair_bound(a.1, b.1, w, true);
            let tol = BOUND_SLACK * scale.sqrt();
            // sqrt(lb^2 + e^2) - lb <= tol
            let limit = tol * (tol + 2.0 * lb);
            let e2 = self.residual2(a.1, w, limit);
            let e2 = e2 + self.residual2(b.1, w, limit - e2);
            (e2 <= limit).then_some(lb)
        });
        if let Some(lb) = certified {
            lb
        } else {
            union_sigma2(self.r, union)
        }
    }
}

pub(crate) struct MaxQuartet<'a> {
    pub r: &'a SimilarityMatrix,
}

impl Scorer for MaxQuartet<'_> {
    type Summary = ();

    fn summarize(&self, _: &[usize], _: Option<(&(), &())>) {}

    fn exact(&self, _: (&[usize], &()), _: (&[usize], &()), union: &[usize]) -> f64 {
        max_quartet_of(self.r, union)
    }
}
