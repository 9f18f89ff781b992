//! Similarity and distance matrices: estimators from character data,
//! transforms between the two, and closed-form threshold and sample-size
//! formulas.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{param, Error, Result};
use crate::markov::CharacterMatrix;

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric `m x m` affinity matrix with entries in `[0, 1]`. The diagonal
/// is 1 by convention and is never read by the reconstruction engines.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    labels: Vec<String>,
    data: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn from_matrix(labels: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        check_square(&labels, &data)?;
        let m = labels.len();
        for i in 0..m {
            for j in 0..m {
                let v = data[(i, j)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Matrix(format!("similarity ({i},{j}) = {v} outside [0,1]")));
                }
                if (v - data[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::Matrix(format!("similarity not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(SimilarityMatrix { labels, data })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_matrix_csv(&self.labels, &self.data, w)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (labels, data) = read_matrix_csv(r)?;
        Self::from_matrix(labels, data)
    }
}

/// Symmetric nonnegative finite matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    data: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn from_matrix(labels: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        check_square(&labels, &data)?;
        let m = labels.len();
        for i in 0..m {
            if data[(i, i)] != 0.0 {
                return Err(Error::Matrix(format!("distance diagonal ({i},{i}) is nonzero")));
            }
            for j in 0..m {
                let v = data[(i, j)];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Matrix(format!("distance ({i},{j}) = {v} is not finite and nonnegative")));
                }
                if (v - data[(j, i)]).abs() > SYMMETRY_TOL * (1.0 + v.abs()) {
                    return Err(Error::Matrix(format!("distance not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(DistanceMatrix { labels, data })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_matrix_csv(&self.labels, &self.data, w)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (labels, data) = read_matrix_csv(r)?;
        Self::from_matrix(labels, data)
    }
}

fn check_square(labels: &[String], data: &DMatrix<f64>) -> Result<()> {
    let m = labels.len();
    if data.nrows() != m || data.ncols() != m {
        return Err(Error::Matrix(format!(
            "{}x{} matrix for {m} labels",
            data.nrows(),
            data.ncols()
        )));
    }
    Ok(())
}

fn write_matrix_csv<W: Write>(labels: &[String], data: &DMatrix<f64>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.to_string());
    out.write_record(labels).map_err(io)?;
    for i in 0..data.nrows() {
        out.write_record((0..data.ncols()).map(|j| format!("{:.16e}", data[(i, j)])))
            .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

fn read_matrix_csv<R: Read>(r: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let fmt = |line: usize, message: String| Error::Format { line, message };
    let labels: Vec<String> = rdr
        .headers()
        .map_err(|e| fmt(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let m = labels.len();
    let mut values = Vec::with_capacity(m * m);
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fmt(k + 2, e.to_string()))?;
        for field in rec.iter() {
            values.push(field.trim().parse::<f64>().map_err(|e| fmt(k + 2, e.to_string()))?);
        }
    }
    if values.len() != m * m {
        return Err(fmt(0, format!("expected {m}x{m} values, found {}", values.len())));
    }
    Ok((labels, DMatrix::from_row_slice(m, m, &values)))
}

/// Side information reported by the estimators.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EstimatorDiagnostics {
    /// Minimum over leaves and states of the state's observed frequency.
    pub gamma: f64,
    /// Number of leaf pairs whose estimate hit the clamp.
    pub clamp_count: usize,
}

fn min_state_frequency(x: &CharacterMatrix) -> (f64, usize, usize) {
    let d = x.states();
    let mut best = (usize::MAX, 0, 0);
    for i in 0..x.rows() {
        let mut counts = vec![0usize; d];
        for &s in x.row(i) {
            counts[s as usize] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            if c < best.0 {
                best = (c, i, k);
            }
        }
    }
    (best.0 as f64 / x.sites() as f64, best.1, best.2)
}

fn pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
}

/// JC-corrected similarity: `theta = min(mismatch fraction, (d-1)/d)` and
/// `R = (1 - d/(d-1) theta)^(d-1)`.
pub fn estimate_jc_similarity(x: &CharacterMatrix) -> (SimilarityMatrix, EstimatorDiagnostics) {
    let m = x.rows();
    let n = x.sites() as f64;
    let d = x.states();
    let cap = (d - 1) as f64 / d as f64;
    let k = d as f64 / (d - 1) as f64;
    let entries: Vec<(usize, usize, f64, bool)> = pairs(m)
        .into_par_iter()
        .map(|(i, j)| {
            let mismatches = x.row(i).iter().zip(x.row(j)).filter(|(a, b)| a != b).count();
            let frac = mismatches as f64 / n;
            let clamped = frac >= cap;
            let theta = frac.min(cap);
            let r = (1.0 - k * theta).max(0.0).powi(d as i32 - 1);
            (i, j, r, clamped)
        })
        .collect();
    let mut data = DMatrix::from_element(m, m, 1.0);
    let mut clamp_count = 0;
    for (i, j, r, clamped) in entries {
        data[(i, j)] = r;
        data[(j, i)] = r;
        clamp_count += clamped as usize;
    }
    let diag = EstimatorDiagnostics {
        gamma: min_state_frequency(x).0,
        clamp_count,
    };
    (
        SimilarityMatrix::from_matrix(x.labels().to_vec(), data).expect("JC estimate is valid"),
        diag,
    )
}

/// General estimator: `R(i,j) = sqrt(|det P(x_i|x_j)| |det P(x_j|x_i)|)` from
/// empirical conditionals, clamped to `[0,1]`. `smoothing` is added to every
/// joint count before normalizing; with zero smoothing every state must be
/// observed at every leaf.
pub fn estimate_logdet_similarity(x: &CharacterMatrix, smoothing: f64) -> Result<(SimilarityMatrix, EstimatorDiagnostics)> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(param("smoothing must be nonnegative"));
    }
    let (gamma, leaf, state) = min_state_frequency(x);
    if gamma == 0.0 && smoothing == 0.0 {
        return Err(Error::StarvedState {
            leaf: x.labels()[leaf].clone(),
            state: state + 1,
        });
    }
    let m = x.rows();
    let d = x.states();
    let entries: Vec<(usize, usize, f64, bool)> = pairs(m)
        .into_par_iter()
        .map(|(i, j)| {
            let mut joint = DMatrix::from_element(d, d, smoothing);
            for (&a, &b) in x.row(i).iter().zip(x.row(j)) {
                joint[(a as usize, b as usize)] += 1.0;
            }
            // Columns: P(x_i = a | x_j = b); rows give P(x_j | x_i) after transposing.
            let col_sums: Vec<f64> = (0..d).map(|b| joint.column(b).sum()).collect();
            let row_sums: Vec<f64> = (0..d).map(|a| joint.row(a).sum()).collect();
            let p_i_given_j = DMatrix::from_fn(d, d, |a, b| joint[(a, b)] / col_sums[b]);
            let p_j_given_i = DMatrix::from_fn(d, d, |b, a| joint[(a, b)] / row_sums[a]);
            let r = (p_i_given_j.determinant().abs() * p_j_given_i.determinant().abs()).sqrt();
            let clamped = !(0.0..=1.0).contains(&r);
            (i, j, r.clamp(0.0, 1.0), clamped)
        })
        .collect();
    let mut data = DMatrix::from_element(m, m, 1.0);
    let mut clamp_count = 0;
    for (i, j, r, clamped) in entries {
        data[(i, j)] = r;
        data[(j, i)] = r;
        clamp_count += clamped as usize;
    }
    Ok((
        SimilarityMatrix::from_matrix(x.labels().to_vec(), data)?,
        EstimatorDiagnostics { gamma, clamp_count },
    ))
}

/// `D = -ln R` elementwise, with a zero diagonal.
pub fn affinity_to_distance(r: &SimilarityMatrix) -> Result<DistanceMatrix> {
    let m = r.size();
    let mut data = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let v = r.get(i, j);
            if v <= 0.0 {
                return Err(Error::InfiniteDistance(r.labels[i].clone(), r.labels[j].clone()));
            }
            data[(i, j)] = -v.ln();
        }
    }
    DistanceMatrix::from_matrix(r.labels.clone(), data)
}

/// `R = exp(-D)` elementwise, with a unit diagonal.
pub fn distance_to_affinity(d: &DistanceMatrix) -> SimilarityMatrix {
    let m = d.size();
    let data = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { (-d.get(i, j)).exp() });
    SimilarityMatrix::from_matrix(d.labels.clone(), data).expect("exp(-D) lies in (0,1]")
}

/// Raises every off-diagonal entry below `floor` up to `floor`, so that a
/// saturated estimate maps to a large finite distance.
pub fn floor_similarity(r: &SimilarityMatrix, floor: f64) -> SimilarityMatrix {
    let data = r.data.map(|v| v.max(floor));
    SimilarityMatrix::from_matrix(r.labels.clone(), data).expect("flooring keeps entries in range")
}

/// Smallest nonzero value the JC estimator can produce from `n` sites:
/// the affinity one mismatch below saturation.
pub fn jc_resolution_floor(n: usize, d: usize) -> f64 {
    (d as f64 / ((d - 1) as f64 * n as f64)).min(1.0).powi(d as i32 - 1)
}

fn check_bounds(m: usize, delta: f64, xi: f64) -> Result<()> {
    if m < 4 {
        return Err(param(format!("m must be at least 4, got {m}")));
    }
    if !(delta > 0.0 && delta <= xi && xi < 1.0) {
        return Err(param(format!("need 0 < delta <= xi < 1, got ({delta}, {xi})")));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(param(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    Ok(())
}

/// `f(m, delta, xi) = 1/2 (2 delta^2)^{log2(m/2)} delta (1 - xi^2)`.
pub fn separation_f(m: usize, delta: f64, xi: f64) -> f64 {
    0.5 * (2.0 * delta * delta).powf((m as f64 / 2.0).log2()) * delta * (1.0 - xi * xi)
}

/// Largest spectral-norm estimation error under which SNJ provably recovers
/// the tree.
pub fn snj_error_threshold(m: usize, delta: f64, xi: f64) -> Result<f64> {
    check_bounds(m, delta, xi)?;
    Ok(if delta * delta <= 0.5 {
        separation_f(m, delta, xi) / 2.0
    } else {
        0.5 * delta.powi(3) * (1.0 - xi * xi)
    })
}

/// Sufficient JC sample size for SNJ to succeed with probability `1 - epsilon`.
pub fn jc_sample_bound(m: usize, d: usize, delta: f64, xi: f64, epsilon: f64) -> Result<u64> {
    check_bounds(m, delta, xi)?;
    check_epsilon(epsilon)?;
    if d < 2 {
        return Err(param("d must be at least 2"));
    }
    let (m_f, d_f) = (m as f64, d as f64);
    let gap = if delta * delta <= 0.5 {
        separation_f(m, delta, xi)
    } else {
        delta.powi(3) * (1.0 - xi * xi)
    };
    let n = 2.0 * d_f * d_f * m_f * m_f / (gap * gap) * (2.0 * m_f * m_f / epsilon).ln();
    Ok(n.ceil() as u64)
}

/// Sufficient JC sample size for the max-quartet variant.
pub fn maxq_sample_bound(m: usize, d: usize, delta: f64, depth: usize, epsilon: f64) -> Result<u64> {
    if m < 4 || d < 2 || depth < 1 {
        return Err(param("need m >= 4, d >= 2 and depth >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param(format!("delta must lie in (0,1), got {delta}")));
    }
    check_epsilon(epsilon)?;
    let (m_f, d_f) = (m as f64, d as f64);
    let n = 100.0 * d_f * d_f * (2.0 * m_f * m_f / epsilon).ln() * delta.powf(-4.0 * (depth as f64 + 1.0));
    Ok(n.ceil() as u64)
}

/// Entrywise deviation `t` such that all JC estimates are within `t` of the
/// population value with probability at least `1 - alpha` (Hoeffding plus a
/// union bound over pairs, scaled by the Lipschitz constant `d`).
pub fn jc_entrywise_deviation(m: usize, d: usize, n: usize, alpha: f64) -> f64 {
    let m = m as f64;
    d as f64 * ((2.0 * m * m / alpha).ln() / (2.0 * n as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[u8]], d: usize) -> CharacterMatrix {
        let m = rows.len();
        let n = rows[0].len();
        let labels = (1..=m).map(|i| format!("x{i}")).collect();
        CharacterMatrix::new(labels, n, d, rows.concat()).unwrap()
    }

    #[test]
    fn jc_estimator_values() {
        let a: Vec<u8> = (0..100).map(|s| (s % 4) as u8).collect();
        let mut b = a.clone();
        for s in 0..10 {
            b[s] = (b[s] + 1) % 4;
        }
        let far: Vec<u8> = a.iter().map(|&s| (s + 1) % 4).collect();
        let x = matrix(&[&a, &a, &b, &far], 4);
        let (r, diag) = estimate_jc_similarity(&x);
        assert_eq!(r.get(0, 1), 1.0);
        assert!((r.get(0, 2) - (13.0f64 / 15.0).powi(3)).abs() < 1e-12);
        assert_eq!(r.get(0, 3), 0.0);
        // far disagrees with a everywhere and with b on 90 of 100 sites.
        assert_eq!(diag.clamp_count, 3);
        assert!((diag.gamma - 0.25).abs() < 0.02);
    }

    #[test]
    fn jc_mismatch_ninety_percent_clamps() {
        let a: Vec<u8> = vec![0; 10];
        let mut b: Vec<u8> = vec![1; 10];
        b[0] = 0;
        let x = matrix(&[&a, &b], 4);
        let (r, diag) = estimate_jc_similarity(&x);
        assert_eq!(r.get(0, 1), 0.0);
        assert_eq!(diag.clamp_count, 1);
    }

    #[test]
    fn logdet_identical_rows_and_starvation() {
        let a: Vec<u8> = (0..40).map(|s| (s % 4) as u8).collect();
        let x = matrix(&[&a, &a, &a], 4);
        let (r, _) = estimate_logdet_similarity(&x, 0.0).unwrap();
        assert!((r.get(0, 1) - 1.0).abs() < 1e-12);
        let starving: Vec<u8> = (0..40).map(|s| (s % 3) as u8).collect();
        let y = matrix(&[&a, &starving], 4);
        match estimate_logdet_similarity(&y, 0.0) {
            Err(Error::StarvedState { leaf, state }) => {
                assert_eq!(leaf, "x2");
                assert_eq!(state, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(estimate_logdet_similarity(&y, 0.5).is_ok());
    }

    #[test]
    fn distance_transforms() {
        let labels: Vec<String> = vec!["a".into(), "b".into()];
        let r = SimilarityMatrix::from_matrix(labels.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.729, 0.729, 1.0])).unwrap();
        let d = affinity_to_distance(&r).unwrap();
        assert!((d.get(0, 1) - 3.0 * -(0.9f64.ln())).abs() < 1e-12);
        assert_eq!(d.get(0, 0), 0.0);
        let back = distance_to_affinity(&d);
        assert!((back.get(0, 1) - 0.729).abs() < 1e-12);
        let zero = SimilarityMatrix::from_matrix(labels, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!(matches!(affinity_to_distance(&zero), Err(Error::InfiniteDistance(_, _))));
    }

    #[test]
    fn matrix_validation() {
        let labels: Vec<String> = vec!["a".into(), "b".into()];
        assert!(SimilarityMatrix::from_matrix(labels.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(SimilarityMatrix::from_matrix(labels.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0])).is_err());
        assert!(DistanceMatrix::from_matrix(labels.clone(), DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0])).is_err());
        assert!(DistanceMatrix::from_matrix(labels, DMatrix::from_row_slice(2, 2, &[0.0, f64::INFINITY, f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn csv_full_precision() {
        let labels: Vec<String> = vec!["a".into(), "b".into()];
        let v = 0.1f64 + 0.2;
        let r = SimilarityMatrix::from_matrix(labels, DMatrix::from_row_slice(2, 2, &[1.0, v, v, 1.0])).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert_eq!(SimilarityMatrix::read_csv(&buf[..]).unwrap(), r);
    }

    #[test]
    fn threshold_values() {
        let f: f64 = 0.5 * 0.72 * 0.6 * 0.0975;
        assert!((f - 0.021060).abs() < 1e-9);
        assert!((separation_f(4, 0.6, 0.95) - f).abs() < 1e-12);
        assert!((snj_error_threshold(4, 0.6, 0.95).unwrap() - 0.010530).abs() < 1e-9);
        let d = 0.5f64.sqrt();
        let lo = snj_error_threshold(4, d * (1.0 - 1e-12), 0.9).unwrap();
        let hi = snj_error_threshold(4, d * (1.0 + 1e-12), 0.9).unwrap();
        assert!((lo - hi).abs() < 1e-10);
        assert!(snj_error_threshold(4, 0.999_999, 0.999_999).unwrap() < 1e-5);
        assert!(snj_error_threshold(4, 0.9, 0.8).is_err());
        assert!(snj_error_threshold(3, 0.5, 0.8).is_err());
    }

    #[test]
    fn sample_bounds() {
        // Independent evaluation of the delta^2 > 0.5 branch.
        let (m, d, dl, xi, eps) = (4.0f64, 4.0f64, 0.8f64, 0.8f64, 0.1f64);
        let want = (2.0 * d * d * m * m) / (dl.powi(6) * (1.0 - xi * xi).powi(2)) * (2.0 * m * m / eps).ln();
        assert_eq!(jc_sample_bound(4, 4, 0.8, 0.8, 0.1).unwrap(), want.ceil() as u64);

        let mut prev = 0;
        for m in [8, 16, 32, 64] {
            let n = jc_sample_bound(m, 4, 0.8, 0.85, 0.1).unwrap();
            assert!(n > prev);
            prev = n;
            let scaled = n as f64 / ((m * m) as f64 * (2.0 * (m * m) as f64 / 0.1).ln());
            let base = jc_sample_bound(8, 4, 0.8, 0.85, 0.1).unwrap() as f64 / (64.0 * (128.0f64 / 0.1).ln());
            assert!((scaled / base - 1.0).abs() < 1e-6);
        }
        assert!(jc_sample_bound(16, 4, 0.8, 0.9, 0.1).unwrap() > jc_sample_bound(16, 4, 0.8, 0.85, 0.1).unwrap());
        assert!(jc_sample_bound(16, 4, 0.8, 0.85, 0.01).unwrap() > jc_sample_bound(16, 4, 0.8, 0.85, 0.1).unwrap());
        assert!(jc_sample_bound(16, 4, 0.8, 0.85, 1.0).is_err());

        let want = 100.0 * 16.0 * (2.0 * 256.0 / 0.1f64).ln() * 0.9f64.powi(-12);
        assert_eq!(maxq_sample_bound(16, 4, 0.9, 2, 0.1).unwrap(), want.ceil() as u64);
        let near_one = maxq_sample_bound(16, 4, 1.0 - 1e-12, 1, 0.1).unwrap() as f64;
        assert_eq!(near_one, (1600.0 * (5120.0f64).ln() * (1.0 - 1e-12f64).powi(-8)).ceil());
        let small = maxq_sample_bound(16, 4, 0.9, 1, 0.1).unwrap() as f64;
        let large = maxq_sample_bound(1024, 4, 0.9, 1, 0.1).unwrap() as f64;
        // Logarithmic in m: 64x more leaves costs far less than 2x.
        assert!(large / small < 2.0);
        assert!(maxq_sample_bound(16, 4, 0.9, 0, 0.1).is_err());
    }
}
