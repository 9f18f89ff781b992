//! Canonical neighbor joining.

use super::trace::{Criterion, MergeEvent, MergeTrace, RowEntry, GAP_WARNING};
use crate::error::{param, Result};
use crate::similarity::DistanceMatrix;

/// `Q(i,j) = (r-2) D(i,j) - S_i - S_j` over the `r` active nodes; the joined
/// pair is replaced by a node at `D(k,new) = (D(k,i) + D(k,j) - D(i,j)) / 2`.
pub fn nj(d: &DistanceMatrix) -> Result<(crate::tree::Topology, MergeTrace)> {
    let m = d.size();
    if m < 4 {
        return Err(param(format!("reconstruction needs at least 4 leaves, got {m}")));
    }
    let ids = 2 * m - 3;
    let mut dist = vec![vec![0.0f64; ids]; ids];
    for i in 0..m {
        for j in 0..m {
            dist[i][j] = d.get(i, j);
        }
    }
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    let mut active: Vec<usize> = (0..m).collect();
    let mut sums = vec![0.0f64; ids];
    let mut events = Vec::with_capacity(m - 3);

    while active.len() > 3 {
        let step = events.len();
        let r = active.len() as f64;
        for &i in &active {
            sums[i] = active.iter().map(|&k| dist[i][k]).sum();
        }
        let q = |i: usize, j: usize| (r - 2.0) * dist[i][j] - sums[i] - sums[j];
        let (mut best, mut second) = ((usize::MAX, usize::MAX, f64::INFINITY), f64::INFINITY);
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a + 1..] {
                let v = q(i, j);
                if v < best.2 {
                    second = best.2;
                    best = (i, j, v);
                } else if v < second {
                    second = v;
                }
            }
        }
        let (left, right, value) = best;
        if left == usize::MAX {
            return Err(param("distance matrix produced no finite Q value"));
        }
        let row = active
            .iter()
            .filter(|&&k| k != left)
            .map(|&k| RowEntry {
                id: k,
                value: q(left, k),
                exact: true,
            })
            .collect();
        let warning = (active.len() > 4 && second - value < GAP_WARNING)
            .then(|| format!("criterion gap {:.3e} below {GAP_WARNING:e}", second - value));

        let merged = m + step;
        let dij = dist[left][right];
        active.retain(|&k| k != left && k != right);
        for &k in &active {
            let v = 0.5 * (dist[k][left] + dist[k][right] - dij);
            dist[k][merged] = v;
            dist[merged][k] = v;
        }
        active.push(merged);
        let mut union = [members[left].as_slice(), members[right].as_slice()].concat();
        union.sort_unstable();
        members.push(union.clone());

        events.push(MergeEvent {
            step,
            left,
            right,
            merged,
            members: union,
            criterion: Criterion::Q,
            value,
            row,
            warning,
        });
    }
    let trace = MergeTrace {
        leaves: m,
        events,
        final_join: [active[0], active[1], active[2]],
    };
    let t = trace.topology(d.labels().to_vec())?;
    Ok((t, trace))
}
