//! Subset-merging engine driven by a pairwise criterion on leaf unions.

use rayon::prelude::*;

use super::trace::{Criterion, MergeEvent, MergeTrace, RowEntry, GAP_WARNING};
use crate::error::{param, Result};

/// Pairwise merge criterion. `bound` may return a cheap lower bound on
/// `exact`; pairs whose bound cannot beat the current minimum are never
/// evaluated exactly.
pub(crate) trait Scorer: Sync {
    type Summary: Send + Sync;

    fn summarize(&self, members: &[usize], parts: Option<(&Self::Summary, &Self::Summary)>) -> Self::Summary;

    fn bound(&self, _a: (&[usize], &Self::Summary), _b: (&[usize], &Self::Summary)) -> Option<f64> {
        None
    }

    /// Criterion for the pair; `union` is their sorted union.
    fn exact(&self, a: (&[usize], &Self::Summary), b: (&[usize], &Self::Summary), union: &[usize]) -> f64;
}

#[derive(Clone, Copy)]
struct Entry {
    value: f64,
    exact: bool,
}

struct Subset<S> {
    members: Vec<usize>,
    summary: S,
}

fn union_of(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut c = [a, b].concat();
    c.sort_unstable();
    c
}

/// Merges subsets by smallest criterion until three remain. Only entries
/// involving the new subset are refreshed after a merge. With `exhaustive`
/// every entry is evaluated exactly; otherwise entries keep their lower bound
/// until they could be the minimum, which selects the same pair.
pub(crate) fn agglomerate<S: Scorer>(m: usize, criterion: Criterion, scorer: &S, exhaustive: bool) -> Result<MergeTrace> {
    if m < 4 {
        return Err(param(format!("reconstruction needs at least 4 leaves, got {m}")));
    }
    let ids = 2 * m - 3;
    let mut subsets: Vec<Subset<S::Summary>> = (0..m)
        .map(|i| Subset {
            members: vec![i],
            summary: scorer.summarize(&[i], None),
        })
        .collect();
    let mut active: Vec<usize> = (0..m).collect();
    // table[i][j] for i < j, indexed by subset id.
    let mut table = vec![vec![Entry { value: f64::NAN, exact: false }; ids]; ids];

    let exact = |a: &Subset<S::Summary>, b: &Subset<S::Summary>| {
        scorer.exact((&a.members, &a.summary), (&b.members, &b.summary), &union_of(&a.members, &b.members))
    };
    let evaluate = |subsets: &[Subset<S::Summary>], i: usize, j: usize| -> Entry {
        let (a, b) = (&subsets[i], &subsets[j]);
        if !exhaustive {
            if let Some(lb) = scorer.bound((&a.members, &a.summary), (&b.members, &b.summary)) {
                return Entry { value: lb, exact: false };
            }
        }
        Entry {
            value: exact(a, b),
            exact: true,
        }
    };

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    // A one-thread pool only adds handoff cost.
    let serial = rayon::current_num_threads() == 1;
    let entries: Vec<Entry> = if serial {
        pairs.iter().map(|&(i, j)| evaluate(&subsets, i, j)).collect()
    } else {
        pairs.par_iter().with_min_len(256).map(|&(i, j)| evaluate(&subsets, i, j)).collect()
    };
    for (&(i, j), e) in pairs.iter().zip(entries) {
        table[i][j] = e;
    }

    // best[i]: smallest entry (value, j) over active j > i, first j on ties.
    let row_best = |table: &[Vec<Entry>], active: &[usize], i: usize| {
        let mut b = (f64::INFINITY, usize::MAX);
        for &j in active {
            if j > i && table[i][j].value < b.0 {
                b = (table[i][j].value, j);
            }
        }
        b
    };
    let mut best = vec![(f64::INFINITY, usize::MAX); ids];
    for &i in &active {
        best[i] = row_best(&table, &active, i);
    }

    let mut events = Vec::with_capacity(m - 3);
    while active.len() > 3 {
        let step = events.len();
        let (left, right, value, second) = loop {
            // Active ids ascend, so the first strict minimum is the lexicographic one.
            let mut top = (usize::MAX, usize::MAX, f64::INFINITY);
            for &i in &active {
                if best[i].0 < top.2 {
                    top = (i, best[i].1, best[i].0);
                }
            }
            let (i, j, v) = top;
            if i == usize::MAX {
                return Err(param("criterion produced no finite value"));
            }
            if table[i][j].exact {
                let mut second = f64::INFINITY;
                for &k in &active {
                    let other = if k == i {
                        active.iter().filter(|&&l| l > i && l != j).map(|&l| table[i][l].value).fold(f64::INFINITY, f64::min)
                    } else {
                        best[k].0
                    };
                    second = second.min(other);
                }
                break (i, j, v, second);
            }
            table[i][j] = Entry {
                value: exact(&subsets[i], &subsets[j]),
                exact: true,
            };
            best[i] = row_best(&table, &active, i);
        };

        let merged = m + step;
        let row = active
            .iter()
            .filter(|&&k| k != left)
            .map(|&k| {
                let e = table[left.min(k)][left.max(k)];
                RowEntry {
                    id: k,
                    value: e.value,
                    exact: e.exact,
                }
            })
            .collect();
        // With four subsets left, both tied pairings give the same tree.
        let warning = (active.len() > 4 && second - value < GAP_WARNING)
            .then(|| format!("criterion gap {:.3e} below {GAP_WARNING:e}", second - value));

        let members = union_of(&subsets[left].members, &subsets[right].members);
        let summary = scorer.summarize(&members, Some((&subsets[left].summary, &subsets[right].summary)));
        subsets.push(Subset {
            members: members.clone(),
            summary,
        });
        active.retain(|&k| k != left && k != right);

        for &k in &active {
            if best[k].1 == left || best[k].1 == right {
                best[k] = row_best(&table, &active, k);
            }
        }
        if active.len() > 2 {
            let fresh: Vec<Entry> = if serial {
                active.iter().map(|&k| evaluate(&subsets, k, merged)).collect()
            } else {
                active.par_iter().with_min_len(16).map(|&k| evaluate(&subsets, k, merged)).collect()
            };
            for (&k, e) in active.iter().zip(fresh) {
                table[k][merged] = e;
                // The new id is the largest, so it only wins strictly.
                if e.value < best[k].0 {
                    best[k] = (e.value, merged);
                }
            }
        }
        active.push(merged);

        events.push(MergeEvent {
            step,
            left,
            right,
            merged,
            members,
            criterion,
            value,
            row,
            warning,
        });
    }
    Ok(MergeTrace {
        leaves: m,
        events,
        final_join: [active[0], active[1], active[2]],
    })
}
