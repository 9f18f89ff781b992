//! Merge logs shared by every reconstruction engine.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::Topology;

/// Criterion gaps below this attach a warning to the merge event.
pub const GAP_WARNING: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Sigma2,
    Q,
    MaxQuartet,
}

/// Criterion between the merged pair's first subset and another active subset.
/// `exact` is false when only a lower bound was needed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowEntry {
    pub id: usize,
    pub value: f64,
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub step: usize,
    pub left: usize,
    pub right: usize,
    pub merged: usize,
    /// Leaves of the merged subset, ascending.
    pub members: Vec<usize>,
    pub criterion: Criterion,
    pub value: f64,
    /// Criterion between `left` and every other active subset, by subset id.
    pub row: Vec<RowEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub leaves: usize,
    pub events: Vec<MergeEvent>,
    /// The three subsets joined at the last internal node.
    pub final_join: [usize; 3],
}

impl MergeTrace {
    /// One JSON object per merge event, then one for the final join.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(w)?;
        }
        let tail = serde_json::json!({ "leaves": self.leaves, "final_join": self.final_join });
        serde_json::to_writer(&mut w, &tail).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines: Vec<String> = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        let bad = |line: usize, e: serde_json::Error| Error::Format { line, message: e.to_string() };
        let last = lines.pop().ok_or(Error::Format { line: 1, message: "empty trace".into() })?;
        #[derive(Deserialize)]
        struct Tail {
            leaves: usize,
            final_join: [usize; 3],
        }
        let tail: Tail = serde_json::from_str(&last).map_err(|e| bad(lines.len() + 1, e))?;
        let events = lines
            .iter()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i + 1, e)))
            .collect::<Result<Vec<MergeEvent>>>()?;
        Ok(MergeTrace {
            leaves: tail.leaves,
            events,
            final_join: tail.final_join,
        })
    }

    /// Rebuilds the unrooted tree: leaves keep ids `0..m`, subset `k >= m`
    /// becomes internal node `k`, and the final join is node `2m - 3`.
    pub fn topology(&self, labels: Vec<String>) -> Result<Topology> {
        let m = self.leaves;
        if labels.len() != m {
            return Err(Error::LeafMismatch(format!("{} labels for {m} leaves", labels.len())));
        }
        let mut edges = Vec::with_capacity(2 * m - 3);
        for e in &self.events {
            edges.push((e.merged, e.left));
            edges.push((e.merged, e.right));
        }
        let hub = 2 * m - 3;
        for &s in &self.final_join {
            edges.push((hub, s));
        }
        Topology::from_edges(labels, edges)
    }
}
