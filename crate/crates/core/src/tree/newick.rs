//! Newick reading and writing.
//!
//! Output is canonical: the tree is hung from the internal node adjacent to
//! the leaf with the smallest label, giving a trifurcating pseudo-root, and
//! children are ordered by the smallest leaf label they contain. A quartet
//! with cherries {a,b} and {c,d} is therefore written `(a,b,(c,d));`.
//!
//! Branch annotations (`:value`) carry edge affinities, not branch lengths.

use super::{EdgeAffinities, Topology};
use crate::error::{Error, Result};

struct RawNode {
    label: Option<String>,
    value: Option<f64>,
    children: Vec<usize>,
    position: usize,
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    nodes: Vec<RawNode>,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Newick {
            position: self.pos,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() {
            match self.text[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'[' => {
                    while self.pos < self.text.len() && self.text[self.pos] != b']' {
                        self.pos += 1;
                    }
                    self.pos += 1;
                }
                _ => break,
            }
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn subtree(&mut self) -> Result<usize> {
        let position = self.pos;
        let mut children = Vec::new();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                children.push(self.subtree()?);
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return self.err(format!("expected ',' or ')', found '{}'", c as char)),
                    None => return self.err("unexpected end of input inside '('"),
                }
            }
        }
        let label = self.label()?;
        let value = if self.peek() == Some(b':') {
            self.pos += 1;
            Some(self.number()?)
        } else {
            None
        };
        if children.is_empty() && label.is_none() {
            return self.err("leaf without a label");
        }
        self.nodes.push(RawNode {
            label,
            value,
            children,
            position,
        });
        Ok(self.nodes.len() - 1)
    }

    fn label(&mut self) -> Result<Option<String>> {
        match self.peek() {
            Some(b'\'') => {
                self.pos += 1;
                let mut out = Vec::new();
                loop {
                    match self.text.get(self.pos) {
                        None => return self.err("unterminated quoted label"),
                        Some(b'\'') if self.text.get(self.pos + 1) == Some(&b'\'') => {
                            out.push(b'\'');
                            self.pos += 2;
                        }
                        Some(b'\'') => {
                            self.pos += 1;
                            break;
                        }
                        Some(&c) => {
                            out.push(c);
                            self.pos += 1;
                        }
                    }
                }
                Ok(Some(String::from_utf8_lossy(&out).into_owned()))
            }
            _ => {
                let start = self.pos;
                while let Some(&c) = self.text.get(self.pos) {
                    if b"(),:;[ \t\r\n'".contains(&c) {
                        break;
                    }
                    self.pos += 1;
                }
                if self.pos == start {
                    Ok(None)
                } else {
                    Ok(Some(String::from_utf8_lossy(&self.text[start..self.pos]).into_owned()))
                }
            }
        }
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while let Some(&c) = self.text.get(self.pos) {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let s = std::str::from_utf8(&self.text[start..self.pos]).unwrap_or("");
        match s.parse::<f64>() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err(format!("invalid branch value '{s}'"))
            }
        }
    }
}

/// Parses a Newick string into an unrooted topology. Branch annotations are
/// ignored; a bifurcating root is suppressed.
pub fn parse_newick(text: &str) -> Result<Topology> {
    parse_inner(text).map(|(t, _)| t)
}

/// Parses a Newick string and reads `:value` annotations as edge affinities.
/// Returns `None` for the affinities when no branch carries an annotation;
/// a partially annotated tree is an error.
pub fn parse_newick_with_affinities(text: &str) -> Result<(Topology, Option<EdgeAffinities>)> {
    let (t, values) = parse_inner(text)?;
    let present = values.iter().filter(|v| v.is_some()).count();
    if present == 0 {
        return Ok((t, None));
    }
    if present != values.len() {
        return Err(Error::Newick {
            position: 0,
            message: format!("{} of {} branches lack an affinity annotation", values.len() - present, values.len()),
        });
    }
    let aff = EdgeAffinities::new(&t, values.into_iter().map(Option::unwrap).collect())?;
    Ok((t, Some(aff)))
}

fn parse_inner(text: &str) -> Result<(Topology, Vec<Option<f64>>)> {
    let mut p = Parser {
        text: text.as_bytes(),
        pos: 0,
        nodes: Vec::new(),
    };
    let root = p.subtree()?;
    match p.peek() {
        Some(b';') => p.pos += 1,
        Some(c) => return p.err(format!("expected ';', found '{}'", c as char)),
        None => return p.err("missing terminating ';'"),
    }
    if p.peek().is_some() {
        return p.err("trailing characters after ';'");
    }
    let nodes = p.nodes;

    // Number leaves in order of appearance, then internal nodes.
    let mut labels = Vec::new();
    let mut id = vec![usize::MAX; nodes.len()];
    let mut stack = vec![root];
    let mut preorder = Vec::new();
    while let Some(v) = stack.pop() {
        preorder.push(v);
        stack.extend(nodes[v].children.iter().rev());
    }
    for &v in &preorder {
        if nodes[v].children.is_empty() {
            id[v] = labels.len();
            labels.push(nodes[v].label.clone().unwrap_or_default());
        }
    }
    let m = labels.len();
    let newick_err = |position: usize, message: String| Error::Newick { position, message };
    for &v in &preorder {
        let k = nodes[v].children.len();
        if v == root {
            if m >= 3 && !(k == 2 || k == 3) {
                return Err(newick_err(nodes[v].position, format!("root has {k} children")));
            }
            if m < 2 {
                return Err(newick_err(nodes[v].position, "tree needs at least 2 leaves".into()));
            }
        } else if k != 0 && k != 2 {
            return Err(newick_err(
                nodes[v].position,
                format!("internal node has {k} children; only bifurcating trees are supported"),
            ));
        }
    }
    let mut next = m;
    let suppress_root = nodes[root].children.len() == 2;
    for &v in &preorder {
        if !nodes[v].children.is_empty() && !(v == root && suppress_root) {
            id[v] = next;
            next += 1;
        }
    }

    let mut parent_of = vec![usize::MAX; nodes.len()];
    for (p, n) in nodes.iter().enumerate() {
        for &c in &n.children {
            parent_of[c] = p;
        }
    }
    let mut edges = Vec::new();
    let mut values = Vec::new();
    for &v in &preorder {
        if v == root {
            continue;
        }
        let parent = parent_of[v];
        if parent == root && suppress_root {
            continue;
        }
        edges.push((id[parent], id[v]));
        values.push(nodes[v].value);
    }
    if suppress_root {
        let (a, b) = (nodes[root].children[0], nodes[root].children[1]);
        edges.push((id[a], id[b]));
        values.push(match (nodes[a].value, nodes[b].value) {
            (Some(x), Some(y)) => Some(x * y),
            (Some(x), None) | (None, Some(x)) => Some(x),
            (None, None) => None,
        });
    }
    let t = Topology::from_edges(labels, edges).map_err(|e| match e {
        Error::Topology(msg) => newick_err(0, msg),
        other => other,
    })?;
    Ok((t, values))
}

/// Canonical Newick string for `t`.
pub fn write_newick(t: &Topology) -> String {
    write_impl(t, None)
}

/// Canonical Newick string with each branch annotated by its affinity.
pub fn write_newick_with_affinities(t: &Topology, aff: &EdgeAffinities) -> String {
    write_impl(t, Some(aff))
}

fn write_impl(t: &Topology, aff: Option<&EdgeAffinities>) -> String {
    let m = t.leaf_count();
    let first = (0..m).min_by(|&a, &b| t.label(a).cmp(t.label(b))).unwrap();
    let root = if m == 2 { first } else { t.neighbors(first)[0].0 };

    // Smallest label below each node when hung from `root`.
    let rooted = t.preorder(root);
    let mut min_label: Vec<Option<&str>> = vec![None; t.node_count()];
    for &v in rooted.order.iter().rev() {
        if t.is_leaf(v) {
            min_label[v] = Some(t.label(v));
        }
        if let Some((p, _)) = rooted.parent[v] {
            min_label[p] = match (min_label[p], min_label[v]) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
    }

    let mut out = String::new();
    if m == 2 {
        let other = 1 - first;
        out.push('(');
        push_label(&mut out, t.label(first));
        out.push(',');
        push_label(&mut out, t.label(other));
        if let Some(a) = aff {
            out.push_str(&format!(":{}", a.get(0)));
        }
        out.push_str(");");
        return out;
    }
    write_node(t, aff, root, None, &min_label, &mut out);
    out.push(';');
    out
}

fn write_node(
    t: &Topology,
    aff: Option<&EdgeAffinities>,
    v: usize,
    from: Option<usize>,
    min_label: &[Option<&str>],
    out: &mut String,
) {
    if t.is_leaf(v) {
        push_label(out, t.label(v));
        return;
    }
    let mut children: Vec<(usize, usize)> = t
        .neighbors(v)
        .iter()
        .copied()
        .filter(|&(w, _)| Some(w) != from)
        .collect();
    children.sort_by_key(|&(w, _)| min_label[w]);
    out.push('(');
    for (k, &(w, e)) in children.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        write_node(t, aff, w, Some(v), min_label, out);
        if let Some(a) = aff {
            out.push_str(&format!(":{}", a.get(e)));
        }
    }
    out.push(')');
}

fn push_label(out: &mut String, label: &str) {
    if label.bytes().any(|c| b"(),:;[] \t\r\n'".contains(&c)) {
        out.push('\'');
        out.push_str(&label.replace('\'', "''"));
        out.push('\'');
    } else {
        out.push_str(label);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{rf_distance, tree_diameter};

    #[test]
    fn canonical_forms() {
        let q = parse_newick("((c,d),(b,a));").unwrap();
        assert_eq!(write_newick(&q), "(a,b,(c,d));");
        let s = parse_newick("(b,c,a);").unwrap();
        assert_eq!(s.leaf_count(), 3);
        assert_eq!(write_newick(&s), "(a,b,c);");
    }

    #[test]
    fn round_trip_five_leaves() {
        let t = parse_newick("((a,b),(c,(d,e)));").unwrap();
        assert_eq!(t.leaf_count(), 5);
        let back = parse_newick(&write_newick(&t)).unwrap();
        assert_eq!(rf_distance(&t, &back).unwrap(), 0);
        assert_eq!(write_newick(&back), write_newick(&t));
    }

    #[test]
    fn rooted_input_is_unrooted() {
        let rooted = parse_newick("((a,b),(c,d));").unwrap();
        let unrooted = parse_newick("(a,b,(c,d));").unwrap();
        assert_eq!(rf_distance(&rooted, &unrooted).unwrap(), 0);
        assert_eq!(tree_diameter(&rooted), 3);
    }

    #[test]
    fn affinities_survive_round_trip() {
        let (t, aff) = parse_newick_with_affinities("((a:0.9,b:0.8):0.7,(c:0.6,d:0.5):0.5);").unwrap();
        let aff = aff.unwrap();
        // Suppressed root merges the two root branches multiplicatively.
        assert!(aff.values().iter().any(|&v| (v - 0.35).abs() < 1e-15));
        let text = write_newick_with_affinities(&t, &aff);
        let (t2, aff2) = parse_newick_with_affinities(&text).unwrap();
        assert_eq!(rf_distance(&t, &t2).unwrap(), 0);
        let mut a: Vec<f64> = aff.values().to_vec();
        let mut b: Vec<f64> = aff2.unwrap().values().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let (_, none) = parse_newick_with_affinities("(a,b,(c,d));").unwrap();
        assert!(none.is_none());
        assert!(parse_newick_with_affinities("(a:0.5,b,(c,d));").is_err());
        assert!(parse_newick_with_affinities("(a:1.5,b:0.5,c:0.5);").is_err());
    }

    #[test]
    fn errors_carry_positions() {
        for bad in ["((a,b),(c,d))", "((a,b),(c,d);", "((a,b,c),(d,e));", "(a,(b),c);", "((a,b),,c);", "(a,b,c);x", "(a,a,b);"] {
            assert!(parse_newick(bad).is_err(), "{bad} should fail");
        }
        match parse_newick("((a,b,c),(d,e));") {
            Err(Error::Newick { position, .. }) => assert_eq!(position, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_newick("(a,b,c,d);") {
            Err(Error::Newick { position, .. }) => assert_eq!(position, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quoted_labels() {
        let t = parse_newick("('x y',b,'it''s');").unwrap();
        assert_eq!(t.labels(), &["x y", "b", "it's"]);
        let again = parse_newick(&write_newick(&t)).unwrap();
        assert_eq!(rf_distance(&t, &again).unwrap(), 0);
    }
}
