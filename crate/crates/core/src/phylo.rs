//! Unrooted weighted trees: neighbor joining, patristic distances, Newick.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gendist::DistanceMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// Unrooted tree; leaves carry labels, internal nodes usually do not.
#[derive(Clone, Debug, PartialEq)]
pub struct PhyloTree {
    labels: Vec<Option<String>>,
    edges: Vec<Edge>,
}

impl PhyloTree {
    pub fn from_parts(labels: Vec<Option<String>>, edges: Vec<Edge>) -> Result<Self> {
        let tree = PhyloTree { labels, edges };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n < 2 {
            return Err(Error::Data("a tree needs at least two nodes".into()));
        }
        if self.edges.len() != n - 1 {
            return Err(Error::Data("tree must have exactly nodes - 1 edges".into()));
        }
        for e in &self.edges {
            if e.a >= n || e.b >= n || e.a == e.b {
                return Err(Error::Data(format!("bad edge {e:?}")));
            }
            if !(e.length.is_finite() && e.length >= 0.0) {
                return Err(Error::Data(format!("bad edge length {}", e.length)));
            }
        }
        // n - 1 edges and connected implies acyclic
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &(w, _) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("tree is disconnected".into()));
        }
        let mut leaf_labels = BTreeSet::new();
        for v in 0..n {
            if adj[v].len() == 1 {
                match &self.labels[v] {
                    Some(l) => {
                        if !leaf_labels.insert(l.clone()) {
                            return Err(Error::DuplicateLabel(l.clone()));
                        }
                    }
                    None => return Err(Error::Data("unlabeled leaf".into())),
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn label(&self, node: usize) -> Option<&str> {
        self.labels[node].as_deref()
    }

    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.labels.len()];
        for e in &self.edges {
            adj[e.a].push((e.b, e.length));
            adj[e.b].push((e.a, e.length));
        }
        adj
    }

    /// Leaf node ids in node order.
    pub fn leaves(&self) -> Vec<usize> {
        let adj = self.adjacency();
        (0..self.labels.len())
            .filter(|&v| adj[v].len() == 1)
            .collect()
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        self.leaves()
            .into_iter()
            .map(|v| self.labels[v].clone().expect("validated leaf label"))
            .collect()
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }

    fn distances_from(&self, adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
        let mut dist = vec![f64::NAN; self.labels.len()];
        dist[source] = 0.0;
        let mut stack = vec![source];
        while let Some(v) = stack.pop() {
            for &(w, len) in &adj[v] {
                if dist[w].is_nan() {
                    dist[w] = dist[v] + len;
                    stack.push(w);
                }
            }
        }
        dist
    }

    /// Leaf-to-leaf path lengths, rows in leaf node order.
    pub fn patristic_matrix(&self) -> Result<DistanceMatrix> {
        let adj = self.adjacency();
        let leaves = self.leaves();
        let mut values = vec![vec![0.0; leaves.len()]; leaves.len()];
        for (i, &u) in leaves.iter().enumerate() {
            let dist = self.distances_from(&adj, u);
            for (j, &v) in leaves.iter().enumerate() {
                values[i][j] = dist[v];
            }
        }
        for i in 0..leaves.len() {
            for j in 0..i {
                let m = 0.5 * (values[i][j] + values[j][i]);
                values[i][j] = m;
                values[j][i] = m;
            }
        }
        DistanceMatrix::new(self.leaf_labels(), values)
    }

    /// Leaf bipartitions induced by each edge, each stored as the side that
    /// excludes the smallest leaf label.
    pub fn splits(&self) -> BTreeSet<BTreeSet<String>> {
        let adj = self.adjacency();
        let all: BTreeSet<String> = self.leaf_labels().into_iter().collect();
        let anchor = all.iter().next().cloned();
        let mut out = BTreeSet::new();
        for e in &self.edges {
            // leaves reachable from e.b without crossing the edge
            let mut side = BTreeSet::new();
            let mut stack = vec![(e.b, e.a)];
            while let Some((v, from)) = stack.pop() {
                if adj[v].len() == 1 {
                    side.insert(self.labels[v].clone().unwrap());
                }
                for &(w, _) in &adj[v] {
                    if w != from {
                        stack.push((w, v));
                    }
                }
            }
            if side.contains(anchor.as_ref().unwrap()) {
                side = all.difference(&side).cloned().collect();
            }
            out.insert(side);
        }
        out
    }

    /// Newick text rooted at the last internal node (or, for a bare edge,
    /// at its midpoint).
    pub fn to_newick(&self, precision: Precision) -> String {
        let adj = self.adjacency();
        let mut out = String::new();
        let internal = (0..self.labels.len()).rev().find(|&v| adj[v].len() > 1);
        match internal {
            None => {
                let e = self.edges[0];
                let half = e.length / 2.0;
                let _ = write!(
                    out,
                    "({}:{},{}:{});",
                    quote_label(self.labels[e.a].as_deref().unwrap_or("")),
                    precision.format(half),
                    quote_label(self.labels[e.b].as_deref().unwrap_or("")),
                    precision.format(half)
                );
            }
            Some(root) => {
                self.write_subtree(&adj, root, usize::MAX, precision, &mut out);
                out.push(';');
            }
        }
        out
    }

    fn write_subtree(
        &self,
        adj: &[Vec<(usize, f64)>],
        v: usize,
        parent: usize,
        precision: Precision,
        out: &mut String,
    ) {
        let children: Vec<(usize, f64)> = adj[v]
            .iter()
            .copied()
            .filter(|&(w, _)| w != parent)
            .collect();
        if !children.is_empty() {
            out.push('(');
            for (k, &(w, len)) in children.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                self.write_subtree(adj, w, v, precision, out);
                out.push(':');
                out.push_str(&precision.format(len));
            }
            out.push(')');
        }
        if let Some(l) = &self.labels[v] {
            out.push_str(&quote_label(l));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Significant(usize),
    /// Shortest representation that round-trips exactly.
    Full,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Significant(6)
    }
}

impl Precision {
    pub fn format(self, x: f64) -> String {
        match self {
            Precision::Full => format!("{x}"),
            Precision::Significant(digits) => {
                let rounded: f64 = format!("{:.*e}", digits.max(1) - 1, x)
                    .parse()
                    .expect("formatted float parses");
                format!("{rounded}")
            }
        }
    }
}

fn quote_label(label: &str) -> String {
    let plain = !label.is_empty()
        && label
            .chars()
            .all(|c| !c.is_whitespace() && !"()[]':;,".contains(c));
    if plain {
        label.to_string()
    } else {
        format!("'{}'", label.replace('\'', "''"))
    }
}

/// Neighbor joining; see [`neighbor_joining_with_warnings`].
pub fn neighbor_joining(dm: &DistanceMatrix) -> Result<PhyloTree> {
    neighbor_joining_with_warnings(dm).map(|(t, _)| t)
}

/// Saitou-Nei neighbor joining.
///
/// Leaves are nodes `0..n` in matrix order; internal nodes follow in creation
/// order. Ties in Q go to the smallest `(i, j)` index pair. Negative branch
/// lengths are set to zero and the pair's distance is given to the sibling;
/// each such event adds a warning.
pub fn neighbor_joining_with_warnings(dm: &DistanceMatrix) -> Result<(PhyloTree, Vec<String>)> {
    let n = dm.len();
    if n < 2 {
        return Err(Error::Data(
            "neighbor joining needs at least two taxa".into(),
        ));
    }
    let mut labels: Vec<Option<String>> = dm.labels().iter().cloned().map(Some).collect();
    let mut edges = Vec::new();
    let mut warnings = Vec::new();

    // d is indexed by node id and grows as internal nodes are created
    let cap = 2 * n;
    let mut d = vec![vec![0.0; cap]; cap];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = dm.get(i, j);
        }
    }
    let mut active: Vec<usize> = (0..n).collect();

    while active.len() > 2 {
        let m = active.len();
        let sums: Vec<f64> = active
            .iter()
            .map(|&i| active.iter().map(|&k| d[i][k]).sum())
            .collect();
        let mut best = (f64::INFINITY, 0, 1);
        for a in 0..m {
            for b in a + 1..m {
                let q = (m as f64 - 2.0) * d[active[a]][active[b]] - sums[a] - sums[b];
                if !q.is_finite() {
                    return Err(Error::Numerical("non-finite Q value".into()));
                }
                if q < best.0 {
                    best = (q, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let (i, j) = (active[a], active[b]);
        let dij = d[i][j];
        let mut di = 0.5 * dij + (sums[a] - sums[b]) / (2.0 * (m as f64 - 2.0));
        let mut dj = dij - di;
        if di < 0.0 {
            warnings.push(format!(
                "negative branch length {di:.3e} clamped to 0 (node {i})"
            ));
            di = 0.0;
            dj = dij;
        } else if dj < 0.0 {
            warnings.push(format!(
                "negative branch length {dj:.3e} clamped to 0 (node {j})"
            ));
            dj = 0.0;
            di = dij;
        }
        let u = labels.len();
        labels.push(None);
        for &k in &active {
            if k != i && k != j {
                let duk = 0.5 * (d[i][k] + d[j][k] - dij);
                if !duk.is_finite() {
                    return Err(Error::Numerical("non-finite joined distance".into()));
                }
                d[u][k] = duk;
                d[k][u] = duk;
            }
        }
        edges.push(Edge {
            a: u,
            b: i,
            length: di,
        });
        edges.push(Edge {
            a: u,
            b: j,
            length: dj,
        });
        active.retain(|&k| k != i && k != j);
        active.push(u);
    }
    let (x, y) = (active[0], active[1]);
    let mut last = d[x][y];
    if last < 0.0 {
        warnings.push(format!("negative branch length {last:.3e} clamped to 0"));
        last = 0.0;
    }
    edges.push(Edge {
        a: x,
        b: y,
        length: last,
    });
    Ok((PhyloTree::from_parts(labels, edges)?, warnings))
}

struct NewickParser<'a> {
    text: &'a [u8],
    pos: usize,
    labels: Vec<Option<String>>,
    // (child, parent, length)
    links: Vec<(usize, usize, f64)>,
}

impl<'a> NewickParser<'a> {
    fn err<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::NewickParse {
            position: self.pos,
            reason: reason.into(),
        })
    }

    fn skip_ws(&mut self) {
        loop {
            while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.peek() == Some(b'[') {
                while self.pos < self.text.len() && self.text[self.pos] != b']' {
                    self.pos += 1;
                }
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn label(&mut self) -> Result<Option<String>> {
        self.skip_ws();
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let mut s = Vec::new();
            loop {
                match self.peek() {
                    None => return self.err("unterminated quoted label"),
                    Some(b'\'') if self.text.get(self.pos + 1) == Some(&b'\'') => {
                        s.push(b'\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => {
                        s.push(c);
                        self.pos += 1;
                    }
                }
            }
            return Ok(Some(String::from_utf8_lossy(&s).into_owned()));
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if b"()[]':;,".contains(&c) || c.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            Ok(None)
        } else {
            Ok(Some(
                String::from_utf8_lossy(&self.text[start..self.pos]).into_owned(),
            ))
        }
    }

    fn length(&mut self) -> Result<f64> {
        self.skip_ws();
        if self.peek() != Some(b':') {
            return Ok(0.0);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || b"+-.eE".contains(&c) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let s = std::str::from_utf8(&self.text[start..self.pos]).unwrap_or("");
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
            _ => {
                self.pos = start;
                self.err(format!("invalid branch length '{s}'"))
            }
        }
    }

    fn subtree(&mut self) -> Result<usize> {
        self.skip_ws();
        let id = self.labels.len();
        self.labels.push(None);
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.subtree()?;
                let len = self.length()?;
                self.links.push((child, id, len));
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return self.err("expected ',' or ')'"),
                }
            }
            self.labels[id] = self.label()?;
        } else {
            match self.label()? {
                Some(l) => self.labels[id] = Some(l),
                None => return self.err("expected a label or '('"),
            }
        }
        Ok(id)
    }
}

/// Parses Newick. Unlabeled internal nodes of degree two (including a
/// bifurcating root) are suppressed by merging their two edges.
pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    let mut p = NewickParser {
        text: text.as_bytes(),
        pos: 0,
        labels: Vec::new(),
        links: Vec::new(),
    };
    p.subtree()?;
    // a root branch length carries no information in an unrooted tree
    p.length()?;
    p.skip_ws();
    if p.peek() != Some(b';') {
        return p.err("expected ';'");
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos != p.text.len() {
        return p.err("trailing text after ';'");
    }

    let n = p.labels.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(c, par, len) in &p.links {
        adj[c].push((par, len));
        adj[par].push((c, len));
    }
    let mut alive = vec![true; n];
    for v in 0..n {
        if adj[v].len() == 2 && p.labels[v].is_none() {
            let (a, la) = adj[v][0];
            let (b, lb) = adj[v][1];
            adj[a].retain(|&(w, _)| w != v);
            adj[b].retain(|&(w, _)| w != v);
            adj[a].push((b, la + lb));
            adj[b].push((a, la + lb));
            adj[v].clear();
            alive[v] = false;
        }
    }
    let remap: Vec<Option<usize>> = {
        let mut next = 0;
        (0..n)
            .map(|v| {
                alive[v].then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let labels = (0..n)
        .filter(|&v| alive[v])
        .map(|v| p.labels[v].clone())
        .collect();
    let mut edges = Vec::new();
    for v in 0..n {
        for &(w, len) in &adj[v] {
            if v < w {
                edges.push(Edge {
                    a: remap[v].unwrap(),
                    b: remap[w].unwrap(),
                    length: len,
                });
            }
        }
    }
    PhyloTree::from_parts(labels, edges).map_err(|e| Error::NewickParse {
        position: text.len(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dm(labels: &[&str], values: Vec<Vec<f64>>) -> DistanceMatrix {
        DistanceMatrix::new(labels.iter().map(|s| s.to_string()).collect(), values).unwrap()
    }

    #[test]
    fn three_taxa_pendants() {
        let m = dm(
            &["1", "2", "3"],
            vec![
                vec![0.0, 0.3, 0.4],
                vec![0.3, 0.0, 0.5],
                vec![0.4, 0.5, 0.0],
            ],
        );
        let (tree, warnings) = neighbor_joining_with_warnings(&m).unwrap();
        assert!(warnings.is_empty());
        let mut pendant: Vec<(String, f64)> = tree
            .edges()
            .iter()
            .map(|e| {
                (
                    tree.label(e.b).or(tree.label(e.a)).unwrap().to_string(),
                    e.length,
                )
            })
            .collect();
        pendant.sort_by(|a, b| a.0.cmp(&b.0));
        let expected = [0.1, 0.2, 0.3];
        for ((_, len), want) in pendant.iter().zip(expected) {
            assert!((len - want).abs() < 1e-12);
        }
        let p = tree.patristic_matrix().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.get(i, j) - m.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_identical_taxa() {
        let m = dm(&["a", "b"], vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let tree = neighbor_joining(&m).unwrap();
        assert_eq!(tree.edges().len(), 1);
        assert_eq!(tree.edges()[0].length, 0.0);
    }

    #[test]
    fn single_edge_patristic_and_newick() {
        let tree = PhyloTree::from_parts(
            vec![Some("A".into()), Some("B".into())],
            vec![Edge {
                a: 0,
                b: 1,
                length: 0.3,
            }],
        )
        .unwrap();
        let p = tree.patristic_matrix().unwrap();
        assert_eq!(p.values(), &[vec![0.0, 0.3], vec![0.3, 0.0]]);
        assert_eq!(tree.to_newick(Precision::default()), "(A:0.15,B:0.15);");
        let back = parse_newick("(A:0.15,B:0.15);").unwrap();
        assert_eq!(back.edges().len(), 1);
        assert!((back.edges()[0].length - 0.3).abs() < 1e-15);
    }

    #[test]
    fn star_tree_patristic() {
        let tree = parse_newick("(x:0.1,y:0.2,z:0.3);").unwrap();
        let p = tree.patristic_matrix().unwrap();
        let i = |l: &str| p.index_of(l).unwrap();
        assert!((p.get(i("x"), i("y")) - 0.3).abs() < 1e-15);
        assert!((p.get(i("x"), i("z")) - 0.4).abs() < 1e-15);
        assert!((p.get(i("y"), i("z")) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn newick_errors_report_position() {
        for bad in [
            "((A:1,B:1);",
            "(A:1,B:1)",
            "(A:x,B:1);",
            "(A:1,B:1);junk",
            "(,A);",
        ] {
            assert!(
                matches!(parse_newick(bad), Err(Error::NewickParse { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn newick_labels_and_precision() {
        let tree = parse_newick("('a b':1.234567891,'it''s':2,(c:1,d:1)0.95:0.5);").unwrap();
        let names: BTreeSet<String> = tree.leaf_labels().into_iter().collect();
        assert!(names.contains("a b") && names.contains("it's"));
        let text = tree.to_newick(Precision::default());
        assert!(text.contains("1.23457"), "{text}");
        let again = parse_newick(&text).unwrap();
        assert_eq!(again.splits(), tree.splits());
    }

    #[test]
    fn negative_branch_is_clamped_with_warning() {
        // violates the four-point condition badly enough for a negative
        // pendant length
        let m = dm(
            &["a", "b", "c", "d"],
            vec![
                vec![0.0, 0.1, 1.0, 1.0],
                vec![0.1, 0.0, 0.1, 1.0],
                vec![1.0, 0.1, 0.0, 0.1],
                vec![1.0, 1.0, 0.1, 0.0],
            ],
        );
        let (tree, warnings) = neighbor_joining_with_warnings(&m).unwrap();
        assert!(!warnings.is_empty());
        assert!(tree.edges().iter().all(|e| e.length >= 0.0));
        assert!(tree.total_length() >= 0.0);
    }
}
