//! Conceptual knowledge graphs over dataset variables.
//!
//! Text format, one directive per line:
//!
//! ```text
//! # comment
//! directed true
//! self_loops false
//! node T
//! node Tdew
//! edge T -> Tdew
//! ```
//!
//! `directed` defaults to `true` and `self_loops` to `false`. Nodes may be
//! declared in any order relative to the edges that use them. Names with
//! spaces are written in double quotes: `node "max. wv (m/s)"`.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraphSpec {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub directed: bool,
    pub self_loops: bool,
}

impl Default for KnowledgeGraphSpec {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            edges: Vec::new(),
            directed: true,
            self_loops: false,
        }
    }
}

/// Binary `V x V` matrix; `values[i * V + j] == 1` iff an edge links node `i`
/// to node `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    values: Vec<u8>,
    node_order: Vec<String>,
}

/// Channel-ordered view of a graph validated against a dataset's columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMapping {
    /// `node_of_channel[c]` is the index of channel `c`'s node in the spec.
    pub node_of_channel: Vec<usize>,
    /// Adjacency permuted into dataset column order.
    pub adjacency: AdjacencyMatrix,
}

fn parse_bool(tok: Option<&str>, line: usize, key: &str) -> Result<bool> {
    match tok {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        other => Err(Error::Parse {
            line,
            msg: format!("`{key}` expects true|false, got {other:?}"),
        }),
    }
}

/// Whitespace-separated tokens; a token opening with `"` runs to the next `"`.
fn tokenize(content: &str, line: usize) -> Result<Vec<String>> {
    let mut toks = Vec::new();
    let mut rest = content.trim_start();
    while !rest.is_empty() {
        if let Some(quoted) = rest.strip_prefix('"') {
            let end = quoted.find('"').ok_or_else(|| Error::Parse {
                line,
                msg: "unterminated quoted name".into(),
            })?;
            toks.push(quoted[..end].to_string());
            rest = quoted[end + 1..].trim_start();
        } else {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            toks.push(rest[..end].to_string());
            rest = rest[end..].trim_start();
        }
    }
    Ok(toks)
}

fn quote(name: &str) -> String {
    if name.is_empty() || name == "->" || name.starts_with('#') || name.contains(char::is_whitespace) {
        format!("\"{name}\"")
    } else {
        name.to_string()
    }
}

/// Parses the line format described in the module docs.
pub fn parse_graph_file(text: &str) -> Result<KnowledgeGraphSpec> {
    let mut spec = KnowledgeGraphSpec::default();
    let mut raw_edges: Vec<(usize, String, String)> = Vec::new();
    let mut seen = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let owned = tokenize(content, line)?;
        let toks: Vec<&str> = owned.iter().map(String::as_str).collect();
        match toks[0] {
            "node" => {
                if toks.len() != 2 {
                    return Err(Error::Parse {
                        line,
                        msg: "expected `node <name>`".into(),
                    });
                }
                let name = toks[1].to_string();
                if !seen.insert(name.clone()) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("duplicate node `{name}`"),
                    });
                }
                spec.nodes.push(name);
            }
            "edge" => {
                if toks.len() != 4 || toks[2] != "->" {
                    return Err(Error::Parse {
                        line,
                        msg: "expected `edge <src> -> <dst>`".into(),
                    });
                }
                raw_edges.push((line, toks[1].to_string(), toks[3].to_string()));
            }
            "directed" if toks.len() == 2 => spec.directed = parse_bool(toks.get(1).copied(), line, "directed")?,
            "self_loops" if toks.len() == 2 => {
                spec.self_loops = parse_bool(toks.get(1).copied(), line, "self_loops")?
            }
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unrecognized directive `{other}`"),
                })
            }
        }
    }

    let mut keys = HashSet::new();
    for (line, src, dst) in raw_edges {
        for name in [&src, &dst] {
            if !seen.contains(name) {
                return Err(Error::Parse {
                    line,
                    msg: format!("edge references undeclared node `{name}`"),
                });
            }
        }
        if src == dst {
            return Err(Error::Parse {
                line,
                msg: format!("self edge on `{src}`; use `self_loops true` instead"),
            });
        }
        let key = if spec.directed || src < dst {
            (src.clone(), dst.clone())
        } else {
            (dst.clone(), src.clone())
        };
        if keys.insert(key) {
            spec.edges.push((src, dst));
        }
    }
    Ok(spec)
}

impl KnowledgeGraphSpec {
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    /// Canonical text form; `parse_graph_file` of the result returns `self`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "directed {}", self.directed);
        let _ = writeln!(out, "self_loops {}", self.self_loops);
        for n in &self.nodes {
            let _ = writeln!(out, "node {}", quote(n));
        }
        for (a, b) in &self.edges {
            let _ = writeln!(out, "edge {} -> {}", quote(a), quote(b));
        }
        out
    }

    pub fn to_adjacency(&self) -> Result<AdjacencyMatrix> {
        let v = self.nodes.len();
        let mut values = vec![0u8; v * v];
        for (a, b) in &self.edges {
            let (i, j) = match (self.node_index(a), self.node_index(b)) {
                (Some(i), Some(j)) => (i, j),
                _ => return Err(Error::Contract(format!("edge {a} -> {b} names an unknown node"))),
            };
            values[i * v + j] = 1;
            if !self.directed {
                values[j * v + i] = 1;
            }
        }
        for i in 0..v {
            values[i * v + i] = u8::from(self.self_loops);
        }
        Ok(AdjacencyMatrix {
            values,
            node_order: self.nodes.clone(),
        })
    }

    /// Matches nodes to dataset columns by name and returns the adjacency in
    /// column order.
    pub fn validate_against_dataset(&self, columns: &[String]) -> Result<ChannelMapping> {
        let missing_columns: Vec<String> =
            self.nodes.iter().filter(|n| !columns.contains(n)).cloned().collect();
        let missing_nodes: Vec<String> =
            columns.iter().filter(|c| !self.nodes.contains(c)).cloned().collect();
        if !missing_columns.is_empty() || !missing_nodes.is_empty() {
            return Err(Error::Validation {
                missing_columns,
                missing_nodes,
            });
        }
        let node_of_channel: Vec<usize> =
            columns.iter().map(|c| self.node_index(c).expect("checked above")).collect();
        let adjacency = self.to_adjacency()?.permuted(&node_of_channel);
        Ok(ChannelMapping {
            node_of_channel,
            adjacency,
        })
    }

    /// Spec with one edge per nonzero off-diagonal entry of `adj`.
    pub fn from_adjacency(adj: &AdjacencyMatrix, directed: bool) -> Self {
        let v = adj.size();
        let mut edges = Vec::new();
        for i in 0..v {
            for j in 0..v {
                if i != j && adj.get(i, j) == 1 && (directed || i < j || adj.get(j, i) == 0) {
                    edges.push((adj.node_order[i].clone(), adj.node_order[j].clone()));
                }
            }
        }
        let self_loops = v > 0 && (0..v).all(|i| adj.get(i, i) == 1);
        Self {
            nodes: adj.node_order.clone(),
            edges,
            directed,
            self_loops,
        }
    }
}

impl AdjacencyMatrix {
    pub fn from_values(node_order: Vec<String>, values: Vec<u8>) -> Result<Self> {
        let v = node_order.len();
        if values.len() != v * v {
            return Err(Error::shape("adjacency", &[v, v], &[values.len()]));
        }
        if values.iter().any(|&x| x > 1) {
            return Err(Error::Contract("adjacency entries must be 0 or 1".into()));
        }
        Ok(Self { values, node_order })
    }

    pub fn zeros(node_order: Vec<String>) -> Self {
        let v = node_order.len();
        Self {
            values: vec![0; v * v],
            node_order,
        }
    }

    pub fn size(&self) -> usize {
        self.node_order.len()
    }

    pub fn node_order(&self) -> &[String] {
        &self.node_order
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.size() + j]
    }

    pub fn is_symmetric(&self) -> bool {
        let v = self.size();
        (0..v).all(|i| (0..v).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Number of nonzero off-diagonal entries.
    pub fn off_diagonal_count(&self) -> usize {
        let v = self.size();
        (0..v)
            .flat_map(|i| (0..v).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.get(i, j) == 1)
            .count()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        (0..self.size()).filter(|&j| j != i && self.get(i, j) == 1).count()
    }

    pub fn in_degree(&self, j: usize) -> usize {
        (0..self.size()).filter(|&i| i != j && self.get(i, j) == 1).count()
    }

    /// Reorders rows and columns so that new index `c` is old index `order[c]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let v = order.len();
        let mut values = vec![0u8; v * v];
        for (ni, &oi) in order.iter().enumerate() {
            for (nj, &oj) in order.iter().enumerate() {
                values[ni * v + nj] = self.get(oi, oj);
            }
        }
        Self {
            values,
            node_order: order.iter().map(|&o| self.node_order[o].clone()).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let v = self.size();
        Tensor::new([v, v], self.values.iter().map(|&x| T::of(f64::from(x))).collect())
            .expect("square by construction")
    }

    /// Placebo graph: same node order, `edges` off-diagonal entries placed
    /// uniformly at random (mirrored when `symmetric`), diagonal copied.
    pub fn scrambled<R: Rng + ?Sized>(&self, symmetric: bool, rng: &mut R) -> Self {
        let v = self.size();
        let slots: Vec<(usize, usize)> = (0..v)
            .flat_map(|i| (0..v).map(move |j| (i, j)))
            .filter(|&(i, j)| if symmetric { i < j } else { i != j })
            .collect();
        let count = if symmetric {
            self.off_diagonal_count() / 2
        } else {
            self.off_diagonal_count()
        }
        .min(slots.len());
        let mut values = vec![0u8; v * v];
        for i in 0..v {
            values[i * v + i] = self.get(i, i);
        }
        for k in sample(rng, slots.len(), count) {
            let (i, j) = slots[k];
            values[i * v + j] = 1;
            if symmetric {
                values[j * v + i] = 1;
            }
        }
        Self {
            values,
            node_order: self.node_order.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cols(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_nodes_without_edges() {
        let s = parse_graph_file("# three\nnode a\nnode b\nnode c\n").unwrap();
        assert_eq!(s.nodes, cols(&["a", "b", "c"]));
        assert!(s.edges.is_empty());
        assert!(s.directed && !s.self_loops);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let s = parse_graph_file("node a\nnode b\nedge a -> b\nedge a -> b\n").unwrap();
        assert_eq!(s.edges.len(), 1);
        let u = parse_graph_file("directed false\nnode a\nnode b\nedge a -> b\nedge b -> a\n").unwrap();
        assert_eq!(u.edges.len(), 1);
    }

    #[test]
    fn parse_errors_carry_line_and_name() {
        let err = parse_graph_file("node a\n\nedge a -> z\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains('z'));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_graph_file("node a\nnode a\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_graph_file("node a\nedge a -> a\n").is_err());
        assert!(parse_graph_file("directed maybe\n").is_err());
        assert!(parse_graph_file("vertex a\n").is_err());
    }

    #[test]
    fn adjacency_examples() {
        let s = parse_graph_file("node a\nnode b\nnode c\nedge a -> b\nedge b -> c\n").unwrap();
        let a = s.to_adjacency().unwrap();
        assert_eq!(a.values(), &[0, 1, 0, 0, 0, 1, 0, 0, 0]);

        let u = KnowledgeGraphSpec {
            directed: false,
            ..s.clone()
        };
        let au = u.to_adjacency().unwrap();
        assert_eq!(au.values(), &[0, 1, 0, 1, 0, 1, 0, 1, 0]);
        assert!(au.is_symmetric());

        let empty = KnowledgeGraphSpec {
            edges: vec![],
            ..s.clone()
        };
        assert!(empty.to_adjacency().unwrap().values().iter().all(|&x| x == 0));

        let looped = KnowledgeGraphSpec {
            self_loops: true,
            ..s
        };
        let al = looped.to_adjacency().unwrap();
        assert!((0..3).all(|i| al.get(i, i) == 1));
    }

    #[test]
    fn validation_permutes_to_column_order() {
        let s = parse_graph_file("node a\nnode b\nedge a -> b\n").unwrap();
        let m = s.validate_against_dataset(&cols(&["b", "a"])).unwrap();
        assert_eq!(m.node_of_channel, vec![1, 0]);
        // brute force: new[i][j] = old[p(i)][p(j)]
        let old = s.to_adjacency().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.adjacency.get(i, j), old.get(m.node_of_channel[i], m.node_of_channel[j]));
            }
        }
        assert_eq!(m.adjacency.values(), &[0, 0, 1, 0]);

        let same = s.validate_against_dataset(&cols(&["a", "b"])).unwrap();
        assert_eq!(same.node_of_channel, vec![0, 1]);
        assert_eq!(same.adjacency, old);
    }

    #[test]
    fn validation_names_missing_items() {
        let s = parse_graph_file("node a\nnode b\nnode c\n").unwrap();
        match s.validate_against_dataset(&cols(&["a", "b", "x"])) {
            Err(Error::Validation {
                missing_columns,
                missing_nodes,
            }) => {
                assert_eq!(missing_columns, cols(&["c"]));
                assert_eq!(missing_nodes, cols(&["x"]));
            }
            other => panic!("{other:?}"),
        }
        assert!(s.validate_against_dataset(&cols(&["a", "b"])).is_err());
    }

    #[test]
    fn quoted_names_with_spaces() {
        let s = parse_graph_file("node \"max. wv (m/s)\"\nnode wv\nedge wv -> \"max. wv (m/s)\"\n").unwrap();
        assert_eq!(s.nodes, cols(&["max. wv (m/s)", "wv"]));
        assert_eq!(s.edges, vec![("wv".to_string(), "max. wv (m/s)".to_string())]);
        assert_eq!(parse_graph_file(&s.serialize()).unwrap(), s);
        let e = parse_graph_file("node \"open\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn scrambled_keeps_edge_count() {
        let s = parse_graph_file("directed false\nnode a\nnode b\nnode c\nnode d\nedge a -> b\nedge c -> d\n").unwrap();
        let a = s.to_adjacency().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let p = a.scrambled(true, &mut rng);
            assert_eq!(p.off_diagonal_count(), a.off_diagonal_count());
            assert!(p.is_symmetric());
        }
    }

    fn arb_spec() -> impl Strategy<Value = KnowledgeGraphSpec> {
        (1usize..7, any::<bool>(), any::<bool>())
            .prop_flat_map(|(n, directed, self_loops)| {
                let edges = proptest::collection::vec((0..n, 0..n), 0..12);
                (Just(n), Just(directed), Just(self_loops), edges)
            })
            .prop_map(|(n, directed, self_loops, edges)| {
                let nodes: Vec<String> = (0..n)
                    .map(|i| if i % 2 == 0 { format!("v{i}") } else { format!("max. v{i} (m/s)") })
                    .collect();
                let text = {
                    let mut t = format!("directed {directed}\nself_loops {self_loops}\n");
                    for name in &nodes {
                        t.push_str(&format!("node {}\n", quote(name)));
                    }
                    for (a, b) in edges.into_iter().filter(|(a, b)| a != b) {
                        t.push_str(&format!("edge {} -> {}\n", quote(&nodes[a]), quote(&nodes[b])));
                    }
                    t
                };
                parse_graph_file(&text).unwrap()
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_is_fixed_point(spec in arb_spec()) {
            let text = spec.serialize();
            let again = parse_graph_file(&text).unwrap();
            prop_assert_eq!(&again, &spec);
            prop_assert_eq!(again.serialize(), text);
        }

        #[test]
        fn adjacency_is_binary_and_square(spec in arb_spec()) {
            let a = spec.to_adjacency().unwrap();
            prop_assert_eq!(a.values().len(), spec.nodes.len() * spec.nodes.len());
            prop_assert!(a.values().iter().all(|&x| x <= 1));
            if !spec.directed {
                prop_assert!(a.is_symmetric());
            }
        }

        #[test]
        fn declaration_order_does_not_change_mapped_adjacency(spec in arb_spec(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = spec.clone();
            rand::seq::SliceRandom::shuffle(shuffled.nodes.as_mut_slice(), &mut rng);
            let columns = spec.nodes.clone();
            let a = spec.validate_against_dataset(&columns).unwrap().adjacency;
            let b = shuffled.validate_against_dataset(&columns).unwrap().adjacency;
            prop_assert_eq!(a, b);
        }
    }
}
