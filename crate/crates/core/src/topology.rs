//! Network topology and pairwise influence rates.
//!
//! Nodes are indexed `0..n` internally. Text formats (edge lists, MATPOWER
//! case files, JSON dumps) use 1-based ids at the boundary and are converted
//! on load/emit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected simple graph with sorted adjacency lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<usize>>,
}

/// Sorted view of one node's neighbors.
#[derive(Debug, Clone, Copy)]
pub struct NeighborSet<'a>(&'a [usize]);

impl<'a> NeighborSet<'a> {
    pub fn contains(&self, node: usize) -> bool {
        self.0.binary_search(&node).is_ok()
    }

    pub fn as_slice(&self) -> &'a [usize] {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + 'a {
        self.0.iter().copied()
    }
}

impl Graph {
    /// Builds a graph from undirected edges over nodes `0..n`.
    ///
    /// Rejects self-loops, out-of-range endpoints, and duplicate pairs
    /// (in either orientation).
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut norm: Vec<(usize, usize)> = Vec::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            norm.push((i.min(j), i.max(j)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in &norm {
            adj[i].push(j);
            adj[j].push(i);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        Ok(Graph { n, edges: norm, adj })
    }

    /// Complete graph on `n` nodes.
    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Graph::new(n, edges).expect("complete graph edges are valid")
    }

    /// Star graph: node 0 is the hub, nodes `1..n` are leaves.
    pub fn star(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGraph("star graph needs at least 2 nodes".into()));
        }
        Graph::new(n, (1..n).map(|leaf| (0, leaf)))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Normalized edges, sorted, each as `(min, max)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> NeighborSet<'_> {
        NeighborSet(&self.adj[node])
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.neighbors(i).contains(j)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }

    /// Induced subgraph of `count` nodes grown by breadth-first search from
    /// `start`, taking neighbors in ascending order. Returns the subgraph and
    /// the list mapping new index to original node.
    pub fn bfs_subgraph(&self, start: usize, count: usize) -> Result<(Graph, Vec<usize>)> {
        if start >= self.n {
            return Err(Error::InvalidGraph(format!("start node {start} out of range")));
        }
        if count == 0 || count > self.n {
            return Err(Error::InvalidGraph(format!(
                "subgraph size {count} out of range for {} nodes",
                self.n
            )));
        }
        let mut picked = Vec::with_capacity(count);
        let mut seen = vec![false; self.n];
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            picked.push(u);
            if picked.len() == count {
                break;
            }
            for v in self.neighbors(u).iter() {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if picked.len() < count {
            return Err(Error::InvalidGraph(format!(
                "component of node {start} has only {} nodes, needed {count}",
                picked.len()
            )));
        }
        let mut index_of = vec![usize::MAX; self.n];
        for (new, &old) in picked.iter().enumerate() {
            index_of[old] = new;
        }
        let edges = self.edges.iter().filter_map(|&(i, j)| {
            let (a, b) = (index_of[i], index_of[j]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b))
        });
        Ok((Graph::new(count, edges)?, picked))
    }
}

/// Directed influence rates on the edges of a graph.
///
/// `rate(j, i)` is the hazard contribution of failed node `j` to neighbor
/// `i`. Both directions of an edge carry independent rates; a direction with
/// no influence has rate 0 and is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    n: usize,
    incoming: Vec<Vec<(usize, f64)>>,
    outgoing: Vec<Vec<(usize, f64)>>,
}

impl InfluenceMatrix {
    /// Builds rates from directed `(from, to, alpha)` entries.
    ///
    /// Every entry must lie on a graph edge with finite `alpha > 0`;
    /// duplicate directed entries are rejected. Directions without an entry
    /// get rate 0.
    pub fn from_rates(
        graph: &Graph,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let n = graph.node_count();
        let mut seen = std::collections::BTreeSet::new();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (from, to, alpha) in entries {
            if !graph.has_edge(from, to) {
                return Err(Error::InvalidRate(format!(
                    "rate on ({from}, {to}) but the graph has no such edge"
                )));
            }
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::InvalidRate(format!(
                    "rate on ({from}, {to}) must be finite and positive, got {alpha}"
                )));
            }
            if !seen.insert((from, to)) {
                return Err(Error::InvalidRate(format!(
                    "duplicate rate entry for ({from}, {to})"
                )));
            }
            incoming[to].push((from, alpha));
            outgoing[from].push((to, alpha));
        }
        for list in incoming.iter_mut().chain(outgoing.iter_mut()) {
            list.sort_unstable_by_key(|&(node, _)| node);
        }
        Ok(InfluenceMatrix { n, incoming, outgoing })
    }

    /// Assigns the same rate `a0` to both directions of every edge.
    pub fn uniform(graph: &Graph, a0: f64) -> Result<Self> {
        if !(a0.is_finite() && a0 > 0.0) {
            return Err(Error::InvalidRate(format!(
                "uniform rate must be finite and positive, got {a0}"
            )));
        }
        let entries = graph
            .edges()
            .iter()
            .flat_map(|&(i, j)| [(i, j, a0), (j, i, a0)]);
        InfluenceMatrix::from_rates(graph, entries)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Rate from `from` to `to`; 0 when absent.
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.outgoing[from]
            .binary_search_by_key(&to, |&(node, _)| node)
            .map(|pos| self.outgoing[from][pos].1)
            .unwrap_or(0.0)
    }

    /// Positive-rate influences into `to`, as `(from, alpha)` sorted by node.
    pub fn incoming(&self, to: usize) -> &[(usize, f64)] {
        &self.incoming[to]
    }

    /// Positive-rate influences out of `from`, as `(to, alpha)` sorted by node.
    pub fn outgoing(&self, from: usize) -> &[(usize, f64)] {
        &self.outgoing[from]
    }

    /// Directed `(from, to, alpha)` entries sorted by `(from, to)`.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|from| {
                self.outgoing[from]
                    .iter()
                    .map(move |&(to, a)| (from, to, a))
            })
            .collect()
    }
}

/// Parses an edge-list stream of CSV rows `i,j,alpha_ij[,alpha_ji]`.
///
/// Node ids are 1-based; an omitted `alpha_ji` defaults to `alpha_ij`.
/// Blank lines and lines starting with `#` are skipped. Node count is the
/// largest id seen. Duplicate pairs and self-loops are errors.
pub fn load_edge_list(reader: impl BufRead) -> Result<(Graph, InfluenceMatrix)> {
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut max_id = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::parse(
                lineno,
                format!("expected i,j,alpha_ij[,alpha_ji], got {} fields", fields.len()),
            ));
        }
        let id = |s: &str| -> Result<usize> {
            let v: usize = s
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad node id {s:?}")))?;
            if v == 0 {
                return Err(Error::parse(lineno, "node ids are 1-based"));
            }
            Ok(v)
        };
        let rate = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::parse(lineno, format!("bad rate {s:?}")))
        };
        let i = id(fields[0])?;
        let j = id(fields[1])?;
        let a_ij = rate(fields[2])?;
        let a_ji = if fields.len() == 4 { rate(fields[3])? } else { a_ij };
        max_id = max_id.max(i).max(j);
        rows.push((i - 1, j - 1, a_ij, a_ji));
    }
    let graph = Graph::new(max_id, rows.iter().map(|&(i, j, _, _)| (i, j)))?;
    let entries = rows
        .iter()
        .flat_map(|&(i, j, a_ij, a_ji)| [(i, j, a_ij), (j, i, a_ji)]);
    let alpha = InfluenceMatrix::from_rates(&graph, entries)?;
    Ok((graph, alpha))
}

/// Writes the edge list in the format accepted by [`load_edge_list`].
///
/// One row per edge, `i,j,alpha_ij,alpha_ji` with 1-based ids, edges sorted.
pub fn emit_edge_list(
    graph: &Graph,
    alpha: &InfluenceMatrix,
    mut writer: impl Write,
) -> Result<()> {
    for &(i, j) in graph.edges() {
        writeln!(
            writer,
            "{},{},{},{}",
            i + 1,
            j + 1,
            alpha.rate(i, j),
            alpha.rate(j, i)
        )?;
    }
    Ok(())
}

/// Topology read from a MATPOWER case file, with the original bus numbering.
#[derive(Debug, Clone)]
pub struct MatpowerTopology {
    pub graph: Graph,
    /// `bus_ids[k]` is the original bus number of internal node `k`;
    /// ascending.
    pub bus_ids: Vec<u64>,
}

/// Extracts the grid topology from the `mpc.branch` block of a MATPOWER
/// case file.
///
/// Only the first two columns (from bus, to bus) are used. Parallel branches
/// collapse to a single edge. Bus ids are remapped to `0..n` in ascending
/// order of the original numbering.
pub fn parse_matpower_branches(text: &str) -> Result<MatpowerTopology> {
    let mut in_branch = false;
    let mut pairs: Vec<(u64, u64)> = Vec::new();
    let mut saw_block = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('%').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if !in_branch {
            if line.starts_with("mpc.branch") && line.contains('=') && line.contains('[') {
                in_branch = true;
                saw_block = true;
            }
            continue;
        }
        if line.starts_with("];") || line == "]" {
            in_branch = false;
            continue;
        }
        let row = line.trim_end_matches(';');
        let mut cols = row.split_whitespace();
        let fbus: u64 = cols
            .next()
            .ok_or_else(|| Error::parse(lineno, "empty branch row"))?
            .parse()
            .map_err(|_| Error::parse(lineno, "bad from-bus id"))?;
        let tbus: u64 = cols
            .next()
            .ok_or_else(|| Error::parse(lineno, "branch row has no to-bus column"))?
            .parse()
            .map_err(|_| Error::parse(lineno, "bad to-bus id"))?;
        if fbus == tbus {
            return Err(Error::parse(lineno, format!("branch loops at bus {fbus}")));
        }
        pairs.push((fbus, tbus));
    }
    if in_branch {
        return Err(Error::InvalidGraph("unterminated mpc.branch block".into()));
    }
    if !saw_block {
        return Err(Error::InvalidGraph("no mpc.branch block found".into()));
    }
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    for &(f, t) in &pairs {
        index.entry(f).or_default();
        index.entry(t).or_default();
    }
    let bus_ids: Vec<u64> = index.keys().copied().collect();
    for (pos, (_, slot)) in index.iter_mut().enumerate() {
        *slot = pos;
    }
    let mut edges: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(f, t)| {
            let (a, b) = (index[&f], index[&t]);
            (a.min(b), a.max(b))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let graph = Graph::new(bus_ids.len(), edges)?;
    Ok(MatpowerTopology { graph, bus_ids })
}

#[derive(Serialize, Deserialize)]
struct TopologyDump {
    nodes: usize,
    /// Directed `(from, to, alpha)` rows with 1-based ids.
    rates: Vec<(usize, usize, f64)>,
}

/// Serializes the topology and rates to JSON (1-based ids).
pub fn to_json(graph: &Graph, alpha: &InfluenceMatrix) -> Result<String> {
    let dump = TopologyDump {
        nodes: graph.node_count(),
        rates: alpha
            .entries()
            .into_iter()
            .map(|(f, t, a)| (f + 1, t + 1, a))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}

/// Rebuilds a topology from the JSON form written by [`to_json`].
///
/// The graph has an edge wherever at least one direction carries a rate.
pub fn from_json(text: &str) -> Result<(Graph, InfluenceMatrix)> {
    let dump: TopologyDump = serde_json::from_str(text)?;
    for &(f, t, _) in &dump.rates {
        if f == 0 || t == 0 || f > dump.nodes || t > dump.nodes {
            return Err(Error::InvalidGraph(format!(
                "rate entry ({f}, {t}) out of range for {} nodes",
                dump.nodes
            )));
        }
    }
    let mut edges: Vec<(usize, usize)> = dump
        .rates
        .iter()
        .map(|&(f, t, _)| (f.min(t) - 1, f.max(t) - 1))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let graph = Graph::new(dump.nodes, edges)?;
    let alpha = InfluenceMatrix::from_rates(
        &graph,
        dump.rates.iter().map(|&(f, t, a)| (f - 1, t - 1, a)),
    )?;
    Ok((graph, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn edge_list_two_rows() {
        let text = "1,2,0.5\n2,3,0.25,0.1\n";
        let (g, a) = load_edge_list(Cursor::new(text)).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(a.rate(0, 1), 0.5);
        assert_eq!(a.rate(1, 0), 0.5);
        assert_eq!(a.rate(1, 2), 0.25);
        assert_eq!(a.rate(2, 1), 0.1);
        assert_eq!(a.rate(0, 2), 0.0);
    }

    #[test]
    fn edge_list_skips_comments_and_blanks() {
        let text = "# header\n\n1,2,0.5\n  # trailing comment line\n";
        let (g, _) = load_edge_list(Cursor::new(text)).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edges().len(), 1);
    }

    #[test]
    fn edge_list_rejects_duplicate_pair() {
        let text = "1,2,0.5\n2,1,0.3\n";
        let err = load_edge_list(Cursor::new(text)).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn edge_list_rejects_self_loop() {
        let err = load_edge_list(Cursor::new("3,3,0.5\n")).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
    }

    #[test]
    fn edge_list_rejects_nonpositive_rate() {
        assert!(load_edge_list(Cursor::new("1,2,0\n")).is_err());
        assert!(load_edge_list(Cursor::new("1,2,-1.5\n")).is_err());
        assert!(load_edge_list(Cursor::new("1,2,inf\n")).is_err());
    }

    #[test]
    fn edge_list_rejects_zero_id() {
        let err = load_edge_list(Cursor::new("0,1,0.5\n")).unwrap_err();
        assert!(err.to_string().contains("1-based"));
    }

    #[test]
    fn edge_list_round_trips() {
        let text = "1,2,0.5,0.5\n2,3,0.25,0.1\n";
        let (g, a) = load_edge_list(Cursor::new(text)).unwrap();
        let mut out = Vec::new();
        emit_edge_list(&g, &a, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn uniform_rates_cover_both_directions() {
        let g = Graph::complete(15);
        let a = InfluenceMatrix::uniform(&g, 0.1).unwrap();
        assert_eq!(g.edges().len(), 15 * 14 / 2);
        let directed = a.entries().len();
        assert_eq!(directed, 15 * 14);
        for &(i, j) in g.edges() {
            assert_eq!(a.rate(i, j), 0.1);
            assert_eq!(a.rate(j, i), 0.1);
        }
    }

    #[test]
    fn uniform_rejects_bad_rate() {
        let g = Graph::complete(3);
        assert!(InfluenceMatrix::uniform(&g, 0.0).is_err());
        assert!(InfluenceMatrix::uniform(&g, f64::NAN).is_err());
    }

    #[test]
    fn rates_must_lie_on_edges() {
        let g = Graph::new(3, [(0, 1)]).unwrap();
        let err = InfluenceMatrix::from_rates(&g, [(0, 2, 0.5)]).unwrap_err();
        assert!(err.to_string().contains("no such edge"));
    }

    #[test]
    fn neighbor_sets_are_sorted() {
        let g = Graph::new(4, [(2, 0), (3, 0), (0, 1)]).unwrap();
        assert_eq!(g.neighbors(0).as_slice(), &[1, 2, 3]);
        assert!(g.neighbors(0).contains(2));
        assert!(!g.neighbors(1).contains(2));
        assert_eq!(g.degree(0), 3);
        assert_eq!(g.degree(1), 1);
    }

    #[test]
    fn matpower_block_parses_and_dedups() {
        let text = "\
function mpc = case5
% comment line
mpc.bus = [
\t1 3 0 0;
];
mpc.branch = [
\t1 2 0.01 0.1 0 250 250 250 0 0 1 -360 360;
\t2 3 0.02 0.2 0 250 250 250 0 0 1 -360 360;
\t1 2 0.01 0.1 0 250 250 250 0 0 1 -360 360; % parallel branch
\t7 3 0.03 0.3 0 250 250 250 0 0 1 -360 360;
];
";
        let topo = parse_matpower_branches(text).unwrap();
        assert_eq!(topo.bus_ids, vec![1, 2, 3, 7]);
        assert_eq!(topo.graph.node_count(), 4);
        assert_eq!(topo.graph.edges(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn matpower_requires_branch_block() {
        assert!(parse_matpower_branches("function mpc = empty\n").is_err());
        assert!(parse_matpower_branches("mpc.branch = [\n1 2 0;").is_err());
    }

    #[test]
    fn json_round_trips() {
        let (g, a) = load_edge_list(Cursor::new("1,2,0.5\n2,3,0.25,0.1\n")).unwrap();
        let text = to_json(&g, &a).unwrap();
        let (g2, a2) = from_json(&text).unwrap();
        assert_eq!(g, g2);
        assert_eq!(a, a2);
    }

    #[test]
    fn bfs_subgraph_is_connected_and_deterministic() {
        let g = Graph::new(7, [(0, 1), (0, 2), (1, 3), (2, 4), (4, 5)]).unwrap();
        let (sub, picked) = g.bfs_subgraph(0, 4).unwrap();
        assert_eq!(picked, vec![0, 1, 2, 3]);
        assert_eq!(sub.edges(), &[(0, 1), (0, 2), (1, 3)]);
        // node 6 is isolated, so only a size-1 subgraph exists there
        assert!(g.bfs_subgraph(6, 2).is_err());
        assert!(g.bfs_subgraph(0, 8).is_err());
    }

    #[test]
    fn star_graph_shape() {
        let g = Graph::star(4).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (0, 3)]);
        assert!(Graph::star(1).is_err());
    }
}
