//! Undirected simple graphs and the random generators used by the
//! simulation designs.
//!
//! Nodes are dense indices `0..N`. Adjacency is stored in compressed
//! sparse-row form with each neighbor list sorted ascending, so neighborhood
//! scans are contiguous slices. A [`Graph`] is immutable once built.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Undirected graph without self-loops or parallel edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    degree_cache: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an edge list. Duplicate edges (in either
    /// orientation) are merged.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::param("graph needs at least one node"));
        }
        let mut lists = vec![Vec::new(); node_count];
        for &(i, j) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::param(format!(
                    "edge ({i}, {j}) out of range for {node_count} nodes"
                )));
            }
            if i == j {
                return Err(Error::param(format!("self-loop at node {i}")));
            }
            lists[i].push(j);
            lists[j].push(i);
        }
        Ok(Self::from_lists(lists))
    }

    fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        let mut degree_cache = Vec::with_capacity(lists.len());
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            degree_cache.push(list.len());
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Self {
            offsets,
            neighbors,
            degree_cache,
        }
    }

    pub fn node_count(&self) -> usize {
        self.degree_cache.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Sorted neighbor list of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degree_cache[i]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degree_cache
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_count()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .copied()
                .filter(move |&j| j > i)
                .map(move |j| (i, j))
        })
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&i| self.degree(i) == 0)
            .collect()
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edge_count() as f64 / self.node_count() as f64
    }

    /// Induced subgraph on the non-isolated nodes, relabelled densely.
    ///
    /// Returns the subgraph and, for each new index, the original node id.
    pub fn without_isolates(&self) -> (Graph, Vec<usize>) {
        let kept: Vec<usize> = (0..self.node_count())
            .filter(|&i| self.degree(i) > 0)
            .collect();
        let mut relabel = vec![usize::MAX; self.node_count()];
        for (new, &old) in kept.iter().enumerate() {
            relabel[old] = new;
        }
        let lists = kept
            .iter()
            .map(|&old| self.neighbors(old).iter().map(|&j| relabel[j]).collect())
            .collect();
        (Self::from_lists(lists), kept)
    }

    /// Serializes to the edge-list text format: a `N=<count>` header followed
    /// by one `i j` line per edge with `i < j`.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("N={}\n", self.node_count());
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses the edge-list text format written by [`Graph::to_edge_list`].
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty edge list".into()))?;
        let n: usize = header
            .trim()
            .strip_prefix("N=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad header line {header:?}")))?;
        let mut edges = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let mut parts = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                    Error::Parse(format!("bad edge on line {}: {line:?}", lineno + 2))
                })
            };
            let i = parse(parts.next())?;
            let j = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Parse(format!(
                    "trailing tokens on line {}: {line:?}",
                    lineno + 2
                )));
            }
            edges.push((i, j));
        }
        Self::from_edges(n, &edges)
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("{name} = {p} is not in [0, 1]")));
    }
    Ok(())
}

/// G(n, p): every unordered pair is an edge independently with probability `p`.
pub fn gen_erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::param(format!("Erdos-Renyi needs n >= 2, got {n}")));
    }
    check_probability("p", p)?;
    let mut rng = rng::seeded(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Preferential attachment started from a complete graph on `m + 1` nodes.
///
/// Each later node attaches to `m` distinct existing nodes chosen with
/// probability proportional to their current degree.
pub fn gen_barabasi_albert(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m == 0 || m >= n {
        return Err(Error::param(format!(
            "Barabasi-Albert needs 1 <= m < n, got m={m}, n={n}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut edges = Vec::with_capacity(m * (m + 1) / 2 + m * (n - m - 1));
    // Every edge endpoint appears once here, so uniform draws are degree-weighted.
    let mut endpoints: Vec<usize> = Vec::with_capacity(2 * edges.capacity());
    for i in 0..=m {
        for j in (i + 1)..=m {
            edges.push((i, j));
            endpoints.push(i);
            endpoints.push(j);
        }
    }
    let mut chosen = Vec::with_capacity(m);
    for new in (m + 1)..n {
        chosen.clear();
        while chosen.len() < m {
            let target = endpoints[rng.random_range(0..endpoints.len())];
            if !chosen.contains(&target) {
                chosen.push(target);
            }
        }
        for &target in &chosen {
            edges.push((target, new));
            endpoints.push(target);
            endpoints.push(new);
        }
    }
    Graph::from_edges(n, &edges)
}

/// Stochastic block model over consecutive blocks of the given sizes.
pub fn gen_sbm(n: usize, block_sizes: &[usize], p_in: f64, p_out: f64, seed: u64) -> Result<Graph> {
    if block_sizes.iter().sum::<usize>() != n || block_sizes.contains(&0) {
        return Err(Error::param(format!(
            "block sizes {block_sizes:?} are not a partition of {n} nodes"
        )));
    }
    check_probability("p_in", p_in)?;
    check_probability("p_out", p_out)?;
    let block: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let mut rng = rng::seeded(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block[i] == block[j] { p_in } else { p_out };
            if p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Block label of each node for consecutive blocks of the given sizes.
pub fn block_labels(block_sizes: &[usize]) -> Vec<usize> {
    block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect()
}

/// Nodes at shortest-path distance `1..=radius` from `i`, sorted ascending.
pub fn khop_neighbors(g: &Graph, i: usize, radius: usize) -> Result<Vec<usize>> {
    if i >= g.node_count() {
        return Err(Error::param(format!(
            "node {i} out of range for {} nodes",
            g.node_count()
        )));
    }
    if radius == 0 {
        return Err(Error::param("radius must be >= 1"));
    }
    let mut dist = vec![usize::MAX; g.node_count()];
    dist[i] = 0;
    let mut queue = VecDeque::from([i]);
    let mut out = Vec::new();
    while let Some(u) = queue.pop_front() {
        if dist[u] == radius {
            continue;
        }
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                out.push(v);
                queue.push_back(v);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}
