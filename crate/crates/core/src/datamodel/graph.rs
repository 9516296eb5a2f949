//! Graph families, betweenness centrality and GCN propagation operators.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::SparseOp;

pub const FAMILY_NODE_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GraphFamily {
    Isolated,
    C4,
    C6,
    C4C6Bridged,
}

impl GraphFamily {
    pub const ALL: [GraphFamily; 4] = [
        GraphFamily::Isolated,
        GraphFamily::C4,
        GraphFamily::C6,
        GraphFamily::C4C6Bridged,
    ];

    /// Edges of the family skeleton on nodes `0..10`, before random edges.
    pub fn skeleton_edges(self) -> Vec<(usize, usize)> {
        let cycle = |nodes: std::ops::Range<usize>| {
            let v: Vec<usize> = nodes.collect();
            (0..v.len())
                .map(|i| ordered(v[i], v[(i + 1) % v.len()]))
                .collect::<Vec<_>>()
        };
        let mut edges = match self {
            GraphFamily::Isolated => Vec::new(),
            GraphFamily::C4 => cycle(0..4),
            GraphFamily::C6 => cycle(0..6),
            GraphFamily::C4C6Bridged => {
                let mut e = cycle(0..4);
                e.extend(cycle(4..10));
                e.push((3, 4));
                e
            }
        };
        edges.sort_unstable();
        edges
    }
}

#[inline]
pub fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn adjacency_lists(node_count: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); node_count];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// Normalised betweenness centrality of an undirected, unweighted graph
/// (Brandes' accumulation). Divisor is `(n-1)(n-2)/2`; graphs with fewer
/// than three nodes are all zero.
pub fn betweenness(node_count: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let n = node_count;
    let adj = adjacency_lists(n, edges);
    let mut centrality = vec![0.0; n];
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![usize::MAX; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in &adj[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0; n];
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                centrality[w] += delta[w];
            }
        }
    }
    if n < 3 {
        return vec![0.0; n];
    }
    // Each unordered pair was counted from both endpoints.
    let norm = ((n - 1) * (n - 2)) as f64;
    centrality.iter().map(|c| c / norm).collect()
}

/// `D^{-1/2} (A + I) D^{-1/2}` for one graph, with rows offset by `base`.
pub fn normalized_adjacency_entries(
    node_count: usize,
    edges: &[(usize, usize)],
    base: usize,
    out: &mut Vec<(usize, usize, f64)>,
) {
    let mut degree = vec![1.0f64; node_count];
    for &(a, b) in edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    for (v, d) in degree.iter().enumerate() {
        out.push((base + v, base + v, 1.0 / d));
    }
    for &(a, b) in edges {
        let w = 1.0 / (degree[a] * degree[b]).sqrt();
        out.push((base + a, base + b, w));
        out.push((base + b, base + a, w));
    }
}

/// Block-diagonal propagation operator for a batch of graphs.
pub fn batch_propagation<'a>(
    graphs: impl IntoIterator<Item = (usize, &'a [(usize, usize)])>,
) -> (SparseOp, Vec<usize>) {
    let mut entries = Vec::new();
    let mut offsets = vec![0];
    let mut base = 0;
    for (count, edges) in graphs {
        normalized_adjacency_entries(count, edges, base, &mut entries);
        base += count;
        offsets.push(base);
    }
    entries.sort_by_key(|&(r, c, _)| (r, c));
    (
        SparseOp {
            n_rows: base,
            n_cols: base,
            entries,
        },
        offsets,
    )
}
