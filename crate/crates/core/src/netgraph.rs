//! Communication graph, push-sum weight matrix and hop neighbourhoods.
//!
//! Agents are 0-based inside the crate. The JSON form ([`GraphSpec`]) uses
//! 1-based ids; conversion happens in [`AgentGraph::from_spec`].

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected, connected graph over `n` agents. Every agent is a member of
/// its own direct neighbourhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    // sorted, self included
    neighbors: Vec<Vec<usize>>,
}

/// Serialized graph: `{"n": 3, "edges": [[1, 2], [2, 3]]}` with 1-based ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
}

impl AgentGraph {
    /// Builds a graph from 0-based edge pairs. Duplicate edges (in either
    /// orientation) collapse.
    pub fn new(n: usize, edge_list: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut edges = BTreeSet::new();
        for &(a, b) in edge_list {
            for index in [a, b] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, n });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        let g = AgentGraph { n, edges, neighbors };
        let dist = g.distances_from(0);
        if let Some(unreached) = dist.iter().position(|d| d.is_none()) {
            return Err(Error::DisconnectedGraph(unreached));
        }
        Ok(g)
    }

    /// Builds from 1-based ids, as used in configs.
    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        let mut edges = Vec::with_capacity(spec.edges.len());
        for &[a, b] in &spec.edges {
            for index in [a, b] {
                if index == 0 || index > spec.n {
                    return Err(Error::IndexOutOfRange { index, n: spec.n });
                }
            }
            edges.push((a - 1, b - 1));
        }
        Self::new(spec.n, &edges)
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            n: self.n,
            edges: self.edges.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        }
    }

    pub fn ring(n: usize) -> Result<Self> {
        let edges: Vec<_> = match n {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Self::new(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                edges.push((a, b));
            }
        }
        Self::new(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Direct neighbourhood N_i, including `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Hop distances from `source`; `None` for unreachable agents.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn distance(&self, a: usize, b: usize) -> usize {
        self.distances_from(a)[b].unwrap_or(usize::MAX)
    }

    pub fn diameter(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.distances_from(i).into_iter().flatten())
            .max()
            .unwrap_or(0)
    }

    /// All agents within `radius` hops of `center`.
    pub fn khop(&self, center: usize, radius: usize) -> Result<HopNeighborhood> {
        if center >= self.n {
            return Err(Error::IndexOutOfRange { index: center, n: self.n });
        }
        let members = self
            .distances_from(center)
            .into_iter()
            .enumerate()
            .filter_map(|(j, d)| d.filter(|&d| d <= radius).map(|_| j))
            .collect();
        Ok(HopNeighborhood { center, radius, members })
    }

    /// Like [`khop`](Self::khop) for every agent at once.
    pub fn khop_all(&self, radius: usize) -> Vec<HopNeighborhood> {
        (0..self.n)
            .map(|i| self.khop(i, radius).expect("index in range"))
            .collect()
    }

    /// Largest `radius`-hop neighbourhood over all agents.
    pub fn max_neighborhood_size(&self, radius: usize) -> usize {
        self.khop_all(radius).iter().map(|h| h.len()).max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopNeighborhood {
    pub center: usize,
    pub radius: usize,
    /// Sorted ascending; always contains `center`.
    pub members: Vec<usize>,
}

impl HopNeighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.members.binary_search(&j).is_ok()
    }

    /// Members other than `excluded`.
    pub fn without(&self, excluded: usize) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied().filter(move |&j| j != excluded)
    }
}

/// Column-stochastic mixing matrix with `w[i][j] = 1/|N_j^out|` for
/// `i` in the out-neighbourhood of `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    /// Weight matrix with self-loops (positive diagonal).
    pub fn from_graph(g: &AgentGraph) -> Self {
        Self::with_self_loops(g, true)
    }

    /// With `self_loops == false` an agent's out-neighbourhood excludes
    /// itself, so the diagonal is zero.
    pub fn with_self_loops(g: &AgentGraph, self_loops: bool) -> Self {
        let n = g.n();
        let mut w = vec![0.0; n * n];
        for j in 0..n {
            let out: Vec<usize> = g
                .neighbors(j)
                .iter()
                .copied()
                .filter(|&i| self_loops || i != j)
                .collect();
            let weight = 1.0 / out.len() as f64;
            for i in out {
                w[i * n + j] = weight;
            }
        }
        WeightMatrix { n, w }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| (0..self.n).map(|l| self.get(i, l) * x[l]).sum())
            .collect()
    }

    pub fn matmul(&self, other: &WeightMatrix) -> WeightMatrix {
        let n = self.n;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    w[i * n + j] += a * other.get(k, j);
                }
            }
        }
        WeightMatrix { n, w }
    }

    /// Max absolute entry difference.
    pub fn max_abs_diff(&self, other: &WeightMatrix) -> f64 {
        self.w
            .iter()
            .zip(&other.w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
