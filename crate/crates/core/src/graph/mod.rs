//! Graph containers, k-hop neighborhood queries, disjoint-union batching and
//! dataset splitting.
//!
//! Graphs are undirected and stored as a symmetric compressed-sparse-row
//! pattern without explicit self-loops. Kernels that need self-loops add them
//! when they build their operator.

pub mod synthetic;
mod tu;

use std::collections::VecDeque;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use tu::{load_tu_dataset, write_tu_dataset};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: node index {node} is out of range (dataset has {count} nodes)")]
    DanglingNode {
        path: String,
        line: usize,
        node: usize,
        count: usize,
    },

    #[error("{path}:{line}: edge ({from}, {to}) has no reverse entry ({to}, {from})")]
    AsymmetricEdge {
        path: String,
        line: usize,
        from: usize,
        to: usize,
    },

    #[error("{path}:{line}: edge ({from}, {to}) connects two different graphs")]
    CrossGraphEdge {
        path: String,
        line: usize,
        from: usize,
        to: usize,
    },

    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),

    #[error("feature matrix has {rows} rows but the graph has {nodes} nodes")]
    FeatureRows { rows: usize, nodes: usize },

    #[error("edge ({0}, {1}) references a node outside the graph")]
    EdgeOutOfRange(usize, usize),

    #[error("cannot build a batch from an empty list of graphs")]
    EmptyBatch,

    #[error("graphs in a batch must share the feature width (expected {expected}, got {got})")]
    FeatureWidth { expected: usize, got: usize },

    #[error("dataset has {0} graphs; at least 10 are required for an 80/10/10 split")]
    TooFewGraphs(usize),
}

/// Symmetric sparsity pattern in compressed-sparse-row form.
///
/// Column indices within a row are sorted and unique; the diagonal is never
/// stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
        }
    }

    /// Builds the pattern from undirected pairs. Both directions are inserted,
    /// duplicates are merged and self-loops are dropped.
    pub fn from_undirected(n: usize, pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange(a, b));
            }
            if a == b {
                continue;
            }
            rows[a].push(b);
            rows[b].push(a);
        }
        Ok(Self::from_rows(rows))
    }

    fn from_rows(mut rows: Vec<Vec<usize>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Self { row_ptr, col_idx }
    }

    pub fn n(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Number of stored directed entries (twice the undirected edge count).
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn edge_count(&self) -> usize {
        self.col_idx.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in row-major order.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .copied()
                .filter(move |&j| j > i)
                .map(move |j| (i, j))
        })
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n()).all(|i| self.neighbors(i).iter().all(|&j| self.contains(j, i)))
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    /// Induced subgraph on `nodes` (sorted, unique), renumbered `0..nodes.len()`.
    pub fn induced(&self, nodes: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.n()];
        for (new, &old) in nodes.iter().enumerate() {
            map[old] = new;
        }
        let rows = nodes
            .iter()
            .map(|&old| {
                self.neighbors(old)
                    .iter()
                    .filter_map(|&j| (map[j] != usize::MAX).then_some(map[j]))
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }
}

/// An undirected graph with node features and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adj: Adjacency,
    pub x: Array2<f64>,
    pub label: usize,
}

impl Graph {
    pub fn new(adj: Adjacency, x: Array2<f64>, label: usize) -> Result<Self, GraphError> {
        if x.nrows() != adj.n() {
            return Err(GraphError::FeatureRows {
                rows: x.nrows(),
                nodes: adj.n(),
            });
        }
        Ok(Self { adj, x, label })
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }

    pub fn num_features(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_features: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>) -> Result<Self, GraphError> {
        let num_features = graphs.first().map_or(0, Graph::num_features);
        if let Some(g) = graphs.iter().find(|g| g.num_features() != num_features) {
            return Err(GraphError::FeatureWidth {
                expected: num_features,
                got: g.num_features(),
            });
        }
        let num_classes = graphs.iter().map(|g| g.label + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_classes];
        for g in &graphs {
            seen[g.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(GraphError::Inconsistent(format!(
                "class {missing} has no graphs; labels must cover 0..{num_classes}"
            )));
        }
        Ok(Self {
            name: name.into(),
            graphs,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn total_nodes(&self) -> usize {
        self.graphs.iter().map(Graph::n).sum()
    }

    pub fn total_edges(&self) -> usize {
        self.graphs.iter().map(|g| g.adj.edge_count()).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most frequent class.
    pub fn majority_baseline(&self) -> f64 {
        let counts = self.class_counts();
        let best = counts.iter().copied().max().unwrap_or(0);
        if self.graphs.is_empty() {
            0.0
        } else {
            best as f64 / self.graphs.len() as f64
        }
    }
}

/// Nodes at BFS distance `<= k` from `center` (center included), sorted.
pub fn khop_nodes(adj: &Adjacency, center: usize, k: usize) -> Vec<usize> {
    let mut nodes: Vec<usize> = hop_levels(adj, center, k).into_iter().flatten().collect();
    nodes.sort_unstable();
    nodes
}

/// BFS shells around `center`: entry `m` holds the nodes at distance exactly
/// `m`, for `m` in `0..=k_max`. Shells past the eccentricity are empty.
pub fn hop_levels(adj: &Adjacency, center: usize, k_max: usize) -> Vec<Vec<usize>> {
    let mut dist = vec![usize::MAX; adj.n()];
    let mut levels = vec![Vec::new(); k_max + 1];
    let mut queue = VecDeque::new();
    dist[center] = 0;
    queue.push_back(center);
    while let Some(u) = queue.pop_front() {
        let d = dist[u];
        levels[d].push(u);
        if d == k_max {
            continue;
        }
        for &v in adj.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = d + 1;
                queue.push_back(v);
            }
        }
    }
    levels
}

/// Block-diagonal disjoint union of several graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub adj: Adjacency,
    pub x: Array2<f64>,
    /// Member index of every union node.
    pub graph_id: Vec<usize>,
    /// Prefix offsets; member `g` owns union nodes `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_graphs<'a, I>(graphs: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = &'a Graph>,
    {
        let graphs: Vec<&Graph> = graphs.into_iter().collect();
        let first = graphs.first().ok_or(GraphError::EmptyBatch)?;
        let d = first.num_features();
        let mut offsets = Vec::with_capacity(graphs.len() + 1);
        offsets.push(0);
        for g in &graphs {
            if g.num_features() != d {
                return Err(GraphError::FeatureWidth {
                    expected: d,
                    got: g.num_features(),
                });
            }
            offsets.push(offsets.last().unwrap() + g.n());
        }
        let n = *offsets.last().unwrap();

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(graphs.iter().map(|g| g.adj.nnz()).sum());
        let mut graph_id = Vec::with_capacity(n);
        let mut x = Array2::zeros((n, d));
        row_ptr.push(0);
        for (gi, g) in graphs.iter().enumerate() {
            let base = offsets[gi];
            for i in 0..g.n() {
                col_idx.extend(g.adj.neighbors(i).iter().map(|&j| j + base));
                row_ptr.push(col_idx.len());
                graph_id.push(gi);
            }
            x.slice_mut(s![base..base + g.n(), ..]).assign(&g.x);
        }

        Ok(Self {
            adj: Adjacency { row_ptr, col_idx },
            x,
            graph_id,
            offsets,
            labels: graphs.iter().map(|g| g.label).collect(),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }

    pub fn member_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    /// Slices member `g` back out of the union.
    pub fn member(&self, g: usize) -> Graph {
        let range = self.member_range(g);
        let nodes: Vec<usize> = range.clone().collect();
        Graph {
            adj: self.adj.induced(&nodes),
            x: self.x.slice(s![range, ..]).to_owned(),
            label: self.labels[g],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 80/10/10 split over `num_graphs` indices: `floor(0.8 n)` training,
/// `floor(0.1 n)` validation and the remainder for testing.
pub fn split_indices(num_graphs: usize, seed: u64) -> Result<Split, GraphError> {
    if num_graphs < 10 {
        return Err(GraphError::TooFewGraphs(num_graphs));
    }
    let mut order: Vec<usize> = (0..num_graphs).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = num_graphs * 8 / 10;
    let n_val = num_graphs / 10;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

pub fn split_dataset(ds: &Dataset, seed: u64) -> Result<Split, GraphError> {
    split_indices(ds.len(), seed)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn path(n: usize) -> Adjacency {
        let pairs: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Adjacency::from_undirected(n, &pairs).unwrap()
    }

    pub fn complete(n: usize) -> Adjacency {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        Adjacency::from_undirected(n, &pairs).unwrap()
    }

    pub fn graph(adj: Adjacency, d: usize, label: usize) -> Graph {
        let n = adj.n();
        let x = Array2::from_shape_fn((n, d), |(i, c)| (i * d + c) as f64 * 0.5 - 1.0);
        Graph::new(adj, x, label).unwrap()
    }
}
