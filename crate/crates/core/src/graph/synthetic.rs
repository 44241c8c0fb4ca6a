//! Small generated corpora for smoke runs and tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Adjacency, Dataset, Graph};

const DEGREE_BUCKETS: usize = 5;

fn degree_features(adj: &Adjacency) -> Array2<f64> {
    let mut x = Array2::zeros((adj.n(), DEGREE_BUCKETS));
    for i in 0..adj.n() {
        x[[i, adj.degree(i).min(DEGREE_BUCKETS - 1)]] = 1.0;
    }
    x
}

/// Two balanced classes: rings with a few chords (label 0) and random trees
/// (label 1), 6 to 14 nodes each, with one-hot degree features.
pub fn rings_and_trees(num_graphs: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..num_graphs)
        .map(|g| {
            let label = g % 2;
            let n = rng.random_range(6..=14);
            let mut pairs = Vec::new();
            if label == 0 {
                pairs.extend((0..n).map(|i| (i, (i + 1) % n)));
                for _ in 0..rng.random_range(0..=2) {
                    pairs.push((rng.random_range(0..n), rng.random_range(0..n)));
                }
            } else {
                pairs.extend((1..n).map(|i| (rng.random_range(0..i), i)));
            }
            let adj = Adjacency::from_undirected(n, &pairs).expect("pairs are in range");
            let x = degree_features(&adj);
            Graph::new(adj, x, label).expect("feature rows match")
        })
        .collect();
    Dataset::new("rings-and-trees", graphs).expect("labels are contiguous")
}

/// Complete graphs on 3 to 8 nodes with one uniform random feature in
/// `[0, 3)`; every node sees the whole graph at one hop.
pub fn complete_graphs(num_graphs: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (0..num_graphs)
        .map(|g| {
            let n = rng.random_range(3..=8);
            let pairs: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let adj = Adjacency::from_undirected(n, &pairs).expect("pairs are in range");
            let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(0.0..3.0));
            Graph::new(adj, x, g % 2).expect("feature rows match")
        })
        .collect();
    Dataset::new("complete-graphs", graphs).expect("labels are contiguous")
}
