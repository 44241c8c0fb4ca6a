//! k-order propagation operators.
//!
//! Two operator families are supported: Chebyshev polynomials of the scaled
//! Laplacian `L~ = 2 L / lambda_max - I`, and powers of the renormalized
//! adjacency `A^ = D~^{-1/2} (A + I) D~^{-1/2}` with `D~ = D + I`. Operators
//! are always applied to feature matrices; no dense `n x n` matrix is formed.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Adjacency;

/// Real sparse matrix in compressed-sparse-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Assembles a square matrix from per-row `(column, value)` lists.
    fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n_rows, self.n_cols));
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                m[[i, j]] += v;
            }
        }
        m
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_rows).all(|i| self.row(i).all(|(j, v)| (self.get(j, i) - v).abs() <= tol))
    }

    /// `self * x`.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n_cols, "sparse matmul: row mismatch");
        let d = x.ncols();
        let x = x.as_standard_layout();
        let src = x.as_slice().unwrap();
        let mut out = vec![0.0; self.n_rows * d];
        for (i, dst) in out.chunks_exact_mut(d.max(1)).enumerate().take(self.n_rows) {
            for (j, v) in self.row(i) {
                for (o, s) in dst.iter_mut().zip(&src[j * d..(j + 1) * d]) {
                    *o += v * s;
                }
            }
        }
        Array2::from_shape_vec((self.n_rows, d), out).unwrap()
    }

    /// `self^T * x`.
    pub fn matmul_transpose(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n_rows, "sparse matmul_transpose: row mismatch");
        let d = x.ncols();
        let x = x.as_standard_layout();
        let src = x.as_slice().unwrap();
        let mut out = vec![0.0; self.n_cols * d];
        for i in 0..self.n_rows {
            let s = &src[i * d..(i + 1) * d];
            for (j, v) in self.row(i) {
                for (o, s) in out[j * d..(j + 1) * d].iter_mut().zip(s) {
                    *o += v * s;
                }
            }
        }
        Array2::from_shape_vec((self.n_cols, d), out).unwrap()
    }
}

/// `D~^{-1/2} (A + I) D~^{-1/2}` with `D~ = D + I`. Isolated nodes keep a
/// unit self-loop.
pub fn normalized_adjacency(adj: &Adjacency) -> SparseMatrix {
    let n = adj.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((adj.degree(i) + 1) as f64).sqrt())
        .collect();
    let rows = (0..n)
        .map(|i| {
            std::iter::once(i)
                .chain(adj.neighbors(i).iter().copied())
                .map(|j| (j, inv_sqrt[i] * inv_sqrt[j]))
                .collect()
        })
        .collect();
    SparseMatrix::from_rows(n, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaMax {
    Fixed(f64),
    /// Largest eigenvalue of the normalized Laplacian, by power iteration.
    Exact,
}

impl Default for LambdaMax {
    fn default() -> Self {
        LambdaMax::Fixed(2.0)
    }
}

fn inv_sqrt_degrees(adj: &Adjacency) -> Vec<f64> {
    (0..adj.n())
        .map(|i| match adj.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect()
}

/// `L = I - D^{-1/2} A D^{-1/2}`; zero-degree nodes contribute no coupling.
pub fn normalized_laplacian(adj: &Adjacency) -> SparseMatrix {
    let inv = inv_sqrt_degrees(adj);
    let rows = (0..adj.n())
        .map(|i| {
            std::iter::once((i, 1.0))
                .chain(adj.neighbors(i).iter().map(|&j| (j, -inv[i] * inv[j])))
                .collect()
        })
        .collect();
    SparseMatrix::from_rows(adj.n(), rows)
}

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 1000;

/// Largest eigenvalue of a symmetric positive semi-definite operator.
pub fn largest_eigenvalue(op: &SparseMatrix) -> f64 {
    let n = op.n_rows();
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Array2::from_shape_fn((n, 1), |_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 });
    v /= v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let y = op.matmul(&v);
        let next = (&v * &y).sum();
        let norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = y / norm;
        let done = (next - lambda).abs() < POWER_TOL;
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

/// `L~ = 2 L / lambda_max - I`. With the default `lambda_max = 2` this is
/// `-D^{-1/2} A D^{-1/2}`.
pub fn scaled_laplacian(adj: &Adjacency, lambda_max: LambdaMax) -> SparseMatrix {
    let lap = normalized_laplacian(adj);
    let lambda = match lambda_max {
        LambdaMax::Fixed(l) => l,
        LambdaMax::Exact => largest_eigenvalue(&lap),
    };
    let scale = 2.0 / lambda;
    let rows = (0..adj.n())
        .map(|i| {
            lap.row(i)
                .map(|(j, v)| (j, if i == j { scale * v - 1.0 } else { scale * v }))
                .filter(|&(_, v)| v != 0.0)
                .collect()
        })
        .collect();
    SparseMatrix::from_rows(adj.n(), rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Chebyshev,
    Mixhop,
}

/// Operator plus maximum order for one graph (or batch union).
#[derive(Debug, Clone)]
pub struct PropagationPlan {
    pub kind: KernelKind,
    pub k: usize,
    pub operator: Arc<SparseMatrix>,
}

impl PropagationPlan {
    pub fn chebyshev(adj: &Adjacency, k: usize, lambda_max: LambdaMax) -> Self {
        Self {
            kind: KernelKind::Chebyshev,
            k,
            operator: Arc::new(scaled_laplacian(adj, lambda_max)),
        }
    }

    pub fn mixhop(adj: &Adjacency, k: usize) -> Self {
        Self {
            kind: KernelKind::Mixhop,
            k,
            operator: Arc::new(normalized_adjacency(adj)),
        }
    }

    pub fn new(kind: KernelKind, adj: &Adjacency, k: usize) -> Self {
        match kind {
            KernelKind::Chebyshev => Self::chebyshev(adj, k, LambdaMax::default()),
            KernelKind::Mixhop => Self::mixhop(adj, k),
        }
    }

    /// `[T_0 X, .., T_k X]` for the plan's kernel.
    pub fn propagate(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        match self.kind {
            KernelKind::Chebyshev => cheb_propagate(&self.operator, x, self.k),
            KernelKind::Mixhop => mixhop_propagate(&self.operator, x, self.k),
        }
    }
}

/// Chebyshev recurrence `T_0 X = X`, `T_1 X = L~ X`,
/// `T_m X = 2 L~ T_{m-1} X - T_{m-2} X`.
pub fn cheb_propagate(laplacian: &SparseMatrix, x: &Array2<f64>, k: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(x.to_owned());
    if k >= 1 {
        out.push(laplacian.matmul(x));
    }
    for m in 2..=k {
        let next = laplacian.matmul(&out[m - 1]) * 2.0 - &out[m - 2];
        out.push(next);
    }
    out
}

/// `[X, A^ X, .., A^k X]` by repeated sparse products.
pub fn mixhop_propagate(adjacency: &SparseMatrix, x: &Array2<f64>, k: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(x.to_owned());
    for m in 1..=k {
        let next = adjacency.matmul(&out[m - 1]);
        out.push(next);
    }
    out
}
