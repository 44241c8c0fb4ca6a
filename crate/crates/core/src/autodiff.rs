//! Minimal reverse-mode differentiation over dense 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the
//! op is pushed, and [`Tape::backward`] walks the records in reverse to
//! accumulate cotangents. Only the operations the graph network needs are
//! provided.

use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::spectral::SparseMatrix;

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Sparse(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x * mask`, mask treated as a constant.
    MulConst(Var, Array2<f64>),
    /// Adds a `1 x d` row to every row.
    AddRow(Var, Var),
    /// Multiplies every row by a `1 x d` row.
    MulRow(Var, Var),
    Relu(Var),
    /// Row-wise `x / max(|x|, floor)`; norms are kept for the backward pass.
    RowNormalize(Var, Vec<f64>),
    /// Multiplies row `i` by the scalar in row `i` of an `n x 1` column.
    RowScale(Var, Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    /// Winning row per (segment, column).
    SegmentMax(Var, Vec<usize>),
    Sum(Var),
    /// Mean cross-entropy; softmax probabilities are kept for the backward pass.
    SoftmaxCrossEntropy(Var, Vec<usize>, Array2<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Sparse(..) => "sparse_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Relu(..) => "relu",
            Op::RowNormalize(..) => "row_normalize",
            Op::RowScale(..) => "row_scale",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather_rows",
            Op::SegmentMean(..) => "segment_mean",
            Op::SegmentMax(..) => "segment_max",
            Op::Sum(..) => "sum",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<&'static str>,
}

/// Cotangents of every tape entry reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(like.raw_dim()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn sparse_matmul(&mut self, op: &Arc<SparseMatrix>, x: Var) -> Var {
        let v = op.matmul(self.value(x));
        self.push(v, Op::Sparse(Arc::clone(op), x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let v = self.value(a) * &mask;
        self.push(v, Op::MulConst(a, mask))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x d row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1 x d row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let mut v = x.clone();
        for (mut row, &n) in v.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        self.push(v, Op::RowNormalize(a, norms))
    }

    pub fn row_scale(&mut self, a: Var, scales: Var) -> Var {
        let s = self.value(scales);
        assert_eq!(s.dim(), (self.value(a).nrows(), 1), "row_scale expects an n x 1 column");
        let v = self.value(a) * s;
        self.push(v, Op::RowScale(a, scales))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::Gather(a, rows.to_vec()))
    }

    /// Per-segment column means; segment `g` spans rows `offsets[g]..offsets[g + 1]`.
    pub fn segment_mean(&mut self, a: Var, offsets: &[usize]) -> Var {
        let x = self.value(a);
        let segs = offsets.len() - 1;
        let mut v = Array2::zeros((segs, x.ncols()));
        for g in 0..segs {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            if hi > lo {
                let mean = x.slice(ndarray::s![lo..hi, ..]).sum_axis(Axis(0)) / (hi - lo) as f64;
                v.row_mut(g).assign(&mean);
            }
        }
        self.push(v, Op::SegmentMean(a, offsets.to_vec()))
    }

    /// Per-segment column maxima; the first maximal row wins ties.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Var {
        let x = self.value(a);
        let (segs, d) = (offsets.len() - 1, x.ncols());
        let mut v = Array2::zeros((segs, d));
        let mut winners = vec![usize::MAX; segs * d];
        for g in 0..segs {
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                for r in offsets[g]..offsets[g + 1] {
                    if x[[r, c]] > best {
                        best = x[[r, c]];
                        winners[g * d + c] = r;
                    }
                }
                if winners[g * d + c] != usize::MAX {
                    v[[g, c]] = best;
                }
            }
        }
        self.push(v, Op::SegmentMax(a, winners))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean softmax cross-entropy of `logits` (one row per example).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "one label per logit row");
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let v = Array2::from_elem((1, 1), loss / labels.len().max(1) as f64);
        self.push(v, Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sparse(m, x) => acc(&mut grads, *x, m.matmul_transpose(&g)),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::MulConst(a, mask) => acc(&mut grads, *a, g * mask),
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g * self.value(*row));
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::RowNormalize(a, norms) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = g;
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let raw = x.row(i).dot(&x.row(i)).sqrt();
                        if raw > NORM_FLOOR {
                            let proj = y.row(i).dot(&row);
                            row.zip_mut_with(&y.row(i), |gv, &yv| *gv -= yv * proj);
                        }
                        row /= norms[i];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowScale(a, s) => {
                    let gs = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *s, gs);
                    acc(&mut grads, *a, g * self.value(*s));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Gather(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMean(a, offsets) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let share = g.row(s).to_owned() / (hi - lo).max(1) as f64;
                        for r in lo..hi {
                            ga.row_mut(r).assign(&share);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMax(a, winners) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    let d = g.ncols();
                    for (idx, &r) in winners.iter().enumerate() {
                        if r != usize::MAX {
                            ga[[r, idx % d]] += g[[idx / d, idx % d]];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxCrossEntropy(z, labels, probs) => {
                    let scale = g[[0, 0]] / labels.len().max(1) as f64;
                    let mut gz = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gz[[i, y]] -= 1.0;
                    }
                    acc(&mut grads, *z, gz * scale);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::path;
    use crate::spectral::{normalized_adjacency, scaled_laplacian, LambdaMax};
    use crate::verify::{finite_difference_check, GradCheck};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Contracts an op's output with fixed random weights into a scalar.
    fn check<F>(inputs: Vec<Array2<f64>>, build: F) -> GradCheck
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&mut tape, &vars);
            random(tape.value(out).nrows(), tape.value(out).ncols(), 99)
        };
        finite_difference_check(&inputs, 1e-5, |tape, vars| {
            let out = build(tape, vars);
            let w = tape.leaf(probe.clone());
            let prod = tape.mul(out, w);
            tape.sum(prod)
        })
    }

    fn assert_ok(name: &str, result: GradCheck) {
        assert!(result.max_rel_error <= 1e-4, "{name}: {result:?}");
    }

    #[test]
    fn gradient_of_every_op() {
        let lap = Arc::new(scaled_laplacian(&path(4), LambdaMax::default()));
        let adj = Arc::new(normalized_adjacency(&path(4)));
        let offsets = vec![0, 1, 4];
        let mask = array![[2.0, 0.0, 2.0], [0.0, 2.0, 2.0], [2.0, 2.0, 0.0], [0.0, 0.0, 2.0]];

        assert_ok("matmul", check(vec![random(4, 3, 1), random(3, 2, 2)], |t, v| t.matmul(v[0], v[1])));
        assert_ok("sparse", check(vec![random(4, 3, 3)], |t, v| t.sparse_matmul(&lap, v[0])));
        assert_ok("sparse_adj", check(vec![random(4, 3, 3)], |t, v| t.sparse_matmul(&adj, v[0])));
        assert_ok("add", check(vec![random(4, 3, 4), random(4, 3, 5)], |t, v| t.add(v[0], v[1])));
        assert_ok("sub", check(vec![random(4, 3, 4), random(4, 3, 5)], |t, v| t.sub(v[0], v[1])));
        assert_ok("mul", check(vec![random(4, 3, 6), random(4, 3, 7)], |t, v| t.mul(v[0], v[1])));
        assert_ok("scale", check(vec![random(4, 3, 8)], |t, v| t.scale(v[0], -1.7)));
        assert_ok("mul_const", check(vec![random(4, 3, 8)], |t, v| t.mul_const(v[0], mask.clone())));
        assert_ok("add_row", check(vec![random(4, 3, 9), random(1, 3, 10)], |t, v| t.add_row(v[0], v[1])));
        assert_ok("mul_row", check(vec![random(4, 3, 11), random(1, 3, 12)], |t, v| t.mul_row(v[0], v[1])));
        assert_ok("relu", check(vec![random(4, 3, 13)], |t, v| t.relu(v[0])));
        assert_ok("row_normalize", check(vec![random(4, 3, 14)], |t, v| t.row_normalize(v[0])));
        assert_ok("row_scale", check(vec![random(4, 3, 15), random(4, 1, 16)], |t, v| t.row_scale(v[0], v[1])));
        assert_ok("concat", check(vec![random(4, 3, 17), random(4, 2, 18)], |t, v| t.concat(&[v[0], v[1], v[0]])));
        assert_ok("gather", check(vec![random(4, 3, 19)], |t, v| t.gather_rows(v[0], &[3, 1, 1])));
        assert_ok("segment_mean", check(vec![random(4, 3, 20)], |t, v| t.segment_mean(v[0], &offsets)));
        assert_ok("segment_max", check(vec![random(4, 3, 21)], |t, v| t.segment_max(v[0], &offsets)));
        assert_ok(
            "softmax_cross_entropy",
            check(vec![random(3, 4, 22)], |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1])),
        );
    }

    #[test]
    fn relu_dead_unit_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_elem((2, 2), -0.5));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_max_ties_go_to_first_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 0.0], [1.0, 2.0], [0.5, 2.0]]);
        let m = tape.segment_max(x, &[0, 3]);
        assert_eq!(tape.value(m), &array![[1.0, 2.0]]);
        let s = tape.sum(m);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for c in 2..6 {
            let mut tape = Tape::new();
            let z = tape.leaf(Array2::zeros((3, c)));
            let loss = tape.softmax_cross_entropy(z, &[0, 1, c - 1]);
            assert!((tape.scalar(loss) - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_have_tiny_loss_and_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(array![[10.0, -10.0]]);
        let loss = tape.softmax_cross_entropy(z, &[0]);
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((tape.scalar(loss) - expected).abs() < 1e-15);
        assert!((tape.scalar(loss) - 2e-9).abs() < 1e-10);

        let mut tape = Tape::new();
        let z = tape.leaf(array![[60.0, -60.0], [-60.0, 60.0]]);
        let loss = tape.softmax_cross_entropy(z, &[0, 1]);
        let g = tape.backward(loss);
        assert!(g.get(z).unwrap().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0, 4.0], [0.0, 0.0]]);
        let y = tape.row_normalize(x);
        assert_eq!(tape.value(y), &array![[0.6, 0.8], [0.0, 0.0]]);
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[f64::MAX, 1.0]]);
        let y = tape.scale(x, 10.0);
        let _ = tape.relu(y);
        assert_eq!(tape.first_non_finite(), Some("scale"));
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[2.0]]);
        let y = tape.mul(x, x);
        let z = tape.add(y, x);
        let g = tape.backward(z);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 5.0);
    }
}
