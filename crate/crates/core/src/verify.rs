//! Self-checks shared by the test suites and the `verify` command.
//!
//! Each oracle is computed independently of the code path it checks: central
//! finite differences for gradients, dense matrix arithmetic for the sparse
//! kernels, and closed-form trivial cases for pooling and entropy.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::graph::synthetic::complete_graphs;
use crate::graph::{Adjacency, Batch, Graph};
use crate::kinfo::{fit_exponential, ig_curve, local_entropy, select_k_for_rate, EntropyOptions, DEFAULT_FIT_RANGE};
use crate::nn::{check_pool_invariants, KPool, Mode, Model, ModelConfig, ParamStore, PoolConfig};
use crate::spectral::{cheb_propagate, mixhop_propagate, normalized_adjacency, scaled_laplacian, KernelKind, LambdaMax};

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat element)` of the worst relative error.
    pub worst: (usize, usize),
    pub evaluated: usize,
}

/// Relative error used for gradient comparisons; the floor keeps
/// vanishing gradients from amplifying round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` receives one leaf per input and returns a `1 x 1` output.
pub fn finite_difference_check<F>(inputs: &[Array2<f64>], step: f64, build: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x))
        .collect();

    compare_with_finite_differences(inputs, &analytic, step, eval)
}

/// Central-difference comparison for an arbitrary scalar function of several
/// matrices, given claimed analytic gradients.
pub fn compare_with_finite_differences<F>(
    inputs: &[Array2<f64>],
    analytic: &[Array2<f64>],
    step: f64,
    eval: F,
) -> GradCheck
where
    F: Fn(&[Array2<f64>]) -> f64,
{
    let mut result = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        evaluated: 0,
    };
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (t, input) in inputs.iter().enumerate() {
        for (e, &orig) in input.iter().enumerate() {
            let cols = input.ncols();
            let idx = [e / cols, e % cols];
            work[t][idx] = orig + step;
            let plus = eval(&work);
            work[t][idx] = orig - step;
            let minus = eval(&work);
            work[t][idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t][idx];
            let rel = relative_error(a, numeric);
            result.max_abs_error = result.max_abs_error.max((a - numeric).abs());
            if rel > result.max_rel_error {
                result.max_rel_error = rel;
                result.worst = (t, e);
            }
            result.evaluated += 1;
        }
    }
    result
}

/// Result of one named self-check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Scales the analytic gradient of the named check by 1.01 before
    /// comparison, so the suite can be shown to catch a wrong formula.
    pub corrupt_gradient: Option<String>,
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const KERNEL_TOLERANCE: f64 = 1e-10;
pub const TRIVIAL_TOLERANCE: f64 = 1e-9;

/// Every suite in order: kernels, gradients, pooling, entropy.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = kernel_suite(100, 0);
    out.extend(gradient_suite(opts.corrupt_gradient.as_deref()));
    out.extend(pooling_suite());
    out.extend(entropy_suite());
    out
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Erdos-Renyi graph on `n` nodes.
pub fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Adjacency {
    let pairs: Vec<_> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|_| rng.random_bool(p))
        .collect();
    Adjacency::from_undirected(n, &pairs).expect("pairs are in range")
}

fn dense_adjacency(adj: &Adjacency) -> Array2<f64> {
    let mut a = Array2::zeros((adj.n(), adj.n()));
    for i in 0..adj.n() {
        for &j in adj.neighbors(i) {
            a[[i, j]] = 1.0;
        }
    }
    a
}

/// Dense `2 L / 2 - I` built from degrees directly.
pub fn dense_scaled_laplacian(adj: &Adjacency) -> Array2<f64> {
    let a = dense_adjacency(adj);
    let n = adj.n();
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    let mut lap = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                lap[[i, j]] -= a[[i, j]] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    lap - Array2::<f64>::eye(n)
}

pub fn dense_normalized_adjacency(adj: &Adjacency) -> Array2<f64> {
    let a = dense_adjacency(adj) + Array2::<f64>::eye(adj.n());
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn(a.raw_dim(), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}

/// `[T_0(M) X, .., T_k(M) X]` from dense Chebyshev matrix polynomials.
pub fn dense_chebyshev(m: &Array2<f64>, x: &Array2<f64>, k: usize) -> Vec<Array2<f64>> {
    let n = m.nrows();
    let mut polys: Vec<Array2<f64>> = vec![Array2::eye(n)];
    if k >= 1 {
        polys.push(m.clone());
    }
    for i in 2..=k {
        let next = m.dot(&polys[i - 1]) * 2.0 - &polys[i - 2];
        polys.push(next);
    }
    polys.iter().map(|t| t.dot(x)).collect()
}

/// `[X, M X, .., M^k X]` from dense matrix powers.
pub fn dense_powers(m: &Array2<f64>, x: &Array2<f64>, k: usize) -> Vec<Array2<f64>> {
    let mut power = Array2::eye(m.nrows());
    let mut out = Vec::with_capacity(k + 1);
    for _ in 0..=k {
        out.push(power.dot(x));
        power = power.dot(m);
    }
    out
}

/// `|a - b|_F / |b|_F`, or the absolute difference when `b` vanishes.
pub fn frobenius_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = b.mapv(|v| v * v).sum().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Sparse kernels against dense matrix polynomials on random graphs
/// (n <= 12, edge probability 0.4, k <= 5).
pub fn kernel_suite(graphs: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 2];
    for _ in 0..graphs {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(0..=5);
        let adj = random_graph(n, 0.4, &mut rng);
        let x = random_matrix(n, rng.random_range(1..=4), &mut rng);
        let pairs = [
            (
                cheb_propagate(&scaled_laplacian(&adj, LambdaMax::default()), &x, k),
                dense_chebyshev(&dense_scaled_laplacian(&adj), &x, k),
            ),
            (
                mixhop_propagate(&normalized_adjacency(&adj), &x, k),
                dense_powers(&dense_normalized_adjacency(&adj), &x, k),
            ),
        ];
        for (slot, (sparse, dense)) in pairs.iter().enumerate() {
            for (s, d) in sparse.iter().zip(dense) {
                worst[slot] = worst[slot].max(frobenius_relative_error(s, d));
            }
        }
    }
    ["kernel/chebyshev", "kernel/mixhop"]
        .iter()
        .zip(worst)
        .map(|(name, err)| {
            CheckOutcome::new(*name, err <= KERNEL_TOLERANCE, format!("max relative error {err:.3e} over {graphs} graphs"))
        })
        .collect()
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn gradient_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Array2<f64>>, Builder)> {
    // keep relu inputs away from the kink
    let away = |m: Array2<f64>| m.mapv(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
    let path: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).chain([(0, 3)]).collect();
    let adj = Adjacency::from_undirected(6, &path).expect("pairs are in range");
    let op = Arc::new(scaled_laplacian(&adj, LambdaMax::default()));
    let mask = random_matrix(4, 3, rng);
    let offsets = vec![0, 2, 5];
    vec![
        ("matmul", vec![random_matrix(4, 3, rng), random_matrix(3, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]))),
        ("sparse_matmul", vec![random_matrix(6, 2, rng)], Box::new(move |t: &mut Tape, v: &[Var]| t.sparse_matmul(&op, v[0]))),
        ("add", vec![random_matrix(3, 2, rng), random_matrix(3, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]))),
        ("sub", vec![random_matrix(3, 2, rng), random_matrix(3, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]))),
        ("mul", vec![random_matrix(3, 2, rng), random_matrix(3, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]))),
        ("scale", vec![random_matrix(3, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -2.5))),
        ("mul_const", vec![random_matrix(4, 3, rng)], Box::new(move |t: &mut Tape, v: &[Var]| t.mul_const(v[0], mask.clone()))),
        ("add_row", vec![random_matrix(4, 3, rng), random_matrix(1, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.add_row(v[0], v[1]))),
        ("mul_row", vec![random_matrix(4, 3, rng), random_matrix(1, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.mul_row(v[0], v[1]))),
        ("relu", vec![away(random_matrix(4, 3, rng))], Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0]))),
        ("row_normalize", vec![random_matrix(4, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.row_normalize(v[0]))),
        ("row_scale", vec![random_matrix(4, 3, rng), random_matrix(4, 1, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.row_scale(v[0], v[1]))),
        ("concat", vec![random_matrix(4, 3, rng), random_matrix(4, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.concat(&[v[0], v[1]]))),
        ("gather_rows", vec![random_matrix(5, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[4, 0, 2]))),
        ("segment_mean", vec![random_matrix(5, 3, rng)], Box::new({
            let offsets = offsets.clone();
            move |t: &mut Tape, v: &[Var]| t.segment_mean(v[0], &offsets)
        })),
        ("segment_max", vec![random_matrix(5, 3, rng)], Box::new(move |t: &mut Tape, v: &[Var]| t.segment_max(v[0], &offsets))),
        ("sum", vec![random_matrix(3, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]))),
        ("softmax_cross_entropy", vec![random_matrix(4, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]))),
    ]
}

fn scalar_output(tape: &mut Tape, out: Var, probe: &Array2<f64>) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let weighted = tape.mul_const(out, probe.clone());
    tape.sum(weighted)
}

fn grad_outcome(name: &str, check: GradCheck) -> CheckOutcome {
    CheckOutcome::new(
        format!("gradient/{name}"),
        check.max_rel_error <= GRADIENT_TOLERANCE,
        format!("max relative error {:.3e} over {} entries", check.max_rel_error, check.evaluated),
    )
}

/// Central differences for every tape op and for a two-block pooled network
/// on a six-node graph.
pub fn gradient_suite(corrupt: Option<&str>) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let corrupt_factor = |name: &str| if corrupt == Some(name) { 1.01 } else { 1.0 };
    let mut out = Vec::new();
    for (name, inputs, build) in gradient_cases(&mut rng) {
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let v = build(&mut tape, &vars);
            random_matrix(tape.value(v).nrows(), tape.value(v).ncols(), &mut rng)
        };
        let eval = |values: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|x| tape.leaf(x.clone())).collect();
            let v = build(&mut tape, &vars);
            let s = scalar_output(&mut tape, v, &probe);
            tape.scalar(s)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let v = build(&mut tape, &vars);
        let s = scalar_output(&mut tape, v, &probe);
        let grads = tape.backward(s);
        let analytic: Vec<Array2<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, x)| grads.get_or_zeros(v, x) * corrupt_factor(name))
            .collect();
        out.push(grad_outcome(name, compare_with_finite_differences(&inputs, &analytic, 1e-5, eval)));
    }

    let config = ModelConfig {
        kernel: KernelKind::Chebyshev,
        k: 2,
        layers: 2,
        in_dim: 3,
        hidden: 4,
        classes: 2,
        pool: Some(PoolConfig {
            node_ratio: 0.6,
            edge_ratio: 0.8,
            normalize: true,
            pool_nodes: true,
            pool_edges: true,
        }),
        dropout: 0.0,
    };
    let (batch, model) = (0..)
        .map(|seed| {
            let adj = random_graph(6, 0.5, &mut rng);
            let x = random_matrix(6, 3, &mut rng);
            let graph = Graph::new(adj, x, 1).expect("rows match");
            let batch = Batch::from_graphs([&graph]).expect("one member");
            (batch, Model::new(config.clone(), seed).expect("valid config"))
        })
        .find(|(batch, model)| well_separated(model, batch))
        .expect("some draw is away from selection boundaries");
    let outcome = match model.loss_and_backward(&batch, Mode::Eval) {
        Ok(step) => {
            let inputs: Vec<Array2<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
            let analytic: Vec<Array2<f64>> = step.grads.iter().map(|g| g * corrupt_factor("network")).collect();
            let check = compare_with_finite_differences(&inputs, &analytic, 1e-5, |values| {
                let mut m = model.clone();
                m.params.iter_mut().zip(values).for_each(|(p, v)| p.value = v.clone());
                m.loss_and_backward(&batch, Mode::Eval).map(|s| s.loss).unwrap_or(f64::NAN)
            });
            grad_outcome("network", check)
        }
        Err(e) => CheckOutcome::new("gradient/network", false, e.to_string()),
    };
    out.push(outcome);
    out
}

const SEPARATION: f64 = 1e-3;

fn separated(values: &mut [f64]) -> bool {
    values.sort_by(f64::total_cmp);
    values.windows(2).all(|w| w[1] - w[0] > SEPARATION)
}

/// Whether every pooling decision of `model` on `batch` has a margin, so
/// that small parameter steps cannot flip a selection or a ReLU score.
fn well_separated(model: &Model, batch: &Batch) -> bool {
    let Ok(pass) = model.forward(batch, Mode::Eval) else {
        return false;
    };
    pass.pools.iter().all(|(input, result)| {
        let mut scores = result.node_scores.clone();
        let dists: Vec<f64> = input
            .adj
            .undirected_edges()
            .map(|(i, j)| {
                let d = &input.x.row(i) - &input.x.row(j);
                d.dot(&d).sqrt()
            })
            .collect();
        scores.iter().all(|&w| w > SEPARATION) && separated(&mut scores) && separated(&mut dists.clone())
    })
}

/// Keep counts and structure on random batches, plus the closed-form cases.
pub fn pooling_suite() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut identity_ok = true;
    for trial in 0..40 {
        let graphs: Vec<Graph> = (0..rng.random_range(1..=4))
            .map(|_| {
                let n = rng.random_range(1..=10);
                Graph::new(random_graph(n, 0.4, &mut rng), random_matrix(n, 3, &mut rng), 0).expect("rows match")
            })
            .collect();
        let batch = Batch::from_graphs(&graphs).expect("non-empty");
        let full = trial % 5 == 0;
        let pool = PoolConfig {
            node_ratio: if full { 1.0 } else { rng.random_range(0.05..=1.0) },
            edge_ratio: if full { 1.0 } else { rng.random_range(0.05..=1.0) },
            normalize: rng.random_bool(0.5),
            pool_nodes: true,
            pool_edges: rng.random_bool(0.7) || full,
        };
        let config = ModelConfig {
            kernel: KernelKind::Mixhop,
            k: 2,
            layers: 2,
            in_dim: 3,
            hidden: 4,
            classes: 2,
            pool: Some(pool),
            dropout: 0.0,
        };
        let model = Model::new(config, trial).expect("valid config");
        match model.forward(&batch, Mode::Eval) {
            Ok(pass) => {
                for (input, result) in &pass.pools {
                    checked += 1;
                    if let Err(msg) = check_pool_invariants(input, result, &pool) {
                        failures.push(format!("trial {trial}: {msg}"));
                    }
                    if full && (result.batch.adj != input.adj || result.kept_nodes.len() != input.n()) {
                        identity_ok = false;
                    }
                }
            }
            Err(e) => failures.push(format!("trial {trial}: {e}")),
        }
    }

    let endpoint = {
        let adj = Adjacency::from_undirected(3, &[(0, 1), (1, 2)]).expect("pairs are in range");
        let x = Array2::from_shape_vec((3, 2), vec![0.5, -1.0, 0.5, -1.0, 2.0, 2.0]).expect("shape");
        let batch = Batch::from_graphs([&Graph::new(adj, x, 0).expect("rows match")]).expect("one member");
        let mut store = ParamStore::default();
        let pool = KPool::new(
            &mut store,
            "pool",
            0,
            2,
            PoolConfig {
                node_ratio: 1.0,
                edge_ratio: 1.0,
                normalize: true,
                pool_nodes: true,
                pool_edges: true,
            },
            &mut rng,
        );
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let z = tape.leaf(batch.x.clone());
        pool.forward(&mut tape, &params, &batch, &[z], z)
            .map(|r| r.kept_edges.first() == Some(&(0, 1)) && (r.edge_scores[0] - 1.0).abs() <= TRIVIAL_TOLERANCE)
            .unwrap_or(false)
    };

    vec![
        CheckOutcome::new(
            "pooling/keep_counts",
            failures.is_empty() && checked > 0,
            failures.first().cloned().unwrap_or_else(|| format!("{checked} pooling steps checked")),
        ),
        CheckOutcome::new("pooling/full_ratio_identity", identity_ok, "rho_v = rho_e = 1 keeps the input graph"),
        CheckOutcome::new("pooling/identical_endpoints", endpoint, "edge between equal features scores exp(0) = 1"),
    ]
}

/// Closed-form entropy and loss cases.
pub fn entropy_suite() -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    let ds = complete_graphs(12, 5);
    let zero_gain = local_entropy(&ds, &EntropyOptions::new(6)).and_then(|t| ig_curve(&t));
    out.push(match &zero_gain {
        Ok(curve) => {
            let worst = (2..=curve.k_max()).map(|k| curve.ig(k).abs()).fold(0.0, f64::max);
            CheckOutcome::new("entropy/complete_graph_gain", worst <= TRIVIAL_TOLERANCE, format!("max |IG(k)| for k >= 2 is {worst:.3e}"))
        }
        Err(e) => CheckOutcome::new("entropy/complete_graph_gain", false, e.to_string()),
    });
    out.push(match zero_gain.map(|c| fit_exponential(&c, DEFAULT_FIT_RANGE)) {
        Ok(Err(e)) => CheckOutcome::new("entropy/zero_gain_fit_rejected", true, e.to_string()),
        Ok(Ok(fit)) => CheckOutcome::new("entropy/zero_gain_fit_rejected", false, format!("unexpected fit b = {}", fit.b)),
        Err(e) => CheckOutcome::new("entropy/zero_gain_fit_rejected", false, e.to_string()),
    });

    let mut worst = 0.0f64;
    for classes in [2usize, 3, 7] {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((5, classes)));
        let labels: Vec<usize> = (0..5).map(|i| i % classes).collect();
        let loss = tape.softmax_cross_entropy(logits, &labels);
        worst = worst.max((tape.scalar(loss) - (classes as f64).ln()).abs());
    }
    out.push(CheckOutcome::new("loss/uniform_logits", worst <= TRIVIAL_TOLERANCE, format!("max |loss - ln C| = {worst:.3e}")));

    let picks: Vec<_> = [(1.2501, 0.05, 3usize), (2f64.ln(), 0.5, 1), (3.0, 0.5, 1)]
        .into_iter()
        .map(|(b, eps, want)| select_k_for_rate(b, eps).map(|s| s.k_hat == want).unwrap_or(false))
        .collect();
    out.push(CheckOutcome::new("entropy/select_k_closed_form", picks.iter().all(|&p| p), format!("{picks:?}")));
    out
}
