//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line and
//! fails when its criterion is not met.
//!
//! Criteria 4, 6, 7 and 8 need the PROTEINS TU dataset under
//! `$KORDER_DATA_ROOT` (default `<workspace>/data`).

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use korder_core::autodiff::{Tape, Var};
use korder_core::graph::synthetic::complete_graphs;
use korder_core::graph::{load_tu_dataset, Adjacency, Batch, Dataset, Graph};
use korder_core::kinfo::{fit_exponential, ig_curve, local_entropy, select_k_for_rate, EntropyOptions};
use korder_core::nn::{KPool, LiConv, Mode, Model, ModelConfig, ParamStore, PoolConfig};
use korder_core::spectral::{cheb_propagate, mixhop_propagate, normalized_adjacency, scaled_laplacian, KernelKind, LambdaMax, SparseMatrix};
use korder_core::train::{run_experiment, RunReport, TrainConfig};

fn verdict(n: usize, title: &str, passed: bool, detail: &str) {
    println!("criterion {n}: {} {title}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n} ({title}) failed: {detail}");
}

fn within(n: usize, elapsed: Duration, limit: Duration) -> String {
    let ok = elapsed <= limit;
    if !ok {
        println!("criterion {n}: runtime {elapsed:.1?} exceeds {limit:?}");
    }
    format!("{:.2}s of {:?}", elapsed.as_secs_f64(), limit)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn erdos_renyi(n: usize, p: f64, rng: &mut ChaCha8Rng) -> (Adjacency, Array2<f64>) {
    let mut dense = Array2::zeros((n, n));
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                pairs.push((i, j));
                dense[[i, j]] = 1.0;
                dense[[j, i]] = 1.0;
            }
        }
    }
    (Adjacency::from_undirected(n, &pairs).unwrap(), dense)
}

fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = b.mapv(|v| v * v).sum().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[test]
fn criterion_1_kernel_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(0..=5);
        let (adj, a) = erdos_renyi(n, 0.4, &mut rng);
        let x = random_matrix(n, 3, &mut rng);
        let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();

        // L~ = L - I with L = I - D^-1/2 A D^-1/2
        let lt = Array2::from_shape_fn((n, n), |(i, j)| if a[[i, j]] > 0.0 { -1.0 / (deg[i] * deg[j]).sqrt() } else { 0.0 });
        let mut t_prev = Array2::<f64>::eye(n);
        let mut t_cur = lt.clone();
        let cheb = cheb_propagate(&scaled_laplacian(&adj, LambdaMax::default()), &x, k);
        for (m, got) in cheb.iter().enumerate() {
            let poly = match m {
                0 => Array2::eye(n),
                1 => lt.clone(),
                _ => {
                    let next = lt.dot(&t_cur) * 2.0 - &t_prev;
                    t_prev = std::mem::replace(&mut t_cur, next);
                    t_cur.clone()
                }
            };
            worst = worst.max(rel_error(got, &poly.dot(&x)));
        }

        let at = &a + &Array2::<f64>::eye(n);
        let dt: Vec<f64> = at.rows().into_iter().map(|r| r.sum()).collect();
        let ahat = Array2::from_shape_fn((n, n), |(i, j)| at[[i, j]] / (dt[i] * dt[j]).sqrt());
        let mut power = Array2::<f64>::eye(n);
        for got in mixhop_propagate(&normalized_adjacency(&adj), &x, k) {
            worst = worst.max(rel_error(&got, &power.dot(&x)));
            power = power.dot(&ahat);
        }
    }
    let elapsed = started.elapsed();
    let time = within(1, elapsed, Duration::from_secs(10));
    verdict(
        1,
        "kernel oracle equivalence",
        worst <= 1e-10 && elapsed <= Duration::from_secs(10),
        &format!("max relative error {worst:.2e} (<= 1e-10), {time}"),
    );
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Central differences of `f` around `inputs`, compared with `analytic`.
fn fd_max_rel(inputs: &[Array2<f64>], analytic: &[Array2<f64>], f: &dyn Fn(&[Array2<f64>]) -> f64) -> f64 {
    let h = 1e-5;
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..inputs.len() {
        let cols = inputs[t].ncols();
        for e in 0..inputs[t].len() {
            let idx = [e / cols, e % cols];
            let orig = inputs[t][idx];
            work[t][idx] = orig + h;
            let up = f(&work);
            work[t][idx] = orig - h;
            let down = f(&work);
            work[t][idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[t][idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Array2<f64>>, Build)> {
    let adj = Adjacency::from_undirected(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)]).unwrap();
    let op: Arc<SparseMatrix> = Arc::new(normalized_adjacency(&adj));
    let mask = random_matrix(4, 3, rng);
    let relu_in = random_matrix(4, 3, rng).mapv(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    vec![
        ("matmul", vec![random_matrix(4, 3, rng), random_matrix(3, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]))),
        ("sparse_matmul", vec![random_matrix(5, 2, rng)], Box::new(move |t: &mut Tape, v: &[Var]| t.sparse_matmul(&op, v[0]))),
        ("add", vec![random_matrix(2, 3, rng), random_matrix(2, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]))),
        ("sub", vec![random_matrix(2, 3, rng), random_matrix(2, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]))),
        ("mul", vec![random_matrix(2, 3, rng), random_matrix(2, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]))),
        ("scale", vec![random_matrix(2, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], 1.7))),
        ("mul_const", vec![random_matrix(4, 3, rng)], Box::new(move |t: &mut Tape, v: &[Var]| t.mul_const(v[0], mask.clone()))),
        ("add_row", vec![random_matrix(4, 3, rng), random_matrix(1, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.add_row(v[0], v[1]))),
        ("mul_row", vec![random_matrix(4, 3, rng), random_matrix(1, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.mul_row(v[0], v[1]))),
        ("relu", vec![relu_in], Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0]))),
        ("row_normalize", vec![random_matrix(4, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.row_normalize(v[0]))),
        ("row_scale", vec![random_matrix(4, 3, rng), random_matrix(4, 1, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.row_scale(v[0], v[1]))),
        ("concat", vec![random_matrix(3, 2, rng), random_matrix(3, 4, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.concat(&[v[0], v[1]]))),
        ("gather_rows", vec![random_matrix(5, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[3, 1, 4]))),
        ("segment_mean", vec![random_matrix(6, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.segment_mean(v[0], &[0, 1, 4, 6]))),
        ("segment_max", vec![random_matrix(6, 2, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.segment_max(v[0], &[0, 1, 4, 6]))),
        ("sum", vec![random_matrix(3, 3, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]))),
        ("softmax_cross_entropy", vec![random_matrix(3, 4, rng)], Box::new(|t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &[3, 0, 1]))),
    ]
}

fn pooled_config() -> ModelConfig {
    ModelConfig {
        kernel: KernelKind::Chebyshev,
        k: 2,
        layers: 2,
        in_dim: 3,
        hidden: 5,
        classes: 2,
        pool: Some(PoolConfig {
            node_ratio: 0.6,
            edge_ratio: 0.8,
            normalize: true,
            pool_nodes: true,
            pool_edges: true,
        }),
        dropout: 0.0,
    }
}

/// A draw whose pooling decisions have margin, so finite differences do not
/// straddle a selection switch or a zero score.
fn separated_network(rng: &mut ChaCha8Rng) -> (Batch, Model) {
    for seed in 0.. {
        let (adj, _) = erdos_renyi(6, 0.5, rng);
        let graph = Graph::new(adj, random_matrix(6, 3, rng), 1).unwrap();
        let batch = Batch::from_graphs([&graph]).unwrap();
        let model = Model::new(pooled_config(), seed).unwrap();
        let pass = model.forward(&batch, Mode::Eval).unwrap();
        let ok = pass.pools.iter().all(|(input, result)| {
            let mut w = result.node_scores.clone();
            w.sort_by(f64::total_cmp);
            let mut d: Vec<f64> = input
                .adj
                .undirected_edges()
                .map(|(i, j)| (&input.x.row(i) - &input.x.row(j)).mapv(|v| v * v).sum().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            w[0] > 1e-3 && w.windows(2).all(|p| p[1] - p[0] > 1e-3) && d.windows(2).all(|p| p[1] - p[0] > 1e-3)
        });
        if ok {
            return (batch, model);
        }
    }
    unreachable!()
}

#[test]
fn criterion_2_gradient_soundness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, inputs, build) in op_cases(&mut rng) {
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&mut tape, &vars);
            random_matrix(tape.value(out).nrows(), tape.value(out).ncols(), &mut rng)
        };
        let scalar = |tape: &mut Tape, vars: &[Var]| {
            let out = build(tape, vars);
            let weighted = tape.mul_const(out, probe.clone());
            tape.sum(weighted)
        };
        let f = |values: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|x| tape.leaf(x.clone())).collect();
            let s = scalar(&mut tape, &vars);
            tape.scalar(s)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let s = scalar(&mut tape, &vars);
        let grads = tape.backward(s);
        let analytic: Vec<Array2<f64>> = vars.iter().zip(&inputs).map(|(&v, x)| grads.get_or_zeros(v, x)).collect();
        worst.push((name.to_string(), fd_max_rel(&inputs, &analytic, &f)));
    }

    let (batch, model) = separated_network(&mut rng);
    let step = model.loss_and_backward(&batch, Mode::Eval).unwrap();
    let inputs: Vec<Array2<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let f = |values: &[Array2<f64>]| {
        let mut m = model.clone();
        m.params.iter_mut().zip(values).for_each(|(p, v)| p.value = v.clone());
        m.loss_and_backward(&batch, Mode::Eval).unwrap().loss
    };
    worst.push(("network(2 blocks, 6 nodes)".into(), fd_max_rel(&inputs, &step.grads, &f)));

    let elapsed = started.elapsed();
    let time = within(2, elapsed, Duration::from_secs(60));
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        2,
        "gradient soundness",
        max <= 1e-4 && elapsed <= Duration::from_secs(60),
        &format!("{} checks, max relative error {max:.2e} at {name} (<= 1e-4), {time}", worst.len()),
    );
}

#[test]
fn criterion_3_parameter_reduction_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for _ in 0..20 {
        let d = rng.random_range(2..=512);
        let d_out = rng.random_range(1..=256);
        let k = rng.random_range(1..=10);
        let mut store = ParamStore::default();
        let conv = LiConv::new(&mut store, "c", KernelKind::Chebyshev, k, d, d_out, &mut rng);
        let counted = store.get(conv.weight).len() + conv.merge.iter().map(|&m| store.get(m).len()).sum::<usize>();
        let light = (d + k + 1) * d_out;
        let coupled = (k + 1) * d * d_out;
        if counted != light || light >= coupled {
            failures.push(format!("(d={d}, d'={d_out}, k={k}): counted {counted}, light {light}, coupled {coupled}"));
        }
    }
    verdict(
        3,
        "parameter-reduction identity",
        failures.is_empty(),
        &failures.first().cloned().unwrap_or_else(|| "20 triples, counts exact and ratio < 1".into()),
    );
}

fn data_root() -> PathBuf {
    std::env::var_os("KORDER_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn proteins() -> Result<&'static Dataset, String> {
    static DATA: OnceLock<Result<Dataset, String>> = OnceLock::new();
    DATA.get_or_init(|| {
        load_tu_dataset(data_root(), "PROTEINS").map_err(|e| format!("PROTEINS unavailable under {}: {e}", data_root().display()))
    })
    .as_ref()
    .map_err(Clone::clone)
}

#[test]
fn criterion_4_ig_decay_shape() {
    let title = "IG decay shape on PROTEINS";
    let ds = match proteins() {
        Ok(ds) => ds,
        Err(e) => return verdict(4, title, false, &e),
    };
    let started = Instant::now();
    let table = local_entropy(ds, &EntropyOptions::new(10)).unwrap();
    let curve = ig_curve(&table).unwrap();
    let decreasing = (2..10).all(|k| curve.ig(k + 1) < curve.ig(k));
    let fit = fit_exponential(&curve, 2..=10);
    let elapsed = started.elapsed();
    let time = within(4, elapsed, Duration::from_secs(600));
    let ig: Vec<String> = (2..=10).map(|k| format!("{:.4}", curve.ig(k))).collect();
    match fit {
        Ok(fit) => verdict(
            4,
            title,
            decreasing && fit.r2 >= 0.95 && fit.b > 1.0 && elapsed <= Duration::from_secs(600),
            &format!(
                "IG(2..10) = [{}], strictly decreasing {decreasing}, a = {:.3}, b = {:.3} (> 1), R^2 = {:.4} (>= 0.95), {time}",
                ig.join(", "),
                fit.a,
                fit.b,
                fit.r2
            ),
        ),
        Err(e) => verdict(4, title, false, &format!("IG(2..10) = [{}], fit failed: {e}", ig.join(", "))),
    }
}

#[test]
fn criterion_5_k_selection_arithmetic() {
    let b: f64 = 1.2501;
    let eps: f64 = 0.05;
    let closed_form = ((1.0 / eps).ln() / b).ceil() as usize;
    let sel = select_k_for_rate(b, eps).unwrap();
    let ok = sel.k_hat == 3 && closed_form == 3 && (sel.loss - 0.0235).abs() <= 0.0005;
    verdict(
        5,
        "k-selection arithmetic",
        ok,
        &format!("k_hat = {} (closed form {closed_form}), achieved loss {:.5} (0.0235 +- 0.0005)", sel.k_hat, sel.loss),
    );
}

fn conv_only() -> TrainConfig {
    TrainConfig {
        k: 2,
        pool_nodes: false,
        pool_edges: false,
        seeds: vec![0, 1, 2],
        ..TrainConfig::for_dataset("PROTEINS")
    }
}

fn conv_only_report() -> Result<&'static RunReport, String> {
    static REPORT: OnceLock<Result<RunReport, String>> = OnceLock::new();
    REPORT
        .get_or_init(|| {
            let ds = proteins()?;
            run_experiment(&conv_only(), ds).map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn accuracies(r: &RunReport) -> String {
    r.per_seed
        .iter()
        .map(|s| s.test_accuracy.map_or("failed".into(), |a| format!("{a:.4}")))
        .collect::<Vec<_>>()
        .join(", ")
}

#[test]
fn criterion_6_desk_scale_accuracy() {
    let title = "desk-scale accuracy (PROTEINS, LiCheb, conv-only, 3 seeds)";
    let started = Instant::now();
    let report = match conv_only_report() {
        Ok(r) => r,
        Err(e) => return verdict(6, title, false, &e),
    };
    let elapsed = started.elapsed();
    let time = within(6, elapsed, Duration::from_secs(45 * 60));
    verdict(
        6,
        title,
        report.failed_seeds.is_empty() && report.mean >= 0.70 && report.mean > report.majority_baseline,
        &format!(
            "mean {:.4} (>= 0.70), majority baseline {:.4}, per seed [{}], {time}",
            report.mean,
            report.majority_baseline,
            accuracies(report)
        ),
    );
}

#[test]
fn criterion_7_pooling_pipeline() {
    let title = "pooling pipeline (NF+pN+pE, rho_v 0.6, rho_e 0.8)";
    let (ds, base) = match proteins().and_then(|ds| conv_only_report().map(|r| (ds, r))) {
        Ok(v) => v,
        Err(e) => return verdict(7, title, false, &e),
    };
    let cfg = TrainConfig {
        pool_nodes: true,
        pool_edges: true,
        nf: true,
        rho_v: Some(0.6),
        rho_e: Some(0.8),
        ..conv_only()
    };
    let pooled = match run_experiment(&cfg, ds) {
        Ok(r) => r,
        Err(e) => return verdict(7, title, false, &e.to_string()),
    };
    let gap = (pooled.mean - base.mean).abs();
    verdict(
        7,
        title,
        pooled.failed_seeds.is_empty() && gap <= 0.05 && pooled.pool_checks() > 0 && pooled.pool_violations.is_empty(),
        &format!(
            "pooled mean {:.4} vs conv-only {:.4} (gap {:.4} <= 0.05), {} pooling steps checked, {} violations",
            pooled.mean,
            base.mean,
            gap,
            pooled.pool_checks(),
            pooled.pool_violations.len()
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let title = "determinism of the conv-only PROTEINS run";
    let (ds, first) = match proteins().and_then(|ds| conv_only_report().map(|r| (ds, r))) {
        Ok(v) => v,
        Err(e) => return verdict(8, title, false, &e),
    };
    let again = run_experiment(&conv_only(), ds).unwrap();
    verdict(
        8,
        title,
        first.accuracies() == again.accuracies(),
        &format!("first [{}], repeat [{}]", accuracies(first), accuracies(&again)),
    );
}

#[test]
fn criterion_9_trivial_cases() {
    let mut notes = Vec::new();

    let ds = complete_graphs(16, 9);
    let curve = ig_curve(&local_entropy(&ds, &EntropyOptions::new(5)).unwrap()).unwrap();
    let ig_max = (2..=5).map(|k| curve.ig(k).abs()).fold(0.0, f64::max);
    notes.push(("complete-graph IG(k>=2)", ig_max));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let adj = Adjacency::from_undirected(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
    let x = Array2::from_shape_vec((4, 2), vec![0.3, 0.7, 0.3, 0.7, -1.0, 2.0, 0.5, 0.5]).unwrap();
    let graph = Graph::new(adj, x, 0).unwrap();
    let batch = Batch::from_graphs([&graph]).unwrap();
    let full = PoolConfig {
        node_ratio: 1.0,
        edge_ratio: 1.0,
        normalize: true,
        pool_nodes: true,
        pool_edges: true,
    };
    let mut store = ParamStore::default();
    let pool = KPool::new(&mut store, "p", 1, 2, full, &mut rng);
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let z = tape.leaf(batch.x.clone());
    let z1 = tape.leaf(random_matrix(4, 2, &mut rng));
    let result = pool.forward(&mut tape, &params, &batch, &[z, z1], z).unwrap();
    let w01 = result.kept_edges.iter().position(|&e| e == (0, 1)).map(|i| result.edge_scores[i]);
    notes.push(("identical-endpoint w_ij - 1", w01.map_or(f64::INFINITY, |w| (w - 1.0).abs())));
    let identity = result.kept_nodes == vec![0, 1, 2, 3] && result.batch.adj == batch.adj;
    notes.push(("rho = 1 identity mismatch", if identity { 0.0 } else { f64::INFINITY }));

    let mut loss_gap: f64 = 0.0;
    for c in [2usize, 5, 10] {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::from_elem((4, c), 0.37));
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 0, 1]);
        loss_gap = loss_gap.max((tape.scalar(loss) - (c as f64).ln()).abs());
    }
    notes.push(("uniform-logit loss - ln C", loss_gap));

    let passed = notes.iter().all(|&(_, v)| v <= 1e-9);
    let detail: Vec<String> = notes.iter().map(|(n, v)| format!("{n} = {v:.1e}")).collect();
    verdict(9, "trivial-case suite (1e-9)", passed, &detail.join(", "));
}
