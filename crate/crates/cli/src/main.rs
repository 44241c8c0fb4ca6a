//! `korder`: information-gain analysis, training and self-checks for light
//! k-order graph networks on TU-format datasets.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use korder_core::graph::{load_tu_dataset, Dataset};
use korder_core::kinfo::{fit_exponential, ig_curve, local_entropy, select_k, EntropyOptions, FitRow, IgCurve};
use korder_core::train::{run_experiment, ConvKind, TrainConfig};
use korder_core::verify::{run_all, VerifyOptions};

const DATA_ROOT_ENV: &str = "KORDER_DATA_ROOT";

#[derive(Parser)]
#[command(name = "korder", version, about = "Light k-order graph convolution and pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure neighborhood information gain and pick the convolution order.
    Analyze(AnalyzeArgs),
    /// Train and evaluate over several seeds.
    Train(TrainArgs),
    /// Run the built-in numerical self-checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset name under the data root, or a directory holding the TU files.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory containing TU datasets (default: $KORDER_DATA_ROOT or ./data).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory (default: ./runs/<dataset>/<timestamp>/).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 10)]
    kmax: usize,
    /// Tolerated fraction of information gain left beyond the chosen order.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Upper bound on sampled center nodes; 0 uses every node.
    #[arg(long, default_value_t = korder_core::kinfo::DEFAULT_NODE_CAP)]
    node_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvArg {
    Licheb,
    Limixhop,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON file with training config fields; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    conv: Option<ConvArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rho_v: Option<f64>,
    #[arg(long)]
    rho_e: Option<f64>,
    /// Skip feature normalization before score scaling.
    #[arg(long)]
    no_nf: bool,
    /// Disable node and edge pooling (convolution only).
    #[arg(long)]
    no_pool: bool,
    /// Keep every edge between surviving nodes.
    #[arg(long)]
    no_edge_pool: bool,
    /// Comma-separated seeds; `a-b` expands to an inclusive range.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Perturb the analytic gradient of one check (e.g. `relu`, `network`).
    #[arg(long, hide = true)]
    corrupt_gradient: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
struct SeedList(Vec<u64>);

fn parse_seeds(text: &str) -> Result<SeedList, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|e| format!("{part}: {e}"))?;
                let b: u64 = b.trim().parse().map_err(|e| format!("{part}: {e}"))?;
                if a > b {
                    return Err(format!("empty seed range {part}"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|e| format!("{part}: {e}"))?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

/// Usage and configuration problems exit with 2, run failures with 1.
enum Failure {
    Usage(String),
    Run(String),
}

impl Failure {
    fn run(e: impl std::fmt::Display) -> Self {
        Failure::Run(e.to_string())
    }
}

fn resolve_dataset(name: &str, data_root: Option<&Path>) -> (PathBuf, String) {
    let as_path = Path::new(name);
    if as_path.is_dir() {
        let base = as_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.to_string());
        return (as_path.to_path_buf(), base);
    }
    let root = data_root
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    (root, name.to_string())
}

fn load(name: &str, data_root: Option<&Path>) -> Result<Dataset, Failure> {
    let (root, name) = resolve_dataset(name, data_root);
    let started = std::time::Instant::now();
    let ds = load_tu_dataset(&root, &name).map_err(Failure::run)?;
    log::info!(
        "loaded {} ({} graphs, {} nodes, {} features, {} classes) in {:.2}s",
        ds.name,
        ds.len(),
        ds.total_nodes(),
        ds.num_features,
        ds.num_classes,
        started.elapsed().as_secs_f64()
    );
    Ok(ds)
}

fn output_dir(out: Option<&Path>, dataset: &str) -> Result<PathBuf, Failure> {
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let name = Path::new(dataset).file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            PathBuf::from("runs").join(name).join(stamp.to_string())
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::run)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct FitReport<'a> {
    #[serde(flatten)]
    row: FitRow,
    fit_range: [usize; 2],
    points: usize,
    ig: &'a [f64],
}

fn analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let name = args.data.dataset.ok_or_else(|| Failure::Usage("--dataset is required".into()))?;
    if args.kmax < 3 {
        return Err(Failure::Usage("--kmax must be at least 3 to fit a decay".into()));
    }
    if !(args.epsilon > 0.0 && args.epsilon < 1.0) {
        return Err(Failure::Usage(format!("--epsilon must lie in (0, 1), got {}", args.epsilon)));
    }
    let ds = load(&name, args.data.data_root.as_deref())?;
    let out = output_dir(args.data.out.as_deref(), &name)?;

    let opts = EntropyOptions {
        node_cap: (args.node_cap > 0).then_some(args.node_cap),
        seed: args.seed,
        ..EntropyOptions::new(args.kmax)
    };
    let table = local_entropy(&ds, &opts).map_err(Failure::run)?;
    let curve: IgCurve = ig_curve(&table).map_err(Failure::run)?;
    curve.write_csv(create(&out.join("ig_curve.csv"))?).map_err(Failure::run)?;
    for k in 1..=curve.k_max() {
        println!("IG({k}) = {:.6}", curve.ig(k));
    }

    let range = 2..=args.kmax;
    let fit = fit_exponential(&curve, range.clone()).map_err(|e| Failure::Run(format!("fit failed: {e}")))?;
    let selection = select_k(&fit, args.epsilon).map_err(|e| Failure::Run(format!("k selection failed: {e}")))?;
    let row = FitRow::new(&ds.name, &fit, &selection);
    row.write_csv(create(&out.join("fit.csv"))?).map_err(Failure::run)?;
    write_json(
        &out.join("fit.json"),
        &FitReport {
            row,
            fit_range: [*range.start(), *range.end()],
            points: fit.points,
            ig: &curve.values,
        },
    )?;
    println!("fit: a = {:.4}, b = {:.4}, R^2 = {:.4}, MSE = {:.3e}", fit.a, fit.b, fit.r2, fit.mse);
    println!(
        "k_hat = {} (information loss {:.2}% at epsilon {})",
        selection.k_hat,
        100.0 * selection.loss,
        args.epsilon
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &args.data.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(c) = args.conv {
        cfg.conv = match c {
            ConvArg::Licheb => ConvKind::Licheb,
            ConvArg::Limixhop => ConvKind::Limixhop,
        };
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(k, layers, hidden, batch_size, lr, max_epochs, patience);
    if let Some(SeedList(seeds)) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if args.rho_v.is_some() {
        cfg.rho_v = args.rho_v;
    }
    if args.rho_e.is_some() {
        cfg.rho_e = args.rho_e;
    }
    if args.no_nf {
        cfg.nf = false;
    }
    if args.no_pool {
        cfg.pool_nodes = false;
        cfg.pool_edges = false;
    }
    if args.no_edge_pool {
        cfg.pool_edges = false;
    }
    if cfg.dataset.is_empty() {
        return Err(Failure::Usage("a dataset is required (--dataset or config)".into()));
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = train_config(&args)?;
    let ds = load(&cfg.dataset, args.data.data_root.as_deref())?;
    let out = output_dir(args.data.out.as_deref(), &cfg.dataset)?;
    // a directory given as --dataset is reported by its dataset name
    cfg.dataset = ds.name.clone();

    let report = run_experiment(&cfg, &ds).map_err(Failure::run)?;
    write_json(&out.join("report.json"), &report)?;
    report.write_csv_row(create(&out.join("report.csv"))?).map_err(Failure::run)?;

    for seed in &report.per_seed {
        match seed.test_accuracy {
            Some(acc) => println!(
                "seed {}: test accuracy {:.4} (best epoch {}, {} epochs)",
                seed.seed, acc, seed.best_epoch, seed.epochs
            ),
            None => println!("seed {}: failed: {}", seed.seed, seed.error.as_deref().unwrap_or("unknown")),
        }
    }
    println!(
        "{} on {}: {} over {} seed(s), {} parameters, majority baseline {:.4}",
        report.model,
        report.dataset,
        report.accuracy_cell(),
        report.per_seed.len() - report.failed_seeds.len(),
        report.params.total,
        report.majority_baseline
    );
    println!("wrote {}", out.display());

    if !report.pool_violations.is_empty() {
        return Err(Failure::Run(format!("pooling invariant violated: {}", report.pool_violations[0])));
    }
    if report.failed_seeds.len() == report.per_seed.len() {
        return Err(Failure::Run("every seed failed".into()));
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let outcomes = run_all(&VerifyOptions {
        corrupt_gradient: args.corrupt_gradient,
    });
    for o in &outcomes {
        println!("{} {:<34} {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    println!("{} of {} checks passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("failing checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3").unwrap(), SeedList(vec![3]));
        assert_eq!(parse_seeds("0-3,7").unwrap(), SeedList(vec![0, 1, 2, 3, 7]));
        assert!(parse_seeds("5-2").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }
}
