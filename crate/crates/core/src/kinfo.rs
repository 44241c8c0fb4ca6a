//! Neighborhood information analysis.
//!
//! For every channel `c` a global Gaussian KDE `G_c` is fitted on all feature
//! values. Around each node `i` the values inside its `k`-hop neighborhood
//! are re-weighted by `G_c` and normalized into a local distribution whose
//! entropy is the node's k-hop information `H(i, c, k)`. The information gain
//! `IG(k)` is the channel-averaged KL divergence between the dataset-wide
//! densities of `H(., c, k)` and `H(., c, k - 1)`. Fitting `IG(k) = a e^{-bk}`
//! gives a closed form for the fraction of total gain lost by truncating the
//! convolution order at `k`, namely `e^{-bk}`.

use std::collections::HashMap;
use std::io::Write;
use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{hop_levels, Dataset};

pub const DENSITY_FLOOR: f64 = 1e-12;
pub const KL_GRID_POINTS: usize = 512;
pub const KL_GRID_PAD: f64 = 3.0;
pub const DEFAULT_NODE_CAP: usize = 20_000;

/// Kernel mass beyond this many bandwidths is below `1e-21` and skipped.
const KERNEL_CUTOFF: f64 = 10.0;

#[derive(Debug, Error)]
pub enum KinfoError {
    #[error("density estimation needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("all samples are identical; the channel carries no density information")]
    Degenerate,

    #[error("k_max must be at least 1")]
    InvalidKMax,

    #[error("dataset has constant features")]
    ConstantFeatures,

    #[error("exponential fit needs at least 3 positive points, only {0} usable")]
    TooFewPoints(usize),

    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),

    #[error("decay rate b must be positive to select k, got {0}")]
    NonPositiveRate(f64),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One-dimensional Gaussian kernel density estimate with Scott's bandwidth.
#[derive(Debug, Clone)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
    floor: f64,
}

impl Kde {
    /// Fits a KDE with `h = std * m^{-1/5}`, floored at `1e-3 * max(1, |mean|)`.
    ///
    /// Identical samples are reported as [`KinfoError::Degenerate`].
    pub fn fit(samples: &[f64]) -> Result<Self, KinfoError> {
        if samples.len() < 2 {
            return Err(KinfoError::TooFewSamples {
                needed: 2,
                got: samples.len(),
            });
        }
        if samples.iter().all(|&s| s == samples[0]) {
            return Err(KinfoError::Degenerate);
        }
        Ok(Self::build(samples))
    }

    /// Like [`Kde::fit`] but accepts a single sample or identical samples, in
    /// which case the bandwidth floor alone sets the kernel width.
    pub fn fit_lenient(samples: &[f64]) -> Result<Self, KinfoError> {
        if samples.is_empty() {
            return Err(KinfoError::TooFewSamples { needed: 1, got: 0 });
        }
        Ok(Self::build(samples))
    }

    fn build(samples: &[f64]) -> Self {
        let m = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / m;
        let std = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        let bandwidth = (std * m.powf(-0.2)).max(1e-3 * mean.abs().max(1.0));
        let mut sorted = samples.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        Self {
            samples: sorted,
            bandwidth,
            floor: DENSITY_FLOOR,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn min(&self) -> f64 {
        self.samples[0]
    }

    pub fn max(&self) -> f64 {
        *self.samples.last().unwrap()
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.samples.partition_point(|&s| s < x - KERNEL_CUTOFF * h);
        let hi = self.samples.partition_point(|&s| s <= x + KERNEL_CUTOFF * h);
        let sum: f64 = self.samples[lo..hi]
            .iter()
            .map(|&s| {
                let u = (x - s) / h;
                (-0.5 * u * u).exp()
            })
            .sum();
        let norm = self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt();
        (sum / norm).max(self.floor)
    }
}

/// How the k-hop value collection is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// One term per node within distance `k`, center included.
    #[default]
    Multiset,
    /// One term per distinct feature value within distance `k`.
    DistinctValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyOptions {
    pub k_max: usize,
    /// Upper bound on the number of center nodes; `None` uses every node.
    pub node_cap: Option<usize>,
    pub seed: u64,
    pub neighborhood: Neighborhood,
}

impl EntropyOptions {
    pub fn new(k_max: usize) -> Self {
        Self {
            k_max,
            node_cap: Some(DEFAULT_NODE_CAP),
            seed: 0,
            neighborhood: Neighborhood::Multiset,
        }
    }
}

/// `H(i, c, k)` for a set of center nodes, every channel and `k = 0..=k_max`.
#[derive(Debug, Clone)]
pub struct EntropyTable {
    pub k_max: usize,
    pub num_channels: usize,
    /// `(graph, node)` of every center, in table order.
    pub centers: Vec<(usize, usize)>,
    /// Channels with zero variance over the dataset; their rows are zero.
    pub degenerate: Vec<bool>,
    /// `|F(i, c, k)|` in multiset mode, indexed `[center][k]`.
    sizes: Vec<usize>,
    /// Indexed `[channel][k][center]`.
    values: Vec<f64>,
}

impl EntropyTable {
    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    /// Entropy samples of channel `c` at hop `k`, one per center.
    pub fn samples(&self, c: usize, k: usize) -> &[f64] {
        let n = self.centers.len();
        let start = (c * (self.k_max + 1) + k) * n;
        &self.values[start..start + n]
    }

    pub fn get(&self, center: usize, c: usize, k: usize) -> f64 {
        self.samples(c, k)[center]
    }

    /// Number of nodes within `k` hops of `center`.
    pub fn neighborhood_size(&self, center: usize, k: usize) -> usize {
        self.sizes[center * (self.k_max + 1) + k]
    }
}

/// Entropy `-sum p ln p` of the weights normalized to sum one.
fn normalized_entropy(weights: &[f64]) -> f64 {
    if weights.len() <= 1 {
        return 0.0;
    }
    let total: f64 = weights.iter().sum();
    let h: f64 = weights
        .iter()
        .map(|&w| {
            let p = w / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Computes the k-hop information of every (sampled) node and channel.
pub fn local_entropy(ds: &Dataset, opts: &EntropyOptions) -> Result<EntropyTable, KinfoError> {
    if opts.k_max < 1 {
        return Err(KinfoError::InvalidKMax);
    }
    let k_max = opts.k_max;
    let channels = ds.num_features;

    let mut centers: Vec<(usize, usize)> = ds
        .graphs
        .iter()
        .enumerate()
        .flat_map(|(g, graph)| (0..graph.n()).map(move |i| (g, i)))
        .collect();
    if let Some(cap) = opts.node_cap {
        if centers.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = rand::seq::index::sample(&mut rng, centers.len(), cap).into_vec();
            picked.sort_unstable();
            centers = picked.into_iter().map(|p| centers[p]).collect();
        }
    }

    // Global densities, evaluated once per distinct value.
    let densities: Vec<Option<HashMap<u64, f64>>> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let column: Vec<f64> = ds
                .graphs
                .iter()
                .flat_map(|g| g.x.column(c).to_vec())
                .collect();
            match Kde::fit(&column) {
                Ok(kde) => {
                    let mut table = HashMap::new();
                    for v in column {
                        table.entry(v.to_bits()).or_insert_with(|| kde.density(v));
                    }
                    Ok(Some(table))
                }
                Err(KinfoError::Degenerate) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, _>>()?;
    let degenerate: Vec<bool> = densities.iter().map(Option::is_none).collect();

    // Per center: sizes[k] and entropies[c][k].
    let rows: Vec<(Vec<usize>, Vec<f64>)> = centers
        .par_iter()
        .map(|&(g, i)| {
            let graph = &ds.graphs[g];
            let levels = hop_levels(&graph.adj, i, k_max);
            let mut sizes = Vec::with_capacity(k_max + 1);
            let mut count = 0;
            for level in &levels {
                count += level.len();
                sizes.push(count);
            }
            let mut ent = vec![0.0; channels * (k_max + 1)];
            for (c, density) in densities.iter().enumerate() {
                let Some(density) = density else { continue };
                let mut weights = Vec::new();
                let mut seen = std::collections::HashSet::new();
                for (k, level) in levels.iter().enumerate() {
                    for &j in level {
                        let v = graph.x[[j, c]];
                        if opts.neighborhood == Neighborhood::DistinctValues && !seen.insert(v.to_bits()) {
                            continue;
                        }
                        weights.push(density[&v.to_bits()]);
                    }
                    ent[c * (k_max + 1) + k] = normalized_entropy(&weights);
                }
            }
            (sizes, ent)
        })
        .collect();

    let n = centers.len();
    let mut values = vec![0.0; channels * (k_max + 1) * n];
    let mut sizes = Vec::with_capacity(n * (k_max + 1));
    for (center, (s, ent)) in rows.into_iter().enumerate() {
        sizes.extend(s);
        for (ck, h) in ent.into_iter().enumerate() {
            values[ck * n + center] = h;
        }
    }

    Ok(EntropyTable {
        k_max,
        num_channels: channels,
        centers,
        degenerate,
        sizes,
        values,
    })
}

fn trapezoid(ys: &[f64], dx: f64) -> f64 {
    if ys.len() < 2 {
        return 0.0;
    }
    let inner: f64 = ys[1..ys.len() - 1].iter().sum();
    dx * (inner + 0.5 * (ys[0] + ys[ys.len() - 1]))
}

/// `KL(p || q)` by trapezoid integration on a uniform grid covering both
/// supports padded by three bandwidths. Both densities are floored and
/// renormalized on the grid.
pub fn kl_divergence(p: &Kde, q: &Kde) -> f64 {
    let lo = (p.min() - KL_GRID_PAD * p.bandwidth()).min(q.min() - KL_GRID_PAD * q.bandwidth());
    let hi = (p.max() + KL_GRID_PAD * p.bandwidth()).max(q.max() + KL_GRID_PAD * q.bandwidth());
    let dx = (hi - lo) / (KL_GRID_POINTS - 1) as f64;
    let grid = (0..KL_GRID_POINTS).map(|i| lo + dx * i as f64);
    let (mut ps, mut qs): (Vec<f64>, Vec<f64>) =
        grid.map(|x| (p.density(x), q.density(x))).unzip();
    for ys in [&mut ps, &mut qs] {
        let z = trapezoid(ys, dx);
        for y in ys.iter_mut() {
            *y = (*y / z).max(DENSITY_FLOOR);
        }
    }
    let integrand: Vec<f64> = ps.iter().zip(&qs).map(|(&p, &q)| p * (p / q).ln()).collect();
    trapezoid(&integrand, dx)
}

/// `IG(k)` for `k = 0..=k_max` with `IG(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgCurve {
    pub values: Vec<f64>,
}

impl IgCurve {
    pub fn k_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn ig(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), KinfoError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "ig"])?;
        for (k, ig) in self.values.iter().enumerate() {
            w.write_record([k.to_string(), format!("{ig:?}")])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn ig_curve(table: &EntropyTable) -> Result<IgCurve, KinfoError> {
    let k_max = table.k_max;
    let channels: Vec<usize> = (0..table.num_channels)
        .filter(|&c| !table.degenerate[c])
        .collect();
    if channels.is_empty() {
        return Err(KinfoError::ConstantFeatures);
    }

    let per_channel: Vec<Vec<f64>> = channels
        .par_iter()
        .map(|&c| {
            let kdes = (0..=k_max)
                .map(|k| Kde::fit_lenient(table.samples(c, k)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((1..=k_max)
                .map(|k| {
                    let kl = kl_divergence(&kdes[k], &kdes[k - 1]);
                    if kl < -1e-9 {
                        log::warn!("channel {c}, k={k}: KL divergence {kl} below zero");
                    }
                    kl
                })
                .collect())
        })
        .collect::<Result<_, KinfoError>>()?;

    let mut values = vec![0.0; k_max + 1];
    for (k, value) in values.iter_mut().enumerate().skip(1) {
        let mean = per_channel.iter().map(|kl| kl[k - 1]).sum::<f64>() / channels.len() as f64;
        *value = mean.max(0.0);
    }
    Ok(IgCurve { values })
}

/// `IG(k) ~ a e^{-bk}` fitted by least squares in log space. `r2` and `mse`
/// are measured on the original scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub mse: f64,
    pub points: usize,
}

impl ExpFit {
    pub fn predict(&self, k: f64) -> f64 {
        self.a * (-self.b * k).exp()
    }
}

pub const DEFAULT_FIT_RANGE: RangeInclusive<usize> = 2..=10;

pub fn fit_exponential(curve: &IgCurve, k_range: RangeInclusive<usize>) -> Result<ExpFit, KinfoError> {
    let mut points = Vec::new();
    for k in k_range {
        let Some(&ig) = curve.values.get(k) else { break };
        if ig > 0.0 {
            points.push((k as f64, ig));
        } else {
            log::warn!("IG({k}) = {ig} is not positive; excluded from the fit");
        }
    }
    fit_points(&points)
}

fn fit_points(points: &[(f64, f64)]) -> Result<ExpFit, KinfoError> {
    if points.len() < 3 {
        return Err(KinfoError::TooFewPoints(points.len()));
    }
    let m = points.len() as f64;
    let mean_k = points.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_y = points.iter().map(|p| p.1.ln()).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_k).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_k) * (p.1.ln() - mean_y)).sum();
    let slope = sxy / sxx;
    let a = (mean_y - slope * mean_k).exp();
    let b = -slope;

    let mean_ig = points.iter().map(|p| p.1).sum::<f64>() / m;
    let ss_res: f64 = points.iter().map(|&(k, ig)| (ig - a * (-b * k).exp()).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|&(_, ig)| (ig - mean_ig).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(ExpFit {
        a,
        b,
        r2,
        mse: ss_res / m,
        points: points.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k_hat: usize,
    pub epsilon: f64,
    /// `e^{-b k_hat}`, the fraction of total gain forfeited.
    pub loss: f64,
}

/// Smallest `k >= 1` with `e^{-bk} <= epsilon`.
pub fn select_k(fit: &ExpFit, epsilon: f64) -> Result<KSelection, KinfoError> {
    select_k_for_rate(fit.b, epsilon)
}

pub fn select_k_for_rate(b: f64, epsilon: f64) -> Result<KSelection, KinfoError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(KinfoError::InvalidEpsilon(epsilon));
    }
    if !(b > 0.0) {
        return Err(KinfoError::NonPositiveRate(b));
    }
    // relative slack so that exact hits such as b = ln 10, eps = 0.1 count
    let within = |k: usize| (-b * k as f64).exp() <= epsilon * (1.0 + 1e-12);
    let mut k = ((1.0 / epsilon).ln() / b).ceil().max(1.0) as usize;
    while k > 1 && within(k - 1) {
        k -= 1;
    }
    while !within(k) {
        k += 1;
    }
    Ok(KSelection {
        k_hat: k,
        epsilon,
        loss: (-b * k as f64).exp(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRow {
    pub dataset: String,
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub mse: f64,
    pub k_hat: usize,
    pub epsilon: f64,
    pub loss_achieved: f64,
}

impl FitRow {
    pub fn new(dataset: &str, fit: &ExpFit, sel: &KSelection) -> Self {
        Self {
            dataset: dataset.to_string(),
            a: fit.a,
            b: fit.b,
            r2: fit.r2,
            mse: fit.mse,
            k_hat: sel.k_hat,
            epsilon: sel.epsilon,
            loss_achieved: sel.loss,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), KinfoError> {
        let mut w = csv::Writer::from_writer(out);
        w.serialize(self)?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
