//! Light k-order convolution, k-order pooling, readout and the classifier
//! head, plus parameter storage, Adam and checkpoints.
//!
//! A [`LiConv`] layer projects node features once (`X W`), propagates the
//! projection to hops `0..=k` to form the anchor vectors `Z[m] = T_m X W`,
//! and merges them with one per-channel weight vector per hop:
//! `z'_i = sum_m z_i^m * w^m + b`. Its trainable size is `(d + k + 1) d'`
//! plus the bias, against `(k + 1) d d'` for a coupled Chebyshev layer.
//!
//! A [`KPool`] layer scores nodes from the concatenated anchors,
//! `w_i = relu(theta . [z_i^0 | .. | z_i^k])`, rescales features by the score
//! (optionally after projecting them onto the unit sphere), keeps the
//! top-scoring nodes of every member graph and then the edges whose endpoint
//! features differ most.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::graph::{Adjacency, Batch, GraphError};
use crate::spectral::{KernelKind, PropagationPlan};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by `{op}` in the forward pass")]
    NonFinite { op: &'static str },

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every tensor on `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let record = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            tensors: self
                .params
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    values: p.value.iter().copied().collect(),
                })
                .collect(),
        };
        let err = |message: String| NnError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string(&record).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let err = |message: String| NnError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let record: CheckpointFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported format {} v{}",
                record.format, record.version
            )));
        }
        let mut store = ParamStore::default();
        for t in record.tensors {
            let value = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.values)
                .map_err(|e| err(format!("tensor {}: {e}", t.name)))?;
            store.add(t.name, value);
        }
        Ok(store)
    }
}

pub const CHECKPOINT_FORMAT: &str = "korder-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Weight count of a coupled k-order layer with one `d x d'` matrix per hop.
pub fn coupled_conv_params(in_dim: usize, out_dim: usize, k: usize) -> usize {
    (k + 1) * in_dim * out_dim
}

/// Light k-order convolution parameters: shared projection, per-hop merge
/// vectors and a single bias.
#[derive(Debug, Clone)]
pub struct LiConv {
    pub kernel: KernelKind,
    pub k: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub merge: Vec<ParamId>,
    pub bias: ParamId,
}

/// Anchor vectors `Z[m] = T_m X W` (one `n x d'` slice per hop) and the
/// merged, pre-activation layer output.
#[derive(Debug, Clone)]
pub struct ConvOutput {
    pub anchors: Vec<Var>,
    pub out: Var,
}

impl LiConv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kernel: KernelKind,
        k: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), glorot(in_dim, out_dim, rng));
        let merge = (0..=k)
            .map(|m| store.add(format!("{prefix}.merge{m}"), Array2::ones((1, out_dim))))
            .collect();
        let bias = store.add(format!("{prefix}.bias"), Array2::zeros((1, out_dim)));
        Self {
            kernel,
            k,
            in_dim,
            out_dim,
            weight,
            merge,
            bias,
        }
    }

    /// `(d + k + 1) d'`, excluding the bias.
    pub fn weight_count(&self) -> usize {
        (self.in_dim + self.k + 1) * self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], adj: &Adjacency, x: Var) -> Result<ConvOutput, NnError> {
        let (rows, cols) = tape.value(x).dim();
        if rows != adj.n() || cols != self.in_dim {
            return Err(NnError::Shape(format!(
                "conv expects {} x {}, got {rows} x {cols}",
                adj.n(),
                self.in_dim
            )));
        }
        let plan = PropagationPlan::new(self.kernel, adj, self.k);
        let op = &plan.operator;

        let projected = tape.matmul(x, params[self.weight.0]);
        let mut anchors = vec![projected];
        for m in 1..=self.k {
            let next = match self.kernel {
                KernelKind::Chebyshev if m == 1 => tape.sparse_matmul(op, anchors[0]),
                KernelKind::Chebyshev => {
                    let t = tape.sparse_matmul(op, anchors[m - 1]);
                    let t = tape.scale(t, 2.0);
                    tape.sub(t, anchors[m - 2])
                }
                KernelKind::Mixhop => tape.sparse_matmul(op, anchors[m - 1]),
            };
            anchors.push(next);
        }

        let mut out = tape.mul_row(anchors[0], params[self.merge[0].0]);
        for m in 1..=self.k {
            let term = tape.mul_row(anchors[m], params[self.merge[m].0]);
            out = tape.add(out, term);
        }
        let out = tape.add_row(out, params[self.bias.0]);
        Ok(ConvOutput { anchors, out })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Fraction of nodes kept per member graph, in `(0, 1]`.
    pub node_ratio: f64,
    /// Fraction of surviving edges kept per member graph, in `(0, 1]`.
    pub edge_ratio: f64,
    /// Project features onto the unit sphere before score scaling.
    pub normalize: bool,
    pub pool_nodes: bool,
    pub pool_edges: bool,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        for (name, r) in [("node ratio", self.node_ratio), ("edge ratio", self.edge_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(NnError::Config(format!("{name} must lie in (0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// `ceil(ratio * count)` for the node budget, never below one.
pub fn node_keep_count(ratio: f64, count: usize) -> usize {
    if count == 0 {
        return 0;
    }
    ((ratio * count as f64 - 1e-9).ceil() as usize).clamp(1, count)
}

/// `ceil(ratio * count)` for the edge budget.
pub fn edge_keep_count(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64 - 1e-9).ceil().max(0.0) as usize).min(count)
}

#[derive(Debug, Clone)]
pub struct KPool {
    pub k: usize,
    pub dim: usize,
    pub theta: ParamId,
    pub config: PoolConfig,
}

#[derive(Debug, Clone)]
pub struct PoolResult {
    /// Kept union-node indices of the input batch, ascending.
    pub kept_nodes: Vec<usize>,
    /// Kept undirected edges in input-batch indices, `i < j`.
    pub kept_edges: Vec<(usize, usize)>,
    /// `w_i` for every input node.
    pub node_scores: Vec<f64>,
    /// `w_ij = exp(|x_i - x_j|)` for the kept edges.
    pub edge_scores: Vec<f64>,
    /// Features of the kept nodes.
    pub x: Var,
    /// Pooled batch; its `x` holds the forward values of `x`.
    pub batch: Batch,
}

impl KPool {
    pub fn new(store: &mut ParamStore, prefix: &str, k: usize, dim: usize, config: PoolConfig, rng: &mut ChaCha8Rng) -> Self {
        let theta = store.add(format!("{prefix}.theta"), glorot((k + 1) * dim, 1, rng));
        Self { k, dim, theta, config }
    }

    /// Scores, rescales and prunes one batch. `batch.x` must hold the layer
    /// input features (edge scores are measured on them); `anchors` and
    /// `features` come from the preceding convolution.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        batch: &Batch,
        anchors: &[Var],
        features: Var,
    ) -> Result<PoolResult, NnError> {
        if anchors.len() != self.k + 1 {
            return Err(NnError::Shape(format!(
                "pool expects {} anchor slices, got {}",
                self.k + 1,
                anchors.len()
            )));
        }
        if tape.value(features).dim() != (batch.n(), self.dim) {
            return Err(NnError::Shape(format!(
                "pool expects {} x {} features, got {:?}",
                batch.n(),
                self.dim,
                tape.value(features).dim()
            )));
        }

        let stacked = tape.concat(anchors);
        let raw = tape.matmul(stacked, params[self.theta.0]);
        let scores = tape.relu(raw);
        let base = if self.config.normalize {
            tape.row_normalize(features)
        } else {
            features
        };
        let scaled = tape.row_scale(base, scores);
        let node_scores: Vec<f64> = tape.value(scores).iter().copied().collect();

        let kept_nodes = self.select_nodes(batch, &node_scores);
        let (kept_edges, edge_scores) = self.select_edges(batch, &kept_nodes);

        let x = tape.gather_rows(scaled, &kept_nodes);
        let mut remap = vec![usize::MAX; batch.n()];
        for (new, &old) in kept_nodes.iter().enumerate() {
            remap[old] = new;
        }
        let pairs: Vec<(usize, usize)> = kept_edges.iter().map(|&(i, j)| (remap[i], remap[j])).collect();
        let graph_id: Vec<usize> = kept_nodes.iter().map(|&i| batch.graph_id[i]).collect();
        let mut offsets = vec![0; batch.num_graphs() + 1];
        for &g in &graph_id {
            offsets[g + 1] += 1;
        }
        for g in 0..batch.num_graphs() {
            offsets[g + 1] += offsets[g];
        }
        let pooled = Batch {
            adj: Adjacency::from_undirected(kept_nodes.len(), &pairs)?,
            x: tape.value(x).clone(),
            graph_id,
            offsets,
            labels: batch.labels.clone(),
        };

        Ok(PoolResult {
            kept_nodes,
            kept_edges,
            node_scores,
            edge_scores,
            x,
            batch: pooled,
        })
    }

    fn select_nodes(&self, batch: &Batch, scores: &[f64]) -> Vec<usize> {
        if !self.config.pool_nodes {
            return (0..batch.n()).collect();
        }
        let mut kept = Vec::new();
        for g in 0..batch.num_graphs() {
            let mut members: Vec<usize> = batch.member_range(g).collect();
            members.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            members.truncate(node_keep_count(self.config.node_ratio, batch.member_range(g).len()));
            members.sort_unstable();
            kept.extend(members);
        }
        kept
    }

    fn select_edges(&self, batch: &Batch, kept_nodes: &[usize]) -> (Vec<(usize, usize)>, Vec<f64>) {
        let mut alive = vec![false; batch.n()];
        for &i in kept_nodes {
            alive[i] = true;
        }
        let mut per_graph: Vec<Vec<(f64, (usize, usize))>> = vec![Vec::new(); batch.num_graphs()];
        for (i, j) in batch.adj.undirected_edges() {
            if alive[i] && alive[j] {
                let diff = &batch.x.row(i) - &batch.x.row(j);
                per_graph[batch.graph_id[i]].push((diff.dot(&diff).sqrt(), (i, j)));
            }
        }
        let mut kept = Vec::new();
        for mut edges in per_graph {
            if self.config.pool_edges {
                // exp is monotone, so ranking by distance ranks by w_ij
                edges.sort_by(|a, b| match b.0.total_cmp(&a.0) {
                    Ordering::Equal => a.1.cmp(&b.1),
                    other => other,
                });
                let keep = edge_keep_count(self.config.edge_ratio, edges.len());
                edges.truncate(keep);
            }
            kept.extend(edges);
        }
        kept.sort_by(|a, b| a.1.cmp(&b.1));
        kept.into_iter().map(|(d, e)| (e, d.exp())).unzip()
    }
}

/// Checks the structural guarantees of one pooling step.
pub fn check_pool_invariants(input: &Batch, result: &PoolResult, config: &PoolConfig) -> Result<(), String> {
    let mut alive = vec![false; input.n()];
    for &i in &result.kept_nodes {
        alive[i] = true;
    }
    if result.kept_nodes.windows(2).any(|w| w[0] >= w[1]) {
        return Err("kept nodes are not strictly ascending".into());
    }
    for g in 0..input.num_graphs() {
        let n_g = input.member_range(g).len();
        let kept = input.member_range(g).filter(|&i| alive[i]).count();
        let want = if config.pool_nodes {
            node_keep_count(config.node_ratio, n_g)
        } else {
            n_g
        };
        if kept != want || (n_g > 0 && kept == 0) {
            return Err(format!("graph {g}: kept {kept} of {n_g} nodes, expected {want}"));
        }
        let candidates = input
            .adj
            .undirected_edges()
            .filter(|&(i, j)| input.graph_id[i] == g && alive[i] && alive[j])
            .count();
        let kept_edges = result.kept_edges.iter().filter(|&&(i, _)| input.graph_id[i] == g).count();
        let budget = if config.pool_edges {
            edge_keep_count(config.edge_ratio, candidates)
        } else {
            candidates
        };
        if kept_edges > budget {
            return Err(format!("graph {g}: kept {kept_edges} edges, budget {budget}"));
        }
    }
    if let Some(&(i, j)) = result.kept_edges.iter().find(|&&(i, j)| !alive[i] || !alive[j] || !input.adj.contains(i, j)) {
        return Err(format!("edge ({i}, {j}) does not join two kept nodes"));
    }
    if result.batch.n() != result.kept_nodes.len() || !result.batch.adj.is_symmetric() {
        return Err("pooled batch is inconsistent with the kept nodes".into());
    }
    Ok(())
}

/// Per-graph `[mean | max]` over node rows.
pub fn readout(tape: &mut Tape, x: Var, offsets: &[usize]) -> Var {
    let mean = tape.segment_mean(x, offsets);
    let max = tape.segment_max(x, offsets);
    tape.concat(&[mean, max])
}

/// Two-layer MLP `2d' -> d' -> C` with ReLU and dropout after the hidden layer.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub dropout: f64,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, in_dim: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden_weight: store.add("classifier.hidden_weight", glorot(in_dim, hidden, rng)),
            hidden_bias: store.add("classifier.hidden_bias", Array2::zeros((1, hidden))),
            out_weight: store.add("classifier.out_weight", glorot(hidden, classes, rng)),
            out_bias: store.add("classifier.out_bias", Array2::zeros((1, classes))),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], h: Var, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Var {
        let z = tape.matmul(h, params[self.hidden_weight.0]);
        let z = tape.add_row(z, params[self.hidden_bias.0]);
        let mut z = tape.relu(z);
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let mask = Array2::from_shape_fn(tape.value(z).raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                z = tape.mul_const(z, mask);
            }
        }
        let logits = tape.matmul(z, params[self.out_weight.0]);
        tape.add_row(logits, params[self.out_bias.0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kernel: KernelKind,
    pub k: usize,
    pub layers: usize,
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `None` disables pooling (convolution-only network).
    pub pool: Option<PoolConfig>,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers < 1 {
            return Err(NnError::Config("at least one conv block is required".into()));
        }
        if self.hidden < 1 || self.in_dim < 1 || self.classes < 1 {
            return Err(NnError::Config("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if let Some(pool) = &self.pool {
            pool.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub layers: Vec<LayerCount>,
}

/// Stacked `[LiConv -> ReLU -> KPool]` blocks with summed readouts and an MLP head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub convs: Vec<LiConv>,
    pub pools: Vec<KPool>,
    pub classifier: Classifier,
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

pub struct ForwardPass {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub logits: Var,
    /// Input batch of every pooling step, paired with its result.
    pub pools: Vec<(Batch, PoolResult)>,
}

pub struct Step {
    pub loss: f64,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Array2<f64>>,
    pub pools: Vec<(Batch, PoolResult)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        for l in 0..config.layers {
            let in_dim = if l == 0 { config.in_dim } else { config.hidden };
            convs.push(LiConv::new(
                &mut params,
                &format!("conv{l}"),
                config.kernel,
                config.k,
                in_dim,
                config.hidden,
                &mut rng,
            ));
            if let Some(pool) = config.pool {
                pools.push(KPool::new(&mut params, &format!("pool{l}"), config.k, config.hidden, pool, &mut rng));
            }
        }
        let classifier = Classifier::new(&mut params, 2 * config.hidden, config.hidden, config.classes, config.dropout, &mut rng);
        Ok(Self {
            config,
            params,
            convs,
            pools,
            classifier,
        })
    }

    /// Element counts grouped by layer prefix (`conv0`, `pool0`, .., `classifier`).
    pub fn param_count(&self) -> ParamCount {
        let mut layers: Vec<LayerCount> = Vec::new();
        for p in self.params.iter() {
            let name = p.name.split('.').next().unwrap_or(&p.name).to_string();
            match layers.last_mut() {
                Some(last) if last.name == name => last.params += p.value.len(),
                _ => layers.push(LayerCount {
                    name,
                    params: p.value.len(),
                }),
            }
        }
        ParamCount {
            total: self.params.element_count(),
            layers,
        }
    }

    /// Replaces the parameters with `store`, which must match by name and shape.
    pub fn load_params(&mut self, store: ParamStore) -> Result<(), NnError> {
        let compatible = store.len() == self.params.len()
            && store
                .iter()
                .zip(self.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim());
        if !compatible {
            return Err(NnError::Shape("checkpoint does not match the model layout".into()));
        }
        self.params = store;
        Ok(())
    }

    pub fn forward(&self, batch: &Batch, mode: Mode<'_>) -> Result<ForwardPass, NnError> {
        if batch.x.ncols() != self.config.in_dim {
            return Err(NnError::Shape(format!(
                "model expects {} input channels, batch has {}",
                self.config.in_dim,
                batch.x.ncols()
            )));
        }
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let mut current = batch.clone();
        let mut h = tape.leaf(batch.x.clone());
        let mut summed: Option<Var> = None;
        let mut pools = Vec::new();

        for (l, conv) in self.convs.iter().enumerate() {
            let out = conv.forward(&mut tape, &params, &current.adj, h)?;
            let act = tape.relu(out.out);
            if let Some(pool) = self.pools.get(l) {
                let result = pool.forward(&mut tape, &params, &current, &out.anchors, act)?;
                h = result.x;
                let next = result.batch.clone();
                pools.push((std::mem::replace(&mut current, next), result));
            } else {
                h = act;
            }
            let r = readout(&mut tape, h, &current.offsets);
            summed = Some(match summed {
                Some(s) => tape.add(s, r),
                None => r,
            });
        }

        let rng = match mode {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        };
        let logits = self.classifier.forward(&mut tape, &params, summed.expect("at least one layer"), rng);
        if let Some(op) = tape.first_non_finite() {
            return Err(NnError::NonFinite { op });
        }
        Ok(ForwardPass {
            tape,
            params,
            logits,
            pools,
        })
    }

    /// Mean softmax cross-entropy on `batch` and its gradient for every parameter.
    pub fn loss_and_backward(&self, batch: &Batch, mode: Mode<'_>) -> Result<Step, NnError> {
        let mut pass = self.forward(batch, mode)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, &batch.labels);
        if let Some(op) = pass.tape.first_non_finite() {
            return Err(NnError::NonFinite { op });
        }
        let grads = pass.tape.backward(loss);
        let grads = pass
            .params
            .iter()
            .zip(self.params.iter())
            .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
            .collect();
        Ok(Step {
            loss: pass.tape.scalar(loss),
            grads,
            pools: pass.pools,
        })
    }

    /// Logits in evaluation mode.
    pub fn predict(&self, batch: &Batch) -> Result<Array2<f64>, NnError> {
        let pass = self.forward(batch, Mode::Eval)?;
        Ok(pass.tape.value(pass.logits).clone())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
