//! Reader and writer for the plain-text TU benchmark layout.
//!
//! A dataset `NAME` is a directory of files `NAME_A.txt` (1-based edge pairs),
//! `NAME_graph_indicator.txt` (1-based graph id per node),
//! `NAME_graph_labels.txt` (one label per graph) and the optional
//! `NAME_node_labels.txt` / `NAME_node_attributes.txt`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{Adjacency, Dataset, Graph, GraphError};

struct Lines {
    path: String,
    text: String,
}

impl Lines {
    fn read(path: &Path) -> Result<Self, GraphError> {
        let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self {
            path: path.display().to_string(),
            text,
        })
    }

    /// Non-empty lines with their 1-based line numbers.
    fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
    }

    fn error(&self, line: usize, message: impl Into<String>) -> GraphError {
        GraphError::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn parse_field<T: std::str::FromStr>(&self, line: usize, field: &str) -> Result<T, GraphError> {
        field
            .trim()
            .parse()
            .map_err(|_| self.error(line, format!("cannot parse {:?}", field.trim())))
    }

    fn integers(&self) -> Result<Vec<(usize, i64)>, GraphError> {
        self.iter()
            .map(|(ln, l)| Ok((ln, self.parse_field(ln, l)?)))
            .collect()
    }
}

/// Resolves `root/NAME/NAME_<suffix>.txt`, falling back to `root/NAME_<suffix>.txt`.
fn dataset_dir(root: &Path, name: &str) -> PathBuf {
    let nested = root.join(name);
    if nested.join(format!("{name}_A.txt")).exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn file(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

pub fn load_tu_dataset(root: impl AsRef<Path>, name: &str) -> Result<Dataset, GraphError> {
    let dir = dataset_dir(root.as_ref(), name);

    let indicator = Lines::read(&file(&dir, name, "graph_indicator"))?;
    let graph_of: Vec<(usize, i64)> = indicator.integers()?;
    let n_total = graph_of.len();
    let mut node_graph = Vec::with_capacity(n_total);
    let mut prev = 1i64;
    for &(ln, gid) in &graph_of {
        if gid < 1 {
            return Err(indicator.error(ln, format!("graph id {gid} is not 1-based")));
        }
        if gid < prev {
            return Err(indicator.error(ln, "graph ids must be non-decreasing"));
        }
        prev = gid;
        node_graph.push(gid as usize - 1);
    }

    let graph_labels = Lines::read(&file(&dir, name, "graph_labels"))?;
    let raw_labels = graph_labels.integers()?;
    let n_graphs = raw_labels.len();
    if node_graph.last().is_some_and(|&g| g + 1 > n_graphs) {
        return Err(GraphError::Inconsistent(format!(
            "graph indicator references graph {} but only {n_graphs} graph labels exist",
            node_graph.last().unwrap() + 1
        )));
    }
    let classes: BTreeSet<i64> = raw_labels.iter().map(|&(_, l)| l).collect();
    let classes: Vec<i64> = classes.into_iter().collect();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|&(_, l)| classes.binary_search(&l).unwrap())
        .collect();

    let mut offsets = vec![0usize; n_graphs + 1];
    for &g in &node_graph {
        offsets[g + 1] += 1;
    }
    for g in 0..n_graphs {
        offsets[g + 1] += offsets[g];
    }

    let features = node_features(&dir, name, n_total)?;
    let edges = read_edges(&file(&dir, name, "A"), &node_graph)?;

    let mut per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_graphs];
    for (a, b) in edges {
        let g = node_graph[a];
        per_graph[g].push((a - offsets[g], b - offsets[g]));
    }

    let d = features.ncols();
    let mut graphs = Vec::with_capacity(n_graphs);
    for (g, pairs) in per_graph.into_iter().enumerate() {
        let (lo, hi) = (offsets[g], offsets[g + 1]);
        let adj = Adjacency::from_undirected(hi - lo, &pairs)?;
        let x = features.slice(ndarray::s![lo..hi, ..]).to_owned();
        debug_assert_eq!(x.ncols(), d);
        graphs.push(Graph::new(adj, x, labels[g])?);
    }
    Dataset::new(name, graphs)
}

/// Reads the edge file and returns each undirected edge once, 0-based, `a < b`.
fn read_edges(path: &Path, node_graph: &[usize]) -> Result<Vec<(usize, usize)>, GraphError> {
    let lines = Lines::read(path)?;
    let n = node_graph.len();
    let mut directed: Vec<(usize, usize, usize)> = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0usize;
    let mut self_loops = 0usize;
    for (ln, l) in lines.iter() {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(lines.error(ln, "expected two comma-separated node indices"));
        };
        let a: usize = lines.parse_field(ln, a)?;
        let b: usize = lines.parse_field(ln, b)?;
        for node in [a, b] {
            if node == 0 || node > n {
                return Err(GraphError::DanglingNode {
                    path: lines.path.clone(),
                    line: ln,
                    node,
                    count: n,
                });
            }
        }
        let (a, b) = (a - 1, b - 1);
        if node_graph[a] != node_graph[b] {
            return Err(GraphError::CrossGraphEdge {
                path: lines.path.clone(),
                line: ln,
                from: a + 1,
                to: b + 1,
            });
        }
        if a == b {
            self_loops += 1;
            continue;
        }
        if !seen.insert((a, b)) {
            duplicates += 1;
            continue;
        }
        directed.push((ln, a, b));
    }
    if duplicates > 0 {
        log::warn!("{}: dropped {duplicates} duplicate edge lines", lines.path);
    }
    if self_loops > 0 {
        log::warn!("{}: dropped {self_loops} self-loops", lines.path);
    }
    for &(ln, a, b) in &directed {
        if !seen.contains(&(b, a)) {
            return Err(GraphError::AsymmetricEdge {
                path: lines.path.clone(),
                line: ln,
                from: a + 1,
                to: b + 1,
            });
        }
    }
    Ok(directed
        .into_iter()
        .filter(|&(_, a, b)| a < b)
        .map(|(_, a, b)| (a, b))
        .collect())
}

/// One-hot node labels followed by continuous attributes, whichever exist.
fn node_features(dir: &Path, name: &str, n: usize) -> Result<Array2<f64>, GraphError> {
    let labels_path = file(dir, name, "node_labels");
    let attrs_path = file(dir, name, "node_attributes");

    let one_hot = if labels_path.exists() {
        let lines = Lines::read(&labels_path)?;
        let raw = lines.integers()?;
        if raw.len() != n {
            return Err(GraphError::Inconsistent(format!(
                "{} has {} lines, expected {n}",
                lines.path,
                raw.len()
            )));
        }
        let values: BTreeSet<i64> = raw.iter().map(|&(_, v)| v).collect();
        let values: Vec<i64> = values.into_iter().collect();
        let mut m = Array2::zeros((n, values.len()));
        for (i, &(_, v)) in raw.iter().enumerate() {
            m[[i, values.binary_search(&v).unwrap()]] = 1.0;
        }
        Some(m)
    } else {
        None
    };

    let attrs = if attrs_path.exists() {
        let lines = Lines::read(&attrs_path)?;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (ln, l) in lines.iter() {
            let row = l
                .split(',')
                .map(|f| lines.parse_field::<f64>(ln, f))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(lines.error(
                        ln,
                        format!("expected {} attributes, found {}", first.len(), row.len()),
                    ));
                }
            }
            rows.push(row);
        }
        if rows.len() != n {
            return Err(GraphError::Inconsistent(format!(
                "{} has {} lines, expected {n}",
                lines.path,
                rows.len()
            )));
        }
        let width = rows.first().map_or(0, Vec::len);
        Some(Array2::from_shape_fn((n, width), |(i, c)| rows[i][c]))
    } else {
        None
    };

    Ok(match (one_hot, attrs) {
        (Some(a), Some(b)) => ndarray::concatenate![ndarray::Axis(1), a, b],
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => {
            log::warn!("{name}: no node labels or attributes, using a constant feature");
            Array2::ones((n, 1))
        }
    })
}

/// Writes `ds` in TU layout under `dir`. Features are stored as node
/// attributes and labels as their class index, so reloading reproduces the
/// in-memory dataset exactly.
pub fn write_tu_dataset(ds: &Dataset, dir: impl AsRef<Path>, name: &str) -> Result<(), GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;

    let mut a = String::new();
    let mut indicator = String::new();
    let mut labels = String::new();
    let mut attrs = String::new();
    let mut base = 0usize;
    for (g, graph) in ds.graphs.iter().enumerate() {
        for i in 0..graph.n() {
            for &j in graph.adj.neighbors(i) {
                a.push_str(&format!("{}, {}\n", base + i + 1, base + j + 1));
            }
            indicator.push_str(&format!("{}\n", g + 1));
            let row: Vec<String> = graph.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            attrs.push_str(&row.join(", "));
            attrs.push('\n');
        }
        labels.push_str(&format!("{}\n", graph.label));
        base += graph.n();
    }

    for (suffix, body) in [
        ("A", a),
        ("graph_indicator", indicator),
        ("graph_labels", labels),
        ("node_attributes", attrs),
    ] {
        let path = file(dir, name, suffix);
        let io = |source| GraphError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(&path).map_err(io)?;
        f.write_all(body.as_bytes()).map_err(io)?;
    }
    Ok(())
}
