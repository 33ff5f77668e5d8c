//! Directed communication graph per window and its symmetric normalized
//! propagation matrix `D^{-1/2} A D^{-1/2}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{node_labels, NodeFlowFeatures, FLOW_FEATURE_DIM};
use crate::flow::{Label, WindowSlice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    C2,
    P2P,
}

impl Architecture {
    /// GCN depth used for this botnet architecture.
    pub fn default_depth(self) -> usize {
        match self {
            Architecture::C2 => 12,
            Architecture::P2P => 24,
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c2" => Ok(Architecture::C2),
            "p2p" => Ok(Architecture::P2P),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::C2 => "c2",
            Architecture::P2P => "p2p",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    pub nodes: Vec<String>,
    /// Directed, deduplicated edges between node indices.
    pub edges: BTreeSet<(usize, usize)>,
    /// `n x 5`, row `i` belongs to `nodes[i]`.
    pub features: Array2<f64>,
    pub labels: Option<Vec<Label>>,
    pub architecture: Option<Architecture>,
    /// Records dropped because source and destination were the same node.
    pub dropped_self_flows: usize,
}

impl CommGraph {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Build a graph from index edges; self loops and duplicates are discarded.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Option<Array2<f64>>,
        labels: Option<Vec<Label>>,
    ) -> Result<CommGraph> {
        let mut set = BTreeSet::new();
        for (s, d) in edges {
            if s >= n || d >= n {
                return Err(Error::Schema(format!("edge ({s},{d}) out of range for n={n}")));
            }
            if s != d {
                set.insert((s, d));
            }
        }
        let features = features.unwrap_or_else(|| Array2::ones((n, FLOW_FEATURE_DIM)));
        if features.dim() != (n, FLOW_FEATURE_DIM) {
            return Err(Error::Schema(format!(
                "features are {:?}, expected ({n}, {FLOW_FEATURE_DIM})",
                features.dim()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Schema(format!("{} labels for {n} nodes", l.len())));
            }
        }
        let width = n.to_string().len();
        Ok(CommGraph {
            nodes: (0..n).map(|i| format!("n{i:0width$}")).collect(),
            edges: set,
            features,
            labels,
            architecture: None,
            dropped_self_flows: 0,
        })
    }

    /// Replace node attributes with the all-ones topology-only input.
    pub fn with_unit_features(mut self) -> CommGraph {
        self.features = Array2::ones((self.n(), FLOW_FEATURE_DIM));
        self
    }

    /// Undirected neighbor sets (an edge in either direction connects both ends).
    pub fn undirected_neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n()];
        for &(s, d) in &self.edges {
            adj[s].insert(d);
            adj[d].insert(s);
        }
        adj
    }

    pub fn binary_labels(&self) -> Option<Vec<Option<bool>>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|x| x.as_binary()).collect())
    }
}

/// Build the communication graph of a window.
///
/// A flow with `src_bytes != 0` adds `src -> dst`; one with `dst_bytes != 0`
/// adds `dst -> src`. Nodes are ordered lexicographically by id.
pub fn build_graph(
    window: &WindowSlice,
    features: &BTreeMap<String, NodeFlowFeatures>,
) -> Result<CommGraph> {
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for r in &window.records {
        ids.insert(&r.src_ip);
        ids.insert(&r.dst_ip);
    }
    let nodes: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (*s, i)).collect();

    let mut feats = Array2::zeros((nodes.len(), FLOW_FEATURE_DIM));
    for (i, id) in nodes.iter().enumerate() {
        let f = features
            .get(id)
            .ok_or_else(|| Error::MissingFeatures(id.clone()))?;
        for (k, v) in f.to_array().into_iter().enumerate() {
            feats[[i, k]] = v;
        }
    }

    let mut edges = BTreeSet::new();
    let mut dropped = 0;
    for r in &window.records {
        if r.src_ip == r.dst_ip {
            dropped += 1;
            continue;
        }
        let s = index[r.src_ip.as_str()];
        let d = index[r.dst_ip.as_str()];
        if r.src_bytes != 0 {
            edges.insert((s, d));
        }
        if r.dst_bytes != 0 {
            edges.insert((d, s));
        }
    }

    let by_id = node_labels(&window.records);
    let labels = nodes.iter().map(|id| by_id[id]).collect();

    Ok(CommGraph {
        nodes,
        edges,
        features: feats,
        labels: Some(labels),
        architecture: None,
        dropped_self_flows: dropped,
    })
}

/// Sparse symmetric matrix in compressed-row form with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl PropagationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// `P * X` for a dense `n x d` matrix.
    pub fn matmul(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "propagation is {0}x{0}, input has {1} rows",
                self.n,
                x.nrows()
            )));
        }
        let mut out = Array2::zeros((self.n, x.ncols()));
        for (i, mut out_row) in out.rows_mut().into_iter().enumerate() {
            for (j, v) in self.row(i) {
                out_row.scaled_add(v, &x.row(j));
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    /// Power-iteration estimate of the spectral radius, using `P^2` so that
    /// a `-1` eigenvalue (bipartite components) converges as well.
    pub fn spectral_radius_estimate(&self, iters: usize) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let mut v = Array2::from_shape_fn((self.n, 1), |(i, _)| 1.0 + (i % 7) as f64 * 0.1);
        let mut est = 0.0;
        for _ in 0..iters {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v.mapv_inplace(|x| x / norm);
            let w = self.matmul(&self.matmul(&v).expect("square")).expect("square");
            est = w.iter().map(|x| x * x).sum::<f64>().sqrt().sqrt();
            v = w;
        }
        est
    }
}

/// `D^{-1/2} A D^{-1/2}` over the symmetrized adjacency.
///
/// Degrees count neighbors in the undirected view of the graph. Isolated nodes
/// get all-zero rows and columns. With `self_loops` the adjacency becomes `A + I`.
pub fn propagation_matrix(graph: &CommGraph, self_loops: bool) -> PropagationMatrix {
    let mut adj = graph.undirected_neighbors();
    if self_loops {
        for (i, set) in adj.iter_mut().enumerate() {
            set.insert(i);
        }
    }
    let degree: Vec<usize> = adj.iter().map(BTreeSet::len).collect();
    let mut row_ptr = Vec::with_capacity(adj.len() + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for (i, set) in adj.iter().enumerate() {
        for &j in set {
            cols.push(j);
            // Both degrees are nonzero whenever the pair is connected.
            vals.push(1.0 / ((degree[i] * degree[j]) as f64).sqrt());
        }
        row_ptr.push(cols.len());
    }
    PropagationMatrix {
        n: adj.len(),
        row_ptr,
        cols,
        vals,
    }
}

/// JSON interchange container for graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
}

impl GraphFile {
    pub fn from_graph(g: &CommGraph) -> GraphFile {
        GraphFile {
            n: g.n(),
            edges: g.edges.iter().copied().collect(),
            labels: g.labels.as_ref().map(|l| {
                l.iter()
                    .map(|x| match x {
                        Label::Bot => 1,
                        Label::Legit => 0,
                        Label::Unknown => 2,
                    })
                    .collect()
            }),
            features: Some(g.features.rows().into_iter().map(|r| r.to_vec()).collect()),
            nodes: Some(g.nodes.clone()),
            architecture: g.architecture,
        }
    }

    pub fn into_graph(self) -> Result<CommGraph> {
        let n = self.n;
        let features = match self.features {
            None => None,
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != FLOW_FEATURE_DIM) {
                    return Err(Error::Schema(format!(
                        "features must be {n} rows of {FLOW_FEATURE_DIM} values"
                    )));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                if flat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Schema("non-finite feature value".into()));
                }
                Some(Array2::from_shape_vec((n, FLOW_FEATURE_DIM), flat).expect("checked shape"))
            }
        };
        let labels = match self.labels {
            None => None,
            Some(raw) => Some(
                raw.into_iter()
                    .map(|v| match v {
                        0 => Ok(Label::Legit),
                        1 => Ok(Label::Bot),
                        2 => Ok(Label::Unknown),
                        other => Err(Error::Schema(format!("label {other} not in {{0,1,2}}"))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let mut g = CommGraph::from_edges(n, self.edges, features, labels)?;
        if let Some(nodes) = self.nodes {
            if nodes.len() != n {
                return Err(Error::Schema(format!("{} node names for n={n}", nodes.len())));
            }
            g.nodes = nodes;
        }
        g.architecture = self.architecture;
        Ok(g)
    }
}

pub fn write_graph(path: impl AsRef<Path>, g: &CommGraph) -> Result<()> {
    let text = serde_json::to_string(&GraphFile::from_graph(g))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_graph(path: impl AsRef<Path>) -> Result<CommGraph> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let file: GraphFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    file.into_graph()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_node_features;
    use crate::flow::{FlowRecord, Proto};

    fn window(flows: &[(&str, &str, u64, u64)]) -> WindowSlice {
        WindowSlice {
            window_start: 0.0,
            window_len: 60.0,
            records: flows
                .iter()
                .map(|&(s, d, sb, db)| FlowRecord {
                    ts_start: 1.0,
                    duration: 1.0,
                    proto: Proto::Tcp,
                    src_ip: s.into(),
                    src_port: 1,
                    dst_ip: d.into(),
                    dst_port: 2,
                    src_bytes: sb,
                    dst_bytes: db,
                    label: Label::Unknown,
                })
                .collect(),
        }
    }

    fn graph_of(flows: &[(&str, &str, u64, u64)]) -> CommGraph {
        let w = window(flows);
        let f = extract_node_features(&w).unwrap();
        build_graph(&w, &f).unwrap()
    }

    #[test]
    fn one_directional_edge() {
        let g = graph_of(&[("A", "B", 100, 0)]);
        assert_eq!(g.nodes, vec!["A", "B"]);
        assert_eq!(g.edges, BTreeSet::from([(0, 1)]));
    }

    #[test]
    fn bidirectional_edge() {
        let g = graph_of(&[("A", "B", 100, 50)]);
        assert_eq!(g.edges, BTreeSet::from([(0, 1), (1, 0)]));
    }

    #[test]
    fn dedup_edges() {
        let g = graph_of(&[("A", "B", 1, 1), ("B", "A", 2, 2), ("A", "B", 3, 3)]);
        assert_eq!(g.edges, BTreeSet::from([(0, 1), (1, 0)]));
    }

    #[test]
    fn self_flow_dropped_and_counted() {
        let g = graph_of(&[("A", "A", 1, 1), ("A", "B", 1, 0)]);
        assert_eq!(g.dropped_self_flows, 1);
        assert_eq!(g.edges, BTreeSet::from([(0, 1)]));
    }

    #[test]
    fn missing_features_errors() {
        let w = window(&[("A", "B", 1, 1)]);
        let mut f = extract_node_features(&w).unwrap();
        f.remove("B");
        assert!(matches!(build_graph(&w, &f), Err(Error::MissingFeatures(id)) if id == "B"));
    }

    #[test]
    fn two_node_matrix() {
        let g = CommGraph::from_edges(2, [(0, 1), (1, 0)], None, None).unwrap();
        let p = propagation_matrix(&g, false);
        assert_eq!(p.to_dense(), ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn star_hub_entries() {
        let g = CommGraph::from_edges(5, (1..5).map(|i| (0, i)), None, None).unwrap();
        let p = propagation_matrix(&g, false);
        for leaf in 1..5 {
            assert_eq!(p.get(0, leaf), 0.5);
            assert_eq!(p.get(leaf, 0), 0.5);
        }
        assert_eq!(p.get(1, 2), 0.0);
    }

    #[test]
    fn isolated_rows_are_zero() {
        let g = CommGraph::from_edges(3, [(0, 1)], None, None).unwrap();
        let p = propagation_matrix(&g, false);
        assert!(p.row(2).next().is_none());
        assert_eq!(p.to_dense().column(2).sum(), 0.0);
    }

    #[test]
    fn regular_graph_fixes_ones() {
        // 6-cycle: 2-regular
        let g = CommGraph::from_edges(6, (0..6).map(|i| (i, (i + 1) % 6)), None, None).unwrap();
        let p = propagation_matrix(&g, false);
        let ones = Array2::ones((6, 1));
        let out = p.matmul(&ones).unwrap();
        for v in out.iter() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn self_loop_variant() {
        let g = CommGraph::from_edges(2, [(0, 1)], None, None).unwrap();
        let p = propagation_matrix(&g, true);
        assert_eq!(p.to_dense(), ndarray::array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn interchange_roundtrip_and_schema_errors() {
        let g = CommGraph::from_edges(3, [(0, 1), (2, 1)], None, Some(vec![Label::Bot, Label::Legit, Label::Legit]))
            .unwrap();
        let back = GraphFile::from_graph(&g).into_graph().unwrap();
        assert_eq!(back, g);

        let bad = GraphFile {
            n: 2,
            edges: vec![(0, 5)],
            labels: None,
            features: None,
            nodes: None,
            architecture: None,
        };
        assert!(matches!(bad.into_graph(), Err(Error::Schema(_))));
    }
}
