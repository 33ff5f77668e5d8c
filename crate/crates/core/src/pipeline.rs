//! Window -> flow features -> graph -> frozen GCN -> min-max normalization ->
//! Extra-Trees, for training and for detection.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::extract_node_features;
use crate::flow::{Label, WindowSlice};
use crate::gcn::GcnModel;
use crate::graph::{build_graph, propagation_matrix, Architecture, CommGraph};
use crate::trees::{ExtraTreesParams, TreeEnsemble};

pub const NORMALIZED_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Min and max taken within each node's own vector.
    #[default]
    PerVector,
    /// Min and max per column over the window's nodes.
    PerDimension,
    None,
}

/// `(x - min) / (max - min) * 100` within one vector; all zeros when `max == min`.
pub fn normalize_fused(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    scale_into(v.iter().copied(), lo, hi).collect()
}

fn scale_into(
    values: impl Iterator<Item = f64>,
    lo: f64,
    hi: f64,
) -> impl Iterator<Item = f64> {
    let span = hi - lo;
    values.map(move |x| {
        if span > 0.0 {
            ((x - lo) / span * NORMALIZED_MAX).clamp(0.0, NORMALIZED_MAX)
        } else {
            0.0
        }
    })
}

pub fn normalize_matrix(m: &Array2<f64>, mode: NormalizationMode) -> Array2<f64> {
    let mut out = m.clone();
    match mode {
        NormalizationMode::None => {}
        NormalizationMode::PerVector => {
            for mut row in out.rows_mut() {
                let v = normalize_fused(row.as_slice().expect("standard layout"));
                row.assign(&ndarray::ArrayView1::from(&v));
            }
        }
        NormalizationMode::PerDimension => {
            for mut col in out.axis_iter_mut(Axis(1)) {
                let (lo, hi) = col
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
                let scaled: Vec<f64> = scale_into(col.iter().copied(), lo, hi).collect();
                for (c, s) in col.iter_mut().zip(scaled) {
                    *c = s;
                }
            }
        }
    }
    out
}

/// Transform applied to the five flow features before they enter the GCN (or,
/// for [`FeatureSource::FlowOnly`], the classifier). Byte averages span several
/// orders of magnitude more than the counts, and without compression they
/// dominate every propagated vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    Raw,
    /// `ln(1 + x)` elementwise.
    #[default]
    Log1p,
}

impl InputScaling {
    pub fn apply(self, features: &Array2<f64>) -> Array2<f64> {
        match self {
            InputScaling::Raw => features.clone(),
            InputScaling::Log1p => features.mapv(f64::ln_1p),
        }
    }
}

/// Which node attributes feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Frozen-GCN embedding of the flow features.
    #[default]
    Fused,
    /// Frozen-GCN embedding of all-ones inputs.
    TopologyOnly,
    /// The five raw flow features, no GCN.
    FlowOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub architecture: Architecture,
    /// Overrides the architecture's default depth.
    pub depth: Option<usize>,
    pub window_len: f64,
    pub stride: f64,
    pub input_scaling: InputScaling,
    pub normalization: NormalizationMode,
    pub features: FeatureSource,
    pub threshold: f64,
    pub trees: ExtraTreesParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            architecture: Architecture::C2,
            depth: None,
            window_len: 60.0,
            stride: 10.0,
            input_scaling: InputScaling::Log1p,
            normalization: NormalizationMode::PerVector,
            features: FeatureSource::Fused,
            threshold: 0.5,
            trees: ExtraTreesParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn for_architecture(architecture: Architecture) -> PipelineConfig {
        PipelineConfig {
            architecture,
            ..Default::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(self.architecture.default_depth())
    }

    pub fn check_model(&self, model: &GcnModel) -> Result<()> {
        if !model.frozen {
            return Err(Error::Incompatible("model is not frozen".into()));
        }
        if model.depth != self.depth() {
            return Err(Error::Incompatible(format!(
                "model depth {} does not match {} pipeline depth {}",
                model.depth,
                self.architecture,
                self.depth()
            )));
        }
        if let Some(arch) = model.architecture {
            if self.depth.is_none() && arch != self.architecture {
                return Err(Error::Incompatible(format!(
                    "model was pretrained for {arch}, pipeline is {}",
                    self.architecture
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub features_s: f64,
    pub graph_s: f64,
    pub propagation_s: f64,
    pub embedding_s: f64,
    pub normalization_s: f64,
    pub classification_s: f64,
    pub total_s: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.features_s
            + self.graph_s
            + self.propagation_s
            + self.embedding_s
            + self.normalization_s
            + self.classification_s
    }
}

/// One window after the GCN stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedWindow {
    pub window_start: f64,
    pub nodes: Vec<String>,
    pub labels: Vec<Label>,
    /// Raw final-hidden-layer activations (or flow features for `FlowOnly`).
    pub embedding: Array2<f64>,
    pub timings: StageTimings,
}

impl EmbeddedWindow {
    pub fn classifier_input(&self, mode: NormalizationMode) -> Array2<f64> {
        normalize_matrix(&self.embedding, mode)
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

pub fn graph_of_window(window: &WindowSlice) -> Result<CommGraph> {
    let features = extract_node_features(window)?;
    build_graph(window, &features)
}

/// Raw embedding of every node of `graph` for the given feature source.
pub fn embed_graph(
    graph: &CommGraph,
    model: &GcnModel,
    source: FeatureSource,
    scaling: InputScaling,
) -> Result<Array2<f64>> {
    match source {
        FeatureSource::FlowOnly => Ok(scaling.apply(&graph.features)),
        FeatureSource::Fused | FeatureSource::TopologyOnly => {
            let p = propagation_matrix(graph, model.self_loops);
            let x0 = if source == FeatureSource::Fused {
                scaling.apply(&graph.features)
            } else {
                Array2::ones(graph.features.dim())
            };
            model.forward(&p, &x0, false)
        }
    }
}

/// Embedding of every node in the window, using the configured feature source.
pub fn embed_window(
    window: &WindowSlice,
    model: &GcnModel,
    config: &PipelineConfig,
) -> Result<EmbeddedWindow> {
    config.check_model(model)?;
    let total = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let features = extract_node_features(window)?;
    timings.features_s = secs(t);

    let t = Instant::now();
    let graph = build_graph(window, &features)?;
    timings.graph_s = secs(t);

    let embedding = match config.features {
        FeatureSource::FlowOnly => config.input_scaling.apply(&graph.features),
        source => {
            let t = Instant::now();
            let p = propagation_matrix(&graph, model.self_loops);
            timings.propagation_s = secs(t);
            let t = Instant::now();
            let x0 = if source == FeatureSource::Fused {
                config.input_scaling.apply(&graph.features)
            } else {
                Array2::ones(graph.features.dim())
            };
            let e = model.forward(&p, &x0, false)?;
            timings.embedding_s = secs(t);
            e
        }
    };
    timings.total_s = secs(total);
    Ok(EmbeddedWindow {
        window_start: window.window_start,
        labels: graph.labels.clone().unwrap_or_else(|| vec![Label::Unknown; graph.n()]),
        nodes: graph.nodes,
        embedding,
        timings,
    })
}

pub fn embed_windows(
    windows: &[WindowSlice],
    model: &GcnModel,
    config: &PipelineConfig,
) -> Result<Vec<EmbeddedWindow>> {
    windows
        .par_iter()
        .map(|w| embed_window(w, model, config))
        .collect()
}

/// Labelled rows pooled across windows: normalized inputs, labels and the
/// index of the window each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSamples {
    pub x: Array2<f64>,
    pub y: Vec<bool>,
    pub group: Vec<usize>,
}

pub fn pool_labeled(windows: &[EmbeddedWindow], mode: NormalizationMode) -> LabeledSamples {
    let width = windows.first().map_or(0, |w| w.embedding.ncols());
    let mut flat = Vec::new();
    let mut y = Vec::new();
    let mut group = Vec::new();
    for (g, w) in windows.iter().enumerate() {
        let input = w.classifier_input(mode);
        for (row, label) in input.rows().into_iter().zip(&w.labels) {
            if let Some(b) = label.as_binary() {
                flat.extend(row.iter().copied());
                y.push(b);
                group.push(g);
            }
        }
    }
    let x = Array2::from_shape_vec((y.len(), width), flat).expect("rows have equal width");
    LabeledSamples { x, y, group }
}

/// Fit the classifier on every labelled node of the training windows.
pub fn train_detector(
    windows: &[WindowSlice],
    model: &GcnModel,
    config: &PipelineConfig,
) -> Result<TreeEnsemble> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("training windows"));
    }
    let embedded = embed_windows(windows, model, config)?;
    let samples = pool_labeled(&embedded, config.normalization);
    TreeEnsemble::fit(samples.x.view(), &samples.y, config.trees)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeVerdict {
    pub node_id: String,
    pub bot_probability: f64,
    pub verdict: bool,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window_start: f64,
    pub n_nodes: usize,
    pub n_flagged: usize,
    pub nodes: Vec<NodeVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub threshold: f64,
    pub windows: Vec<WindowReport>,
}

impl DetectionReport {
    /// One JSON object per window. Timings vary run to run, so they can be left out
    /// when byte-identical output is wanted.
    pub fn to_json_lines(&self, with_timings: bool) -> Result<String> {
        let mut out = String::new();
        for w in &self.windows {
            let line = if with_timings {
                serde_json::to_string(w)?
            } else {
                serde_json::to_string(&WindowReport {
                    timings: None,
                    ..w.clone()
                })?
            };
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn flagged(&self) -> usize {
        self.windows.iter().map(|w| w.n_flagged).sum()
    }
}

fn classify_window(
    window: &WindowSlice,
    model: &GcnModel,
    ensemble: &TreeEnsemble,
    config: &PipelineConfig,
) -> Result<WindowReport> {
    let total = Instant::now();
    let embedded = embed_window(window, model, config)?;
    let mut timings = embedded.timings.clone();

    let t = Instant::now();
    let input = embedded.classifier_input(config.normalization);
    timings.normalization_s = secs(t);

    let t = Instant::now();
    let proba = ensemble.predict_proba(input.view())?;
    timings.classification_s = secs(t);

    let nodes: Vec<NodeVerdict> = embedded
        .nodes
        .into_iter()
        .zip(embedded.labels)
        .zip(proba)
        .map(|((node_id, label), p)| NodeVerdict {
            node_id,
            bot_probability: p,
            verdict: p >= config.threshold,
            label,
        })
        .collect();
    timings.total_s = secs(total);
    Ok(WindowReport {
        window_start: embedded.window_start,
        n_nodes: nodes.len(),
        n_flagged: nodes.iter().filter(|v| v.verdict).count(),
        nodes,
        timings: Some(timings),
    })
}

/// Per-window verdicts; nodes seen in several windows get one verdict per window.
pub fn detect(
    windows: &[WindowSlice],
    model: &GcnModel,
    ensemble: &TreeEnsemble,
    config: &PipelineConfig,
) -> Result<DetectionReport> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("detection windows"));
    }
    config.check_model(model)?;
    let width = match config.features {
        FeatureSource::FlowOnly => model.input_dim,
        _ => model.hidden_dim,
    };
    if ensemble.n_features != width {
        return Err(Error::Incompatible(format!(
            "ensemble expects {} features, pipeline produces {width}",
            ensemble.n_features
        )));
    }
    let reports = windows
        .par_iter()
        .map(|w| classify_window(w, model, ensemble, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionReport {
        threshold: config.threshold,
        windows: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_min_max() {
        assert_eq!(normalize_fused(&[1.0, 2.0, 3.0]), vec![0.0, 50.0, 100.0]);
        assert_eq!(normalize_fused(&[4.2; 5]), vec![0.0; 5]);
        assert_eq!(normalize_fused(&[-3.0, 5.0]), vec![0.0, 100.0]);
    }

    #[test]
    fn per_dimension_columns() {
        let m = ndarray::array![[1.0, 10.0], [3.0, 10.0], [2.0, 10.0]];
        let n = normalize_matrix(&m, NormalizationMode::PerDimension);
        assert_eq!(n, ndarray::array![[0.0, 0.0], [100.0, 0.0], [50.0, 0.0]]);
        assert_eq!(normalize_matrix(&m, NormalizationMode::None), m);
    }

    #[test]
    fn depth_follows_architecture() {
        assert_eq!(PipelineConfig::for_architecture(Architecture::C2).depth(), 12);
        assert_eq!(PipelineConfig::for_architecture(Architecture::P2P).depth(), 24);
        let cfg = PipelineConfig {
            depth: Some(16),
            ..Default::default()
        };
        assert_eq!(cfg.depth(), 16);
    }

    #[test]
    fn mismatched_depth_is_refused() {
        let mut m = GcnModel::for_architecture(Architecture::P2P, 0).unwrap();
        m.freeze();
        let err = PipelineConfig::for_architecture(Architecture::C2)
            .check_model(&m)
            .unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
        PipelineConfig::for_architecture(Architecture::P2P)
            .check_model(&m)
            .unwrap();
    }
}
