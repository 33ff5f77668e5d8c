//! Topology-only pretraining of the GCN with Adam and early stopping.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FLOW_FEATURE_DIM;
use crate::gcn::{Adam, GcnModel, ResidualMode, HIDDEN_DIM};
use crate::graph::{propagation_matrix, read_graph, CommGraph, PropagationMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Negatives kept in the loss mask per positive node.
    pub balance_ratio: f64,
    pub self_loops: bool,
    pub residual: ResidualMode,
    /// Train per-layer biases in the GCN layers.
    pub layer_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.003,
            max_epochs: 500,
            patience: 10,
            validation_fraction: 0.2,
            balance_ratio: 1.0,
            self_loops: false,
            residual: ResidualMode::Input,
            layer_bias: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_early: bool,
    pub train_graphs: Vec<usize>,
    pub validation_graphs: Vec<usize>,
}

impl TrainReport {
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }
}

struct Prepared {
    p: PropagationMatrix,
    x0: Array2<f64>,
    labels: Vec<bool>,
    mask: Vec<bool>,
}

/// Loss mask with every positive and `ratio` negatives per positive, sampled
/// without replacement. Unknown nodes never enter the mask.
pub fn balanced_mask(labels: &[Option<bool>], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask: Vec<bool> = labels.iter().map(|l| *l == Some(true)).collect();
    let positives = mask.iter().filter(|&&m| m).count();
    let mut negatives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == Some(false))
        .map(|(i, _)| i)
        .collect();
    negatives.shuffle(rng);
    let keep = if positives == 0 {
        negatives.len()
    } else {
        ((positives as f64 * ratio).round() as usize).min(negatives.len())
    };
    for &i in &negatives[..keep] {
        mask[i] = true;
    }
    mask
}

fn prepare(g: &CommGraph, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Prepared> {
    let labels = g
        .binary_labels()
        .ok_or_else(|| Error::MissingLabels(g.nodes.first().cloned().unwrap_or_default()))?;
    let mask = balanced_mask(&labels, cfg.balance_ratio, rng);
    Ok(Prepared {
        p: propagation_matrix(g, cfg.self_loops),
        x0: Array2::ones((g.n(), FLOW_FEATURE_DIM)),
        labels: labels.iter().map(|l| l.unwrap_or(false)).collect(),
        mask,
    })
}

/// Fraction of masked nodes whose predicted class matches the label.
fn masked_accuracy(model: &GcnModel, data: &[&Prepared]) -> Result<(usize, usize)> {
    let mut correct = 0;
    let mut total = 0;
    for d in data {
        let logits = model.forward(&d.p, &d.x0, true)?;
        for i in 0..d.labels.len() {
            if d.mask[i] {
                let pred = logits[[i, 1]] > logits[[i, 0]];
                correct += usize::from(pred == d.labels[i]);
                total += 1;
            }
        }
    }
    Ok((correct, total))
}

fn ratio(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Pretrain on all-ones node features and return the best-validation
/// checkpoint, frozen.
///
/// Graphs are split into training and validation sets whole. Training stops
/// once validation accuracy has not improved for `patience` epochs; ties keep
/// the earlier checkpoint.
pub fn pretrain_gcn(
    dataset: &[CommGraph],
    depth: usize,
    config: &TrainConfig,
) -> Result<(GcnModel, TrainReport)> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument(
            "pretraining needs at least two graphs (train and validation)".into(),
        ));
    }
    if !(config.validation_fraction > 0.0 && config.validation_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {} not in (0, 1)",
            config.validation_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prepared = dataset
        .iter()
        .map(|g| prepare(g, config, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let (mut pos, mut neg) = (false, false);
    for d in &prepared {
        for (l, m) in d.labels.iter().zip(&d.mask) {
            if *m {
                pos |= *l;
                neg |= !*l;
            }
        }
    }
    if !(pos && neg) {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * config.validation_fraction).round() as usize)
        .clamp(1, dataset.len() - 1);
    let validation_graphs: Vec<usize> = order[..n_val].to_vec();
    let mut train_graphs: Vec<usize> = order[n_val..].to_vec();
    let val: Vec<&Prepared> = validation_graphs.iter().map(|&i| &prepared[i]).collect();

    let mut model = GcnModel::new(depth, FLOW_FEATURE_DIM, HIDDEN_DIM, config.seed)?;
    if config.layer_bias {
        model = model.with_layer_biases();
    }
    model.self_loops = config.self_loops;
    model.residual = config.residual;
    let archs: Vec<_> = dataset.iter().map(|g| g.architecture).collect();
    if archs.iter().all(|a| *a == archs[0]) {
        model.architecture = archs[0];
    }
    let mut adam = Adam::new(&model, config.lr);

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, GcnModel)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        train_graphs.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &gi in &train_graphs {
            let d = &prepared[gi];
            let (grads, loss) = model.backward(&d.p, &d.x0, &d.labels, &d.mask).map_err(|e| {
                match e {
                    Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, graph {gi}: {msg}")),
                    other => other,
                }
            })?;
            adam.step(&mut model, &grads);
            loss_sum += loss;
        }
        let loss = loss_sum / train_graphs.len() as f64;
        if !loss.is_finite() || model.weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged(format!("epoch {epoch}: loss {loss}")));
        }
        let train: Vec<&Prepared> = train_graphs.iter().map(|&i| &prepared[i]).collect();
        let (tc, tt) = masked_accuracy(&model, &train)?;
        let (vc, vt) = masked_accuracy(&model, &val)?;
        let val_acc = ratio(vc, vt);
        epochs.push(EpochRecord {
            epoch,
            loss,
            train_acc: ratio(tc, tt),
            val_acc,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_acc, mut best_model) =
        best.ok_or_else(|| Error::InvalidArgument("max_epochs must be positive".into()))?;
    best_model.freeze();
    Ok((
        best_model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_acc,
            stopped_early,
            train_graphs,
            validation_graphs,
        },
    ))
}

/// Load one interchange file, or every `*.json` file of a directory in name
/// order. Features are replaced by all-ones for topology-only training.
pub fn load_graph_dataset(path: impl AsRef<Path>) -> Result<Vec<CommGraph>> {
    let path = path.as_ref();
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::FileNotFound(path.to_path_buf()));
    };
    if files.is_empty() {
        return Err(Error::EmptyInput("no graph files in dataset directory"));
    }
    files
        .iter()
        .map(|f| {
            let g = read_graph(f)?;
            if g.labels.is_none() {
                return Err(Error::MissingLabels(f.display().to_string()));
            }
            Ok(g.with_unit_features())
        })
        .collect()
}
