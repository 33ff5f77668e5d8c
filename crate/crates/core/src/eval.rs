//! Detection metrics, stratified k-fold cross-validation and the GCN depth sweep.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::WindowSlice;
use crate::graph::{Architecture, CommGraph};
use crate::pipeline::{embed_windows, pool_labeled, LabeledSamples, PipelineConfig};
use crate::pretrain::{pretrain_gcn, TrainConfig};
use crate::trees::{ExtraTreesParams, TreeEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub roc_auc: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl MetricSet {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64, roc_auc: Option<f64>) -> MetricSet {
        let precision = div(tp, tp + fp);
        let recall = div(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricSet {
            accuracy: div(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            fpr: div(fp, fp + tn),
            f1,
            roc_auc,
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

/// Mann–Whitney AUC with average ranks for ties; `None` for a single class.
pub fn roc_auc(y_true: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = y_true.iter().filter(|&&y| y).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| y_true[k]).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

pub fn compute_metrics(y_true: &[bool], y_prob: &[f64], threshold: f64) -> Result<MetricSet> {
    if y_true.len() != y_prob.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels, {} scores",
            y_true.len(),
            y_prob.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&y, &p) in y_true.iter().zip(y_prob) {
        match (y, p >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    Ok(MetricSet::from_counts(tp, fp, tn, fn_, roc_auc(y_true, y_prob)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
    pub f1: f64,
    pub roc_auc: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Unweighted mean and population standard deviation over folds. AUC
/// averages only the folds where it is defined.
pub fn summarize(folds: &[MetricSet]) -> (MetricMeans, MetricMeans) {
    let col = |f: fn(&MetricSet) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
    let (acc, acc_s) = col(|m| m.accuracy);
    let (pre, pre_s) = col(|m| m.precision);
    let (rec, rec_s) = col(|m| m.recall);
    let (fpr, fpr_s) = col(|m| m.fpr);
    let (f1, f1_s) = col(|m| m.f1);
    let aucs: Vec<f64> = folds.iter().filter_map(|m| m.roc_auc).collect();
    let (auc, auc_s) = if aucs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&aucs);
        (Some(m), Some(s))
    };
    (
        MetricMeans {
            accuracy: acc,
            precision: pre,
            recall: rec,
            fpr,
            f1,
            roc_auc: auc,
        },
        MetricMeans {
            accuracy: acc_s,
            precision: pre_s,
            recall: rec_s,
            fpr: fpr_s,
            f1: f1_s,
            roc_auc: auc_s,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldGranularity {
    /// Labelled nodes pooled across windows.
    #[default]
    Node,
    /// Whole windows.
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub granularity: FoldGranularity,
    pub threshold: f64,
    pub trees: ExtraTreesParams,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 10,
            seed: 0,
            granularity: FoldGranularity::Node,
            threshold: 0.5,
            trees: ExtraTreesParams::default(),
        }
    }
}

/// Fold index per sample. Each class is shuffled and dealt round-robin, the
/// negatives continuing where the positives stopped, so per-class fold sizes
/// differ by at most one.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > y.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be in [2, {}]",
            y.len()
        )));
    }
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::Stratification(format!(
            "{} positives and {} negatives; each class needs at least 2",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; y.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        fold[i] = slot % k;
    }
    Ok(fold)
}

/// Fold index per sample when whole groups (windows) are held out together.
pub fn group_folds(groups: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if k < 2 || k > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be in [2, {}] for window-level folds",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let lookup: std::collections::BTreeMap<usize, usize> =
        ids.iter().enumerate().map(|(slot, &g)| (g, slot % k)).collect();
    Ok(groups.iter().map(|g| lookup[g]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<MetricSet>,
    pub mean: MetricMeans,
    pub std: MetricMeans,
}

pub fn kfold_cv(samples: &LabeledSamples, cfg: &CvConfig) -> Result<CvSummary> {
    let n = samples.y.len();
    if samples.x.nrows() != n || samples.group.len() != n {
        return Err(Error::DimensionMismatch("samples, labels and groups differ in length".into()));
    }
    let fold = match cfg.granularity {
        FoldGranularity::Node => stratified_folds(&samples.y, cfg.k, cfg.seed)?,
        FoldGranularity::Window => group_folds(&samples.group, cfg.k, cfg.seed)?,
    };
    let folds = (0..cfg.k)
        .into_par_iter()
        .map(|f| -> Result<MetricSet> {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
            let xt = samples.x.select(ndarray::Axis(0), &train);
            let yt: Vec<bool> = train.iter().map(|&i| samples.y[i]).collect();
            let model = TreeEnsemble::fit(xt.view(), &yt, cfg.trees)?;
            let xe = samples.x.select(ndarray::Axis(0), &test);
            let ye: Vec<bool> = test.iter().map(|&i| samples.y[i]).collect();
            let proba = model.predict_proba(xe.view())?;
            compute_metrics(&ye, &proba, cfg.threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = summarize(&folds);
    Ok(CvSummary { folds, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub pretrain_val_acc: f64,
    pub pretrain_epochs: usize,
    pub cv: CvSummary,
}

/// For each depth: pretrain on `pretrain_data`, freeze, embed the labelled
/// windows and cross-validate the classifier.
pub fn depth_sweep(
    arch: Architecture,
    depths: &[usize],
    pretrain_data: &[CommGraph],
    train_cfg: &TrainConfig,
    windows: &[WindowSlice],
    pipeline: &PipelineConfig,
    cv: &CvConfig,
) -> Result<Vec<SweepRow>> {
    if depths.is_empty() {
        return Err(Error::EmptyInput("depth list"));
    }
    depths
        .iter()
        .map(|&depth| {
            let (mut model, report) = pretrain_gcn(pretrain_data, depth, train_cfg)?;
            model.architecture = Some(arch);
            let cfg = PipelineConfig {
                architecture: arch,
                depth: Some(depth),
                ..pipeline.clone()
            };
            let embedded = embed_windows(windows, &model, &cfg)?;
            let samples = pool_labeled(&embedded, cfg.normalization);
            let summary = kfold_cv(&samples, cv)?;
            Ok(SweepRow {
                depth,
                pretrain_val_acc: report.best_val_acc,
                pretrain_epochs: report.epochs.len(),
                cv: summary,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Aligned plain-text table of mean metrics, one row per label.
pub fn metrics_table(rows: &[(String, MetricMeans)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>9}  {:>8}  {:>8}  {:>8}  {:>8}",
        "", "accuracy", "precision", "recall", "fpr", "f1", "roc_auc"
    );
    for (label, m) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>9.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8}",
            label,
            m.accuracy,
            m.precision,
            m.recall,
            m.fpr,
            m.f1,
            fmt_opt(m.roc_auc)
        );
    }
    out
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let labelled: Vec<(String, MetricMeans)> = rows
        .iter()
        .map(|r| (format!("depth {}", r.depth), r.cv.mean))
        .collect();
    metrics_table(&labelled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_on_counts() {
        let m = MetricSet::from_counts(8, 2, 85, 5, None);
        assert_eq!(m.recall, 8.0 / 13.0);
        assert_eq!(m.fpr, 2.0 / 87.0);
        assert_eq!(m.precision, 0.8);
        assert_eq!(m.accuracy, 93.0 / 100.0);
        let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        assert_eq!(m.f1, h);

        let empty = MetricSet::from_counts(0, 0, 4, 0, None);
        assert_eq!((empty.precision, empty.recall, empty.f1, empty.fpr), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let y = [true, false, true, false, false];
        let m = compute_metrics(&y, &[0.9, 0.1, 0.8, 0.2, 0.3], 0.5).unwrap();
        assert_eq!((m.accuracy, m.recall, m.f1, m.fpr), (1.0, 1.0, 1.0, 0.0));
        assert_eq!(m.roc_auc, Some(1.0));
        let c = compute_metrics(&y, &[0.4; 5], 0.5).unwrap();
        assert_eq!(c.roc_auc, Some(0.5));
    }

    #[test]
    fn single_class_auc_absent() {
        let m = compute_metrics(&[true, true], &[0.2, 0.9], 0.5).unwrap();
        assert_eq!(m.roc_auc, None);
        assert_eq!(m.tp, 1);
        assert!(compute_metrics(&[true], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn stratification_contract() {
        let y: Vec<bool> = (0..53).map(|i| i % 4 == 0).collect();
        let folds = stratified_folds(&y, 10, 3).unwrap();
        for class in [true, false] {
            let mut sizes = [0usize; 10];
            for (i, &f) in folds.iter().enumerate() {
                if y[i] == class {
                    sizes[f] += 1;
                }
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "{sizes:?}");
        }
        assert_eq!(folds, stratified_folds(&y, 10, 3).unwrap());
        assert!(matches!(
            stratified_folds(&[true, false, false, false], 2, 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn group_folds_keep_windows_together() {
        let groups = vec![0, 0, 1, 1, 2, 2, 3];
        let f = group_folds(&groups, 2, 1).unwrap();
        assert_eq!(f[0], f[1]);
        assert_eq!(f[2], f[3]);
        assert!(group_folds(&groups, 5, 1).is_err());
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![("a".to_string(), MetricMeans::default()), ("bb".to_string(), MetricMeans::default())];
        assert_eq!(metrics_table(&rows).lines().count(), 3);
    }
}
