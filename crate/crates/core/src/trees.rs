//! Extremely randomized trees for binary classification.
//!
//! Every tree sees the full training sample. At each node `k_features`
//! non-constant attributes are drawn without replacement, each gets one
//! uniform cut-point strictly inside its range at that node, and the cut with
//! the largest information gain wins. Samples with `value < threshold` go left.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtraTreesParams {
    pub n_trees: usize,
    /// Attributes drawn per split; `None` means `ceil(sqrt(d))`.
    pub k_features: Option<usize>,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ExtraTreesParams {
    fn default() -> Self {
        ExtraTreesParams {
            n_trees: 100,
            k_features: None,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// `[legit, bot]` training counts.
    Leaf { counts: [u64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: ArrayView1<f64>) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }

    pub fn bot_fraction(&self, x: ArrayView1<f64>) -> f64 {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { counts } => counts[1] as f64 / (counts[0] + counts[1]) as f64,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub version: u32,
    pub n_features: usize,
    pub params: ExtraTreesParams,
    pub trees: Vec<Tree>,
}

/// Per-tree seed, independent of build order.
pub fn tree_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn entropy(c: [u64; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    c.iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn counts_of(idx: &[usize], y: &[bool]) -> [u64; 2] {
    let bots = idx.iter().filter(|&&i| y[i]).count() as u64;
    [idx.len() as u64 - bots, bots]
}

/// Uniform draw strictly inside `(lo, hi)`, or `None` when no float fits.
fn draw_cut(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Option<f64> {
    for _ in 0..16 {
        let t = lo + rng.gen::<f64>() * (hi - lo);
        if t > lo && t < hi {
            return Some(t);
        }
    }
    let mid = lo + (hi - lo) / 2.0;
    (mid > lo && mid < hi).then_some(mid)
}

struct Builder<'a> {
    /// Feature-major copy of the training matrix: row `f` holds feature `f`.
    cols: &'a Array2<f64>,
    y: &'a [bool],
    k: usize,
    min_split: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn range(&self, idx: &[usize], f: usize) -> (f64, f64) {
        let col = self.cols.row(f);
        idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = col[i];
            (lo.min(v), hi.max(v))
        })
    }

    fn build(&mut self, mut idx: Vec<usize>) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { counts: [0, 0] });
        let counts = counts_of(&idx, self.y);
        if idx.len() < self.min_split || counts[0] == 0 || counts[1] == 0 {
            self.nodes[at] = Node::Leaf { counts };
            return at;
        }
        // Visiting features in random order and keeping the first `k`
        // non-constant ones draws a uniform k-subset of the non-constant set.
        let d = self.cols.nrows();
        let parent_h = entropy(counts);
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut self.rng);
        let mut tried = 0;
        for f in order {
            if tried == self.k {
                break;
            }
            let (lo, hi) = self.range(&idx, f);
            if lo >= hi {
                continue;
            }
            tried += 1;
            let Some(t) = draw_cut(&mut self.rng, lo, hi) else {
                continue;
            };
            let col = self.cols.row(f);
            let mut left = [0u64; 2];
            for &i in &idx {
                if col[i] < t {
                    left[usize::from(self.y[i])] += 1;
                }
            }
            let right = [counts[0] - left[0], counts[1] - left[1]];
            let nl = (left[0] + left[1]) as f64;
            let gain = parent_h - nl / n * entropy(left) - (n - nl) / n * entropy(right);
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, t));
            }
        }
        let Some((_, feature, threshold)) = best else {
            self.nodes[at] = Node::Leaf { counts };
            return at;
        };
        let col = self.cols.row(feature);
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| col[i] < threshold);
        idx = left_idx;
        let left = self.build(idx);
        let right = self.build(right_idx);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

impl TreeEnsemble {
    pub fn fit(x: ArrayView2<f64>, y: &[bool], params: ExtraTreesParams) -> Result<TreeEnsemble> {
        let (n, d) = x.dim();
        if d == 0 {
            return Err(Error::DimensionMismatch("no features".into()));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} rows, {} labels", y.len())));
        }
        if n < 2 || y.iter().all(|&b| b) || y.iter().all(|&b| !b) {
            return Err(Error::SingleClass);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier input"));
        }
        if params.n_trees == 0 {
            return Err(Error::InvalidArgument("n_trees must be positive".into()));
        }
        let k = params
            .k_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d);
        let min_split = params.min_samples_split.max(2);
        let cols = x.t().as_standard_layout().into_owned();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut b = Builder {
                    cols: &cols,
                    y,
                    k,
                    min_split,
                    rng: ChaCha8Rng::seed_from_u64(tree_seed(params.seed, t as u64)),
                    nodes: Vec::new(),
                };
                b.build((0..n).collect());
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(TreeEnsemble {
            version: ENSEMBLE_FORMAT_VERSION,
            n_features: d,
            params,
            trees,
        })
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "ensemble expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let inv = 1.0 / self.trees.len() as f64;
        Ok(x
            .rows()
            .into_iter()
            .map(|row| self.trees.iter().map(|t| t.bot_fraction(row)).sum::<f64>() * inv)
            .collect())
    }

    pub fn predict(&self, x: ArrayView2<f64>, threshold: f64) -> Result<Vec<bool>> {
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| p >= threshold)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<TreeEnsemble> {
        let e: TreeEnsemble = serde_json::from_str(text)?;
        if e.version != ENSEMBLE_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: e.version,
                expected: ENSEMBLE_FORMAT_VERSION,
            });
        }
        for t in &e.trees {
            let ok = t.nodes.iter().all(|n| match n {
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => *feature < e.n_features && *left < t.nodes.len() && *right < t.nodes.len(),
                Node::Leaf { counts } => counts[0] + counts[1] > 0,
            });
            if !ok || t.nodes.is_empty() {
                return Err(Error::CorruptPayload("malformed tree".into()));
            }
        }
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn constant_features_give_single_leaves() {
        let x = Array2::from_elem((7, 3), 1.5);
        let y = [true, false, false, true, false, false, false];
        let e = TreeEnsemble::fit(x.view(), &y, ExtraTreesParams::default()).unwrap();
        for t in &e.trees {
            assert_eq!(t.nodes(), &[Node::Leaf { counts: [5, 2] }]);
        }
        let p = e.predict(x.view(), 0.5).unwrap();
        assert!(p.iter().all(|&v| !v));
    }

    #[test]
    fn errors() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            TreeEnsemble::fit(x.view(), &[true, true], ExtraTreesParams::default()),
            Err(Error::SingleClass)
        ));
        let empty = Array2::<f64>::zeros((2, 0));
        assert!(TreeEnsemble::fit(empty.view(), &[true, false], ExtraTreesParams::default()).is_err());
        let e = TreeEnsemble::fit(x.view(), &[true, false], ExtraTreesParams::default()).unwrap();
        assert!(matches!(
            e.predict_proba(array![[0.0, 1.0]].view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn two_tree_average() {
        let e = TreeEnsemble {
            version: ENSEMBLE_FORMAT_VERSION,
            n_features: 1,
            params: ExtraTreesParams::default(),
            trees: vec![
                Tree { nodes: vec![Node::Leaf { counts: [0, 4] }] },
                Tree { nodes: vec![Node::Leaf { counts: [3, 0] }] },
            ],
        };
        assert_eq!(e.predict_proba(array![[0.3]].view()).unwrap(), vec![0.5]);
        assert_eq!(e.predict(array![[0.3]].view(), 0.5).unwrap(), vec![true]);
    }

    #[test]
    fn json_roundtrip() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]];
        let y = [false, false, true, true];
        let e = TreeEnsemble::fit(x.view(), &y, ExtraTreesParams { n_trees: 5, ..Default::default() }).unwrap();
        let back = TreeEnsemble::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back, e);
        let mut bumped = e.clone();
        bumped.version = 9;
        assert!(matches!(
            TreeEnsemble::from_json(&bumped.to_json().unwrap()),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
