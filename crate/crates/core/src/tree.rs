//! Weighted CART with Gini impurity, the base learner for boosting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Minimum child weight as a fraction of the total training weight.
    pub min_leaf_fraction: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 8,
            min_leaf_fraction: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        label: i8,
        /// weight share of the majority label
        purity: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split { feature, left, right, .. } => {
                Some((*feature).max(left.max_feature().unwrap_or(0)).max(right.max_feature().unwrap_or(0)))
            }
        }
    }

    /// Root-to-leaf descent, `x[feature] <= threshold` goes left. No bounds
    /// check; see [`predict_tree`].
    pub fn predict(&self, x: &[f64]) -> i8 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { label, .. } => return *label,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }
}

pub fn predict_tree(tree: &TreeNode, x: &[f64], feature_count: usize) -> Result<i8> {
    if x.len() != feature_count {
        return Err(Error::DimMismatch(format!("expected {feature_count} features, got {}", x.len())));
    }
    Ok(tree.predict(x))
}

fn gini(wp: f64, wn: f64) -> f64 {
    let w = wp + wn;
    if w <= 0.0 {
        return 0.0;
    }
    let (p, n) = (wp / w, wn / w);
    1.0 - p * p - n * n
}

fn leaf(wp: f64, wn: f64) -> TreeNode {
    let w = wp + wn;
    let label = if wp >= wn { 1 } else { -1 };
    let purity = if w > 0.0 { wp.max(wn) / w } else { 1.0 };
    TreeNode::Leaf { label, purity }
}

struct Trainer<'a> {
    x: &'a [Vec<f64>],
    y: &'a [i8],
    w: &'a [f64],
    features: usize,
    max_depth: usize,
    min_leaf: f64,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Trainer<'_> {
    fn weights(&self, idx: &[usize]) -> (f64, f64) {
        idx.iter().fold((0.0, 0.0), |(p, n), &i| {
            if self.y[i] > 0 {
                (p + self.w[i], n)
            } else {
                (p, n + self.w[i])
            }
        })
    }

    fn best_split(&self, idx: &[usize], wp: f64, wn: f64) -> Option<BestSplit> {
        let total = wp + wn;
        let mut best: Option<BestSplit> = None;
        let mut order = idx.to_vec();
        for f in 0..self.features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut lp, mut ln) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let i = order[k];
                if self.y[i] > 0 {
                    lp += self.w[i];
                } else {
                    ln += self.w[i];
                }
                let lo = self.x[i][f];
                let hi = self.x[order[k + 1]][f];
                if lo == hi {
                    continue;
                }
                let (rp, rn) = (wp - lp, wn - ln);
                let (wl, wr) = (lp + ln, rp + rn);
                if wl < self.min_leaf || wr < self.min_leaf {
                    continue;
                }
                let score = (wl * gini(lp, ln) + wr * gini(rp, rn)) / total;
                if best.as_ref().is_none_or(|b| score < b.score) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if !(threshold < hi) {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }

    fn grow(&self, idx: &[usize], depth: usize) -> TreeNode {
        let (wp, wn) = self.weights(idx);
        let parent = gini(wp, wn);
        if depth >= self.max_depth || parent == 0.0 || idx.len() < 2 || wp + wn < 2.0 * self.min_leaf {
            return leaf(wp, wn);
        }
        let Some(split) = self.best_split(idx, wp, wn) else {
            return leaf(wp, wn);
        };
        if !(split.score < parent * (1.0 - 1e-12)) {
            return leaf(wp, wn);
        }
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][split.feature] <= split.threshold);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(self.grow(&left, depth + 1)),
            right: Box::new(self.grow(&right, depth + 1)),
        }
    }
}

/// Greedy weighted-Gini CART. Ties go to the lowest feature index, then the
/// lowest threshold; leaves vote by weighted label sum with ties to `+1`.
pub fn train_tree(x: &[Vec<f64>], y: &[i8], w: &[f64], params: &TreeParams) -> Result<TreeNode> {
    if x.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if x.len() != y.len() || x.len() != w.len() {
        return Err(Error::DimMismatch(format!(
            "{} instances, {} labels, {} weights",
            x.len(),
            y.len(),
            w.len()
        )));
    }
    let features = x[0].len();
    if x.iter().any(|r| r.len() != features) {
        return Err(Error::DimMismatch("ragged feature rows".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature value".into()));
    }
    if y.iter().any(|&l| l != 1 && l != -1) {
        return Err(Error::Invalid("labels must be +1 or -1".into()));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid("weights must be finite and nonnegative".into()));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("weights are all zero".into()));
    }
    let trainer = Trainer {
        x,
        y,
        w,
        features,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf_fraction * total,
    };
    let idx: Vec<usize> = (0..x.len()).collect();
    Ok(trainer.grow(&idx, 0))
}

/// Weighted fraction of misclassified instances.
pub fn weighted_error(tree: &TreeNode, x: &[Vec<f64>], y: &[i8], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let wrong: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .filter(|((xi, &yi), _)| tree.predict(xi) != yi)
        .map(|(_, &wi)| wi)
        .sum();
    wrong / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn separable_1d_is_one_split() {
        let x: Vec<Vec<f64>> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0].iter().map(|&v| vec![v]).collect();
        let y = vec![1, 1, 1, -1, -1, -1];
        let w = vec![1.0; 6];
        let t = train_tree(&x, &y, &w, &TreeParams::default()).unwrap();
        assert_eq!(t.depth(), 1);
        match &t {
            TreeNode::Split { threshold, .. } => assert!(threshold.abs() < 1e-12),
            _ => panic!(),
        }
        assert_eq!(weighted_error(&t, &x, &y, &w), 0.0);
    }

    #[test]
    fn all_weight_on_one_positive() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y = vec![1, -1, -1, -1, -1];
        let w = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let t = train_tree(&x, &y, &w, &TreeParams::default()).unwrap();
        for v in [-10.0, 0.0, 2.5, 100.0] {
            assert_eq!(t.predict(&[v]), 1);
        }
    }

    #[test]
    fn single_class_is_leaf() {
        let x = vec![vec![0.0], vec![1.0]];
        let t = train_tree(&x, &[-1, -1], &[1.0, 1.0], &TreeParams::default()).unwrap();
        assert_eq!(t, TreeNode::Leaf { label: -1, purity: 1.0 });
    }

    #[test]
    fn empty_and_bad_inputs() {
        assert!(matches!(
            train_tree(&[], &[], &[], &TreeParams::default()),
            Err(Error::EmptyTrainingSet)
        ));
        let x = vec![vec![0.0]];
        assert!(train_tree(&x, &[1], &[0.0], &TreeParams::default()).is_err());
        assert!(train_tree(&x, &[1], &[-1.0], &TreeParams::default()).is_err());
        assert!(train_tree(&x, &[2], &[1.0], &TreeParams::default()).is_err());
    }

    #[test]
    fn leaf_tree_predicts_its_label() {
        let t = TreeNode::Leaf { label: -1, purity: 1.0 };
        assert_eq!(t.predict(&[1.0, 2.0]), -1);
        assert_eq!(predict_tree(&t, &[1.0, 2.0], 2).unwrap(), -1);
        assert!(predict_tree(&t, &[1.0], 2).is_err());
    }

    #[test]
    fn threshold_boundary_goes_left() {
        let t = TreeNode::Split {
            feature: 0,
            threshold: 0.5,
            left: Box::new(TreeNode::Leaf { label: 1, purity: 1.0 }),
            right: Box::new(TreeNode::Leaf { label: -1, purity: 1.0 }),
        };
        assert_eq!(t.predict(&[0.5]), 1);
        assert_eq!(t.predict(&[0.5000001]), -1);
    }

    #[test]
    fn full_tree_memorises() {
        let mut rng = SeededRng::new(3);
        let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let y: Vec<i8> = (0..40).map(|_| if rng.uniform() < 0.5 { 1 } else { -1 }).collect();
        let w = vec![1.0; 40];
        let params = TreeParams {
            max_depth: 40,
            min_leaf_fraction: 1e-6,
        };
        let t = train_tree(&x, &y, &w, &params).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(t.predict(xi), yi);
        }
    }

    /// Exhaustive stump search scoring every (feature, threshold) directly.
    fn oracle_stump_error(x: &[Vec<f64>], y: &[i8], w: &[f64]) -> f64 {
        let total: f64 = w.iter().sum();
        let mut best = (f64::INFINITY, f64::INFINITY);
        for f in 0..x[0].len() {
            let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for pair in vals.windows(2) {
                let thr = (pair[0] + pair[1]) / 2.0;
                let side = |left: bool| {
                    let (mut p, mut n) = (0.0, 0.0);
                    for i in 0..x.len() {
                        if (x[i][f] <= thr) == left {
                            if y[i] > 0 {
                                p += w[i];
                            } else {
                                n += w[i];
                            }
                        }
                    }
                    (p, n)
                };
                let (lp, ln) = side(true);
                let (rp, rn) = side(false);
                let g = |p: f64, n: f64| {
                    let s = p + n;
                    if s == 0.0 {
                        0.0
                    } else {
                        1.0 - (p / s).powi(2) - (n / s).powi(2)
                    }
                };
                let score = ((lp + ln) * g(lp, ln) + (rp + rn) * g(rp, rn)) / total;
                let err = (lp.min(ln) + rp.min(rn)) / total;
                if score < best.0 - 1e-12 {
                    best = (score, err);
                }
            }
        }
        best.1
    }

    #[test]
    fn stump_matches_exhaustive_oracle() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let n = 30;
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let y: Vec<i8> = x.iter().map(|r| if r[1] + 0.5 * rng.normal() > 0.0 { 1 } else { -1 }).collect();
            let w: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 2.0 }).collect();
            let params = TreeParams {
                max_depth: 1,
                min_leaf_fraction: 1e-9,
            };
            let t = train_tree(&x, &y, &w, &params).unwrap();
            let err = weighted_error(&t, &x, &y, &w);
            assert!((err - oracle_stump_error(&x, &y, &w)).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn deeper_never_worse(seed in 0u64..1000, depth in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let y: Vec<i8> = (0..50).map(|_| if rng.uniform() < 0.4 { 1 } else { -1 }).collect();
            let w: Vec<f64> = (0..50).map(|_| rng.uniform_range(0.1, 2.0)).collect();
            let shallow = train_tree(&x, &y, &w, &TreeParams { max_depth: depth - 1, ..Default::default() }).unwrap();
            let deep = train_tree(&x, &y, &w, &TreeParams { max_depth: depth, ..Default::default() }).unwrap();
            prop_assert!(weighted_error(&deep, &x, &y, &w) <= weighted_error(&shallow, &x, &y, &w) + 1e-12);
        }

        #[test]
        fn doubling_weights_changes_nothing(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
            let y: Vec<i8> = (0..40).map(|_| if rng.uniform() < 0.5 { 1 } else { -1 }).collect();
            let w: Vec<f64> = (0..40).map(|_| (1 + rng.below(4)) as f64).collect();
            let w2: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
            let a = train_tree(&x, &y, &w, &TreeParams::default()).unwrap();
            let b = train_tree(&x, &y, &w2, &TreeParams::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn training_is_deterministic(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let x: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.normal(), rng.normal()]).collect();
            let y: Vec<i8> = (0..30).map(|_| if rng.uniform() < 0.5 { 1 } else { -1 }).collect();
            let w = vec![1.0; 30];
            prop_assert_eq!(
                train_tree(&x, &y, &w, &TreeParams::default()).unwrap(),
                train_tree(&x, &y, &w, &TreeParams::default()).unwrap()
            );
        }
    }
}
