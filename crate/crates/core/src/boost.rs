//! Imbalance-aware boosting.
//!
//! The majority class is shuffled and split into `J = floor(|L| / |S|)`
//! near-equal parts. Round `n` trains a weighted tree on the minority class,
//! the `n`-th majority part and the instances the previous round got wrong.
//! Majority instances are down-weighted by `1 - |r|`, where `r` is the
//! Pearson correlation between the minority and majority-part mean feature
//! vectors. Each tree is weighted by `α = ½ ln((1 - ε) / ε)`, `ε` being its
//! training misclassification rate, and the ensemble votes by the sign of
//! the α-weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tree::{train_tree, TreeNode, TreeParams};

pub const EPSILON_CLAMP: f64 = 1e-6;
pub const WEIGHT_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// One correlation per round between the two class means.
    #[default]
    SetLevel,
    /// Each majority instance correlated against the minority mean.
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoostParams {
    pub tree: TreeParams,
    pub weighting: Weighting,
}

/// Serialises `f64` as a decimal string with 17 significant digits.
pub(crate) mod exact_decimal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:.16e}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse::<f64>().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub tree: TreeNode,
    #[serde(with = "exact_decimal")]
    pub alpha: f64,
    #[serde(with = "exact_decimal")]
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryEnsemble {
    pub members: Vec<Member>,
    pub iterations: usize,
    pub seed: u64,
    pub feature_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// minority instance indices
    pub small: Vec<usize>,
    pub large: Vec<usize>,
    pub small_label: i8,
    pub parts: usize,
}

pub fn balance_ratio(small: usize, large: usize) -> usize {
    (large / small).max(1)
}

/// Split by label; the smaller class is always `small` (`+1` wins ties).
pub fn partition_classes(y: &[i8]) -> Result<Partition> {
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] <= 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::MissingClass);
    }
    let (small, large, small_label) = if pos.len() <= neg.len() { (pos, neg, 1) } else { (neg, pos, -1) };
    let parts = balance_ratio(small.len(), large.len());
    Ok(Partition {
        small,
        large,
        small_label,
        parts,
    })
}

/// Seeded shuffle dealt round-robin into `parts` groups.
pub fn sample_large_class(large: &[usize], parts: usize, seed: u64) -> Vec<Vec<usize>> {
    let parts = parts.max(1);
    let mut order = large.to_vec();
    SeededRng::new(seed).shuffle(&mut order);
    let mut out = vec![Vec::with_capacity(order.len() / parts + 1); parts];
    for (k, i) in order.into_iter().enumerate() {
        out[k % parts].push(i);
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

pub fn mean_vector(x: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let e = x.first().map_or(0, |r| r.len());
    let mut m = vec![0.0; e];
    for &i in idx {
        for (acc, v) in m.iter_mut().zip(&x[i]) {
            *acc += v;
        }
    }
    let n = idx.len().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn correlation_weight(r: Option<f64>) -> f64 {
    match r {
        Some(r) => (1.0 - r.abs()).clamp(WEIGHT_FLOOR, 1.0),
        None => {
            log::warn!("zero-variance mean vector in correlation weighting; using weight 1");
            1.0
        }
    }
}

/// Weights for `small ++ part ++ hard`, in that order.
pub fn iteration_weights(x: &[Vec<f64>], small: &[usize], part: &[usize], hard: &[usize], weighting: Weighting) -> Vec<f64> {
    let small_mean = mean_vector(x, small);
    let mut w = vec![1.0; small.len()];
    match weighting {
        Weighting::SetLevel => {
            let r = pearson(&small_mean, &mean_vector(x, part));
            w.extend(std::iter::repeat_n(correlation_weight(r), part.len()));
        }
        Weighting::PerInstance => {
            w.extend(part.iter().map(|&i| correlation_weight(pearson(&small_mean, &x[i]))));
        }
    }
    w.extend(std::iter::repeat_n(1.0, hard.len()));
    w
}

/// `½ ln((1 - ε) / ε)` with `ε` clamped to `[1e-6, 1 - 1e-6]`.
pub fn alpha_for(epsilon: f64) -> f64 {
    let e = epsilon.clamp(EPSILON_CLAMP, 1.0 - EPSILON_CLAMP);
    0.5 * ((1.0 - e) / e).ln()
}

/// What one boosting round saw.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    /// training instances: minority, then the majority part, then carried-over failures
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub part_len: usize,
    pub misclassified: Vec<usize>,
}

pub fn train_binary(x: &[Vec<f64>], y: &[i8], params: &BoostParams, seed: u64) -> Result<BinaryEnsemble> {
    train_binary_traced(x, y, params, seed).map(|(e, _)| e)
}

pub fn train_binary_traced(
    x: &[Vec<f64>],
    y: &[i8],
    params: &BoostParams,
    seed: u64,
) -> Result<(BinaryEnsemble, Vec<RoundTrace>)> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch(format!("{} instances, {} labels", x.len(), y.len())));
    }
    let partition = partition_classes(y)?;
    let feature_count = x[0].len();
    let parts = sample_large_class(&partition.large, partition.parts, seed);
    let mut in_small = vec![false; x.len()];
    partition.small.iter().for_each(|&i| in_small[i] = true);

    let mut hard: Vec<usize> = Vec::new();
    let mut members = Vec::with_capacity(parts.len());
    let mut trace = Vec::with_capacity(parts.len());
    for part in &parts {
        let mut in_round = in_small.clone();
        part.iter().for_each(|&i| in_round[i] = true);
        let extra: Vec<usize> = hard.iter().copied().filter(|&i| !in_round[i]).collect();

        let idx: Vec<usize> = partition.small.iter().chain(part).chain(&extra).copied().collect();
        let weights = iteration_weights(x, &partition.small, part, &extra, params.weighting);
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<i8> = idx.iter().map(|&i| y[i]).collect();
        let tree = train_tree(&xs, &ys, &weights, &params.tree)?;

        hard = idx
            .iter()
            .zip(&xs)
            .zip(&ys)
            .filter(|((_, xi), &yi)| tree.predict(xi) != yi)
            .map(|((&i, _), _)| i)
            .collect();
        let epsilon = hard.len() as f64 / idx.len() as f64;
        members.push(Member {
            tree,
            alpha: alpha_for(epsilon),
            epsilon,
        });
        trace.push(RoundTrace {
            indices: idx,
            weights,
            part_len: part.len(),
            misclassified: hard.clone(),
        });
    }
    let ensemble = BinaryEnsemble {
        iterations: members.len(),
        members,
        seed,
        feature_count,
    };
    Ok((ensemble, trace))
}

impl BinaryEnsemble {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.alpha * m.tree.predict(x) as f64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::malformed("model", "empty ensemble"));
        }
        if self.members.iter().any(|m| !m.alpha.is_finite()) {
            return Err(Error::malformed("model", "non-finite alpha"));
        }
        if self
            .members
            .iter()
            .any(|m| m.tree.max_feature().is_some_and(|f| f >= self.feature_count))
        {
            return Err(Error::malformed("model", "tree references a missing feature"));
        }
        Ok(())
    }
}

/// `(sign(margin), margin)` with a zero margin voting `+1`.
pub fn predict_binary(ens: &BinaryEnsemble, x: &[f64]) -> Result<(i8, f64)> {
    if x.len() != ens.feature_count {
        return Err(Error::DimMismatch(format!("expected {} features, got {}", ens.feature_count, x.len())));
    }
    let m = ens.margin(x);
    Ok((if m >= 0.0 { 1 } else { -1 }, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(label: i8) -> TreeNode {
        TreeNode::Leaf { label, purity: 1.0 }
    }

    fn ensemble(members: Vec<(i8, f64)>) -> BinaryEnsemble {
        BinaryEnsemble {
            iterations: members.len(),
            members: members
                .into_iter()
                .map(|(l, a)| Member {
                    tree: leaf(l),
                    alpha: a,
                    epsilon: 0.0,
                })
                .collect(),
            seed: 0,
            feature_count: 1,
        }
    }

    fn labels(pos: usize, neg: usize) -> Vec<i8> {
        std::iter::repeat_n(1, pos).chain(std::iter::repeat_n(-1, neg)).collect()
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_classes(&labels(3, 7)).unwrap().parts, 2);
        assert_eq!(partition_classes(&labels(5, 5)).unwrap().parts, 1);
        assert_eq!(partition_classes(&labels(10, 90)).unwrap().parts, 9);
        let swapped = partition_classes(&labels(8, 2)).unwrap();
        assert_eq!(swapped.small_label, -1);
        assert_eq!(swapped.small.len(), 2);
        assert_eq!(swapped.parts, 4);
        assert!(matches!(partition_classes(&labels(4, 0)), Err(Error::MissingClass)));
    }

    #[test]
    fn sampling_sizes_and_determinism() {
        let large: Vec<usize> = (0..7).collect();
        let parts = sample_large_class(&large, 2, 99);
        let mut sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 4]);
        assert_eq!(parts, sample_large_class(&large, 2, 99));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, large);
        for seed in 0..5 {
            let one = sample_large_class(&large, 1, seed);
            let mut p = one[0].clone();
            p.sort_unstable();
            assert_eq!(p, large);
        }
    }

    #[test]
    fn identical_means_hit_the_floor() {
        let x = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        let w = iteration_weights(&x, &[0], &[1], &[], Weighting::SetLevel);
        assert_eq!(w, vec![1.0, WEIGHT_FLOOR]);
    }

    #[test]
    fn uncorrelated_means_keep_unit_weight() {
        // centred, orthogonal vectors: r = 0
        let x = vec![vec![1.0, -1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, -1.0]];
        let w = iteration_weights(&x, &[0], &[1], &[], Weighting::SetLevel);
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn negative_half_correlation() {
        // cov / (sd sd) = -0.5 by construction: b = -0.5 a + sqrt(0.75) c with
        // a, c centred, orthogonal, equal norm
        let a = [1.0, -1.0, 1.0, -1.0];
        let c = [1.0, 1.0, -1.0, -1.0];
        let b: Vec<f64> = a.iter().zip(&c).map(|(a, c)| -0.5 * a + 0.75f64.sqrt() * c).collect();
        assert!((pearson(&a, &b).unwrap() + 0.5).abs() < 1e-12);
        let x = vec![a.to_vec(), b];
        let w = iteration_weights(&x, &[0], &[1], &[5, 6], Weighting::SetLevel);
        assert_eq!(w.len(), 4);
        assert!((w[1] - 0.5).abs() < 1e-12);
        assert_eq!(&w[2..], &[1.0, 1.0]);
    }

    #[test]
    fn constant_mean_gives_unit_weight() {
        let x = vec![vec![2.0, 2.0, 2.0], vec![1.0, 5.0, 3.0]];
        assert_eq!(iteration_weights(&x, &[0], &[1], &[], Weighting::SetLevel), vec![1.0, 1.0]);
    }

    #[test]
    fn alpha_closed_forms() {
        assert_eq!(alpha_for(0.5), 0.0);
        assert!((alpha_for(0.25) - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert!((alpha_for(0.0) - 0.5 * (1e6f64 - 1.0).ln()).abs() < 1e-9);
        assert!(alpha_for(0.4) > 0.0 && alpha_for(0.6) < 0.0);
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(predict_binary(&ensemble(vec![(-1, 1.0)]), &[0.0]).unwrap(), (-1, -1.0));
        assert_eq!(predict_binary(&ensemble(vec![(1, 2.0), (-1, 1.0)]), &[0.0]).unwrap(), (1, 1.0));
        assert_eq!(predict_binary(&ensemble(vec![(1, 0.0), (-1, 0.0)]), &[0.0]).unwrap(), (1, 0.0));
        assert!(predict_binary(&ensemble(vec![(1, 1.0)]), &[0.0, 1.0]).is_err());
    }

    fn imbalanced(seed: u64) -> (Vec<Vec<f64>>, Vec<i8>) {
        let mut rng = SeededRng::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let pos = i < 8;
            let shift = if pos { 3.0 } else { 0.0 };
            x.push(vec![rng.normal() + shift, rng.normal(), rng.normal() - shift]);
            y.push(if pos { 1 } else { -1 });
        }
        (x, y)
    }

    #[test]
    fn ensemble_shape_and_determinism() {
        let (x, y) = imbalanced(4);
        let a = train_binary(&x, &y, &BoostParams::default(), 11).unwrap();
        assert_eq!(a.iterations, 52 / 8);
        assert_eq!(a.members.len(), a.iterations);
        assert!(a.members.iter().all(|m| m.alpha.is_finite()));
        assert_eq!(a, train_binary(&x, &y, &BoostParams::default(), 11).unwrap());
        let per = BoostParams {
            weighting: Weighting::PerInstance,
            ..Default::default()
        };
        assert!(train_binary(&x, &y, &per, 11).is_ok());
    }

    #[test]
    fn separable_data_saturates_alpha() {
        // a wide gap between the classes: every round's stump lands inside it
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i < 5 { i as f64 } else { 100.0 + i as f64 }, (i % 3) as f64])
            .collect();
        let y: Vec<i8> = (0..40).map(|i| if i < 5 { 1 } else { -1 }).collect();
        let ens = train_binary(&x, &y, &BoostParams::default(), 1).unwrap();
        for m in &ens.members {
            assert_eq!(m.epsilon, 0.0);
            assert!((m.alpha - 0.5 * (1e6f64 - 1.0).ln()).abs() < 1e-9);
        }
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(predict_binary(&ens, xi).unwrap().0, yi);
        }
    }

    #[test]
    fn alpha_serialises_with_17_digits() {
        let m = Member {
            tree: leaf(1),
            alpha: 0.5 * 3f64.ln(),
            epsilon: 0.25,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"alpha\":\"5.4930614433405489e-1\""), "{s}");
        let back: Member = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
