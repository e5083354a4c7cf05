//! One-versus-all error-correcting output codes over boosted binary models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{predict_binary, train_binary, BinaryEnsemble, BoostParams};
use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// `P x P`, `+1` on the diagonal and `-1` elsewhere; row `i` is the codeword
/// of the `i`-th category.
pub fn build_coding_matrix(p: usize) -> Result<Vec<Vec<i8>>> {
    if p < 2 {
        return Err(Error::Invalid(format!("coding matrix needs at least 2 categories, got {p}")));
    }
    Ok((0..p)
        .map(|i| (0..p).map(|j| if i == j { 1 } else { -1 }).collect())
        .collect())
}

pub fn hamming(a: &[i8], b: &[i8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Index of the nearest codeword. Ties prefer the larger code-weighted
/// margin sum, then the lower index.
pub fn decode(code: &[i8], margins: &[f64], matrix: &[Vec<i8>]) -> usize {
    let mut best = 0;
    let mut best_dist = usize::MAX;
    let mut best_support = f64::NEG_INFINITY;
    for (i, row) in matrix.iter().enumerate() {
        let dist = hamming(code, row);
        let support: f64 = margins.iter().zip(row).map(|(m, &s)| m * s as f64).sum();
        if dist < best_dist || (dist == best_dist && support > best_support) {
            best = i;
            best_dist = dist;
            best_support = support;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub category_count: usize,
    /// category id of each coding-matrix row
    pub categories: Vec<u32>,
    pub coding_matrix: Vec<Vec<i8>>,
    pub ensembles: Vec<BinaryEnsemble>,
    pub feature_count: usize,
    pub region_ids: Vec<String>,
    pub seed: u64,
    pub params: BoostParams,
}

impl EnsembleModel {
    pub fn validate(&self) -> Result<()> {
        let p = self.category_count;
        if self.categories.len() != p || self.coding_matrix.len() != p || self.ensembles.is_empty() {
            return Err(Error::malformed("model", "category count disagrees with contents"));
        }
        if self.coding_matrix.iter().any(|r| r.len() != self.ensembles.len() || r.iter().any(|&s| s != 1 && s != -1)) {
            return Err(Error::malformed("model", "coding matrix has the wrong shape or non-sign entries"));
        }
        for i in 0..p {
            for j in i + 1..p {
                if self.coding_matrix[i] == self.coding_matrix[j] {
                    return Err(Error::malformed("model", format!("coding rows {i} and {j} coincide")));
                }
            }
        }
        for e in &self.ensembles {
            e.validate()?;
            if e.feature_count != self.feature_count {
                return Err(Error::malformed("model", "ensemble feature count mismatch"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MulticlassPrediction {
    pub category: u32,
    pub code: Vec<i8>,
    pub margins: Vec<f64>,
}

/// Seed of the binary model for category `m`.
pub fn category_seed(master: u64, category: u32) -> u64 {
    derive_seed(master, category as u64)
}

pub fn one_vs_all_labels(labels: &[u32], category: u32) -> Vec<i8> {
    labels.iter().map(|&l| if l == category { 1 } else { -1 }).collect()
}

pub fn train_multiclass(features: &FeatureMatrix, params: &BoostParams, seed: u64) -> Result<EnsembleModel> {
    let categories = features.categories();
    if categories.len() < 2 {
        return Err(Error::Invalid(format!(
            "multiclass training needs at least 2 categories, got {}",
            categories.len()
        )));
    }
    for &c in &categories {
        let count = features.labels.iter().filter(|&&l| l == c).count();
        if count < 2 {
            return Err(Error::TooFewInstances { category: c, count });
        }
    }
    let coding_matrix = build_coding_matrix(categories.len())?;
    let ensembles = categories
        .par_iter()
        .map(|&c| {
            let y = one_vs_all_labels(&features.labels, c);
            train_binary(&features.columns, &y, params, category_seed(seed, c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        category_count: categories.len(),
        categories,
        coding_matrix,
        ensembles,
        feature_count: features.feature_count(),
        region_ids: features.region_ids.clone(),
        seed,
        params: *params,
    })
}

pub fn predict_multiclass(model: &EnsembleModel, x: &[f64]) -> Result<MulticlassPrediction> {
    let mut code = Vec::with_capacity(model.ensembles.len());
    let mut margins = Vec::with_capacity(model.ensembles.len());
    for e in &model.ensembles {
        let (label, margin) = predict_binary(e, x)?;
        code.push(label);
        margins.push(margin);
    }
    let row = decode(&code, &margins, &model.coding_matrix);
    Ok(MulticlassPrediction {
        category: model.categories[row],
        code,
        margins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coding_matrices() {
        assert_eq!(build_coding_matrix(2).unwrap(), vec![vec![1, -1], vec![-1, 1]]);
        let m4 = build_coding_matrix(4).unwrap();
        assert_eq!(m4.len(), 4);
        for (i, row) in m4.iter().enumerate() {
            assert_eq!(row[i], 1);
            assert_eq!(row.iter().filter(|&&s| s == -1).count(), 3);
        }
        for p in 2..10 {
            let m = build_coding_matrix(p).unwrap();
            for i in 0..p {
                for j in 0..p {
                    if i != j {
                        assert_eq!(hamming(&m[i], &m[j]), 2);
                    }
                }
            }
        }
        assert!(build_coding_matrix(1).is_err());
    }

    #[test]
    fn worked_four_class_example() {
        let m = build_coding_matrix(4).unwrap();
        let flat = [0.0; 4];
        assert_eq!(decode(&[1, -1, -1, -1], &flat, &m), 0);
        assert_eq!(decode(&[-1, 1, -1, -1], &flat, &m), 1);
    }

    #[test]
    fn tie_broken_by_margins() {
        let m = build_coding_matrix(4).unwrap();
        assert_eq!(decode(&[1, 1, -1, -1], &[0.9, 0.2, -1.0, -1.0], &m), 0);
        assert_eq!(decode(&[1, 1, -1, -1], &[0.2, 0.9, -1.0, -1.0], &m), 1);
        // equal support falls back to the lowest index
        assert_eq!(decode(&[-1, -1, -1, -1], &[-1.0; 4], &m), 0);
    }
}
