//! Leave-one-subject-out evaluation, accuracy, AUC and category correlation
//! matrices.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{pearson, BoostParams};
use crate::data::FeatureMatrix;
use crate::ecoc::{predict_multiclass, train_multiclass};
use crate::error::{Error, Result};

/// Subject id of a session: everything before the first `_`.
pub fn subject_of(session: &str) -> &str {
    session.split('_').next().unwrap_or(session)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per subject, subjects in lexicographic order.
pub fn loso_split(features: &FeatureMatrix) -> Result<Vec<Fold>> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in features.sessions.iter().enumerate() {
        by_subject.entry(subject_of(s)).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(Error::SingleSubject);
    }
    Ok(by_subject
        .iter()
        .map(|(subject, test)| {
            let train = (0..features.len())
                .filter(|i| subject_of(&features.sessions[*i]) != *subject)
                .collect();
            Fold {
                subject: subject.to_string(),
                train,
                test: test.clone(),
            }
        })
        .collect())
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimMismatch(format!("{} predictions, {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Area under the ROC curve from the Mann-Whitney rank sum, ties sharing
/// their mean rank.
pub fn auc(margins: &[f64], positive: &[bool]) -> Result<f64> {
    if margins.len() != positive.len() {
        return Err(Error::DimMismatch(format!("{} margins, {} labels", margins.len(), positive.len())));
    }
    if let Some(i) = margins.iter().position(|m| m.is_nan()) {
        return Err(Error::NonFinite { index: i });
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MissingClass);
    }
    let mut order: Vec<usize> = (0..margins.len()).collect();
    order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && margins[order[j + 1]] == margins[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-feature z-scoring fitted on one set and applied to others.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of `columns`; a constant feature keeps unit scale.
    pub fn fit(columns: &[Vec<f64>]) -> Result<Self> {
        let first = columns.first().ok_or(Error::EmptyTrainingSet)?;
        let n = columns.len() as f64;
        let e = first.len();
        let mut mean = vec![0.0; e];
        for c in columns {
            mean.iter_mut().zip(c).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; e];
        for c in columns {
            var.iter_mut().zip(c).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, fm: &FeatureMatrix) -> FeatureMatrix {
        FeatureMatrix {
            columns: fm.columns.iter().map(|c| self.apply(c)).collect(),
            ..fm.clone()
        }
    }
}

/// Mean feature vector of every category, in ascending category order.
pub fn category_means(features: &FeatureMatrix) -> Vec<(u32, Vec<f64>)> {
    features
        .categories()
        .into_iter()
        .map(|c| {
            let idx: Vec<usize> = (0..features.len()).filter(|&i| features.labels[i] == c).collect();
            (c, crate::boost::mean_vector(&features.columns, &idx))
        })
        .collect()
}

/// Pearson correlation between every pair of category mean vectors.
pub fn correlation_matrix(features: &FeatureMatrix) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    let means = category_means(features);
    if means.len() < 2 {
        return Err(Error::Invalid("correlation matrix needs at least 2 categories".into()));
    }
    let p = means.len();
    let mut m = vec![vec![0.0; p]; p];
    for i in 0..p {
        if pearson(&means[i].1, &means[i].1).is_none() {
            return Err(Error::ZeroVariance(format!("mean of category {}", means[i].0)));
        }
        m[i][i] = 1.0;
        for j in 0..i {
            let r = pearson(&means[i].1, &means[j].1)
                .ok_or_else(|| Error::ZeroVariance(format!("categories {} and {}", means[i].0, means[j].0)))?
                .clamp(-1.0, 1.0);
            m[i][j] = r;
            m[j][i] = r;
        }
    }
    Ok((means.into_iter().map(|(c, _)| c).collect(), m))
}

/// Mean of the strictly off-diagonal entries.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let p = m.len();
    let mut s = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                s += m[i][j];
            }
        }
    }
    s / (p * (p - 1)) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// population standard deviation
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct EvalConfig {
    pub boost: BoostParams,
    /// z-score features with training-fold statistics
    pub normalize: bool,
}


#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryResult {
    pub category: u32,
    pub accuracy: f64,
    /// absent when the test fold lacks one of the two classes
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub subject: String,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub binary: Vec<BinaryResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: u32,
    pub accuracy: Summary,
    pub auc: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub seed: u64,
    pub categories: Vec<u32>,
    pub folds: Vec<FoldReport>,
    pub accuracy: Summary,
    pub binary: Vec<CategoryReport>,
    /// `confusion[i][j]`: instances of category `i` predicted as `j`
    pub confusion: Vec<Vec<usize>>,
}

struct FoldOutcome {
    report: FoldReport,
    pairs: Vec<(u32, u32)>,
}

/// Train and test matrices of one fold. With `normalize`, both are z-scored
/// with statistics of the training part alone, which are also returned.
pub fn prepare_fold(features: &FeatureMatrix, fold: &Fold, normalize: bool) -> Result<(FeatureMatrix, FeatureMatrix, Option<Standardizer>)> {
    let train = features.subset(&fold.train);
    let test = features.subset(&fold.test);
    if !normalize {
        return Ok((train, test, None));
    }
    let z = Standardizer::fit(&train.columns)?;
    Ok((z.apply_all(&train), z.apply_all(&test), Some(z)))
}

fn run_fold(features: &FeatureMatrix, fold: &Fold, categories: &[u32], config: &EvalConfig, seed: u64) -> Result<FoldOutcome> {
    let (train, test, _) = prepare_fold(features, fold, config.normalize)?;
    let model = train_multiclass(&train, &config.boost, seed)?;
    let preds = test
        .columns
        .iter()
        .map(|x| predict_multiclass(&model, x))
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<u32> = preds.iter().map(|p| p.category).collect();

    let mut binary = Vec::with_capacity(categories.len());
    for &c in categories {
        let Some(row) = model.categories.iter().position(|&m| m == c) else {
            continue;
        };
        let truth: Vec<bool> = test.labels.iter().map(|&l| l == c).collect();
        let said: Vec<bool> = preds.iter().map(|p| p.code[row] > 0).collect();
        let margins: Vec<f64> = preds.iter().map(|p| p.margins[row]).collect();
        let auc = match auc(&margins, &truth) {
            Ok(a) => Some(a),
            Err(Error::MissingClass) => None,
            Err(e) => return Err(e),
        };
        binary.push(BinaryResult {
            category: c,
            accuracy: accuracy(&said, &truth)?,
            auc,
        });
    }
    Ok(FoldOutcome {
        report: FoldReport {
            subject: fold.subject.clone(),
            train_size: fold.train.len(),
            test_size: fold.test.len(),
            accuracy: accuracy(&predicted, &test.labels)?,
            binary,
        },
        pairs: test.labels.iter().copied().zip(predicted).collect(),
    })
}

/// Leave-one-subject-out evaluation of the one-versus-all boosted decoder.
/// Every fold trains with the same `seed`.
pub fn evaluate(features: &FeatureMatrix, config: &EvalConfig, seed: u64) -> Result<Report> {
    let folds = loso_split(features)?;
    let categories = features.categories();
    let outcomes = folds
        .par_iter()
        .map(|f| run_fold(features, f, &categories, config, seed))
        .collect::<Result<Vec<_>>>()?;

    let p = categories.len();
    let mut confusion = vec![vec![0usize; p]; p];
    for o in &outcomes {
        for (t, pr) in &o.pairs {
            let i = categories.binary_search(t).expect("truth is a known category");
            let j = categories.binary_search(pr).expect("prediction is a known category");
            confusion[i][j] += 1;
        }
    }
    let accs: Vec<f64> = outcomes.iter().map(|o| o.report.accuracy).collect();
    let binary = categories
        .iter()
        .map(|&c| {
            let rows: Vec<&BinaryResult> = outcomes
                .iter()
                .flat_map(|o| o.report.binary.iter().filter(move |b| b.category == c))
                .collect();
            let a: Vec<f64> = rows.iter().map(|b| b.accuracy).collect();
            let u: Vec<f64> = rows.iter().filter_map(|b| b.auc).collect();
            CategoryReport {
                category: c,
                accuracy: Summary::of(&a).unwrap_or(Summary { mean: f64::NAN, std: f64::NAN, n: 0 }),
                auc: Summary::of(&u),
            }
        })
        .collect();
    Ok(Report {
        seed,
        categories,
        folds: outcomes.into_iter().map(|o| o.report).collect(),
        accuracy: Summary::of(&accs).expect("at least two folds"),
        binary,
        confusion,
    })
}

/// Flat table: one row per fold and category plus summary rows.
pub fn report_csv(report: &Report) -> String {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut out = String::from("scope,subject,category,accuracy,accuracy_std,auc,auc_std\n");
    for f in &report.folds {
        out.push_str(&format!("fold,{},all,{:?},,,\n", f.subject, f.accuracy));
        for b in &f.binary {
            out.push_str(&format!("fold,{},{},{:?},,{},\n", f.subject, b.category, b.accuracy, fmt_opt(b.auc)));
        }
    }
    out.push_str(&format!(
        "mean,all,all,{:?},{:?},,\n",
        report.accuracy.mean, report.accuracy.std
    ));
    for c in &report.binary {
        out.push_str(&format!(
            "mean,all,{},{:?},{:?},{},{}\n",
            c.category,
            c.accuracy.mean,
            c.accuracy.std,
            fmt_opt(c.auc.map(|a| a.mean)),
            fmt_opt(c.auc.map(|a| a.std))
        ));
    }
    out
}
