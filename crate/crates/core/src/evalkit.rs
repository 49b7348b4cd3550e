//! Classification, ranking and regression metrics, plus a PCA projection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gendist::quantile_sorted;
use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predicted, both in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    /// Classes never predicted; their precision is reported as 0.
    pub unpredicted: Vec<String>,
}

/// `classes` fixes the label set and order; pass `None` to use the sorted
/// union of both label lists.
pub fn classification_metrics(
    truth: &[String],
    pred: &[String],
    classes: Option<&[String]>,
) -> Result<ClassificationReport> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<String> = truth.iter().chain(pred).cloned().collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let n = classes.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (t, p) in truth.iter().zip(pred) {
        let ti = *index
            .get(t.as_str())
            .ok_or_else(|| Error::Label(t.clone()))?;
        let pi = *index
            .get(p.as_str())
            .ok_or_else(|| Error::Label(p.clone()))?;
        confusion[ti][pi] += 1;
    }
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(n);
    let mut unpredicted = Vec::new();
    for (i, label) in classes.iter().enumerate() {
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = (0..n).map(|r| confusion[r][i]).sum();
        let tp = confusion[i][i] as f64;
        let precision = if predicted > 0 {
            tp / predicted as f64
        } else {
            unpredicted.push(label.clone());
            0.0
        };
        let recall = if support > 0 {
            tp / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            label: label.clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / truth.len() as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes,
        per_class,
        confusion,
        unpredicted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<String>,
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half, via average ranks.
pub fn binary_auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// One-vs-rest AUC per class; `scores[i][k]` is sample `i`'s score for
/// `classes[k]`, higher meaning more likely.
pub fn roc_auc_ovr(truth: &[String], scores: &[Vec<f64>], classes: &[String]) -> Result<AucReport> {
    if truth.len() != scores.len() {
        return Err(Error::Shape("labels and score rows differ in count".into()));
    }
    if scores
        .iter()
        .any(|r| r.len() != classes.len() || r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Shape(
            "score rows must be finite and one per class".into(),
        ));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    let mut skipped = Vec::new();
    for (k, c) in classes.iter().enumerate() {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (t, row) in truth.iter().zip(scores) {
            if t == c {
                pos.push(row[k]);
            } else {
                neg.push(row[k]);
            }
        }
        let auc = binary_auc(&pos, &neg);
        if auc.is_none() {
            skipped.push(c.clone());
        }
        per_class.push(auc);
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Metric(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(AucReport {
        macro_auc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rmse: f64,
    pub r_squared: f64,
    pub rmse_ci_low: f64,
    pub rmse_ci_high: f64,
    /// `pred - truth`, same shape as the inputs.
    pub errors: Vec<Vec<f64>>,
}

/// RMSE and R² over all entries, with a percentile 95% interval for RMSE
/// from `replicates` entry-level bootstrap resamples.
pub fn regression_metrics(
    pred: &[Vec<f64>],
    truth: &[Vec<f64>],
    replicates: usize,
    seed: u64,
) -> Result<RegressionReport> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("prediction and truth differ in shape".into()));
    }
    let p: Vec<f64> = pred.iter().flatten().copied().collect();
    let t: Vec<f64> = truth.iter().flatten().copied().collect();
    if t.is_empty() {
        return Err(Error::Shape("empty matrices".into()));
    }
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let ss_tot: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Metric(
            "truth has zero variance; R² undefined".into(),
        ));
    }
    let sq: Vec<f64> = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).collect();
    let ss_res: f64 = sq.iter().sum();
    let mut boots = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let mut rng = SeedRng::stream(seed, r as u64);
        let s: f64 = (0..sq.len()).map(|_| sq[rng.index(sq.len())]).sum();
        boots.push((s / n).sqrt());
    }
    boots.sort_by(f64::total_cmp);
    let rmse = (ss_res / n).sqrt();
    let (lo, hi) = if boots.is_empty() {
        (rmse, rmse)
    } else {
        (
            quantile_sorted(&boots, 0.025),
            quantile_sorted(&boots, 0.975),
        )
    };
    Ok(RegressionReport {
        rmse,
        r_squared: 1.0 - ss_res / ss_tot,
        rmse_ci_low: lo,
        rmse_ci_high: hi,
        errors: pred
            .iter()
            .zip(truth)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect(),
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<Vec<f64>>,
    /// Number of requested axes filled with zeros for lack of variance.
    pub padded: usize,
}

/// Projects centered points onto their top `dims` principal axes. Each axis
/// is signed so its largest-magnitude loading is positive.
pub fn pca_project(points: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let n = points.len();
    if n < dims || n == 0 {
        return Err(Error::Shape(format!(
            "{n} points cannot give {dims} components"
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let means: Vec<f64> = (0..d)
        .map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, k| points[i][k] - means[k]);
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut coords = vec![vec![0.0; dims]; n];
    let mut padded = 0;
    for (slot, &k) in order.iter().take(dims).enumerate() {
        if eig.eigenvalues[k] <= 1e-12 * top.max(f64::MIN_POSITIVE) || top == 0.0 {
            padded += 1;
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][slot] = sign
                * x.row(i)
                    .iter()
                    .zip(v.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
    }
    padded += dims.saturating_sub(d);
    Ok(Projection { coords, padded })
}
