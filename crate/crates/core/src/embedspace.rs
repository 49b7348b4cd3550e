//! Genetic-distance rows as a representation space.
//!
//! A species is represented by its vector of distances to a fixed set of
//! reference entries. Predicted vectors are turned into a label embedding
//! (one distance score per candidate species) and the argmin is the class.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gendist::{read_labeled_csv, write_labeled_csv, DistanceMatrix};
use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if row_labels.is_empty() || col_labels.is_empty() {
            return Err(Error::Data(
                "embedding matrix needs rows and columns".into(),
            ));
        }
        if values.len() != row_labels.len() || values.iter().any(|r| r.len() != col_labels.len()) {
            return Err(Error::Shape(format!(
                "embedding matrix must be {}x{}",
                row_labels.len(),
                col_labels.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &row_labels {
            if !seen.insert(l) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding entry".into()));
        }
        Ok(EmbeddingMatrix {
            row_labels,
            col_labels,
            values,
        })
    }

    pub fn from_distance_matrix(dm: &DistanceMatrix) -> Self {
        EmbeddingMatrix {
            row_labels: dm.labels().to_vec(),
            col_labels: dm.labels().to_vec(),
            values: dm.values().to_vec(),
        }
    }

    /// Rows for `rows`, columns for `cols`, both looked up in `dm`.
    pub fn from_distance_rows(
        dm: &DistanceMatrix,
        rows: &[String],
        cols: &[String],
    ) -> Result<Self> {
        let find = |l: &String| {
            dm.index_of(l)
                .ok_or_else(|| Error::ReferenceMismatch(format!("'{l}' not in distance matrix")))
        };
        let ri = rows.iter().map(find).collect::<Result<Vec<_>>>()?;
        let ci = cols.iter().map(find).collect::<Result<Vec<_>>>()?;
        let values = ri
            .iter()
            .map(|&i| ci.iter().map(|&j| dm.get(i, j)).collect())
            .collect();
        EmbeddingMatrix::new(rows.to_vec(), cols.to_vec(), values)
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    /// Embedding length L.
    pub fn width(&self) -> usize {
        self.col_labels.len()
    }

    pub fn row_index(&self, label: &str) -> Option<usize> {
        self.row_labels.iter().position(|l| l == label)
    }

    /// Column holding the row species' self-distance, if present.
    pub fn self_column(&self, row: usize) -> Option<usize> {
        self.col_labels
            .iter()
            .position(|c| *c == self.row_labels[row])
    }

    pub fn select_rows(&self, labels: &[String]) -> Result<EmbeddingMatrix> {
        let values = labels
            .iter()
            .map(|l| {
                self.row_index(l)
                    .map(|i| self.values[i].clone())
                    .ok_or_else(|| Error::ReferenceMismatch(format!("row '{l}' missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingMatrix::new(labels.to_vec(), self.col_labels.clone(), values)
    }

    pub fn select_columns(&self, labels: &[String]) -> Result<EmbeddingMatrix> {
        let idx = labels
            .iter()
            .map(|l| {
                self.col_labels
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::ReferenceMismatch(format!("column '{l}' missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        let values = self
            .values
            .iter()
            .map(|r| idx.iter().map(|&j| r[j]).collect())
            .collect();
        EmbeddingMatrix::new(self.row_labels.clone(), labels.to_vec(), values)
    }

    /// Rows of `self` followed by rows of `other`; columns must agree.
    pub fn concat_rows(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.col_labels != other.col_labels {
            return Err(Error::ReferenceMismatch(
                "embedding matrices use different reference columns".into(),
            ));
        }
        let mut rows = self.row_labels.clone();
        rows.extend(other.row_labels.iter().cloned());
        let mut values = self.values.clone();
        values.extend(other.values.iter().cloned());
        EmbeddingMatrix::new(rows, self.col_labels.clone(), values)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_labeled_csv(w, &self.row_labels, &self.col_labels, &self.values)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<EmbeddingMatrix> {
        let (cols, rows) = read_labeled_csv(r)?;
        let (labels, values) = rows.into_iter().unzip();
        EmbeddingMatrix::new(labels, cols, values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MetricTag {
    Cosine,
    Euclidean,
    Manhattan,
    Correlation,
}

impl MetricTag {
    pub const ALL: [MetricTag; 4] = [
        MetricTag::Cosine,
        MetricTag::Euclidean,
        MetricTag::Manhattan,
        MetricTag::Correlation,
    ];
}

impl fmt::Display for MetricTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricTag::Cosine => "COSINE",
            MetricTag::Euclidean => "EUCLIDEAN",
            MetricTag::Manhattan => "MANHATTAN",
            MetricTag::Correlation => "CORRELATION",
        })
    }
}

impl FromStr for MetricTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "COSINE" => Ok(MetricTag::Cosine),
            "EUCLIDEAN" => Ok(MetricTag::Euclidean),
            "MANHATTAN" => Ok(MetricTag::Manhattan),
            "CORRELATION" => Ok(MetricTag::Correlation),
            _ => Err(Error::InvalidParam(format!("unknown metric '{s}'"))),
        }
    }
}

pub fn metric_distance(a: &[f64], b: &[f64], metric: MetricTag) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    match metric {
        MetricTag::Euclidean => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
        MetricTag::Manhattan => Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()),
        MetricTag::Cosine => cosine_distance(a, b),
        MetricTag::Correlation => {
            let center = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| x - m).collect::<Vec<f64>>()
            };
            let (ca, cb) = (center(a), center(b));
            if ca.iter().all(|&x| x == 0.0) || cb.iter().all(|&x| x == 0.0) {
                return Err(Error::DegenerateVector(
                    "zero variance under CORRELATION".into(),
                ));
            }
            cosine_distance(&ca, &cb)
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("zero vector under COSINE".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    pub scores: Vec<f64>,
    pub metric: MetricTag,
}

impl LabelEmbedding {
    /// Index of the smallest score, first one on ties.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s < self.scores[best] {
                best = i;
            }
        }
        best
    }
}

pub fn label_embedding(
    pred: &[f64],
    refmat: &EmbeddingMatrix,
    metric: MetricTag,
) -> Result<LabelEmbedding> {
    if pred.len() != refmat.width() {
        return Err(Error::Shape(format!(
            "prediction has length {}, reference has {} columns",
            pred.len(),
            refmat.width()
        )));
    }
    let scores = refmat
        .values
        .iter()
        .map(|row| metric_distance(pred, row, metric))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LabelEmbedding { scores, metric })
}

pub fn classify(
    pred: &[f64],
    refmat: &EmbeddingMatrix,
    metric: MetricTag,
) -> Result<(String, LabelEmbedding)> {
    let le = label_embedding(pred, refmat, metric)?;
    Ok((refmat.row_labels[le.argmin()].clone(), le))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ZeroShotMode {
    /// Candidates are the unseen species only.
    Zsl,
    /// Candidates are seen and unseen species together.
    Gzsl,
}

pub fn zero_shot_classify(
    pred: &[f64],
    seen: &EmbeddingMatrix,
    unseen: &EmbeddingMatrix,
    mode: ZeroShotMode,
    metric: MetricTag,
) -> Result<String> {
    if seen.col_labels != unseen.col_labels {
        return Err(Error::ReferenceMismatch(
            "seen and unseen references use different columns".into(),
        ));
    }
    let (label, _) = match mode {
        ZeroShotMode::Zsl => classify(pred, unseen, metric)?,
        ZeroShotMode::Gzsl => classify(pred, &seen.concat_rows(unseen)?, metric)?,
    };
    Ok(label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub purity: f64,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub const KMEANS_MAX_ITER: usize = 100;

/// Lloyd's k-means with k-means++ seeding, scored by cluster purity.
pub fn kmeans_purity<L: PartialEq>(
    points: &[Vec<f64>],
    true_labels: &[L],
    k: usize,
    seed: u64,
) -> Result<KMeansResult> {
    if points.is_empty() || k == 0 {
        return Err(Error::KMeansConfig(
            "need k >= 1 and at least one point".into(),
        ));
    }
    if k > points.len() {
        return Err(Error::KMeansConfig(format!(
            "k = {k} exceeds {} points",
            points.len()
        )));
    }
    if true_labels.len() != points.len() {
        return Err(Error::Shape("labels and points differ in length".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points have different dimensions".into()));
    }

    let mut rng = SeedRng::new(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.index(points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(points.len())
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, centers.last().unwrap()));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut obj = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(p, center);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                obj += best.0;
                best.1
            })
            .collect();
        (a, obj)
    };

    let (mut assignments, obj) = assign(&centers);
    let mut trace = vec![obj];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous center
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (next, obj) = assign(&centers);
        trace.push(obj);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let mut majority = 0usize;
    for c in 0..k {
        let members: Vec<&L> = true_labels
            .iter()
            .zip(&assignments)
            .filter(|(_, &a)| a == c)
            .map(|(l, _)| l)
            .collect();
        let best = members
            .iter()
            .map(|l| members.iter().filter(|m| **m == *l).count())
            .max()
            .unwrap_or(0);
        majority += best;
    }
    Ok(KMeansResult {
        assignments,
        purity: majority as f64 / points.len() as f64,
        iterations,
        objective_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertedRow {
    pub matrix: DistanceMatrix,
    pub warnings: Vec<String>,
}

/// Appends a query species whose distances come from a predicted embedding.
///
/// `col_map[j]` names the species that embedding column `j` refers to (or
/// `None` for columns outside `species_dm`). Several columns mapping to one
/// species are averaged; negative predictions are clamped to zero.
pub fn insert_predicted_row(
    species_dm: &DistanceMatrix,
    pred: &[f64],
    col_map: &[Option<String>],
    query_label: &str,
) -> Result<InsertedRow> {
    if pred.len() != col_map.len() {
        return Err(Error::Shape(
            "prediction and column map differ in length".into(),
        ));
    }
    if species_dm.index_of(query_label).is_some() {
        return Err(Error::DuplicateLabel(query_label.to_string()));
    }
    let n = species_dm.len();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (v, target) in pred.iter().zip(col_map) {
        if let Some(label) = target {
            if let Some(i) = species_dm.index_of(label) {
                sums[i] += v;
                counts[i] += 1;
            }
        }
    }
    let mut warnings = Vec::new();
    let mut row = Vec::with_capacity(n + 1);
    for i in 0..n {
        if counts[i] == 0 {
            return Err(Error::ReferenceMismatch(format!(
                "species '{}' has no predicted column",
                species_dm.labels()[i]
            )));
        }
        let mut d = sums[i] / counts[i] as f64;
        if d < 0.0 {
            warnings.push(format!(
                "negative predicted distance {d:.4} to '{}' clamped to 0",
                species_dm.labels()[i]
            ));
            d = 0.0;
        }
        if !d.is_finite() {
            return Err(Error::Numerical("non-finite predicted distance".into()));
        }
        row.push(d);
    }
    row.push(0.0);
    let mut labels = species_dm.labels().to_vec();
    labels.push(query_label.to_string());
    let mut values: Vec<Vec<f64>> = species_dm
        .values()
        .iter()
        .zip(&row)
        .map(|(r, &d)| {
            let mut r = r.clone();
            r.push(d);
            r
        })
        .collect();
    values.push(row);
    Ok(InsertedRow {
        matrix: DistanceMatrix::new(labels, values)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refmat(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let n = rows.len();
        let l = rows[0].len();
        EmbeddingMatrix::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            (0..l).map(|j| format!("c{j}")).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn exact_row_match() {
        let m = refmat(vec![
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 1.5],
            vec![2.0, 1.5, 0.0],
            vec![0.5, 0.7, 0.9],
        ]);
        let (label, le) = classify(&[0.5, 0.7, 0.9], &m, MetricTag::Euclidean).unwrap();
        assert_eq!(label, "r3");
        assert_eq!(le.scores[3], 0.0);
    }

    #[test]
    fn cosine_orthogonal_and_parallel() {
        let m = refmat(vec![vec![0.0, 1.0]]);
        let le = label_embedding(&[1.0, 0.0], &m, MetricTag::Cosine).unwrap();
        assert_eq!(le.scores, vec![1.0]);

        let m = refmat(vec![vec![2.0, 4.0, 6.0]]);
        let cos = label_embedding(&[1.0, 2.0, 3.0], &m, MetricTag::Cosine).unwrap();
        assert!(cos.scores[0].abs() < 1e-15);
        let euc = label_embedding(&[1.0, 2.0, 3.0], &m, MetricTag::Euclidean).unwrap();
        assert!((euc.scores[0] - 14f64.sqrt()).abs() < 1e-12);
        assert!((euc.scores[0] - 3.7417).abs() < 1e-4);
    }

    #[test]
    fn degenerate_vectors() {
        let m = refmat(vec![vec![1.0, 2.0]]);
        assert!(matches!(
            label_embedding(&[0.0, 0.0], &m, MetricTag::Cosine),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            label_embedding(&[3.0, 3.0], &m, MetricTag::Correlation),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            label_embedding(&[1.0], &m, MetricTag::Euclidean),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ties_go_to_first_row() {
        let m = refmat(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (label, _) = classify(&[1.0, 0.0], &m, MetricTag::Manhattan).unwrap();
        assert_eq!(label, "r0");
    }

    #[test]
    fn zero_shot_modes() {
        let cols: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let seen = EmbeddingMatrix::new(
            vec!["a".into(), "b".into()],
            cols.clone(),
            vec![vec![0.0, 0.3, 0.5], vec![0.3, 0.0, 0.4]],
        )
        .unwrap();
        let unseen =
            EmbeddingMatrix::new(vec!["c".into()], cols, vec![vec![0.5, 0.4, 0.0]]).unwrap();
        for mode in [ZeroShotMode::Zsl, ZeroShotMode::Gzsl] {
            let l =
                zero_shot_classify(&[0.5, 0.4, 0.0], &seen, &unseen, mode, MetricTag::Euclidean)
                    .unwrap();
            assert_eq!(l, "c");
        }
        // a seen-looking prediction still maps to an unseen species under ZSL
        let l = zero_shot_classify(
            &[0.0, 0.3, 0.5],
            &seen,
            &unseen,
            ZeroShotMode::Zsl,
            MetricTag::Euclidean,
        )
        .unwrap();
        assert_eq!(l, "c");
        let other = unseen.select_columns(&["a".into(), "b".into()]).unwrap();
        assert!(matches!(
            zero_shot_classify(
                &[0.0, 0.0],
                &seen,
                &other,
                ZeroShotMode::Zsl,
                MetricTag::Euclidean
            ),
            Err(Error::ReferenceMismatch(_))
        ));
    }

    #[test]
    fn kmeans_single_cluster_purity_is_majority_share() {
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 2];
        let r = kmeans_purity(&points, &labels, 1, 0).unwrap();
        assert!((r.purity - 0.6).abs() < 1e-15);
        assert!(matches!(
            kmeans_purity(&points, &labels, 11, 0),
            Err(Error::KMeansConfig(_))
        ));
    }

    #[test]
    fn kmeans_separated_blobs() {
        let mut rng = SeedRng::new(9);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in [[0.0, 0.0], [10.0, 10.0]].iter().enumerate() {
            for _ in 0..25 {
                points.push(vec![
                    center[0] + 0.1 * rng.normal(),
                    center[1] + 0.1 * rng.normal(),
                ]);
                labels.push(c);
            }
        }
        let r = kmeans_purity(&points, &labels, 2, 1).unwrap();
        assert_eq!(r.purity, 1.0);
    }

    #[test]
    fn inserted_row_duplicates_species() {
        let dm = DistanceMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![0.0, 0.3, 0.4],
                vec![0.3, 0.0, 0.5],
                vec![0.4, 0.5, 0.0],
            ],
        )
        .unwrap();
        let map = vec![Some("a".into()), Some("b".into()), Some("c".into())];
        let out = insert_predicted_row(&dm, &[0.3, 0.0, 0.5], &map, "q").unwrap();
        assert_eq!(out.matrix.len(), 4);
        assert_eq!(out.matrix.get(1, 3), 0.0);
        assert_eq!(out.matrix.get(3, 2), 0.5);
        assert!(out.warnings.is_empty());

        // duplicate columns average; negatives clamp
        let map = vec![
            Some("a".into()),
            Some("a".into()),
            Some("b".into()),
            Some("c".into()),
            None,
        ];
        let out = insert_predicted_row(&dm, &[0.1, 0.3, -0.2, 0.4, 9.0], &map, "q").unwrap();
        assert!((out.matrix.get(3, 0) - 0.2).abs() < 1e-15);
        assert_eq!(out.matrix.get(3, 1), 0.0);
        assert_eq!(out.warnings.len(), 1);

        let map = vec![Some("a".into()), Some("b".into()), None];
        assert!(matches!(
            insert_predicted_row(&dm, &[0.1, 0.2, 0.3], &map, "q"),
            Err(Error::ReferenceMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let m = refmat(vec![vec![0.0, 0.25, 1.0 / 3.0], vec![0.1, 0.0, 2.5]]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(EmbeddingMatrix::read_csv(&buf[..]).unwrap(), m);
    }

    proptest! {
        #[test]
        fn classify_invariances(
            rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 2..7),
            pred in prop::collection::vec(0.01f64..1.0, 5),
            scale in 0.1f64..10.0,
            rot in 0usize..7,
        ) {
            let m = refmat(rows.clone());
            let n = rows.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let pm = EmbeddingMatrix::new(
                perm.iter().map(|&i| format!("r{i}")).collect(),
                m.col_labels().to_vec(),
                perm.iter().map(|&i| rows[i].clone()).collect(),
            ).unwrap();
            for metric in MetricTag::ALL {
                let Ok((a, le)) = classify(&pred, &m, metric) else { continue };
                let best = le.scores[le.argmin()];
                // unique minimum, so permutation may not change the winner
                if le.scores.iter().filter(|&&s| s == best).count() == 1 {
                    let (b, _) = classify(&pred, &pm, metric).unwrap();
                    prop_assert_eq!(&a, &b);
                }
                if matches!(metric, MetricTag::Cosine | MetricTag::Correlation) {
                    let scaled: Vec<f64> = pred.iter().map(|x| x * scale).collect();
                    let le2 = label_embedding(&scaled, &m, metric).unwrap();
                    let sorted_gap = {
                        let mut s = le.scores.clone();
                        s.sort_by(f64::total_cmp);
                        s.get(1).map_or(1.0, |x| x - s[0])
                    };
                    if sorted_gap > 1e-9 {
                        prop_assert_eq!(le2.argmin(), le.argmin());
                    }
                }
            }
        }

        #[test]
        fn zsl_agrees_with_gzsl_when_unseen_wins(
            seen in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..5),
            unseen in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..4),
            pred in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let cols: Vec<String> = (0..4).map(|j| format!("c{j}")).collect();
            let s = EmbeddingMatrix::new((0..seen.len()).map(|i| format!("s{i}")).collect(), cols.clone(), seen).unwrap();
            let u = EmbeddingMatrix::new((0..unseen.len()).map(|i| format!("u{i}")).collect(), cols, unseen).unwrap();
            let g = zero_shot_classify(&pred, &s, &u, ZeroShotMode::Gzsl, MetricTag::Euclidean).unwrap();
            if g.starts_with('u') {
                let z = zero_shot_classify(&pred, &s, &u, ZeroShotMode::Zsl, MetricTag::Euclidean).unwrap();
                prop_assert_eq!(g, z);
            }
        }

        #[test]
        fn kmeans_objective_non_increasing(seed in 0u64..200, k in 1usize..5) {
            let mut rng = SeedRng::new(seed);
            let points: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.normal(), rng.normal(), rng.normal()]).collect();
            let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
            let r = kmeans_purity(&points, &labels, k, seed).unwrap();
            for w in r.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(r.purity > 0.0 && r.purity <= 1.0);
        }
    }
}
