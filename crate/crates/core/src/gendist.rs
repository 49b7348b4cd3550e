//! Pairwise genetic distances under nucleotide substitution models.
//!
//! All estimators work from [`PairCounts`], the per-pair sufficient
//! statistics. `Tn93Mcl` is the composite-likelihood flavour of Tamura-Nei:
//! base frequencies are pooled over every pair in the set before the
//! closed-form estimator is applied to each pair.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::seqio::AlignedSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    #[serde(rename = "P_DIST")]
    PDist,
    #[serde(rename = "JC69")]
    Jc69,
    #[serde(rename = "K2P")]
    K2p,
    #[serde(rename = "TN93_MCL")]
    Tn93Mcl,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelTag::PDist => "P_DIST",
            ModelTag::Jc69 => "JC69",
            ModelTag::K2p => "K2P",
            ModelTag::Tn93Mcl => "TN93_MCL",
        })
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P_DIST" | "P" => Ok(ModelTag::PDist),
            "JC69" | "JC" => Ok(ModelTag::Jc69),
            "K2P" | "K80" => Ok(ModelTag::K2p),
            "TN93_MCL" | "TN93" | "MCL" => Ok(ModelTag::Tn93Mcl),
            _ => Err(Error::InvalidParam(format!("unknown model '{s}'"))),
        }
    }
}

/// Per-pair substitution counts over the compared sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub compared_sites: usize,
    pub transitions_ag: usize,
    pub transitions_ct: usize,
    pub transversions: usize,
    /// A, C, G, T counted over the compared sites of both sequences.
    pub base_counts: [usize; 4],
}

impl PairCounts {
    pub fn differences(&self) -> usize {
        self.transitions_ag + self.transitions_ct + self.transversions
    }

    pub fn p_distance(&self) -> f64 {
        self.differences() as f64 / self.compared_sites as f64
    }

    fn add(&mut self, other: &PairCounts) {
        self.compared_sites += other.compared_sites;
        self.transitions_ag += other.transitions_ag;
        self.transitions_ct += other.transitions_ct;
        self.transversions += other.transversions;
        for k in 0..4 {
            self.base_counts[k] += other.base_counts[k];
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Deletion<'a> {
    /// Skip sites where either residue is a gap or `N`.
    Pairwise,
    /// Compare only the columns flagged `true`; gap/`N` sites inside the mask
    /// are still skipped.
    Mask(&'a [bool]),
}

fn base_index(b: u8) -> Option<usize> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

pub fn pair_counts(a: &[u8], b: &[u8], deletion: Deletion<'_>) -> Result<PairCounts> {
    if a.len() != b.len() {
        return Err(Error::AlignmentLength {
            label: "pair".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    if let Deletion::Mask(mask) = deletion {
        if mask.len() != a.len() {
            return Err(Error::InvalidParam("deletion mask length".into()));
        }
    }
    let mut counts = PairCounts::default();
    for (site, (&x, &y)) in a.iter().zip(b).enumerate() {
        if let Deletion::Mask(mask) = deletion {
            if !mask[site] {
                continue;
            }
        }
        let (Some(i), Some(j)) = (base_index(x), base_index(y)) else {
            continue;
        };
        counts.compared_sites += 1;
        counts.base_counts[i] += 1;
        counts.base_counts[j] += 1;
        if i != j {
            match (i.min(j), i.max(j)) {
                (0, 2) => counts.transitions_ag += 1,
                (1, 3) => counts.transitions_ct += 1,
                _ => counts.transversions += 1,
            }
        }
    }
    if counts.compared_sites == 0 {
        return Err(Error::NoComparableSites);
    }
    Ok(counts)
}

/// Columns free of gaps and `N` in every sequence.
pub fn complete_deletion_mask(aln: &AlignedSet) -> Vec<bool> {
    (0..aln.length())
        .map(|c| aln.sequences().iter().all(|s| base_index(s[c]).is_some()))
        .collect()
}

/// Base frequencies pooled over a whole set of pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledParams {
    pub freqs: [f64; 4],
}

impl PooledParams {
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = &'a PairCounts>) -> Result<Self> {
        let mut total = PairCounts::default();
        for c in counts {
            total.add(c);
        }
        let n: usize = total.base_counts.iter().sum();
        if n == 0 {
            return Err(Error::NoComparableSites);
        }
        let mut freqs = [0.0; 4];
        for k in 0..4 {
            freqs[k] = total.base_counts[k] as f64 / n as f64;
        }
        Ok(PooledParams { freqs })
    }
}

fn saturated(model: ModelTag, counts: &PairCounts) -> Error {
    Error::Saturation(format!(
        "{model}: p = {:.4} over {} sites",
        counts.p_distance(),
        counts.compared_sites
    ))
}

fn neg_log(arg: f64, model: ModelTag, counts: &PairCounts) -> Result<f64> {
    if arg > 0.0 && arg.is_finite() {
        Ok(-arg.ln())
    } else {
        Err(saturated(model, counts))
    }
}

pub fn pairwise_distance(
    counts: &PairCounts,
    model: ModelTag,
    pooled: Option<&PooledParams>,
) -> Result<f64> {
    if counts.compared_sites == 0 {
        return Err(Error::NoComparableSites);
    }
    let n = counts.compared_sites as f64;
    let p = counts.p_distance();
    let d = match model {
        ModelTag::PDist => p,
        ModelTag::Jc69 => 0.75 * neg_log(1.0 - 4.0 * p / 3.0, model, counts)?,
        ModelTag::K2p => {
            let ts = (counts.transitions_ag + counts.transitions_ct) as f64 / n;
            let tv = counts.transversions as f64 / n;
            0.5 * neg_log(1.0 - 2.0 * ts - tv, model, counts)?
                + 0.25 * neg_log(1.0 - 2.0 * tv, model, counts)?
        }
        ModelTag::Tn93Mcl => {
            let pooled = pooled.ok_or_else(|| {
                Error::InvalidParam("TN93_MCL needs pooled base frequencies".into())
            })?;
            tn93(counts, &pooled.freqs)?
        }
    };
    // -ln(1 - x) can come out as -0.0 for identical pairs
    Ok(if d == 0.0 { 0.0 } else { d })
}

fn tn93(counts: &PairCounts, freqs: &[f64; 4]) -> Result<f64> {
    let model = ModelTag::Tn93Mcl;
    let n = counts.compared_sites as f64;
    let p1 = counts.transitions_ag as f64 / n;
    let p2 = counts.transitions_ct as f64 / n;
    let q = counts.transversions as f64 / n;
    let [pa, pc, pg, pt] = *freqs;
    let pr = pa + pg;
    let py = pc + pt;

    // A class with a zero frequency contributes nothing as long as no change
    // was observed in it; the closed form is a 0 * ln(..) limit there.
    if q > 0.0 && (pr == 0.0 || py == 0.0) {
        return Err(saturated(model, counts));
    }
    let mut d = 0.0;
    let ag = pa * pg;
    if ag > 0.0 {
        let arg = 1.0 - pr * p1 / (2.0 * ag) - q / (2.0 * pr);
        d += 2.0 * ag / pr * neg_log(arg, model, counts)?;
    } else if p1 > 0.0 {
        return Err(saturated(model, counts));
    }
    let ct = pc * pt;
    if ct > 0.0 {
        let arg = 1.0 - py * p2 / (2.0 * ct) - q / (2.0 * py);
        d += 2.0 * ct / py * neg_log(arg, model, counts)?;
    } else if p2 > 0.0 {
        return Err(saturated(model, counts));
    }
    if pr > 0.0 && py > 0.0 {
        let coef = 2.0 * (pr * py - ag * py / pr - ct * pr / py);
        d += coef * neg_log(1.0 - q / (2.0 * pr * py), model, counts)?;
    }
    Ok(d)
}

/// Symmetric species-by-species distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    labels: Vec<String>,
    values: Vec<Vec<f64>>,
    pub model: Option<ModelTag>,
    pub stderr: Option<Vec<Vec<f64>>>,
    /// Percentile 95% interval bounds, when bootstrapped.
    pub ci_low: Option<Vec<Vec<f64>>>,
    pub ci_high: Option<Vec<Vec<f64>>>,
}

impl DistanceMatrix {
    /// Validates symmetry (exact), zero diagonal, finiteness and sign.
    pub fn new(labels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_tolerance(labels, values, 0.0)
    }

    fn with_tolerance(labels: Vec<String>, values: Vec<Vec<f64>>, tol: f64) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("empty distance matrix".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        if values.len() != n || values.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("distance matrix must be {n}x{n}")));
        }
        for i in 0..n {
            if values[i][i] != 0.0 {
                return Err(Error::Data(format!("nonzero diagonal for '{}'", labels[i])));
            }
            for j in 0..n {
                let v = values[i][j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!(
                        "invalid distance {v} at ({}, {})",
                        labels[i], labels[j]
                    )));
                }
                if (v - values[j][i]).abs() > tol {
                    return Err(Error::ReadSymmetry(labels[i].clone(), labels[j].clone()));
                }
            }
        }
        // average within tolerance so the stored matrix is exactly symmetric
        let mut values = values;
        for i in 0..n {
            for j in i + 1..n {
                let m = 0.5 * (values[i][j] + values[j][i]);
                values[i][j] = m;
                values[j][i] = m;
            }
        }
        Ok(DistanceMatrix {
            labels,
            values,
            model: None,
            stderr: None,
            ci_low: None,
            ci_high: None,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Submatrix (and reordering) by index.
    pub fn select(&self, idx: &[usize]) -> Result<DistanceMatrix> {
        let labels = idx.iter().map(|&i| self.labels[i].clone()).collect();
        let values = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.values[i][j]).collect())
            .collect();
        let mut dm = DistanceMatrix::new(labels, values)?;
        dm.model = self.model;
        Ok(dm)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_square_csv(w, &self.labels, &self.values)
    }

    /// Reads a square CSV; mirrored entries must agree within 1e-12.
    pub fn read_csv<R: Read>(r: R) -> Result<DistanceMatrix> {
        let (header, rows) = read_labeled_csv(r)?;
        let (labels, values): (Vec<String>, Vec<Vec<f64>>) = rows.into_iter().unzip();
        if labels != header {
            return Err(Error::Data(
                "row labels must match header labels in the same order".into(),
            ));
        }
        DistanceMatrix::with_tolerance(labels, values, 1e-12)
    }
}

pub(crate) fn write_square_csv<W: Write>(w: W, cols: &[String], rows: &[Vec<f64>]) -> Result<()> {
    write_labeled_csv(w, cols, cols, rows)
}

pub(crate) fn write_labeled_csv<W: Write>(
    w: W,
    row_labels: &[String],
    col_labels: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(col_labels.iter().cloned());
    wtr.write_record(&header)?;
    for (label, row) in row_labels.iter().zip(rows) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn read_labeled_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut it = rec.iter();
        let label = it.next().unwrap_or("").to_string();
        let values = it
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad number '{s}' in row '{label}': {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != header.len() {
            return Err(Error::Shape(format!(
                "row '{label}' has {} values, header has {}",
                values.len(),
                header.len()
            )));
        }
        rows.push((label, values));
    }
    Ok((header, rows))
}

fn all_pair_counts(aln: &AlignedSet, mask: Option<&[bool]>) -> Result<Vec<Vec<PairCounts>>> {
    let n = aln.len();
    let mut counts = vec![vec![PairCounts::default(); n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let deletion = match mask {
                Some(m) => Deletion::Mask(m),
                None => Deletion::Pairwise,
            };
            let c =
                pair_counts(aln.sequence(i), aln.sequence(j), deletion).map_err(|e| match e {
                    Error::NoComparableSites => Error::Data(format!(
                        "no comparable sites between '{}' and '{}'",
                        aln.labels()[i],
                        aln.labels()[j]
                    )),
                    other => other,
                })?;
            counts[i][j] = c;
            counts[j][i] = c;
        }
    }
    Ok(counts)
}

fn matrix_from_counts(
    aln: &AlignedSet,
    counts: &[Vec<PairCounts>],
    model: ModelTag,
) -> Result<Vec<Vec<f64>>> {
    let n = aln.len();
    let pooled = match model {
        ModelTag::Tn93Mcl => Some(PooledParams::from_counts(
            (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| &counts[i][j]),
        )?),
        _ => None,
    };
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d =
                pairwise_distance(&counts[i][j], model, pooled.as_ref()).map_err(|e| match e {
                    Error::Saturation(msg) => Error::Saturation(format!(
                        "pair ({}, {}): {msg}",
                        aln.labels()[i],
                        aln.labels()[j]
                    )),
                    other => other,
                })?;
            values[i][j] = d;
            values[j][i] = d;
        }
    }
    Ok(values)
}

pub fn distance_matrix(aln: &AlignedSet, model: ModelTag) -> Result<DistanceMatrix> {
    distance_matrix_with(aln, model, Deletion::Pairwise)
}

pub fn distance_matrix_with(
    aln: &AlignedSet,
    model: ModelTag,
    deletion: Deletion<'_>,
) -> Result<DistanceMatrix> {
    if aln.len() < 2 {
        return Err(Error::Data(
            "distance matrix needs at least 2 sequences".into(),
        ));
    }
    let mask = match deletion {
        Deletion::Mask(m) => Some(m),
        Deletion::Pairwise => None,
    };
    let counts = all_pair_counts(aln, mask)?;
    let values = matrix_from_counts(aln, &counts, model)?;
    let mut dm = DistanceMatrix::new(aln.labels().to_vec(), values)?;
    dm.model = Some(model);
    Ok(dm)
}

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 100;

/// Draws the resampled column indices of one bootstrap replicate.
///
/// Replicate `r` uses `SeedRng::stream(seed, r)`; column `k` of the replicate
/// is `index(length)` from the `k`-th draw.
pub fn bootstrap_columns(seed: u64, replicate: u64, length: usize) -> Vec<usize> {
    let mut rng = SeedRng::stream(seed, replicate);
    (0..length).map(|_| rng.index(length)).collect()
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Point estimates from the full alignment plus bootstrap standard errors and
/// percentile 95% intervals over `replicates` column resamples.
pub fn bootstrap_se(
    aln: &AlignedSet,
    model: ModelTag,
    replicates: usize,
    seed: u64,
) -> Result<DistanceMatrix> {
    if replicates < 2 {
        return Err(Error::InvalidParam(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let n = aln.len();
    let mut samples = vec![vec![Vec::with_capacity(replicates); n]; n];
    let mut skips = vec![vec![0usize; n]; n];
    for r in 0..replicates {
        let cols = bootstrap_columns(seed, r as u64, aln.length());
        let resampled = aln.select_columns(&cols)?;
        let counts = match all_pair_counts(&resampled, None) {
            Ok(c) => c,
            Err(_) => {
                for row in skips.iter_mut() {
                    for s in row.iter_mut() {
                        *s += 1;
                    }
                }
                continue;
            }
        };
        let pooled = match model {
            ModelTag::Tn93Mcl => Some(PooledParams::from_counts(
                (0..n)
                    .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                    .map(|(i, j)| &counts[i][j]),
            )?),
            _ => None,
        };
        for i in 0..n {
            for j in i + 1..n {
                match pairwise_distance(&counts[i][j], model, pooled.as_ref()) {
                    Ok(d) => samples[i][j].push(d),
                    Err(Error::Saturation(_)) => skips[i][j] += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    let mut se = vec![vec![0.0; n]; n];
    let mut lo = vec![vec![0.0; n]; n];
    let mut hi = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if skips[i][j] * 2 > replicates {
                return Err(Error::BootstrapDegenerate(
                    aln.labels()[i].clone(),
                    aln.labels()[j].clone(),
                    skips[i][j],
                    replicates,
                ));
            }
            let xs = &mut samples[i][j];
            let m = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            xs.sort_by(f64::total_cmp);
            se[i][j] = var.sqrt();
            se[j][i] = se[i][j];
            lo[i][j] = quantile_sorted(xs, 0.025);
            lo[j][i] = lo[i][j];
            hi[i][j] = quantile_sorted(xs, 0.975);
            hi[j][i] = hi[i][j];
        }
    }
    let mut dm = distance_matrix(aln, model)?;
    dm.stderr = Some(se);
    dm.ci_low = Some(lo);
    dm.ci_high = Some(hi);
    Ok(dm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(sites: usize, ag: usize, ct: usize, tv: usize) -> PairCounts {
        PairCounts {
            compared_sites: sites,
            transitions_ag: ag,
            transitions_ct: ct,
            transversions: tv,
            base_counts: [sites / 2; 4],
        }
    }

    #[test]
    fn identical_pair() {
        let c = pair_counts(b"ACGT", b"ACGT", Deletion::Pairwise).unwrap();
        assert_eq!(c.compared_sites, 4);
        assert_eq!(c.differences(), 0);
        assert_eq!(c.base_counts, [2, 2, 2, 2]);
        let pooled = PooledParams { freqs: [0.25; 4] };
        for model in [
            ModelTag::PDist,
            ModelTag::Jc69,
            ModelTag::K2p,
            ModelTag::Tn93Mcl,
        ] {
            assert_eq!(pairwise_distance(&c, model, Some(&pooled)).unwrap(), 0.0);
        }
    }

    #[test]
    fn gap_column_is_skipped() {
        let c = pair_counts(b"AC-GT", b"ACAGA", Deletion::Pairwise).unwrap();
        assert_eq!(c.compared_sites, 4);
        assert_eq!(c.transversions, 1);
        assert_eq!(c.transitions_ag + c.transitions_ct, 0);
        assert_eq!(c.p_distance(), 0.25);
    }

    #[test]
    fn nothing_to_compare() {
        assert!(matches!(
            pair_counts(b"----", b"ACGT", Deletion::Pairwise),
            Err(Error::NoComparableSites)
        ));
        assert!(matches!(
            pair_counts(b"ACGT", b"ACGT", Deletion::Mask(&[false; 4])),
            Err(Error::NoComparableSites)
        ));
    }

    #[test]
    fn jc69_reference_value() {
        let d = pairwise_distance(&counts(1000, 50, 0, 50), ModelTag::Jc69, None).unwrap();
        assert!((d - 0.107326).abs() < 1e-6, "{d}");
    }

    #[test]
    fn k2p_reference_value() {
        let d = pairwise_distance(&counts(1000, 60, 40, 50), ModelTag::K2p, None).unwrap();
        assert!((d - 0.170181).abs() < 1e-6, "{d}");
    }

    #[test]
    fn saturation_is_an_error() {
        let c = counts(100, 25, 25, 25);
        assert!(matches!(
            pairwise_distance(&c, ModelTag::Jc69, None),
            Err(Error::Saturation(_))
        ));
        assert!(matches!(
            pairwise_distance(&c, ModelTag::K2p, None),
            Err(Error::Saturation(_))
        ));
        assert!(pairwise_distance(&c, ModelTag::Tn93Mcl, None).is_err());
    }

    #[test]
    fn tn93_collapses_to_jc69() {
        // 12 blocks of ACGT; symmetric swaps keep every base frequency at 1/4
        // with P1 = P2 = p/6 and Q = 2p/3.
        let a: Vec<u8> = b"ACGT".repeat(12);
        let mut b = a.clone();
        let mut set = |pos: usize, from: u8, to: u8| {
            assert_eq!(b[pos], from);
            b[pos] = to;
        };
        set(0, b'A', b'G');
        set(6, b'G', b'A');
        set(1, b'C', b'T');
        set(7, b'T', b'C');
        set(8, b'A', b'C');
        set(13, b'C', b'A');
        set(14, b'G', b'T');
        set(19, b'T', b'G');
        set(20, b'A', b'T');
        set(27, b'T', b'A');
        set(25, b'C', b'G');
        set(30, b'G', b'C');
        let aln = AlignedSet::new([("a", a), ("b", b)]).unwrap();
        let jc = distance_matrix(&aln, ModelTag::Jc69).unwrap();
        let k2p = distance_matrix(&aln, ModelTag::K2p).unwrap();
        let tn = distance_matrix(&aln, ModelTag::Tn93Mcl).unwrap();
        assert!((jc.get(0, 1) - tn.get(0, 1)).abs() < 1e-9);
        assert!((jc.get(0, 1) - k2p.get(0, 1)).abs() < 1e-9);
        let expected = -0.75 * (1.0f64 - 4.0 / 3.0 * 0.25).ln();
        assert!((jc.get(0, 1) - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_set_gives_zero_matrix() {
        let aln = AlignedSet::new([("a", "ACGTAC"), ("b", "ACGTAC"), ("c", "ACGTAC")]).unwrap();
        let dm = distance_matrix(&aln, ModelTag::Tn93Mcl).unwrap();
        assert!(dm.values().iter().flatten().all(|&v| v == 0.0));
        let boot = bootstrap_se(&aln, ModelTag::Jc69, DEFAULT_BOOTSTRAP_REPLICATES, 3).unwrap();
        let se = boot.stderr.unwrap();
        assert!(se.iter().flatten().all(|&v| v == 0.0));
        let (lo, hi) = (boot.ci_low.unwrap(), boot.ci_high.unwrap());
        assert_eq!(lo, hi);
    }

    #[test]
    fn saturated_pair_is_reported_with_labels() {
        let aln = AlignedSet::new([("x", "AAAA"), ("y", "CCCC")]).unwrap();
        match distance_matrix(&aln, ModelTag::Jc69) {
            Err(Error::Saturation(msg)) => assert!(msg.contains("x") && msg.contains("y")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bootstrap_degenerate_when_mostly_saturated() {
        let aln = AlignedSet::new([("x", "AAAAAAAAAC"), ("y", "CCCCCCCCCC")]).unwrap();
        assert!(bootstrap_se(&aln, ModelTag::PDist, 10, 1).is_ok());
        assert!(matches!(
            bootstrap_se(&aln, ModelTag::Jc69, 10, 1),
            Err(Error::BootstrapDegenerate(_, _, 10, 10))
        ));
    }

    #[test]
    fn bootstrap_trace_matches_hand_rolled_resampling() {
        use rand_chacha::ChaCha8Rng;
        use rand_core::{RngCore, SeedableRng};

        let a = b"ACGTACGTTAGCATGCAAGT";
        let b = b"ACGAACGTTAGGATGCAACT";
        let aln = AlignedSet::new([("a", &a[..]), ("b", &b[..])]).unwrap();
        let boot = bootstrap_se(&aln, ModelTag::PDist, 5, 42).unwrap();

        let n = a.len();
        let mut reps = Vec::new();
        for r in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            rng.set_stream(r);
            let mut diffs = 0usize;
            for _ in 0..n {
                let k = ((rng.next_u64() as u128 * n as u128) >> 64) as usize;
                if a[k] != b[k] {
                    diffs += 1;
                }
            }
            reps.push(diffs as f64 / n as f64);
        }
        let mean = reps.iter().sum::<f64>() / 5.0;
        let sd = (reps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert_eq!(boot.stderr.unwrap()[0][1], sd);
    }

    #[test]
    fn csv_round_trip_and_symmetry_check() {
        let dm = DistanceMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![0.0, 0.1, 0.25],
                vec![0.1, 0.0, 1.0 / 3.0],
                vec![0.25, 1.0 / 3.0, 0.0],
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        dm.write_csv(&mut buf).unwrap();
        let back = DistanceMatrix::read_csv(&buf[..]).unwrap();
        assert_eq!(back.values(), dm.values());
        assert_eq!(back.labels(), dm.labels());

        let bad = ",a,b\na,0,0.1\nb,0.1000001,0\n";
        assert!(matches!(
            DistanceMatrix::read_csv(bad.as_bytes()),
            Err(Error::ReadSymmetry(..))
        ));
        let close = ",a,b\na,0,0.1\nb,0.1000000000000001,0\n";
        assert!(DistanceMatrix::read_csv(close.as_bytes()).is_ok());
    }

    proptest! {
        #[test]
        fn jc69_at_least_p(sites in 1usize..500, frac in 0.0f64..0.74) {
            let diffs = ((sites as f64) * frac) as usize;
            let c = counts(sites, 0, 0, diffs);
            if let Ok(d) = pairwise_distance(&c, ModelTag::Jc69, None) {
                prop_assert!(d >= c.p_distance() - 1e-15);
            }
        }

        #[test]
        fn monotone_in_differences(sites in 60usize..400, ag in 0usize..5, ct in 0usize..5, tv in 0usize..5, which in 0usize..3) {
            let base = counts(sites, ag, ct, tv);
            let mut more = base;
            match which {
                0 => more.transitions_ag += 1,
                1 => more.transitions_ct += 1,
                _ => more.transversions += 1,
            }
            let pooled = PooledParams { freqs: [0.2, 0.3, 0.3, 0.2] };
            for model in [ModelTag::PDist, ModelTag::Jc69, ModelTag::K2p, ModelTag::Tn93Mcl] {
                let d0 = pairwise_distance(&base, model, Some(&pooled)).unwrap();
                let d1 = pairwise_distance(&more, model, Some(&pooled)).unwrap();
                prop_assert!(d1 >= d0, "{model}: {d1} < {d0}");
            }
        }

        #[test]
        fn permutation_equivariant(seed in 0u64..1000) {
            let mut rng = SeedRng::new(seed);
            let n = 5;
            let seqs: Vec<Vec<u8>> = (0..n)
                .map(|_| (0..60).map(|_| if rng.uniform() < 0.7 { b'A' } else { b"ACGT-"[rng.index(5)] }).collect())
                .collect();
            let aln = AlignedSet::new(seqs.iter().enumerate().map(|(i, s)| (format!("s{i}"), s.clone()))).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permuted = aln.select_rows(&perm).unwrap();
            for model in [ModelTag::K2p, ModelTag::Tn93Mcl] {
                let (Ok(d), Ok(dp)) = (distance_matrix(&aln, model), distance_matrix(&permuted, model)) else { continue };
                for i in 0..n {
                    for j in 0..n {
                        prop_assert!((dp.get(i, j) - d.get(perm[i], perm[j])).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
