//! Aligned DNA sets: FASTA reading/writing and conserved-block trimming.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHABET: [u8; 6] = [b'A', b'C', b'G', b'T', b'N', b'-'];
const FASTA_WIDTH: usize = 70;

/// Labeled, equal-length sequences over `{A,C,G,T,N,-}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedSet {
    labels: Vec<String>,
    sequences: Vec<Vec<u8>>,
    length: usize,
}

impl AlignedSet {
    /// Builds a set, upper-casing residues and mapping `U` to `T`.
    pub fn new<L, S>(records: impl IntoIterator<Item = (L, S)>) -> Result<Self>
    where
        L: Into<String>,
        S: AsRef<[u8]>,
    {
        let mut labels = Vec::new();
        let mut sequences = Vec::new();
        let mut seen = HashSet::new();
        for (label, seq) in records {
            let label: String = label.into();
            if label.is_empty() {
                return Err(Error::Fasta {
                    line: 0,
                    reason: "empty label".into(),
                });
            }
            if !seen.insert(label.clone()) {
                return Err(Error::DuplicateLabel(label));
            }
            let seq = normalize(&label, seq.as_ref())?;
            sequences.push(seq);
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::Data("no sequences".into()));
        }
        let length = sequences[0].len();
        if length == 0 {
            return Err(Error::AlignmentLength {
                label: labels[0].clone(),
                expected: 1,
                found: 0,
            });
        }
        for (label, seq) in labels.iter().zip(&sequences) {
            if seq.len() != length {
                return Err(Error::AlignmentLength {
                    label: label.clone(),
                    expected: length,
                    found: seq.len(),
                });
            }
        }
        Ok(AlignedSet {
            labels,
            sequences,
            length,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn sequences(&self) -> &[Vec<u8>] {
        &self.sequences
    }

    pub fn sequence(&self, i: usize) -> &[u8] {
        &self.sequences[i]
    }

    pub fn get(&self, label: &str) -> Option<&[u8]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.sequences[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Alignment column count.
    pub fn length(&self) -> usize {
        self.length
    }

    /// Keeps the given columns, in the order supplied.
    pub fn select_columns(&self, columns: &[usize]) -> Result<AlignedSet> {
        let records = self.labels.iter().zip(&self.sequences).map(|(l, s)| {
            (
                l.clone(),
                columns.iter().map(|&c| s[c]).collect::<Vec<u8>>(),
            )
        });
        AlignedSet::new(records)
    }

    /// Reorders or subsets sequences by index.
    pub fn select_rows(&self, rows: &[usize]) -> Result<AlignedSet> {
        AlignedSet::new(
            rows.iter()
                .map(|&r| (self.labels[r].clone(), self.sequences[r].clone())),
        )
    }
}

fn normalize(label: &str, seq: &[u8]) -> Result<Vec<u8>> {
    seq.iter()
        .enumerate()
        .map(|(i, &b)| {
            let up = match b.to_ascii_uppercase() {
                b'U' => b'T',
                other => other,
            };
            if ALPHABET.contains(&up) {
                Ok(up)
            } else {
                Err(Error::Residue {
                    label: label.to_string(),
                    symbol: b as char,
                    position: i + 1,
                })
            }
        })
        .collect()
}

pub fn parse_fasta(text: &str) -> Result<AlignedSet> {
    let mut records: Vec<(String, Vec<u8>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if let Some(header) = line.strip_prefix('>') {
            let label = header.split_whitespace().next().unwrap_or("");
            if label.is_empty() {
                return Err(Error::Fasta {
                    line: lineno + 1,
                    reason: "header without label".into(),
                });
            }
            records.push((label.to_string(), Vec::new()));
        } else if line.trim().is_empty() {
            continue;
        } else {
            let Some(last) = records.last_mut() else {
                return Err(Error::Fasta {
                    line: lineno + 1,
                    reason: "sequence data before first header".into(),
                });
            };
            last.1
                .extend(line.bytes().filter(|b| !b.is_ascii_whitespace()));
        }
    }
    if records.is_empty() {
        return Err(Error::Fasta {
            line: 0,
            reason: "no records".into(),
        });
    }
    AlignedSet::new(records)
}

/// FASTA with sequence lines wrapped at 70 columns.
pub fn write_fasta(aln: &AlignedSet) -> String {
    let mut out = String::new();
    for (label, seq) in aln.labels.iter().zip(&aln.sequences) {
        let _ = writeln!(out, ">{label}");
        for chunk in seq.chunks(FASTA_WIDTH) {
            out.push_str(std::str::from_utf8(chunk).expect("alphabet is ASCII"));
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimParams {
    pub min_conserved_fraction: f64,
    pub min_flank_fraction: f64,
    pub max_contiguous_nonconserved: usize,
    pub min_block_length: usize,
    pub allow_gaps: bool,
}

impl Default for TrimParams {
    fn default() -> Self {
        TrimParams {
            min_conserved_fraction: 0.5,
            min_flank_fraction: 0.85,
            max_contiguous_nonconserved: 8,
            min_block_length: 10,
            allow_gaps: false,
        }
    }
}

impl TrimParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_conserved_fraction > 0.0
            && self.min_conserved_fraction <= self.min_flank_fraction
            && self.min_flank_fraction <= 1.0
            && self.max_contiguous_nonconserved >= 1
            && self.min_block_length >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("trim parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    /// Half-open `[start, end)` column intervals that survived.
    pub kept_spans: Vec<(usize, usize)>,
    pub kept_fraction: f64,
    pub params_used: TrimParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ColumnClass {
    Gapped,
    NonConserved,
    Conserved,
    HighlyConserved,
}

fn classify_column(aln: &AlignedSet, col: usize, params: &TrimParams) -> ColumnClass {
    let mut counts = [0usize; 4];
    let mut gaps = 0;
    for seq in &aln.sequences {
        match seq[col] {
            b'A' => counts[0] += 1,
            b'C' => counts[1] += 1,
            b'G' => counts[2] += 1,
            b'T' => counts[3] += 1,
            b'-' => gaps += 1,
            // N is a non-gap residue that never forms the majority
            _ => {}
        }
    }
    if gaps > 0 && !params.allow_gaps {
        return ColumnClass::Gapped;
    }
    let n = aln.len() as f64;
    let freq = *counts.iter().max().unwrap() as f64 / n;
    if freq > params.min_conserved_fraction {
        if freq >= params.min_flank_fraction {
            ColumnClass::HighlyConserved
        } else {
            ColumnClass::Conserved
        }
    } else {
        ColumnClass::NonConserved
    }
}

/// Keeps conserved blocks of the alignment.
///
/// A block is a maximal gap-free run whose nonconserved stretches are no longer
/// than `max_contiguous_nonconserved`, trimmed so both ends are highly
/// conserved, and at least `min_block_length` columns long.
pub fn trim_conserved_blocks(
    aln: &AlignedSet,
    params: &TrimParams,
) -> Result<(AlignedSet, TrimReport)> {
    params.validate()?;
    if aln.len() < 2 {
        return Err(Error::Data("trimming needs at least 2 sequences".into()));
    }
    let classes: Vec<ColumnClass> = (0..aln.length)
        .map(|c| classify_column(aln, c, params))
        .collect();

    // Split into candidate segments at gap columns and at overlong
    // nonconserved stretches.
    let mut segments = Vec::new();
    let mut start = None;
    let mut run_nc = 0;
    for (c, class) in classes.iter().enumerate() {
        match class {
            ColumnClass::Gapped => {
                if let Some(s) = start.take() {
                    segments.push((s, c));
                }
                run_nc = 0;
            }
            ColumnClass::NonConserved => {
                start.get_or_insert(c);
                run_nc += 1;
                if run_nc > params.max_contiguous_nonconserved {
                    if let Some(s) = start.take() {
                        let end = c + 1 - run_nc;
                        if end > s {
                            segments.push((s, end));
                        }
                    }
                }
            }
            _ => {
                if start.is_none() {
                    start = Some(c);
                }
                run_nc = 0;
            }
        }
    }
    if let Some(s) = start {
        segments.push((s, aln.length));
    }

    let mut kept_spans = Vec::new();
    for (s, e) in segments {
        let highly = |c: usize| classes[c] == ColumnClass::HighlyConserved;
        let Some(first) = (s..e).find(|&c| highly(c)) else {
            continue;
        };
        let last = (s..e).rev().find(|&c| highly(c)).unwrap();
        if last + 1 - first >= params.min_block_length {
            kept_spans.push((first, last + 1));
        }
    }
    if kept_spans.is_empty() {
        return Err(Error::EmptyTrim);
    }
    let columns: Vec<usize> = kept_spans.iter().flat_map(|&(s, e)| s..e).collect();
    let kept_fraction = columns.len() as f64 / aln.length as f64;
    let trimmed = aln.select_columns(&columns)?;
    Ok((
        trimmed,
        TrimReport {
            kept_spans,
            kept_fraction,
            params_used: *params,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_single_record() {
        let aln = parse_fasta(">A\nACGT\n").unwrap();
        assert_eq!(aln.labels(), ["A"]);
        assert_eq!(aln.sequence(0), b"ACGT");
        assert_eq!(aln.length(), 4);
    }

    #[test]
    fn parse_keeps_gaps_and_normalizes() {
        let aln = parse_fasta(">A\nAC-G\n>B\nacug\n").unwrap();
        assert_eq!(aln.len(), 2);
        assert_eq!(aln.sequence(0), b"AC-G");
        assert_eq!(aln.sequence(1), b"ACTG");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_fasta(">A\nACG\n>B\nACGT\n"),
            Err(Error::AlignmentLength { .. })
        ));
        assert!(matches!(
            parse_fasta(">A\nACGT\n>A\nACGT\n"),
            Err(Error::DuplicateLabel(_))
        ));
        match parse_fasta(">A\nACXT\n") {
            Err(Error::Residue {
                symbol, position, ..
            }) => {
                assert_eq!(symbol, 'X');
                assert_eq!(position, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_fasta("ACGT\n").is_err());
    }

    #[test]
    fn writer_wraps_at_70() {
        let seq = "A".repeat(150);
        let aln = AlignedSet::new([("x", seq.as_bytes())]).unwrap();
        let text = write_fasta(&aln);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, [">x", &seq[..70], &seq[70..140], &seq[140..]]);
    }

    #[test]
    fn trim_fully_conserved_keeps_everything() {
        let aln = AlignedSet::new([
            ("a", "ACGTACGTACGT"),
            ("b", "ACGTACGTACGT"),
            ("c", "ACGTACGTACGT"),
        ])
        .unwrap();
        let params = TrimParams {
            min_block_length: 4,
            ..Default::default()
        };
        let (out, report) = trim_conserved_blocks(&aln, &params).unwrap();
        assert_eq!(out, aln);
        assert_eq!(report.kept_fraction, 1.0);
        assert_eq!(report.kept_spans, vec![(0, 12)]);
    }

    #[test]
    fn trim_drops_gap_column() {
        let aln = AlignedSet::new([("a", "AAAA-AAAAAAA"), ("b", "AAAAAAAAAAAA")]).unwrap();
        let params = TrimParams {
            min_block_length: 4,
            ..Default::default()
        };
        let (out, report) = trim_conserved_blocks(&aln, &params).unwrap();
        assert_eq!(report.kept_spans, vec![(0, 4), (5, 12)]);
        assert!((report.kept_fraction - 11.0 / 12.0).abs() < 1e-15);
        assert_eq!(out.length(), 11);
        assert_eq!(out.sequence(0), b"AAAAAAAAAAA");
    }

    #[test]
    fn trim_short_flank_is_dropped() {
        let aln = AlignedSet::new([("a", "AAAA-AAAAAAA"), ("b", "AAAAAAAAAAAA")]).unwrap();
        let params = TrimParams {
            min_block_length: 5,
            ..Default::default()
        };
        let (_, report) = trim_conserved_blocks(&aln, &params).unwrap();
        assert_eq!(report.kept_spans, vec![(5, 12)]);
    }

    #[test]
    fn trim_keeps_short_nonconserved_stretch_inside_block() {
        // columns 4..6 are split 2/2 (not conserved) but sit between highly
        // conserved flanks
        let aln = AlignedSet::new([
            ("a", "AAAAACAAAA"),
            ("b", "AAAAGTAAAA"),
            ("c", "AAAAACAAAA"),
            ("d", "AAAAGTAAAA"),
        ])
        .unwrap();
        let params = TrimParams {
            min_block_length: 4,
            max_contiguous_nonconserved: 2,
            ..Default::default()
        };
        let (_, report) = trim_conserved_blocks(&aln, &params).unwrap();
        assert_eq!(report.kept_spans, vec![(0, 10)]);
        let strict = TrimParams {
            max_contiguous_nonconserved: 1,
            ..params
        };
        let (_, report) = trim_conserved_blocks(&aln, &strict).unwrap();
        assert_eq!(report.kept_spans, vec![(0, 4), (6, 10)]);
    }

    #[test]
    fn trim_n_never_forms_majority() {
        let aln = AlignedSet::new([("a", "NNNNNNNNNN"), ("b", "NNNNNNNNNN")]).unwrap();
        let params = TrimParams {
            min_block_length: 1,
            ..Default::default()
        };
        assert!(matches!(
            trim_conserved_blocks(&aln, &params),
            Err(Error::EmptyTrim)
        ));
    }

    #[test]
    fn trim_no_majority_is_empty() {
        let aln =
            AlignedSet::new([("a", "ACGT"), ("b", "CGTA"), ("c", "GTAC"), ("d", "TACG")]).unwrap();
        let params = TrimParams {
            min_block_length: 1,
            ..Default::default()
        };
        assert!(matches!(
            trim_conserved_blocks(&aln, &params),
            Err(Error::EmptyTrim)
        ));
    }

    fn arb_alignment() -> impl Strategy<Value = AlignedSet> {
        (2usize..6, 1usize..60).prop_flat_map(|(n, len)| {
            // biased alphabet so conserved columns actually occur
            let residue =
                prop::sample::select(vec![b'A', b'A', b'A', b'A', b'C', b'G', b'T', b'N', b'-']);
            prop::collection::vec(prop::collection::vec(residue, len), n).prop_map(|seqs| {
                AlignedSet::new(
                    seqs.into_iter()
                        .enumerate()
                        .map(|(i, s)| (format!("s{i}"), s)),
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn fasta_round_trip(aln in arb_alignment()) {
            prop_assert_eq!(parse_fasta(&write_fasta(&aln)).unwrap(), aln);
        }

        #[test]
        fn trim_is_idempotent_and_subsets(aln in arb_alignment(), block in 1usize..6, gaps: bool) {
            let params = TrimParams { min_block_length: block, allow_gaps: gaps, max_contiguous_nonconserved: 2, ..Default::default() };
            if let Ok((once, report)) = trim_conserved_blocks(&aln, &params) {
                let cols: Vec<usize> = report.kept_spans.iter().flat_map(|&(s, e)| s..e).collect();
                for w in report.kept_spans.windows(2) {
                    prop_assert!(w[0].1 <= w[1].0);
                }
                for (i, seq) in once.sequences().iter().enumerate() {
                    let expect: Vec<u8> = cols.iter().map(|&c| aln.sequence(i)[c]).collect();
                    prop_assert_eq!(seq, &expect);
                }
                let (twice, report2) = trim_conserved_blocks(&once, &params).unwrap();
                prop_assert_eq!(&twice, &once);
                prop_assert_eq!(report2.kept_fraction, 1.0);
            }
        }
    }
}
