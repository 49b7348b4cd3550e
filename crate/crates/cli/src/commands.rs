use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use phyloembed::acceptance::{desk_decoder_options, run_all, AcceptanceConfig};
use phyloembed::datasyn::{gen_world, read_features_csv, write_world, FeatureSet, WorldConfig};
use phyloembed::dnadecode::{
    per_base_accuracy, train_decoder, DecoderConfig, DecoderTrainOptions, DnaDecoder, RegionSpec,
};
use phyloembed::embedspace::{
    insert_predicted_row, label_embedding, zero_shot_classify, EmbeddingMatrix, MetricTag,
    ZeroShotMode,
};
use phyloembed::evalkit::{classification_metrics, regression_metrics, roc_auc_ovr};
use phyloembed::experiments::{reference_embedding, regroup, train_on, PipelineConfig};
use phyloembed::gendist::{
    bootstrap_se, complete_deletion_mask, distance_matrix, distance_matrix_with, Deletion,
    DistanceMatrix, ModelTag,
};
use phyloembed::neuralcore::Checkpoint;
use phyloembed::phylo::{neighbor_joining_with_warnings, Precision};
use phyloembed::recognet::{classify_embedding, predict_embeddings, ModelState, PredictMode};
use phyloembed::seqio::{parse_fasta, trim_conserved_blocks, write_fasta, AlignedSet, TrimParams};

use crate::run::{Failure, Outcome, Run};

pub trait Command: for<'de> Deserialize<'de> {
    fn seed(&self) -> u64;
    /// Files that must exist before the run starts.
    fn inputs(&self) -> Vec<&Path>;
    fn execute(&self, run: &mut Run) -> Outcome<()>;
}

fn read_text(p: &Path) -> Outcome<String> {
    fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))
}

fn read_fasta(p: &Path) -> Outcome<AlignedSet> {
    Ok(parse_fasta(&read_text(p)?)?)
}

fn read_dm(p: &Path) -> Outcome<DistanceMatrix> {
    Ok(DistanceMatrix::read_csv(fs::File::open(p)?)?)
}

fn read_embedding(p: &Path) -> Outcome<EmbeddingMatrix> {
    Ok(EmbeddingMatrix::read_csv(fs::File::open(p)?)?)
}

fn read_features(p: &Path) -> Outcome<FeatureSet> {
    Ok(read_features_csv(fs::File::open(p)?)?)
}

fn read_model(p: &Path) -> Outcome<ModelState> {
    Ok(ModelState::from_checkpoint(Checkpoint::from_text(
        &read_text(p)?,
    )?)?)
}

fn dm_csv(dm: &DistanceMatrix) -> Outcome<Vec<u8>> {
    let mut buf = Vec::new();
    dm.write_csv(&mut buf)?;
    Ok(buf)
}

fn embedding_csv(m: &EmbeddingMatrix) -> Outcome<Vec<u8>> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf)?;
    Ok(buf)
}

/// `None` is the library default, `Some(0)` the exact round-trip form.
fn precision(digits: Option<usize>) -> Precision {
    match digits {
        None => Precision::default(),
        Some(0) => Precision::Full,
        Some(d) => Precision::Significant(d),
    }
}

// ---- trim ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrimConfig {
    pub seed: u64,
    pub input: PathBuf,
    #[serde(default)]
    pub params: TrimParams,
}

impl Command for TrimConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let aln = read_fasta(&self.input)?;
        let (trimmed, report) = trim_conserved_blocks(&aln, &self.params)?;
        run.write("trimmed.fasta", write_fasta(&trimmed))?;
        run.write_json("trim_report.json", &report)?;
        run.note("kept_fraction", report.kept_fraction);
        run.note("kept_columns", trimmed.length());
        Ok(())
    }
}

// ---- dist / bootstrap ----

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DeletionMode {
    #[default]
    Pairwise,
    Complete,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistConfig {
    pub seed: u64,
    pub input: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelTag,
    #[serde(default)]
    pub deletion: DeletionMode,
}

fn default_model() -> ModelTag {
    ModelTag::Tn93Mcl
}

impl Command for DistConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let aln = read_fasta(&self.input)?;
        let dm = match self.deletion {
            DeletionMode::Pairwise => distance_matrix(&aln, self.model)?,
            DeletionMode::Complete => {
                let mask = complete_deletion_mask(&aln);
                distance_matrix_with(&aln, self.model, Deletion::Mask(&mask))?
            }
        };
        run.write("distances.csv", dm_csv(&dm)?)?;
        run.note("model", self.model.to_string());
        run.note("species", dm.len());
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub seed: u64,
    pub input: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelTag,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    phyloembed::gendist::DEFAULT_BOOTSTRAP_REPLICATES
}

impl Command for BootstrapConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let aln = read_fasta(&self.input)?;
        let dm = bootstrap_se(&aln, self.model, self.replicates, self.seed)?;
        run.write("distances.csv", dm_csv(&dm)?)?;
        let labels = dm.labels().to_vec();
        for (name, values) in [
            ("stderr.csv", &dm.stderr),
            ("ci_low.csv", &dm.ci_low),
            ("ci_high.csv", &dm.ci_high),
        ] {
            let values = values.clone().expect("bootstrap fills every summary");
            run.write(name, dm_csv(&DistanceMatrix::new(labels.clone(), values)?)?)?;
        }
        run.note("replicates", self.replicates);
        Ok(())
    }
}

// ---- nj ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NjConfig {
    pub seed: u64,
    pub input: PathBuf,
    /// Significant digits for branch lengths; 0 writes them exactly.
    #[serde(default)]
    pub precision: Option<usize>,
}

impl Command for NjConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.input]
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let dm = read_dm(&self.input)?;
        let (tree, warnings) = neighbor_joining_with_warnings(&dm)?;
        run.write("tree.nwk", tree.to_newick(precision(self.precision)) + "\n")?;
        run.note("warnings", warnings);
        Ok(())
    }
}

// ---- synth ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
}

impl Command for SynthConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        Vec::new()
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let cfg = WorldConfig {
            seed: self.seed,
            ..self.world.clone()
        };
        let world = gen_world(&cfg)?;
        write_world(&world, &run.path("world"))?;
        for f in [
            "tree.nwk",
            "sequences.fasta",
            "true_dm.csv",
            "features.csv",
            "world.json",
        ] {
            run.adopt(&format!("world/{f}"));
        }
        run.note("species", world.true_dm.len());
        run.note("samples", world.features.samples.len());
        run.note("holdout", &world.holdout);
        Ok(())
    }
}

// ---- train ----

/// Training data from files instead of a synthetic world.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub features: PathBuf,
    /// Embedding CSV (rows species, columns reference species)...
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// ...or a distance matrix whose first `embedding_len` labels become the
    /// reference columns.
    #[serde(default)]
    pub distances: Option<PathBuf>,
    #[serde(default)]
    pub holdout: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub dataset: Option<Dataset>,
    /// Label mapping (e.g. species to genus) applied before training.
    #[serde(default)]
    pub groups: BTreeMap<String, String>,
}

impl Command for TrainConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        match &self.dataset {
            Some(d) => [
                Some(&d.features),
                d.reference.as_ref(),
                d.distances.as_ref(),
            ]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect(),
            None => Vec::new(),
        }
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let cfg = &self.pipeline;
        let (features, reference, holdout) = match &self.dataset {
            Some(d) => {
                let reference = match (&d.reference, &d.distances) {
                    (Some(r), None) => read_embedding(r)?,
                    (None, Some(p)) => reference_embedding(&read_dm(p)?, cfg.embedding_len)?,
                    _ => {
                        return Err(Failure::Validation(
                            "dataset needs exactly one of reference or distances".into(),
                        ))
                    }
                };
                (read_features(&d.features)?, reference, d.holdout.clone())
            }
            None => {
                let world = gen_world(&WorldConfig {
                    seed: self.seed,
                    ..cfg.world.clone()
                })?;
                write_world(&world, &run.path("world"))?;
                for f in [
                    "tree.nwk",
                    "sequences.fasta",
                    "true_dm.csv",
                    "features.csv",
                    "world.json",
                ] {
                    run.adopt(&format!("world/{f}"));
                }
                let dm = distance_matrix(&world.sequences, cfg.distance_model)?;
                let reference = reference_embedding(&dm, cfg.embedding_len)?;
                (world.features, reference, world.holdout)
            }
        };
        let (features, reference, holdout) = if self.groups.is_empty() {
            (features, reference, holdout)
        } else {
            let (f, r) = regroup(&features, &reference, &self.groups)?;
            let mut h: Vec<String> = holdout
                .iter()
                .map(|l| self.groups.get(l).unwrap_or(l).clone())
                .collect();
            h.dedup();
            (f, r, h)
        };
        let (model, split) = train_on(&features, &reference, &holdout, cfg, self.seed)?;
        run.write("model.ckpt", model.to_checkpoint()?.to_text())?;
        run.write("reference.csv", embedding_csv(&reference)?)?;
        run.write_json("split.json", &split)?;

        let seen = model
            .reference
            .clone()
            .expect("fusion training stores its reference");
        let test: Vec<_> = split.test.iter().map(|&i| &features.samples[i]).collect();
        let mut evals = BTreeMap::new();
        let mut modes = vec![
            ("fusion".to_string(), PredictMode::Fusion),
            ("avg_ensemble".into(), PredictMode::AvgEnsemble),
        ];
        for b in 0..phyloembed::recognet::N_BRANCHES {
            modes.push((format!("branch_{b}"), PredictMode::SingleBranch(b)));
        }
        if !test.is_empty() {
            for (name, mode) in modes {
                let preds = predict_embeddings(&model, &test, mode)?;
                let mut truth = Vec::new();
                let mut guess = Vec::new();
                let mut rows = Vec::new();
                for (s, p) in test.iter().zip(&preds) {
                    truth.push(s.label.clone());
                    guess.push(classify_embedding(&model.head, mode, p, &seen, cfg.metric)?.0);
                    let r = seen
                        .row_index(&s.label)
                        .ok_or_else(|| phyloembed::Error::Label(s.label.clone()))?;
                    rows.push(seen.row(r).to_vec());
                }
                let cls = classification_metrics(&truth, &guess, Some(seen.row_labels()))?;
                let reg = regression_metrics(&preds, &rows, 0, self.seed)?;
                evals.insert(name, json!({ "accuracy": cls.accuracy, "rmse": reg.rmse, "r_squared": reg.r_squared }));
            }
        }
        run.note(
            "test_accuracy",
            evals.get("fusion").map(|v| v["accuracy"].clone()),
        );
        run.write_json("eval.json", &evals)?;
        Ok(())
    }
}

// ---- classify ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub seed: u64,
    pub model: PathBuf,
    pub features: PathBuf,
    /// Candidate rows; defaults to the reference stored with the model.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default = "default_metric")]
    pub metric: MetricTag,
    #[serde(default = "default_mode")]
    pub mode: PredictMode,
}

fn default_metric() -> MetricTag {
    MetricTag::Cosine
}

fn default_mode() -> PredictMode {
    PredictMode::Fusion
}

/// `sample,truth,predicted,score_<class>...` with scores the negated metric
/// distance to each candidate row.
fn prediction_table(
    samples: &[&phyloembed::datasyn::Sample],
    preds: &[Vec<f64>],
    guesses: &[String],
    candidates: &EmbeddingMatrix,
    metric: MetricTag,
) -> Outcome<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample".to_string(), "truth".into(), "predicted".into()];
    header.extend(candidates.row_labels().iter().map(|l| format!("score_{l}")));
    w.write_record(&header).map_err(phyloembed::Error::from)?;
    for (i, ((s, p), g)) in samples.iter().zip(preds).zip(guesses).enumerate() {
        let le = label_embedding(p, candidates, metric)?;
        let mut rec = vec![i.to_string(), s.label.clone(), g.clone()];
        rec.extend(le.scores.iter().map(|d| (-d).to_string()));
        w.write_record(&rec).map_err(phyloembed::Error::from)?;
    }
    w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))
}

impl Command for ClassifyConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.model.as_path(), self.features.as_path()];
        v.extend(self.reference.as_deref());
        v
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let model = read_model(&self.model)?;
        let fs = read_features(&self.features)?;
        let refmat = match &self.reference {
            Some(p) => read_embedding(p)?,
            None => model.reference.clone().ok_or_else(|| {
                Failure::Validation("model has no stored reference; set reference".into())
            })?,
        };
        let samples: Vec<_> = fs.samples.iter().collect();
        let preds = predict_embeddings(&model, &samples, self.mode)?;
        let guesses = preds
            .iter()
            .map(|p| Ok(classify_embedding(&model.head, self.mode, p, &refmat, self.metric)?.0))
            .collect::<Outcome<Vec<String>>>()?;
        run.write(
            "predictions.csv",
            prediction_table(&samples, &preds, &guesses, &refmat, self.metric)?,
        )?;
        let labels: Vec<String> = (0..preds.len()).map(|i| format!("sample{i}")).collect();
        let emb = EmbeddingMatrix::new(labels, refmat.col_labels().to_vec(), preds)?;
        run.write("embeddings.csv", embedding_csv(&emb)?)?;
        let hits = samples
            .iter()
            .zip(&guesses)
            .filter(|(s, g)| s.label == **g)
            .count();
        run.note("samples", samples.len());
        run.note("accuracy", hits as f64 / samples.len().max(1) as f64);
        Ok(())
    }
}

// ---- zeroshot ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub seed: u64,
    pub model: PathBuf,
    pub features: PathBuf,
    /// Rows for the classes never trained on.
    pub unseen: PathBuf,
    /// Seen-class rows; defaults to the reference stored with the model.
    #[serde(default)]
    pub seen: Option<PathBuf>,
    #[serde(default = "default_metric")]
    pub metric: MetricTag,
}

impl Command for ZeroShotConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![
            self.model.as_path(),
            self.features.as_path(),
            self.unseen.as_path(),
        ];
        v.extend(self.seen.as_deref());
        v
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let model = read_model(&self.model)?;
        let fs = read_features(&self.features)?;
        let unseen = read_embedding(&self.unseen)?;
        let seen = match &self.seen {
            Some(p) => read_embedding(p)?,
            None => model.reference.clone().ok_or_else(|| {
                Failure::Validation("model has no stored reference; set seen".into())
            })?,
        };
        let all = seen.concat_rows(&unseen)?;
        let samples: Vec<_> = fs.samples.iter().collect();
        let preds = predict_embeddings(&model, &samples, PredictMode::Fusion)?;
        let mut gzsl = Vec::with_capacity(preds.len());
        let (mut zsl_hits, mut zsl_n, mut gzsl_hits, mut gzsl_n) = (0, 0, 0, 0);
        for (s, p) in samples.iter().zip(&preds) {
            let g = zero_shot_classify(p, &seen, &unseen, ZeroShotMode::Gzsl, self.metric)?;
            if unseen.row_index(&s.label).is_some() {
                zsl_n += 1;
                gzsl_n += 1;
                let z = zero_shot_classify(p, &seen, &unseen, ZeroShotMode::Zsl, self.metric)?;
                zsl_hits += usize::from(z == s.label);
                gzsl_hits += usize::from(g == s.label);
            }
            gzsl.push(g);
        }
        run.write(
            "predictions.csv",
            prediction_table(&samples, &preds, &gzsl, &all, self.metric)?,
        )?;
        let truth: Vec<String> = samples.iter().map(|s| s.label.clone()).collect();
        let scores = preds
            .iter()
            .map(|p| {
                Ok(label_embedding(p, &all, self.metric)?
                    .scores
                    .iter()
                    .map(|d| -d)
                    .collect())
            })
            .collect::<Outcome<Vec<Vec<f64>>>>()?;
        let auc = roc_auc_ovr(&truth, &scores, all.row_labels())?;
        let unseen_auc: BTreeMap<&String, Option<f64>> = unseen
            .row_labels()
            .iter()
            .map(|l| {
                (
                    l,
                    auc.per_class[all.row_index(l).expect("unseen row in candidates")],
                )
            })
            .collect();
        let ratio = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
        let report = json!({
            "zsl_accuracy": ratio(zsl_hits, zsl_n),
            "gzsl_accuracy_on_unseen": ratio(gzsl_hits, gzsl_n),
            "unseen_samples": zsl_n,
            "gzsl_auc": unseen_auc,
            "chance": ratio(1, unseen.rows()),
        });
        run.note("zsl_accuracy", &report["zsl_accuracy"]);
        run.write_json("zeroshot.json", &report)?;
        Ok(())
    }
}

// ---- joint-tree ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTreeConfig {
    pub seed: u64,
    /// Species-by-species distances.
    pub distances: PathBuf,
    /// Predicted rows, one per query, columns named by species.
    pub predictions: PathBuf,
    #[serde(default)]
    pub precision: Option<usize>,
}

impl Command for JointTreeConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        vec![&self.distances, &self.predictions]
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let species = read_dm(&self.distances)?;
        let preds = read_embedding(&self.predictions)?;
        let col_map: Vec<Option<String>> = preds
            .col_labels()
            .iter()
            .map(|c| species.index_of(c).map(|_| c.clone()))
            .collect();
        let n = species.len();
        let mut warnings = Vec::new();
        let mut qrows = Vec::with_capacity(preds.rows());
        for (i, query) in preds.row_labels().iter().enumerate() {
            let inserted = insert_predicted_row(&species, preds.row(i), &col_map, query)?;
            warnings.extend(inserted.warnings);
            qrows.push(inserted.matrix.values()[n][..n].to_vec());
        }
        // Query pairs get the tightest triangle-inequality lower bound,
        // max_k |d(a,k) - d(b,k)|.
        let mut labels = species.labels().to_vec();
        labels.extend(preds.row_labels().iter().cloned());
        let mut values: Vec<Vec<f64>> = species.values().to_vec();
        for (r, row) in values.iter_mut().enumerate() {
            row.extend(qrows.iter().map(|q| q[r]));
        }
        for a in &qrows {
            let mut row = a.clone();
            row.extend(qrows.iter().map(|b| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            }));
            values.push(row);
        }
        let dm = DistanceMatrix::new(labels, values)?;
        let (tree, nj_warnings) = neighbor_joining_with_warnings(&dm)?;
        warnings.extend(nj_warnings);
        run.write("joint_dm.csv", dm_csv(&dm)?)?;
        run.write("tree.nwk", tree.to_newick(precision(self.precision)) + "\n")?;
        run.note("queries", preds.rows());
        run.note("warnings", warnings);
        Ok(())
    }
}

// ---- decode-dna ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderTraining {
    /// Embedding rows keyed by the FASTA labels they pair with.
    pub embeddings: PathBuf,
    pub sequences: PathBuf,
    #[serde(default)]
    pub config: DecoderConfig,
    /// Overrides applied on top of the default training recipe.
    #[serde(default)]
    pub options: serde_json::Map<String, serde_json::Value>,
}

impl DecoderTraining {
    fn options(&self) -> Outcome<DecoderTrainOptions> {
        let mut v = serde_json::to_value(desk_decoder_options())?;
        for (k, x) in &self.options {
            if v.get(k).is_none() {
                return Err(Failure::Validation(format!("unknown decoder option '{k}'")));
            }
            v[k] = x.clone();
        }
        serde_json::from_value(v).map_err(|e| Failure::Validation(format!("decoder options: {e}")))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeDnaConfig {
    pub seed: u64,
    /// Existing decoder checkpoint; mutually exclusive with `train`.
    #[serde(default)]
    pub decoder: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<DecoderTraining>,
    /// Embeddings to decode; defaults to the training embeddings.
    #[serde(default)]
    pub decode: Option<PathBuf>,
    /// Reference sequences by row label, for accuracy.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub regions: Option<RegionSpec>,
}

fn pairs_from(emb: &EmbeddingMatrix, seqs: &AlignedSet) -> Outcome<Vec<(Vec<f64>, String)>> {
    emb.row_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = seqs
                .get(l)
                .ok_or_else(|| Failure::Runtime(format!("no sequence for embedding row '{l}'")))?;
            Ok((emb.row(i).to_vec(), String::from_utf8_lossy(s).into_owned()))
        })
        .collect()
}

impl Command for DecodeDnaConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = [&self.decoder, &self.decode, &self.truth]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect();
        if let Some(t) = &self.train {
            v.push(&t.embeddings);
            v.push(&t.sequences);
        }
        v
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let (decoder, train_emb) = match (&self.decoder, &self.train) {
            (Some(p), None) => (
                DnaDecoder::from_checkpoint(Checkpoint::from_text(&read_text(p)?)?)?,
                None,
            ),
            (None, Some(t)) => {
                let emb = read_embedding(&t.embeddings)?;
                let pairs = pairs_from(&emb, &read_fasta(&t.sequences)?)?;
                let opts = DecoderTrainOptions {
                    seed: self.seed,
                    ..t.options()?
                };
                let config = DecoderConfig {
                    embedding_len: emb.width(),
                    ..t.config
                };
                let (model, history) = train_decoder(&pairs, config, &opts)?;
                run.write("decoder.ckpt", model.to_checkpoint()?.to_text())?;
                run.write_json("history.json", &history)?;
                run.note("final_loss", history.last().map(|h| h.loss));
                (model, Some(emb))
            }
            _ => {
                return Err(Failure::Validation(
                    "set exactly one of decoder or train".into(),
                ))
            }
        };
        let emb = match (&self.decode, train_emb) {
            (Some(p), _) => read_embedding(p)?,
            (None, Some(e)) => e,
            (None, None) => {
                return Err(Failure::Validation("nothing to decode; set decode".into()))
            }
        };
        let mut fasta = String::new();
        let mut decoded = Vec::with_capacity(emb.rows());
        for (i, label) in emb.row_labels().iter().enumerate() {
            let s = decoder.decode_greedy(emb.row(i))?;
            fasta.push_str(&format!(">{label}\n{s}\n"));
            decoded.push(s);
        }
        run.write("decoded.fasta", fasta)?;
        if let Some(t) = &self.truth {
            let truth = read_fasta(t)?;
            let regions = self.regions.clone().or_else(|| {
                let spec = RegionSpec::default();
                spec.validate(truth.length()).ok().map(|_| spec)
            });
            let mut per_row = BTreeMap::new();
            let mut total = 0.0;
            for (label, s) in emb.row_labels().iter().zip(&decoded) {
                let want = truth
                    .get(label)
                    .ok_or_else(|| Failure::Runtime(format!("no truth sequence for '{label}'")))?;
                let r = per_base_accuracy(s, &String::from_utf8_lossy(want), regions.as_ref())?;
                total += r.overall;
                per_row.insert(label.clone(), r);
            }
            let mean = total / decoded.len().max(1) as f64;
            run.note("mean_accuracy", mean);
            run.write_json("accuracy.json", &json!({ "mean": mean, "rows": per_row }))?;
        }
        Ok(())
    }
}

// ---- eval ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionInputs {
    pub predicted: PathBuf,
    pub truth: PathBuf,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// A `predictions.csv` written by `classify` or `zeroshot`.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    /// Fixes the class set and order; defaults to the score columns.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub regression: Option<RegressionInputs>,
}

impl Command for EvalConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.predictions.iter().map(PathBuf::as_path).collect();
        if let Some(r) = &self.regression {
            v.push(&r.predicted);
            v.push(&r.truth);
        }
        v
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        if self.predictions.is_none() && self.regression.is_none() {
            return Err(Failure::Validation(
                "set predictions and/or regression".into(),
            ));
        }
        let mut out = serde_json::Map::new();
        if let Some(p) = &self.predictions {
            let mut rd = csv::Reader::from_reader(fs::File::open(p)?);
            let header: Vec<String> = rd
                .headers()
                .map_err(phyloembed::Error::from)?
                .iter()
                .map(String::from)
                .collect();
            let score_cols: Vec<(usize, String)> = header
                .iter()
                .enumerate()
                .filter_map(|(i, h)| h.strip_prefix("score_").map(|c| (i, c.to_string())))
                .collect();
            let (mut truth, mut pred, mut scores) = (Vec::new(), Vec::new(), Vec::new());
            for rec in rd.records() {
                let rec = rec.map_err(phyloembed::Error::from)?;
                truth.push(rec.get(1).unwrap_or_default().to_string());
                pred.push(rec.get(2).unwrap_or_default().to_string());
                scores.push(
                    score_cols
                        .iter()
                        .map(|(i, _)| rec.get(*i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
                        .collect::<Vec<f64>>(),
                );
            }
            let score_classes: Vec<String> = score_cols.into_iter().map(|(_, c)| c).collect();
            let classes = self.classes.clone().unwrap_or_else(|| {
                // score columns first, then labels that only appear in the data
                let mut c = score_classes.clone();
                for l in truth.iter().chain(&pred) {
                    if !c.contains(l) {
                        c.push(l.clone());
                    }
                }
                c
            });
            let cls = classification_metrics(&truth, &pred, Some(classes.as_slice()))?;
            run.note("accuracy", cls.accuracy);
            out.insert("classification".into(), serde_json::to_value(&cls)?);
            // AUC only over samples whose true class was scored
            let (auc_truth, auc_scores): (Vec<String>, Vec<Vec<f64>>) = truth
                .iter()
                .zip(scores)
                .filter(|(t, _)| score_classes.contains(t))
                .map(|(t, s)| (t.clone(), s))
                .unzip();
            if !auc_truth.is_empty() {
                let auc = roc_auc_ovr(&auc_truth, &auc_scores, &score_classes)?;
                out.insert("auc".into(), serde_json::to_value(&auc)?);
                out.insert("auc_samples".into(), auc_truth.len().into());
            }
        }
        if let Some(r) = &self.regression {
            let pred = read_embedding(&r.predicted)?;
            let truth = read_embedding(&r.truth)?;
            let aligned = truth.select_rows(pred.row_labels())?;
            let rep = regression_metrics(pred.values(), aligned.values(), r.replicates, self.seed)?;
            run.note("rmse", rep.rmse);
            out.insert(
                "regression".into(),
                json!({
                    "rmse": rep.rmse,
                    "r_squared": rep.r_squared,
                    "rmse_ci_low": rep.rmse_ci_low,
                    "rmse_ci_high": rep.rmse_ci_high,
                }),
            );
        }
        run.write_json("metrics.json", &out)?;
        Ok(())
    }
}

// ---- repro ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproConfig {
    pub seed: u64,
    #[serde(default)]
    pub acceptance: Option<AcceptanceConfig>,
}

impl Command for ReproConfig {
    fn seed(&self) -> u64 {
        self.seed
    }
    fn inputs(&self) -> Vec<&Path> {
        Vec::new()
    }
    fn execute(&self, run: &mut Run) -> Outcome<()> {
        let cfg = AcceptanceConfig {
            seed: self.seed,
            ..self.acceptance.clone().unwrap_or_default()
        };
        let reports = run_all(&cfg, |r| println!("{r}"))?;
        let failed: Vec<usize> = reports.iter().filter(|r| !r.passed).map(|r| r.id).collect();
        run.write_json("acceptance.json", &reports)?;
        run.note("passed", reports.len() - failed.len());
        run.note("failed", &failed);
        println!(
            "{} of {} criteria passed",
            reports.len() - failed.len(),
            reports.len()
        );
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Failure::Runtime(format!(
                "acceptance criteria failed: {failed:?}"
            )))
        }
    }
}
