//! End-to-end runs on synthetic worlds: world → distances → embedding →
//! staged training → evaluation. Shared by the acceptance suite and the
//! `repro` command.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasyn::{
    gen_world, split_samples, FeatureSet, Sample, Split, SyntheticWorld, WorldConfig, N_VIEWS,
};
use crate::dnadecode::{
    per_base_accuracy, train_decoder, DecoderConfig, DecoderTrainOptions, DnaDecoder, RegionSpec,
};
use crate::embedspace::{EmbeddingMatrix, MetricTag};
use crate::error::{Error, Result};
use crate::evalkit::{classification_metrics, regression_metrics};
use crate::gendist::{distance_matrix, DistanceMatrix, ModelTag};
use crate::recognet::{
    classify_embedding, predict_embeddings, train_branch, train_fusion, BranchConfig, HeadKind,
    HeadVariant, ModelState, PredictMode, TrainOptions,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    /// Model for the reference distances estimated from the world's sequences.
    pub distance_model: ModelTag,
    /// Number of reference columns `L`, taken in label order.
    pub embedding_len: usize,
    pub head: HeadVariant,
    pub metric: MetricTag,
    pub branch: TrainOptions,
    pub fusion: TrainOptions,
    pub test_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            world: WorldConfig::default(),
            distance_model: ModelTag::Tn93Mcl,
            embedding_len: 12,
            head: HeadVariant::new(HeadKind::MseSum),
            metric: MetricTag::Cosine,
            branch: TrainOptions {
                epochs: 60,
                lr: 1e-3,
                ..Default::default()
            },
            fusion: TrainOptions {
                epochs: 300,
                lr: 1e-3,
                ..Default::default()
            },
            test_fraction: 0.2,
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub world: SyntheticWorld,
    pub distances: DistanceMatrix,
    /// Every species' row over the chosen reference columns.
    pub reference: EmbeddingMatrix,
    pub split: Split,
    pub model: ModelState,
}

impl Pipeline {
    pub fn samples(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter()
            .map(|&i| &self.world.features.samples[i])
            .collect()
    }

    pub fn seen_reference(&self) -> Result<EmbeddingMatrix> {
        self.reference.select_rows(&self.world.seen_species())
    }
}

pub fn reference_embedding(dm: &DistanceMatrix, embedding_len: usize) -> Result<EmbeddingMatrix> {
    if embedding_len == 0 || embedding_len > dm.len() {
        return Err(Error::InvalidParam(format!(
            "embedding length {embedding_len} with {} species",
            dm.len()
        )));
    }
    let cols = dm.labels()[..embedding_len].to_vec();
    EmbeddingMatrix::from_distance_rows(dm, dm.labels(), &cols)
}

/// Stage 2 then stage 3 on `features`, holding out `holdout` entirely.
///
/// The fusion target is `reference` restricted to the seen species, in the
/// reference's row order.
pub fn train_on(
    features: &FeatureSet,
    reference: &EmbeddingMatrix,
    holdout: &[String],
    config: &PipelineConfig,
    seed: u64,
) -> Result<(ModelState, Split)> {
    let split = split_samples(features, holdout, config.test_fraction, seed)?;
    let train: Vec<Sample> = split
        .train
        .iter()
        .map(|&i| features.samples[i].clone())
        .collect();
    let labels: Vec<String> = train.iter().map(|s| s.label.clone()).collect();
    let mut branches = Vec::with_capacity(N_VIEWS);
    for v in 0..N_VIEWS {
        let xs: Vec<Vec<f64>> = train.iter().map(|s| s.views[v].clone()).collect();
        let opts = TrainOptions {
            seed: config.branch.seed ^ (seed.wrapping_mul(31) + v as u64),
            ..config.branch
        };
        branches.push(
            train_branch(
                &BranchConfig::feature_vector(features.dim),
                &xs,
                &labels,
                &opts,
                None,
            )?
            .0,
        );
    }
    let mut model = ModelState::new(branches, config.head, reference.width(), seed)?;
    model.freeze_branches();
    let seen: Vec<String> = reference
        .row_labels()
        .iter()
        .filter(|l| !holdout.contains(l) && features.species.contains(l))
        .cloned()
        .collect();
    let target = reference.select_rows(&seen)?;
    let opts = TrainOptions {
        seed: config.fusion.seed ^ seed,
        ..config.fusion
    };
    train_fusion(&mut model, &train, &target, &opts)?;
    Ok((model, split))
}

/// Trains a model on a world's seen species; holdout species are untouched.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Pipeline> {
    let world = gen_world(&config.world)?;
    let distances = distance_matrix(&world.sequences, config.distance_model)?;
    let reference = reference_embedding(&distances, config.embedding_len)?;
    let (model, split) = train_on(
        &world.features,
        &reference,
        &world.holdout,
        config,
        config.world.seed,
    )?;
    Ok(Pipeline {
        config: config.clone(),
        world,
        distances,
        reference,
        split,
        model,
    })
}

/// Maps sample labels through `groups` (e.g. species to genus) and averages
/// the reference rows of each group's members. Labels without an entry keep
/// their own name.
pub fn regroup(
    features: &FeatureSet,
    reference: &EmbeddingMatrix,
    groups: &BTreeMap<String, String>,
) -> Result<(FeatureSet, EmbeddingMatrix)> {
    let group_of = |l: &String| groups.get(l).cloned().unwrap_or_else(|| l.clone());
    let mut fs = features.clone();
    for s in &mut fs.samples {
        s.label = group_of(&s.label);
    }
    fs.species = Vec::new();
    for s in &fs.samples {
        if !fs.species.contains(&s.label) {
            fs.species.push(s.label.clone());
        }
    }
    fs.prototypes = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for (i, l) in reference.row_labels().iter().enumerate() {
        let g = group_of(l);
        let k = match names.iter().position(|n| *n == g) {
            Some(k) => k,
            None => {
                names.push(g);
                sums.push((vec![0.0; reference.width()], 0));
                names.len() - 1
            }
        };
        for (acc, v) in sums[k].0.iter_mut().zip(reference.row(i)) {
            *acc += v;
        }
        sums[k].1 += 1;
    }
    let rows = sums
        .into_iter()
        .map(|(v, n)| v.into_iter().map(|x| x / n as f64).collect())
        .collect();
    let grouped = EmbeddingMatrix::new(names, reference.col_labels().to_vec(), rows)?;
    Ok((fs, grouped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// RMSE of predicted rows against the true rows of each sample's species.
    pub rmse: f64,
    pub r_squared: f64,
}

/// Classification among seen species and distance-row regression on the
/// seen-species test samples.
pub fn evaluate(p: &Pipeline, mode: PredictMode) -> Result<EvalResult> {
    let samples = p.samples(&p.split.test);
    let refmat = p.seen_reference()?;
    let preds = predict_embeddings(&p.model, &samples, mode)?;
    let mut truth_rows = Vec::with_capacity(preds.len());
    let mut truth = Vec::with_capacity(preds.len());
    let mut guess = Vec::with_capacity(preds.len());
    for (s, pred) in samples.iter().zip(&preds) {
        let r = refmat
            .row_index(&s.label)
            .ok_or_else(|| Error::Label(s.label.clone()))?;
        truth_rows.push(refmat.row(r).to_vec());
        truth.push(s.label.clone());
        guess.push(classify_embedding(&p.model.head, mode, pred, &refmat, p.config.metric)?.0);
    }
    let cls = classification_metrics(&truth, &guess, Some(refmat.row_labels()))?;
    let reg = regression_metrics(&preds, &truth_rows, 0, 0)?;
    Ok(EvalResult {
        accuracy: cls.accuracy,
        rmse: reg.rmse,
        r_squared: reg.r_squared,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    /// ZSL accuracy over holdout samples, candidates restricted to holdouts.
    pub zsl_accuracy: f64,
    /// GZSL one-vs-rest AUC per holdout species, in holdout order.
    pub gzsl_auc: Vec<f64>,
    /// GZSL accuracy over holdout samples with every species as candidate.
    pub gzsl_accuracy: f64,
}

/// Zero-shot evaluation of a fusion model on the world's holdout species.
///
/// GZSL scores are negated metric distances to every candidate row, over
/// the seen test samples plus all holdout samples.
pub fn zero_shot(p: &Pipeline) -> Result<ZeroShotResult> {
    use crate::embedspace::{label_embedding, zero_shot_classify, ZeroShotMode};
    use crate::evalkit::roc_auc_ovr;

    let holdout = &p.world.holdout;
    if holdout.is_empty() {
        return Err(Error::Data("world has no holdout species".into()));
    }
    let seen = p.seen_reference()?;
    let unseen = p.reference.select_rows(holdout)?;
    let all = seen.concat_rows(&unseen)?;
    let metric = p.config.metric;
    let unseen_samples = p.samples(&p.split.unseen);
    let preds = predict_embeddings(&p.model, &unseen_samples, PredictMode::Fusion)?;
    let mut zsl_hits = 0;
    let mut gzsl_hits = 0;
    for (s, pred) in unseen_samples.iter().zip(&preds) {
        if zero_shot_classify(pred, &seen, &unseen, ZeroShotMode::Zsl, metric)? == s.label {
            zsl_hits += 1;
        }
        if zero_shot_classify(pred, &seen, &unseen, ZeroShotMode::Gzsl, metric)? == s.label {
            gzsl_hits += 1;
        }
    }
    let eval_idx: Vec<usize> = p
        .split
        .test
        .iter()
        .chain(&p.split.unseen)
        .copied()
        .collect();
    let eval_samples = p.samples(&eval_idx);
    let eval_preds = predict_embeddings(&p.model, &eval_samples, PredictMode::Fusion)?;
    let truth: Vec<String> = eval_samples.iter().map(|s| s.label.clone()).collect();
    let scores = eval_preds
        .iter()
        .map(|pred| {
            Ok(label_embedding(pred, &all, metric)?
                .scores
                .iter()
                .map(|d| -d)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let auc = roc_auc_ovr(&truth, &scores, all.row_labels())?;
    let gzsl_auc = holdout
        .iter()
        .map(|h| {
            let k = all.row_index(h).expect("holdout in candidate set");
            auc.per_class[k].unwrap_or(f64::NAN)
        })
        .collect();
    let n = unseen_samples.len() as f64;
    Ok(ZeroShotResult {
        zsl_accuracy: zsl_hits as f64 / n,
        gzsl_auc,
        gzsl_accuracy: gzsl_hits as f64 / n,
    })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnaResult {
    /// Mean per-base accuracy decoding the reference rows the decoder saw.
    pub train_accuracy: f64,
    /// Mean per-base accuracy decoding fusion predictions for the seen-species
    /// test samples.
    pub heldout_accuracy: f64,
    pub conserved_accuracy: f64,
    pub non_conserved_accuracy: f64,
    /// 0.25 plus three binomial SDs for uniform guessing over the pooled
    /// non-conserved positions.
    pub random_floor: f64,
    pub heldout_decodes: usize,
}

/// Trains a decoder on every species' (reference row, sequence) pair and
/// decodes both those rows and the model's predictions.
pub fn dna_decoding(
    p: &Pipeline,
    config: DecoderConfig,
    opts: &DecoderTrainOptions,
) -> Result<(DnaDecoder, DnaResult)> {
    let seq_of = |label: &str| -> Result<String> {
        let s = p
            .world
            .sequences
            .get(label)
            .ok_or_else(|| Error::Label(label.to_string()))?;
        Ok(String::from_utf8_lossy(s).into_owned())
    };
    let pairs = p
        .reference
        .row_labels()
        .iter()
        .enumerate()
        .map(|(i, label)| Ok((p.reference.row(i).to_vec(), seq_of(label)?)))
        .collect::<Result<Vec<_>>>()?;
    let (decoder, _) = train_decoder(&pairs, config, opts)?;
    let mut train = 0.0;
    for (e, s) in &pairs {
        train += per_base_accuracy(&decoder.decode_greedy(e)?, s, None)?.overall;
    }
    let samples = p.samples(&p.split.test);
    if samples.is_empty() {
        return Err(Error::Data(
            "no held-out samples of training species".into(),
        ));
    }
    let preds = predict_embeddings(&p.model, &samples, PredictMode::Fusion)?;
    let regions = RegionSpec::default();
    let (mut overall, mut conserved, mut variable, mut variable_len) = (0.0, 0.0, 0.0, 0);
    for (s, pred) in samples.iter().zip(&preds) {
        let truth = seq_of(&s.label)?;
        let report = per_base_accuracy(&decoder.decode_greedy(pred)?, &truth, Some(&regions))?;
        overall += report.overall;
        for r in &regions.regions {
            let acc = report.region(&r.name).expect("region reported");
            if r.name == "conserved" {
                conserved += acc;
            } else {
                let len = r.end - r.start + 1;
                variable += acc * len as f64;
                variable_len += len;
            }
        }
    }
    let n = samples.len() as f64;
    let pooled = variable_len as f64;
    Ok((
        decoder,
        DnaResult {
            train_accuracy: train / pairs.len() as f64,
            heldout_accuracy: overall / n,
            conserved_accuracy: conserved / n,
            non_conserved_accuracy: variable / pooled,
            random_floor: 0.25 + 3.0 * (0.25f64 * 0.75 / pooled).sqrt(),
            heldout_decodes: samples.len(),
        },
    ))
}
