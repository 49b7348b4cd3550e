//! Three-branch recognition model regressing genetic-distance rows.
//!
//! Training is staged. Each branch is first fitted on its own view with a
//! temporary softmax classification layer ([`train_branch`]); the branches
//! are then frozen and a fusion classifier (concat → SE → ECA → dense) is
//! fitted to per-sample distance-row targets ([`train_fusion`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasyn::Sample;
use crate::embedspace::{classify, EmbeddingMatrix, LabelEmbedding, MetricTag};
use crate::error::{Error, Result};
use crate::neuralcore::{
    adam_step, log_softmax, loss, softmax, AdamConfig, AdamState, Checkpoint, Differentiable,
    Layer, LayerSpec, LossKind, Mode, Sequential, SequentialTape, Tape, Tensor,
};
use crate::rng::SeedRng;

pub const N_BRANCHES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputKind {
    FeatureVector {
        dim: usize,
    },
    /// Flat `C*H*W` vectors read as one image each.
    ToyImage {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub input: InputKind,
    pub hidden: usize,
    pub features: usize,
}

impl BranchConfig {
    pub fn feature_vector(dim: usize) -> Self {
        BranchConfig {
            input: InputKind::FeatureVector { dim },
            hidden: 64,
            features: 64,
        }
    }

    pub fn input_len(&self) -> usize {
        match self.input {
            InputKind::FeatureVector { dim } => dim,
            InputKind::ToyImage {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        match self.input {
            InputKind::FeatureVector { dim } => vec![
                LayerSpec::dense(dim, self.hidden),
                LayerSpec::Relu,
                LayerSpec::dense(self.hidden, self.features),
                LayerSpec::Relu,
            ],
            InputKind::ToyImage { channels, .. } => vec![
                LayerSpec::Conv2d {
                    in_channels: channels,
                    out_channels: self.hidden,
                    kernel: 3,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::dense(self.hidden, self.features),
            ],
        }
    }

    fn batch(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let n = self.input_len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Data(format!(
                "view has {} values, branch expects {n}",
                bad.len()
            )));
        }
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        match self.input {
            InputKind::FeatureVector { dim } => Tensor::new(vec![rows.len(), dim], data),
            InputKind::ToyImage {
                channels,
                height,
                width,
            } => Tensor::new(vec![rows.len(), channels, height, width], data),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HeadKind {
    MseSum,
    MseMean,
    Softmax,
    SoftmaxNeg1,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::MseSum,
        HeadKind::MseMean,
        HeadKind::Softmax,
        HeadKind::SoftmaxNeg1,
    ];

    pub fn is_softmax(self) -> bool {
        matches!(self, HeadKind::Softmax | HeadKind::SoftmaxNeg1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadVariant {
    pub kind: HeadKind,
    pub tau: f64,
}

impl HeadVariant {
    pub fn new(kind: HeadKind) -> Self {
        HeadVariant { kind, tau: 0.05 }
    }

    /// Turns raw fusion outputs into a distance row. Softmax heads invert the
    /// target construction: `-tau * log_softmax(z)`, shifted so the smallest
    /// entry is 0.
    pub fn readout(&self, z: &[f64]) -> Vec<f64> {
        if !self.kind.is_softmax() {
            return z.to_vec();
        }
        let d: Vec<f64> = log_softmax(z).iter().map(|v| -self.tau * v).collect();
        let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
        d.iter().map(|v| v - m).collect()
    }

    fn loss_kind(&self) -> LossKind {
        match self.kind {
            HeadKind::MseSum => LossKind::MseSum,
            HeadKind::MseMean => LossKind::MseMean,
            _ => LossKind::SoftCe,
        }
    }
}

/// Training target for one sample of the species whose distance row is
/// `row`. MSE heads use the row itself; softmax heads use
/// `softmax(-row / tau)`, with the self entry first set to -1 for
/// `SoftmaxNeg1`.
pub fn make_head_target(
    row: &[f64],
    self_index: Option<usize>,
    variant: &HeadVariant,
) -> Result<Vec<f64>> {
    if !variant.kind.is_softmax() {
        return Ok(row.to_vec());
    }
    if !(variant.tau > 0.0) {
        return Err(Error::InvalidParam(format!("temperature {}", variant.tau)));
    }
    let s = self_index
        .filter(|&s| s < row.len())
        .ok_or_else(|| Error::Target("softmax head needs the species' own column".into()))?;
    let mut r = row.to_vec();
    if variant.kind == HeadKind::SoftmaxNeg1 {
        r[s] = -1.0;
    }
    let logits: Vec<f64> = r.iter().map(|v| -v / variant.tau).collect();
    Ok(softmax(&logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            lr: 1e-4,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy after the epoch, where the stage has classes.
    pub accuracy: Option<f64>,
}

/// Shuffled minibatches for one epoch.
fn batches(n: usize, size: usize, rng: &mut SeedRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub config: BranchConfig,
    pub net: Sequential,
    /// Temporary classification layer from stage 2, kept for the
    /// single-branch and average-ensemble baselines.
    pub head: Layer,
    pub classes: Vec<String>,
}

impl Branch {
    pub fn init(config: BranchConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        let mut rng = SeedRng::stream(seed, 0);
        let net = Sequential::new(config.layers(), &mut rng)?;
        let head = Layer::new(
            LayerSpec::dense(config.features, classes.len().max(1)),
            &mut rng,
        )?;
        Ok(Branch {
            config,
            net,
            head,
            classes,
        })
    }

    pub fn features(&self, rows: &[&[f64]]) -> Result<Tensor> {
        Ok(self.net.forward(&self.config.batch(rows)?, Mode::Eval)?.0)
    }

    /// Class probabilities from the temporary head, `[B, classes]`.
    pub fn class_probs(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let f = self.features(rows)?;
        let (z, _) = self.head.forward1(&f, Mode::Eval)?;
        let k = self.classes.len();
        Ok(z.data().chunks(k).map(softmax).collect())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.net.params_mut();
        p.extend(self.head.params.iter_mut());
        p
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.net.params();
        p.extend(self.head.params.iter());
        p
    }
}

/// Stage 2: fits one branch plus its temporary softmax layer on a single
/// view. `init` emulates transfer initialization by supplying starting
/// branch weights.
pub fn train_branch(
    config: &BranchConfig,
    xs: &[Vec<f64>],
    labels: &[String],
    opts: &TrainOptions,
    init: Option<Sequential>,
) -> Result<(Branch, Vec<EpochMetrics>)> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} inputs with {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    let class_of: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let y: Vec<usize> = labels.iter().map(|l| class_of[l.as_str()]).collect();
    let mut branch = Branch::init(config.clone(), classes.clone(), opts.seed)?;
    if let Some(net) = init {
        if net
            .layers
            .iter()
            .map(|l| &l.spec)
            .ne(config.layers().iter())
        {
            return Err(Error::Checkpoint(
                "initial weights do not match the branch layers".into(),
            ));
        }
        branch.net = net;
    }
    let k = classes.len();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: opts.lr,
            ..Default::default()
        },
        branch.params(),
    );
    let mut rng = SeedRng::stream(opts.seed, 1);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for batch in batches(xs.len(), opts.batch_size, &mut rng) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| xs[i].as_slice()).collect();
            let x = config.batch(&rows)?;
            let (f, mut net_tape) = branch.net.forward(&x, Mode::Train)?;
            let (z, mut head_tape) = branch.head.forward1(&f, Mode::Train)?;
            let mut t = vec![0.0; batch.len() * k];
            for (r, &i) in batch.iter().enumerate() {
                t[r * k + y[i]] = 1.0;
            }
            let (value, mut g) = loss(LossKind::SoftCe, &z, &Tensor::new(z.shape().to_vec(), t)?)?;
            let scale = 1.0 / batch.len() as f64;
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            total += value;
            let hg = branch.head.backward(&mut head_tape, &g)?;
            let (mut grads, _) = branch.net.backward(&mut net_tape, &hg.inputs[0])?;
            grads.extend(hg.params);
            adam_step(&mut branch.params_mut(), &grads, &mut adam)?;
        }
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let probs = branch.class_probs(&rows)?;
        let correct = probs
            .iter()
            .zip(&y)
            .filter(|(p, &c)| argmax(p) == c)
            .count();
        history.push(EpochMetrics {
            epoch,
            loss: total / xs.len() as f64,
            accuracy: Some(correct as f64 / xs.len() as f64),
        });
    }
    Ok((branch, history))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub concat: Layer,
    pub se: Layer,
    pub eca: Layer,
    pub out: Layer,
}

struct FusionTape {
    concat: Tape,
    se: Tape,
    eca: Tape,
    out: Tape,
}

impl Fusion {
    pub fn new(feature_width: usize, embedding_len: usize, rng: &mut SeedRng) -> Result<Self> {
        let c = N_BRANCHES * feature_width;
        Ok(Fusion {
            concat: Layer::new(
                LayerSpec::Concat {
                    widths: vec![feature_width; N_BRANCHES],
                },
                rng,
            )?,
            se: Layer::new(LayerSpec::se(c), rng)?,
            eca: Layer::new(LayerSpec::eca(c), rng)?,
            out: Layer::new(LayerSpec::dense(c, embedding_len), rng)?,
        })
    }

    pub fn embedding_len(&self) -> usize {
        self.out.params[1].len()
    }

    fn forward(&self, feats: &[&Tensor], mode: Mode) -> Result<(Tensor, FusionTape)> {
        let (x, concat) = self.concat.forward(feats, mode)?;
        let (x, se) = self.se.forward1(&x, mode)?;
        let (x, eca) = self.eca.forward1(&x, mode)?;
        let (z, out) = self.out.forward1(&x, mode)?;
        Ok((
            z,
            FusionTape {
                concat,
                se,
                eca,
                out,
            },
        ))
    }

    /// Parameter gradients (SE, ECA, dense order) and per-branch feature
    /// gradients.
    fn backward(&self, tape: &mut FusionTape, dz: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let o = self.out.backward(&mut tape.out, dz)?;
        let e = self.eca.backward(&mut tape.eca, &o.inputs[0])?;
        let s = self.se.backward(&mut tape.se, &e.inputs[0])?;
        let c = self.concat.backward(&mut tape.concat, &s.inputs[0])?;
        let params = s
            .params
            .into_iter()
            .chain(e.params)
            .chain(o.params)
            .collect();
        Ok((params, c.inputs))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.se
            .params
            .iter_mut()
            .chain(self.eca.params.iter_mut())
            .chain(self.out.params.iter_mut())
            .collect()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.se
            .params
            .iter()
            .chain(&self.eca.params)
            .chain(&self.out.params)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub branches: Vec<Branch>,
    pub fusion: Fusion,
    pub head: HeadVariant,
    pub frozen: Vec<bool>,
    /// Target rows the fusion stage was trained against.
    pub reference: Option<EmbeddingMatrix>,
}

impl ModelState {
    pub fn new(
        branches: Vec<Branch>,
        head: HeadVariant,
        embedding_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if branches.len() != N_BRANCHES {
            return Err(Error::InvalidParam(format!(
                "need {N_BRANCHES} branches, got {}",
                branches.len()
            )));
        }
        let f = branches[0].config.features;
        if branches.iter().any(|b| b.config.features != f) {
            return Err(Error::InvalidParam("branch feature widths differ".into()));
        }
        if embedding_len == 0 || !(head.tau > 0.0) {
            return Err(Error::InvalidParam(
                "embedding length and temperature must be positive".into(),
            ));
        }
        let fusion = Fusion::new(f, embedding_len, &mut SeedRng::stream(seed, 2))?;
        Ok(ModelState {
            branches,
            fusion,
            head,
            frozen: vec![false; N_BRANCHES],
            reference: None,
        })
    }

    pub fn freeze_branches(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    fn branch_features(&self, samples: &[&Sample]) -> Result<Vec<Tensor>> {
        self.branches
            .iter()
            .enumerate()
            .map(|(v, b)| {
                let rows = view_rows(samples, v)?;
                b.features(&rows)
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        let mut skeleton = self.clone();
        for (name, t) in named_params(&mut skeleton) {
            ck.insert(name, std::mem::replace(t, Tensor::zeros(&[0])));
        }
        ck.meta
            .insert("model".into(), serde_json::to_string(&skeleton)?);
        Ok(ck)
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let json = ck
            .meta
            .get("model")
            .ok_or_else(|| Error::Checkpoint("missing model description".into()))?;
        let mut model: ModelState = serde_json::from_str(json)?;
        for (name, t) in named_params(&mut model) {
            *t = ck.take(&name)?;
        }
        Ok(model)
    }
}

fn named_params(model: &mut ModelState) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for (b, branch) in model.branches.iter_mut().enumerate() {
        for (l, layer) in branch.net.layers.iter_mut().enumerate() {
            for (k, p) in layer.params.iter_mut().enumerate() {
                out.push((format!("branch{b}.net{l}.p{k}"), p));
            }
        }
        for (k, p) in branch.head.params.iter_mut().enumerate() {
            out.push((format!("branch{b}.head.p{k}"), p));
        }
    }
    let f = &mut model.fusion;
    for (name, layer) in [("se", &mut f.se), ("eca", &mut f.eca), ("out", &mut f.out)] {
        for (k, p) in layer.params.iter_mut().enumerate() {
            out.push((format!("fusion.{name}.p{k}"), p));
        }
    }
    out
}

fn view_rows<'a>(samples: &[&'a Sample], view: usize) -> Result<Vec<&'a [f64]>> {
    samples
        .iter()
        .map(|s| {
            s.views
                .get(view)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::Data(format!("sample of {} lacks view {view}", s.label)))
        })
        .collect()
}

/// Stage 3: fits the fusion classifier on frozen branch features.
pub fn train_fusion(
    model: &mut ModelState,
    samples: &[Sample],
    target: &EmbeddingMatrix,
    opts: &TrainOptions,
) -> Result<Vec<EpochMetrics>> {
    if model.frozen.iter().any(|f| !f) {
        return Err(Error::Stage(
            "branches must be frozen before fusion training".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let l = model.fusion.embedding_len();
    if target.width() != l {
        return Err(Error::Shape(format!(
            "target rows have {} entries, head emits {l}",
            target.width()
        )));
    }
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let r = target
            .row_index(&s.label)
            .ok_or_else(|| Error::Label(s.label.clone()))?;
        targets.push(make_head_target(
            target.row(r),
            target.self_column(r),
            &model.head,
        )?);
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let feats = model.branch_features(&refs)?;
    let f = model.branches[0].config.features;
    let kind = model.head.loss_kind();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: opts.lr,
            ..Default::default()
        },
        model.fusion.params(),
    );
    let mut rng = SeedRng::stream(opts.seed, 3);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for batch in batches(samples.len(), opts.batch_size, &mut rng) {
            let xb: Vec<Tensor> = feats
                .iter()
                .map(|ft| gather_rows(ft, &batch, f))
                .collect::<Result<_>>()?;
            let tb: Vec<f64> = batch
                .iter()
                .flat_map(|&i| targets[i].iter().copied())
                .collect();
            let xr: Vec<&Tensor> = xb.iter().collect();
            let (z, mut tape) = model.fusion.forward(&xr, Mode::Train)?;
            let (value, mut g) = loss(kind, &z, &Tensor::new(z.shape().to_vec(), tb)?)?;
            // per-sample losses averaged over the batch; MSE_MEAN is already a mean
            let scale = if kind == LossKind::MseMean {
                1.0
            } else {
                1.0 / batch.len() as f64
            };
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            total += value * scale * batch.len() as f64;
            let (grads, _) = model.fusion.backward(&mut tape, &g)?;
            adam_step(&mut model.fusion.params_mut(), &grads, &mut adam)?;
        }
        history.push(EpochMetrics {
            epoch,
            loss: total / samples.len() as f64,
            accuracy: None,
        });
    }
    model.reference = Some(target.clone());
    Ok(history)
}

fn gather_rows(t: &Tensor, idx: &[usize], width: usize) -> Result<Tensor> {
    let data = idx
        .iter()
        .flat_map(|&i| t.data()[i * width..(i + 1) * width].iter().copied())
        .collect();
    Tensor::new(vec![idx.len(), width], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "branch", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PredictMode {
    Fusion,
    AvgEnsemble,
    SingleBranch(usize),
}

/// Predicted distance rows, one per sample.
///
/// `Fusion` runs the full stage-3 path and applies the head readout. The
/// baseline modes map a branch's temporary-head class probabilities to the
/// probability-weighted mean of the reference rows; `AvgEnsemble` averages
/// the three branches' rows.
pub fn predict_embeddings(
    model: &ModelState,
    samples: &[&Sample],
    mode: PredictMode,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    match mode {
        PredictMode::Fusion => {
            let feats = model.branch_features(samples)?;
            let fr: Vec<&Tensor> = feats.iter().collect();
            let (z, _) = model.fusion.forward(&fr, Mode::Eval)?;
            let l = model.fusion.embedding_len();
            Ok(z.data().chunks(l).map(|r| model.head.readout(r)).collect())
        }
        PredictMode::SingleBranch(b) => branch_rows(model, samples, b),
        PredictMode::AvgEnsemble => {
            let per: Vec<Vec<Vec<f64>>> = (0..N_BRANCHES)
                .map(|b| branch_rows(model, samples, b))
                .collect::<Result<_>>()?;
            Ok((0..samples.len())
                .map(|i| {
                    let w = per[0][i].len();
                    (0..w)
                        .map(|k| per.iter().map(|p| p[i][k]).sum::<f64>() / N_BRANCHES as f64)
                        .collect()
                })
                .collect())
        }
    }
}

pub fn predict_embedding(
    model: &ModelState,
    sample: &Sample,
    mode: PredictMode,
) -> Result<Vec<f64>> {
    Ok(predict_embeddings(model, &[sample], mode)?.remove(0))
}

fn branch_rows(model: &ModelState, samples: &[&Sample], b: usize) -> Result<Vec<Vec<f64>>> {
    let branch = model
        .branches
        .get(b)
        .ok_or_else(|| Error::InvalidParam(format!("no branch {b}")))?;
    let reference = model
        .reference
        .as_ref()
        .ok_or_else(|| Error::Stage("baseline predictions need a trained reference".into()))?;
    let rows: Vec<Vec<f64>> = branch
        .classes
        .iter()
        .map(|c| {
            reference
                .row_index(c)
                .map(|r| reference.row(r).to_vec())
                .ok_or_else(|| Error::Label(c.clone()))
        })
        .collect::<Result<_>>()?;
    let probs = branch.class_probs(&view_rows(samples, b)?)?;
    Ok(probs
        .iter()
        .map(|p| {
            (0..reference.width())
                .map(|k| p.iter().zip(&rows).map(|(w, r)| w * r[k]).sum())
                .collect()
        })
        .collect())
}

/// Label for a predicted row against candidate species `refmat`.
///
/// For fusion outputs of softmax heads the predicted distribution
/// `softmax(-pred / tau)` is compared with each candidate's head target;
/// otherwise `pred` is compared with the candidate rows directly.
pub fn classify_embedding(
    head: &HeadVariant,
    mode: PredictMode,
    pred: &[f64],
    refmat: &EmbeddingMatrix,
    metric: MetricTag,
) -> Result<(String, LabelEmbedding)> {
    if !(head.kind.is_softmax() && mode == PredictMode::Fusion) {
        return classify(pred, refmat, metric);
    }
    let targets = (0..refmat.rows())
        .map(|r| make_head_target(refmat.row(r), refmat.self_column(r), head))
        .collect::<Result<Vec<_>>>()?;
    let tm = EmbeddingMatrix::new(
        refmat.row_labels().to_vec(),
        refmat.col_labels().to_vec(),
        targets,
    )?;
    let logits: Vec<f64> = pred.iter().map(|v| -v / head.tau).collect();
    classify(&softmax(&logits), &tm, metric)
}

/// The full three-branch + fusion graph with gradients reaching every
/// branch weight; used to verify the composed backward pass.
pub struct ComposedProbe {
    pub nets: Vec<Sequential>,
    pub fusion: Fusion,
    pub inputs: Vec<Tensor>,
    pub target: Tensor,
    pub kind: LossKind,
}

impl Differentiable for ComposedProbe {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.nets.iter_mut().flat_map(|n| n.params_mut()).collect();
        p.extend(self.fusion.params_mut());
        p
    }

    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
        let mut feats = Vec::new();
        let mut tapes: Vec<SequentialTape> = Vec::new();
        for (net, x) in self.nets.iter().zip(&self.inputs) {
            let (f, t) = net.forward(x, Mode::Train)?;
            feats.push(f);
            tapes.push(t);
        }
        let fr: Vec<&Tensor> = feats.iter().collect();
        let (z, mut tape) = self.fusion.forward(&fr, Mode::Train)?;
        let (value, g) = loss(self.kind, &z, &self.target)?;
        let (fusion_grads, feat_grads) = self.fusion.backward(&mut tape, &g)?;
        let mut grads = Vec::new();
        for ((net, t), fg) in self.nets.iter().zip(tapes.iter_mut()).zip(&feat_grads) {
            grads.extend(net.backward(t, fg)?.0);
        }
        grads.extend(fusion_grads);
        Ok((value, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::grad_check;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn head_targets_by_hand() {
        let row = [0.0, 0.2, 0.4];
        let mse = make_head_target(&row, None, &HeadVariant::new(HeadKind::MseSum)).unwrap();
        assert_eq!(mse, row);
        let sm = HeadVariant {
            kind: HeadKind::Softmax,
            tau: 1.0,
        };
        assert!(close(
            &make_head_target(&row, Some(0), &sm).unwrap(),
            &[0.4018, 0.3290, 0.2693],
            1e-4
        ));
        let neg = HeadVariant {
            kind: HeadKind::SoftmaxNeg1,
            tau: 1.0,
        };
        assert!(close(
            &make_head_target(&row, Some(0), &neg).unwrap(),
            &[0.6461, 0.1946, 0.1593],
            1e-4
        ));
        assert!(matches!(
            make_head_target(&row, None, &sm),
            Err(Error::Target(_))
        ));
    }

    #[test]
    fn softmax_readout_inverts_target() {
        let row = [0.0, 0.13, 0.4, 0.25];
        let head = HeadVariant::new(HeadKind::Softmax);
        let t = make_head_target(&row, Some(0), &head).unwrap();
        let logits: Vec<f64> = t.iter().map(|p| p.ln()).collect();
        assert!(close(&head.readout(&logits), &row, 1e-12));
    }

    proptest! {
        #[test]
        fn neg1_sharpens_self_mass(row in prop::collection::vec(0.0f64..2.0, 2..10), s in 0usize..10, tau in 0.01f64..3.0) {
            let s = s % row.len();
            let mut row = row;
            row[s] = 0.0;
            let a = make_head_target(&row, Some(s), &HeadVariant { kind: HeadKind::Softmax, tau }).unwrap();
            let b = make_head_target(&row, Some(s), &HeadVariant { kind: HeadKind::SoftmaxNeg1, tau }).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // compared through the off-self mass, which stays representable when
            // the self entry rounds to 1
            let off = |t: &[f64]| t.iter().enumerate().filter(|(k, _)| *k != s).map(|(_, v)| v).sum::<f64>();
            prop_assert!(b[s] >= a[s] && off(&b) < off(&a));
        }
    }

    fn blobs(n_per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = SeedRng::new(seed);
        let centers = [
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 2.0, 0.0],
        ];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..n_per {
                xs.push(center.iter().map(|v| v + 0.2 * rng.normal()).collect());
                ys.push(format!("c{c}"));
            }
        }
        (xs, ys)
    }

    #[test]
    fn zero_epochs_keep_initial_weights() {
        let (xs, ys) = blobs(5, 1);
        let cfg = BranchConfig::feature_vector(4);
        let opts = TrainOptions {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let (b, hist) = train_branch(&cfg, &xs, &ys, &opts, None).unwrap();
        assert!(hist.is_empty());
        let fresh = Branch::init(cfg, vec!["c0".into(), "c1".into(), "c2".into()], 9).unwrap();
        assert_eq!(b, fresh);
        assert!(matches!(
            train_branch(&BranchConfig::feature_vector(4), &[], &[], &opts, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn separable_species_are_learned() {
        let (xs, ys) = blobs(20, 2);
        let opts = TrainOptions {
            epochs: 20,
            lr: 1e-3,
            seed: 3,
            ..Default::default()
        };
        let (_, hist) =
            train_branch(&BranchConfig::feature_vector(4), &xs, &ys, &opts, None).unwrap();
        assert_eq!(hist.last().unwrap().accuracy, Some(1.0));
        // trend: no uptick above 10% of the previous epoch's loss
        for w in hist.windows(2) {
            assert!(
                w[1].loss <= w[0].loss * 1.1,
                "{} -> {}",
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn image_branch_trains() {
        let mut rng = SeedRng::new(4);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..2 {
            for _ in 0..12 {
                // class 0 bright top half, class 1 bright bottom half
                let img: Vec<f64> = (0..16)
                    .map(|p| {
                        let top = p < 8;
                        let on = (c == 0) == top;
                        (if on { 1.0 } else { 0.0 }) + 0.1 * rng.normal()
                    })
                    .collect();
                xs.push(img);
                ys.push(format!("k{c}"));
            }
        }
        let cfg = BranchConfig {
            input: InputKind::ToyImage {
                channels: 1,
                height: 4,
                width: 4,
            },
            hidden: 4,
            features: 8,
        };
        let opts = TrainOptions {
            epochs: 60,
            lr: 1e-2,
            seed: 1,
            ..Default::default()
        };
        let (_, hist) = train_branch(&cfg, &xs, &ys, &opts, None).unwrap();
        assert_eq!(hist.last().unwrap().accuracy, Some(1.0));
    }

    fn tiny_model(head: HeadKind) -> (ModelState, Vec<Sample>, EmbeddingMatrix) {
        let (xs, ys) = blobs(8, 5);
        let samples: Vec<Sample> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| Sample {
                label: y.clone(),
                views: vec![
                    x.clone(),
                    x.iter().rev().cloned().collect(),
                    x.iter().map(|v| v * 0.5).collect(),
                ],
            })
            .collect();
        let mut cfg = BranchConfig::feature_vector(4);
        cfg.hidden = 8;
        cfg.features = 6;
        let opts = TrainOptions {
            epochs: 5,
            lr: 1e-3,
            seed: 1,
            ..Default::default()
        };
        let branches = (0..3)
            .map(|v| {
                let x: Vec<Vec<f64>> = samples.iter().map(|s| s.views[v].clone()).collect();
                train_branch(&cfg, &x, &ys, &opts, None).map(|r| r.0)
            })
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let labels: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
        let target = EmbeddingMatrix::new(
            labels.clone(),
            labels,
            vec![
                vec![0.0, 0.3, 0.5],
                vec![0.3, 0.0, 0.4],
                vec![0.5, 0.4, 0.0],
            ],
        )
        .unwrap();
        (
            ModelState::new(branches, HeadVariant::new(head), 3, 7).unwrap(),
            samples,
            target,
        )
    }

    #[test]
    fn fusion_requires_frozen_branches_and_keeps_them() {
        let (mut model, samples, target) = tiny_model(HeadKind::MseSum);
        let opts = TrainOptions {
            epochs: 3,
            lr: 1e-3,
            ..Default::default()
        };
        assert!(matches!(
            train_fusion(&mut model, &samples, &target, &opts),
            Err(Error::Stage(_))
        ));
        model.freeze_branches();
        let before = model.branches.clone();
        let fusion_before = model.fusion.clone();
        let hist = train_fusion(&mut model, &samples, &target, &opts).unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(model.branches, before);
        assert_ne!(model.fusion, fusion_before);
    }

    #[test]
    fn every_head_trains_and_predicts_deterministically() {
        for kind in HeadKind::ALL {
            let (mut model, samples, target) = tiny_model(kind);
            model.freeze_branches();
            let opts = TrainOptions {
                epochs: 30,
                lr: 3e-3,
                ..Default::default()
            };
            let hist = train_fusion(&mut model, &samples, &target, &opts).unwrap();
            assert!(hist.last().unwrap().loss < hist[0].loss, "{kind:?}");
            for mode in [
                PredictMode::Fusion,
                PredictMode::AvgEnsemble,
                PredictMode::SingleBranch(1),
            ] {
                let a = predict_embedding(&model, &samples[0], mode).unwrap();
                assert_eq!(a, predict_embedding(&model, &samples[0], mode).unwrap());
                assert_eq!(a.len(), 3);
                let (label, _) =
                    classify_embedding(&model.head, mode, &a, &target, MetricTag::Euclidean)
                        .unwrap();
                assert!(target.row_index(&label).is_some());
            }
        }
    }

    #[test]
    fn missing_view_is_a_data_error() {
        let (model, mut samples, _) = tiny_model(HeadKind::MseSum);
        samples[0].views.pop();
        assert!(matches!(
            predict_embedding(&model, &samples[0], PredictMode::Fusion),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (mut model, samples, target) = tiny_model(HeadKind::Softmax);
        model.freeze_branches();
        train_fusion(
            &mut model,
            &samples,
            &target,
            &TrainOptions {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let text = model.to_checkpoint().unwrap().to_text();
        let back = ModelState::from_checkpoint(Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn composed_graph_passes_grad_check() {
        let mut rng = SeedRng::new(12);
        let mk = |rng: &mut SeedRng, d: usize| {
            Sequential::new(
                vec![
                    LayerSpec::dense(d, 5),
                    LayerSpec::Relu,
                    LayerSpec::dense(5, 4),
                    LayerSpec::Relu,
                ],
                rng,
            )
            .unwrap()
        };
        let nets = vec![mk(&mut rng, 3), mk(&mut rng, 4), mk(&mut rng, 2)];
        // keep every ReLU away from its kink by lifting first-layer biases
        let mut nets = nets;
        for n in &mut nets {
            for l in [0, 2] {
                n.layers[l].params[1]
                    .data_mut()
                    .iter_mut()
                    .for_each(|b| *b = 0.5);
            }
        }
        let fusion = Fusion::new(4, 3, &mut rng).unwrap();
        let inputs = [3, 4, 2]
            .iter()
            .map(|&d| {
                Tensor::new(
                    vec![2, d],
                    (0..2 * d).map(|_| rng.uniform_range(-0.5, 0.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let target = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.2, 0.3, 0.0, 0.7]).unwrap();
        for kind in [LossKind::MseSum, LossKind::SoftCe] {
            let mut probe = ComposedProbe {
                nets: nets.clone(),
                fusion: fusion.clone(),
                inputs: Vec::clone(&inputs),
                target: if kind == LossKind::SoftCe {
                    Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.1, 0.1, 0.8]).unwrap()
                } else {
                    target.clone()
                },
                kind,
            };
            let err = grad_check(&mut probe, 1e-5).unwrap();
            assert!(err <= 1e-4, "{kind:?}: {err}");
        }
    }
}
