//! Decoding DNA sequences from genetic-distance embeddings.
//!
//! A two-layer LSTM encoder reads the embedding one scalar per step; its
//! final hidden and cell states seed a two-layer LSTM decoder that emits one
//! token per step, starting from `START` and stopping at `END`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralcore::{
    accumulate, adam_step, clip_global_norm, lstm_backward, lstm_forward, scale_all, softmax,
    AdamConfig, AdamState, Checkpoint, Differentiable, Layer, LayerSpec, LstmCache, LstmState,
    Mode, Tensor,
};
use crate::rng::SeedRng;

pub const VOCAB: [char; 8] = ['A', 'C', 'G', 'T', 'N', '-', '^', '$'];
pub const START: usize = 6;
pub const END: usize = 7;

pub fn token_id(base: u8) -> Result<usize> {
    match base.to_ascii_uppercase() {
        b'A' => Ok(0),
        b'C' => Ok(1),
        b'G' => Ok(2),
        b'T' | b'U' => Ok(3),
        b'N' => Ok(4),
        b'-' => Ok(5),
        other => Err(Error::Data(format!(
            "'{}' is not a DNA symbol",
            other as char
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub embedding_len: usize,
    pub hidden: usize,
    pub token_width: usize,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embedding_len: 12,
            hidden: 64,
            token_width: 16,
            max_len: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnaDecoder {
    pub config: DecoderConfig,
    pub encoder: Vec<Layer>,
    /// Token embedding table, `[vocab, token_width]`.
    pub tokens: Tensor,
    pub decoder: Vec<Layer>,
    pub out: Layer,
}

struct Pass {
    enc: Vec<LstmCache>,
    dec: Vec<LstmCache>,
    dec_out: Vec<f64>,
    probs: Vec<Vec<f64>>,
}

impl DnaDecoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        if config.embedding_len == 0
            || config.hidden == 0
            || config.token_width == 0
            || config.max_len == 0
        {
            return Err(Error::InvalidParam(format!("decoder config {config:?}")));
        }
        let mut rng = SeedRng::new(seed);
        let h = config.hidden;
        let encoder = vec![
            Layer::new(
                LayerSpec::Lstm {
                    inputs: 1,
                    hidden: h,
                },
                &mut rng,
            )?,
            Layer::new(
                LayerSpec::Lstm {
                    inputs: h,
                    hidden: h,
                },
                &mut rng,
            )?,
        ];
        let tokens = Tensor::new(
            vec![VOCAB.len(), config.token_width],
            (0..VOCAB.len() * config.token_width)
                .map(|_| rng.uniform_range(-1.0, 1.0))
                .collect(),
        )?;
        let decoder = vec![
            Layer::new(
                LayerSpec::Lstm {
                    inputs: config.token_width,
                    hidden: h,
                },
                &mut rng,
            )?,
            Layer::new(
                LayerSpec::Lstm {
                    inputs: h,
                    hidden: h,
                },
                &mut rng,
            )?,
        ];
        let out = Layer::new(LayerSpec::dense(h, VOCAB.len()), &mut rng)?;
        Ok(DnaDecoder {
            config,
            encoder,
            tokens,
            decoder,
            out,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self
            .encoder
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect();
        p.push(&mut self.tokens);
        p.extend(self.decoder.iter_mut().flat_map(|l| l.params.iter_mut()));
        p.extend(self.out.params.iter_mut());
        p
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.encoder.iter().flat_map(|l| l.params.iter()).collect();
        p.push(&self.tokens);
        p.extend(self.decoder.iter().flat_map(|l| l.params.iter()));
        p.extend(self.out.params.iter());
        p
    }

    fn check_embedding(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.config.embedding_len {
            return Err(Error::Data(format!(
                "embedding has length {}, decoder expects {}",
                e.len(),
                self.config.embedding_len
            )));
        }
        Ok(())
    }

    /// Final states of both encoder layers plus their caches.
    fn encode(&self, e: &[f64]) -> (Vec<LstmState>, Vec<LstmCache>) {
        let h = self.config.hidden;
        let (seq1, s1, c1) = lstm_forward(&self.encoder[0].params, e, 1, e.len(), 1, h, None);
        let (_, s2, c2) = lstm_forward(&self.encoder[1].params, &seq1, 1, e.len(), h, h, None);
        (vec![s1, s2], vec![c1, c2])
    }

    fn embed(&self, ids: &[usize]) -> Vec<f64> {
        let w = self.config.token_width;
        ids.iter()
            .flat_map(|&t| self.tokens.data()[t * w..(t + 1) * w].iter().copied())
            .collect()
    }

    fn teacher_forced(&self, e: &[f64], inputs: &[usize]) -> Result<Pass> {
        let h = self.config.hidden;
        let (states, enc) = self.encode(e);
        let x = self.embed(inputs);
        let t = inputs.len();
        let (seq1, _, d1) = lstm_forward(
            &self.decoder[0].params,
            &x,
            1,
            t,
            self.config.token_width,
            h,
            Some(&states[0]),
        );
        let (seq2, _, d2) =
            lstm_forward(&self.decoder[1].params, &seq1, 1, t, h, h, Some(&states[1]));
        let (logits, _) = self
            .out
            .forward1(&Tensor::new(vec![t, h], seq2.clone())?, Mode::Eval)?;
        let probs = logits.data().chunks(VOCAB.len()).map(softmax).collect();
        Ok(Pass {
            enc,
            dec: vec![d1, d2],
            dec_out: seq2,
            probs,
        })
    }

    /// Summed token cross-entropy for one pair and its gradients in
    /// [`DnaDecoder::params_mut`] order.
    fn loss_and_grads(&self, e: &[f64], seq: &[usize]) -> Result<(f64, Vec<Tensor>, usize)> {
        let h = self.config.hidden;
        let (inputs, targets) = teacher_tokens(seq);
        let t = inputs.len();
        let pass = self.teacher_forced(e, &inputs)?;
        let mut value = 0.0;
        let mut dlogits = Vec::with_capacity(t * VOCAB.len());
        let mut correct = 0;
        for (p, &y) in pass.probs.iter().zip(&targets) {
            value -= p[y].max(f64::MIN_POSITIVE).ln();
            if argmax(p) == y {
                correct += 1;
            }
            for (k, &pk) in p.iter().enumerate() {
                dlogits.push(pk - if k == y { 1.0 } else { 0.0 });
            }
        }
        let (_, mut out_tape) = self
            .out
            .forward1(&Tensor::new(vec![t, h], pass.dec_out.clone())?, Mode::Train)?;
        let og = self
            .out
            .backward(&mut out_tape, &Tensor::new(vec![t, VOCAB.len()], dlogits)?)?;
        let (g_d2, dx2, d_init2) = lstm_backward(
            &self.decoder[1].params,
            &pass.dec[1],
            og.inputs[0].data(),
            None,
            h,
            h,
        )?;
        let w = self.config.token_width;
        let (g_d1, dx1, d_init1) =
            lstm_backward(&self.decoder[0].params, &pass.dec[0], &dx2, None, w, h)?;
        let mut g_tokens = vec![0.0; self.tokens.len()];
        for (step, &tok) in inputs.iter().enumerate() {
            for k in 0..w {
                g_tokens[tok * w + k] += dx1[step * w + k];
            }
        }
        let l = e.len();
        let zeros = vec![0.0; l * h];
        let (g_e2, dxe2, _) = lstm_backward(
            &self.encoder[1].params,
            &pass.enc[1],
            &zeros,
            Some(&d_init2),
            h,
            h,
        )?;
        let (g_e1, _, _) = lstm_backward(
            &self.encoder[0].params,
            &pass.enc[0],
            &dxe2,
            Some(&d_init1),
            1,
            h,
        )?;
        let mut grads = g_e1;
        grads.extend(g_e2);
        grads.push(Tensor::new(self.tokens.shape().to_vec(), g_tokens)?);
        grads.extend(g_d1);
        grads.extend(g_d2);
        grads.extend(og.params);
        Ok((value, grads, correct))
    }

    /// Greedy decoding; `START` is never emitted and `END` terminates.
    pub fn decode_greedy(&self, e: &[f64]) -> Result<String> {
        self.check_embedding(e)?;
        let h = self.config.hidden;
        let w = self.config.token_width;
        let (mut states, _) = self.encode(e);
        let mut tok = START;
        let mut out = String::new();
        for _ in 0..self.config.max_len {
            let x = self.embed(&[tok]);
            let (y1, s1, _) =
                lstm_forward(&self.decoder[0].params, &x, 1, 1, w, h, Some(&states[0]));
            let (y2, s2, _) =
                lstm_forward(&self.decoder[1].params, &y1, 1, 1, h, h, Some(&states[1]));
            states = vec![s1, s2];
            let (z, _) = self
                .out
                .forward1(&Tensor::new(vec![1, h], y2)?, Mode::Eval)?;
            let mut logits = z.into_data();
            logits[START] = f64::NEG_INFINITY;
            tok = argmax(&logits);
            if tok == END {
                break;
            }
            out.push(VOCAB[tok]);
        }
        Ok(out)
    }

    /// Fraction of next-token predictions that are right under teacher
    /// forcing, over every target token (bases plus `END`).
    pub fn teacher_forced_accuracy(&self, pairs: &[(Vec<f64>, String)]) -> Result<f64> {
        let mut correct = 0;
        let mut total = 0;
        for (e, s) in pairs {
            self.check_embedding(e)?;
            let seq = encode_bases(s)?;
            let (inputs, targets) = teacher_tokens(&seq);
            let pass = self.teacher_forced(e, &inputs)?;
            correct += pass
                .probs
                .iter()
                .zip(&targets)
                .filter(|(p, &y)| argmax(p) == y)
                .count();
            total += targets.len();
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.meta
            .insert("decoder".into(), serde_json::to_string(&self.config)?);
        let names = param_names();
        for (name, p) in names.iter().zip(self.params()) {
            ck.insert(name.clone(), p.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let cfg = ck
            .meta
            .get("decoder")
            .ok_or_else(|| Error::Checkpoint("missing decoder config".into()))?;
        let config: DecoderConfig = serde_json::from_str(cfg)?;
        let mut model = DnaDecoder::new(config, 0)?;
        for (name, p) in param_names().iter().zip(model.params_mut()) {
            let t = ck.take(name)?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}",
                    t.shape()
                )));
            }
            *p = t;
        }
        Ok(model)
    }
}

fn param_names() -> Vec<String> {
    let lstm = |prefix: &str| ["w", "u", "b"].map(|k| format!("{prefix}.{k}"));
    let mut names: Vec<String> = lstm("enc0").into_iter().chain(lstm("enc1")).collect();
    names.push("tokens".into());
    names.extend(lstm("dec0"));
    names.extend(lstm("dec1"));
    names.extend(["out.w".to_string(), "out.b".to_string()]);
    names
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

pub fn encode_bases(s: &str) -> Result<Vec<usize>> {
    s.bytes().map(token_id).collect()
}

/// Decoder inputs `START, b1..bn` and targets `b1..bn, END`.
fn teacher_tokens(seq: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(seq.len() + 1);
    inputs.push(START);
    inputs.extend_from_slice(seq);
    let mut targets = seq.to_vec();
    targets.push(END);
    (inputs, targets)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// SD of Gaussian noise added to training embeddings each time they are
    /// seen; 0 disables it.
    pub input_noise: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Anneal the learning rate to zero along a half cosine over the run.
    pub cosine_decay: bool,
}

impl Default for DecoderTrainOptions {
    fn default() -> Self {
        DecoderTrainOptions {
            epochs: 100,
            lr: 1e-4,
            batch_size: 16,
            seed: 0,
            input_noise: 0.0,
            clip_norm: 0.0,
            cosine_decay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderEpoch {
    pub epoch: usize,
    /// Mean token cross-entropy.
    pub loss: f64,
    pub token_accuracy: f64,
}

/// Teacher-forced training on `(embedding, DNA)` pairs.
pub fn train_decoder(
    pairs: &[(Vec<f64>, String)],
    config: DecoderConfig,
    opts: &DecoderTrainOptions,
) -> Result<(DnaDecoder, Vec<DecoderEpoch>)> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let l = pairs[0].0.len();
    if pairs.iter().any(|(e, _)| e.len() != l) || l != config.embedding_len {
        return Err(Error::Data(
            "embeddings differ in length from each other or the config".into(),
        ));
    }
    let seqs: Vec<Vec<usize>> = pairs
        .iter()
        .map(|(_, s)| encode_bases(s))
        .collect::<Result<_>>()?;
    let mut model = DnaDecoder::new(config, opts.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: opts.lr,
            ..Default::default()
        },
        model.params(),
    );
    let mut rng = SeedRng::stream(opts.seed, 1);
    let mut noise = SeedRng::stream(opts.seed, 2);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        if opts.cosine_decay {
            let frac = epoch as f64 / opts.epochs as f64;
            adam.config.lr = 0.5 * opts.lr * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        let (mut total, mut correct, mut tokens) = (0.0, 0, 0);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_tokens = 0;
            for &i in batch {
                let e: Vec<f64> = pairs[i]
                    .0
                    .iter()
                    .map(|v| {
                        if opts.input_noise > 0.0 {
                            v + opts.input_noise * noise.normal()
                        } else {
                            *v
                        }
                    })
                    .collect();
                let (value, grads, c) = model.loss_and_grads(&e, &seqs[i])?;
                total += value;
                correct += c;
                batch_tokens += seqs[i].len() + 1;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => accumulate(a, &grads),
                }
            }
            tokens += batch_tokens;
            let mut grads = acc.expect("nonempty batch");
            scale_all(&mut grads, 1.0 / batch_tokens as f64);
            if opts.clip_norm > 0.0 {
                clip_global_norm(&mut grads, opts.clip_norm);
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam)?;
        }
        history.push(DecoderEpoch {
            epoch,
            loss: total / tokens as f64,
            token_accuracy: correct as f64 / tokens as f64,
        });
    }
    Ok((model, history))
}

/// 1-based inclusive span of sequence positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub regions: Vec<Region>,
}

impl Default for RegionSpec {
    fn default() -> Self {
        let r = |name: &str, start, end| Region {
            name: name.into(),
            start,
            end,
        };
        RegionSpec {
            regions: vec![
                r("variable_5p", 1, 8),
                r("conserved", 9, 124),
                r("variable_3p", 125, 157),
            ],
        }
    }
}

impl RegionSpec {
    /// Checks that the spans tile `1..=length` in order.
    pub fn validate(&self, length: usize) -> Result<()> {
        let mut next = 1;
        for r in &self.regions {
            if r.start != next || r.end < r.start {
                return Err(Error::InvalidParam(format!(
                    "region {} does not continue at {next}",
                    r.name
                )));
            }
            next = r.end + 1;
        }
        if next != length + 1 {
            return Err(Error::InvalidParam(format!(
                "regions cover 1..{} but the sequence has {length}",
                next - 1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub regions: Vec<(String, f64)>,
}

impl AccuracyReport {
    pub fn region(&self, name: &str) -> Option<f64> {
        self.regions.iter().find(|(n, _)| n == name).map(|r| r.1)
    }
}

/// Position-wise agreement. Positions present in only one string count as
/// mismatches, so the denominator is the longer length.
pub fn per_base_accuracy(
    pred: &str,
    label: &str,
    regions: Option<&RegionSpec>,
) -> Result<AccuracyReport> {
    if label.is_empty() {
        return Err(Error::Data("empty label sequence".into()));
    }
    let (p, t) = (pred.as_bytes(), label.as_bytes());
    let hit = |i: usize| {
        p.get(i)
            .zip(t.get(i))
            .is_some_and(|(a, b)| a.eq_ignore_ascii_case(b))
    };
    let n = p.len().max(t.len());
    let overall = (0..n).filter(|&i| hit(i)).count() as f64 / n as f64;
    let mut out = Vec::new();
    if let Some(spec) = regions {
        spec.validate(t.len())?;
        for r in &spec.regions {
            let m = (r.start - 1..r.end).filter(|&i| hit(i)).count();
            out.push((r.name.clone(), m as f64 / (r.end - r.start + 1) as f64));
        }
    }
    Ok(AccuracyReport {
        overall,
        regions: out,
    })
}

pub fn baseline_similarity(reference: &str, others: &[String]) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::Data("no sequences to compare against".into()));
    }
    let mut total = 0.0;
    for o in others {
        total += per_base_accuracy(reference, o, None)?.overall;
    }
    Ok(total / others.len() as f64)
}

/// Encoder–decoder plus one training pair, for gradient checking.
pub struct DecoderProbe {
    pub model: DnaDecoder,
    pub embedding: Vec<f64>,
    pub sequence: Vec<usize>,
}

impl DecoderProbe {
    /// A small, well-conditioned probe point. At the default init some
    /// encoder gradients fall near 1e-9, under central-difference roundoff,
    /// so the weights are doubled and the embedding is of order 2.
    pub fn conditioned(seed: u64) -> Result<Self> {
        let config = DecoderConfig {
            embedding_len: 5,
            hidden: 3,
            token_width: 3,
            max_len: 20,
        };
        let mut model = DnaDecoder::new(config, seed)?;
        for t in model.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        Ok(DecoderProbe {
            model,
            embedding: vec![1.8, -1.2, 1.6, -1.4, 1.0],
            sequence: encode_bases("ACG")?,
        })
    }
}

impl Differentiable for DecoderProbe {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.params_mut()
    }

    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
        let (v, g, _) = self.model.loss_and_grads(&self.embedding, &self.sequence)?;
        Ok((v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::grad_check;

    #[test]
    fn accuracy_examples() {
        assert_eq!(
            per_base_accuracy("ACGT", "ACGT", None).unwrap().overall,
            1.0
        );
        assert_eq!(
            per_base_accuracy("ACGT", "ACGA", None).unwrap().overall,
            0.75
        );
        assert_eq!(per_base_accuracy("AC", "ACGT", None).unwrap().overall, 0.5);
        assert!(matches!(
            per_base_accuracy("A", "", None),
            Err(Error::Data(_))
        ));
        let spec = RegionSpec {
            regions: vec![
                Region {
                    name: "a".into(),
                    start: 1,
                    end: 2,
                },
                Region {
                    name: "b".into(),
                    start: 3,
                    end: 4,
                },
            ],
        };
        let r = per_base_accuracy("ACTT", "ACGA", Some(&spec)).unwrap();
        assert_eq!(r.region("a"), Some(1.0));
        assert_eq!(r.region("b"), Some(0.0));
        assert!(RegionSpec::default().validate(157).is_ok());
        assert!(RegionSpec::default().validate(150).is_err());
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_similarity("ACGT", &["ACGT".into()]).unwrap(), 1.0);
        assert_eq!(
            baseline_similarity("ACGT", &["ACCA".into(), "ACGT".into()]).unwrap(),
            0.75
        );
        assert!(baseline_similarity("ACGT", &[]).is_err());
    }

    fn small() -> DecoderConfig {
        DecoderConfig {
            embedding_len: 3,
            hidden: 4,
            token_width: 3,
            max_len: 20,
        }
    }

    #[test]
    fn encoder_decoder_passes_grad_check() {
        for seed in 0..5 {
            let err = grad_check(&mut DecoderProbe::conditioned(seed).unwrap(), 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_epochs_and_bad_inputs() {
        let pairs = vec![(vec![0.1, 0.2, 0.3], "ACGT".to_string())];
        let opts = DecoderTrainOptions {
            epochs: 0,
            seed: 4,
            ..Default::default()
        };
        let (m, h) = train_decoder(&pairs, small(), &opts).unwrap();
        assert!(h.is_empty());
        assert_eq!(m, DnaDecoder::new(small(), 4).unwrap());
        let bad = vec![
            (vec![0.1, 0.2, 0.3], "ACGT".to_string()),
            (vec![0.1], "ACGT".to_string()),
        ];
        assert!(matches!(
            train_decoder(&bad, small(), &opts),
            Err(Error::Data(_))
        ));
        let bad_dna = vec![(vec![0.1, 0.2, 0.3], "ACXT".to_string())];
        assert!(matches!(
            train_decoder(&bad_dna, small(), &opts),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn decoding_is_deterministic_and_clean() {
        let m = DnaDecoder::new(small(), 8).unwrap();
        let e = [0.5, -0.1, 0.2];
        let a = m.decode_greedy(&e).unwrap();
        assert_eq!(a, m.decode_greedy(&e).unwrap());
        assert!(a.len() <= 20);
        assert!(a.chars().all(|c| "ACGTN-".contains(c)));
    }

    #[test]
    fn short_sequences_are_memorized() {
        let pairs = vec![
            (vec![0.0, 0.5, 1.0], "ACGTAC".to_string()),
            (vec![1.0, 0.5, 0.0], "TTGCA".to_string()),
            (vec![0.5, 0.0, 0.5], "GGA-CT".to_string()),
        ];
        let cfg = DecoderConfig {
            hidden: 16,
            token_width: 4,
            ..small()
        };
        let opts = DecoderTrainOptions {
            epochs: 300,
            lr: 1e-2,
            batch_size: 3,
            seed: 1,
            ..Default::default()
        };
        let (m, hist) = train_decoder(&pairs, cfg, &opts).unwrap();
        assert!(hist.last().unwrap().loss < hist[0].loss);
        for (e, s) in &pairs {
            assert_eq!(&m.decode_greedy(e).unwrap(), s);
        }
        let back = DnaDecoder::from_checkpoint(
            Checkpoint::from_text(&m.to_checkpoint().unwrap().to_text()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
    }
}
