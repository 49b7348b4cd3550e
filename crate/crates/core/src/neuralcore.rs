//! A small deterministic differentiable core in double precision.
//!
//! Every layer kind has a hand-written forward pass that records a [`Tape`]
//! and a backward pass that consumes it. Models elsewhere in the crate are
//! fixed compositions of these layers; [`grad_check`] verifies any such
//! composition against central differences.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    fn rows(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Sigmoid,
    GlobalAvgPool,
    SeBlock {
        channels: usize,
        reduction: usize,
    },
    EcaBlock {
        channels: usize,
        kernel: usize,
    },
    Lstm {
        inputs: usize,
        hidden: usize,
    },
    Softmax,
    Concat {
        widths: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn se(channels: usize) -> Self {
        LayerSpec::SeBlock {
            channels,
            reduction: 4,
        }
    }

    pub fn eca(channels: usize) -> Self {
        LayerSpec::EcaBlock {
            channels,
            kernel: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Dense { inputs, outputs } => *inputs > 0 && *outputs > 0,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => *in_channels > 0 && *out_channels > 0 && kernel % 2 == 1,
            LayerSpec::SeBlock {
                channels,
                reduction,
            } => *channels > 0 && *reduction > 0,
            LayerSpec::EcaBlock { channels, kernel } => *channels > 0 && kernel % 2 == 1,
            LayerSpec::Lstm { inputs, hidden } => *inputs > 0 && *hidden > 0,
            LayerSpec::Concat { widths } => !widths.is_empty() && widths.iter().all(|&w| w > 0),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "layer hyperparameters {self:?}"
            )))
        }
    }

    /// Shapes of the parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::SeBlock {
                channels,
                reduction,
            } => {
                let r = se_hidden(channels, reduction);
                vec![
                    vec![r, channels],
                    vec![r],
                    vec![channels, r],
                    vec![channels],
                ]
            }
            LayerSpec::EcaBlock { kernel, .. } => vec![vec![kernel]],
            LayerSpec::Lstm { inputs, hidden } => {
                vec![
                    vec![4 * hidden, inputs],
                    vec![4 * hidden, hidden],
                    vec![4 * hidden],
                ]
            }
            _ => Vec::new(),
        }
    }
}

fn se_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    /// No tape is recorded; backward on an eval tape fails.
    Eval,
}

#[derive(Debug)]
enum Cache {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    Relu { input: Tensor },
    Sigmoid { output: Tensor },
    GlobalAvgPool { shape: Vec<usize> },
    Se(SeCache),
    Eca(EcaCache),
    Lstm(LstmCache),
    Softmax { output: Tensor },
    Concat { shapes: Vec<Vec<usize>> },
}

/// Record of one forward call; consumed by exactly one backward call.
#[derive(Debug)]
pub struct Tape {
    cache: Option<Cache>,
}

impl Tape {
    pub fn is_consumed(&self) -> bool {
        self.cache.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct Grads {
    pub params: Vec<Tensor>,
    pub inputs: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

impl Layer {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero (LSTM forget-gate
    /// bias 1).
    pub fn new(spec: LayerSpec, rng: &mut SeedRng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let mut t = Tensor::zeros(shape);
            let is_bias = shape.len() == 1 && !matches!(spec, LayerSpec::EcaBlock { .. });
            if !is_bias {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let fan_in = if matches!(spec, LayerSpec::EcaBlock { .. }) {
                    shape[0]
                } else {
                    fan_in
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform_range(-bound, bound);
                }
            }
            params.push(t);
        }
        if let LayerSpec::Lstm { hidden, .. } = spec {
            for v in &mut params[2].data_mut()[hidden..2 * hidden] {
                *v = 1.0;
            }
        }
        Ok(Layer { spec, params })
    }

    pub fn with_params(spec: LayerSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s != p.shape()) {
            return Err(Error::Shape(format!("parameters do not match {spec:?}")));
        }
        Ok(Layer { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn forward1(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        self.forward(&[input], mode)
    }

    pub fn forward(&self, inputs: &[&Tensor], mode: Mode) -> Result<(Tensor, Tape)> {
        let expect_inputs = match &self.spec {
            LayerSpec::Concat { widths } => widths.len(),
            _ => 1,
        };
        if inputs.len() != expect_inputs {
            return Err(Error::Shape(format!(
                "{:?} takes {expect_inputs} inputs, got {}",
                self.spec,
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite input of shape {:?}",
                bad.shape()
            )));
        }
        let x = inputs[0];
        let (out, cache) = match &self.spec {
            LayerSpec::Dense {
                inputs: din,
                outputs,
            } => {
                check_last(x, *din)?;
                let rows = x.rows();
                let y = affine(
                    x.data(),
                    rows,
                    *din,
                    self.params[0].data(),
                    Some(self.params[1].data()),
                    *outputs,
                );
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = *outputs;
                (Tensor::new(shape, y)?, Cache::Dense { input: x.clone() })
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let (b, h, w) = check_image(x, *in_channels)?;
                let y = conv2d_forward(
                    x.data(),
                    self.params[0].data(),
                    self.params[1].data(),
                    b,
                    *in_channels,
                    *out_channels,
                    h,
                    w,
                    *kernel,
                );
                (
                    Tensor::new(vec![b, *out_channels, h, w], y)?,
                    Cache::Conv2d { input: x.clone() },
                )
            }
            LayerSpec::Relu => {
                let y = x.data().iter().map(|&v| v.max(0.0)).collect();
                (
                    Tensor::new(x.shape().to_vec(), y)?,
                    Cache::Relu { input: x.clone() },
                )
            }
            LayerSpec::Sigmoid => {
                let y = Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| sigmoid(v)).collect(),
                )?;
                (y.clone(), Cache::Sigmoid { output: y })
            }
            LayerSpec::GlobalAvgPool => {
                if x.shape().len() != 4 {
                    return Err(Error::Shape(format!(
                        "GLOBAL_AVG_POOL expects [B,C,H,W], got {:?}",
                        x.shape()
                    )));
                }
                let (b, c) = (x.shape()[0], x.shape()[1]);
                let s = x.shape()[2] * x.shape()[3];
                let y = pool(x.data(), b * c, s);
                (
                    Tensor::new(vec![b, c], y)?,
                    Cache::GlobalAvgPool {
                        shape: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::SeBlock {
                channels,
                reduction,
            } => {
                let (b, s) = check_channels(x, *channels)?;
                let (y, cache) = se_forward(
                    &self.params,
                    x,
                    b,
                    *channels,
                    s,
                    se_hidden(*channels, *reduction),
                );
                (Tensor::new(x.shape().to_vec(), y)?, Cache::Se(cache))
            }
            LayerSpec::EcaBlock { channels, kernel } => {
                let (b, s) = check_channels(x, *channels)?;
                let (y, cache) = eca_forward(self.params[0].data(), x, b, *channels, s, *kernel);
                (Tensor::new(x.shape().to_vec(), y)?, Cache::Eca(cache))
            }
            LayerSpec::Lstm {
                inputs: din,
                hidden,
            } => {
                if x.shape().len() != 3 || x.shape()[2] != *din {
                    return Err(Error::Shape(format!(
                        "LSTM expects [B,T,{din}], got {:?}",
                        x.shape()
                    )));
                }
                let (b, t) = (x.shape()[0], x.shape()[1]);
                let (hs, _, cache) =
                    lstm_forward(&self.params, x.data(), b, t, *din, *hidden, None);
                (Tensor::new(vec![b, t, *hidden], hs)?, Cache::Lstm(cache))
            }
            LayerSpec::Softmax => {
                let y = softmax_rows(x.data(), x.last_dim());
                let y = Tensor::new(x.shape().to_vec(), y)?;
                (y.clone(), Cache::Softmax { output: y })
            }
            LayerSpec::Concat { widths } => {
                let rows = x.rows();
                for (t, &w) in inputs.iter().zip(widths) {
                    check_last(t, w)?;
                    if t.rows() != rows {
                        return Err(Error::Shape("CONCAT inputs differ in batch size".into()));
                    }
                }
                let total: usize = widths.iter().sum();
                let mut y = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (t, &w) in inputs.iter().zip(widths) {
                        y.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = total;
                (
                    Tensor::new(shape, y)?,
                    Cache::Concat {
                        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
                    },
                )
            }
        };
        let tape = Tape {
            cache: (mode == Mode::Train).then_some(cache),
        };
        Ok((out, tape))
    }

    pub fn backward(&self, tape: &mut Tape, upstream: &Tensor) -> Result<Grads> {
        let cache = tape
            .cache
            .take()
            .ok_or_else(|| Error::Tape("tape already consumed or recorded in eval mode".into()))?;
        if !upstream.is_finite() {
            return Err(Error::Numerical("non-finite upstream gradient".into()));
        }
        let dy = upstream.data();
        let grads = match (&self.spec, cache) {
            (
                LayerSpec::Dense {
                    inputs: din,
                    outputs,
                },
                Cache::Dense { input },
            ) => {
                check_last(upstream, *outputs)?;
                let rows = input.rows();
                let mut dw = vec![0.0; din * outputs];
                let mut db = vec![0.0; *outputs];
                let mut dx = vec![0.0; rows * din];
                affine_backward(
                    input.data(),
                    dy,
                    rows,
                    *din,
                    self.params[0].data(),
                    *outputs,
                    &mut dw,
                    Some(&mut db),
                    Some(&mut dx),
                );
                Grads {
                    params: vec![Tensor::new(vec![*outputs, *din], dw)?, Tensor::vector(db)],
                    inputs: vec![Tensor::new(input.shape().to_vec(), dx)?],
                }
            }
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                },
                Cache::Conv2d { input },
            ) => {
                let (b, h, w) = check_image(&input, *in_channels)?;
                let (dw, db, dx) = conv2d_backward(
                    input.data(),
                    self.params[0].data(),
                    dy,
                    b,
                    *in_channels,
                    *out_channels,
                    h,
                    w,
                    *kernel,
                );
                Grads {
                    params: vec![
                        Tensor::new(self.params[0].shape().to_vec(), dw)?,
                        Tensor::vector(db),
                    ],
                    inputs: vec![Tensor::new(input.shape().to_vec(), dx)?],
                }
            }
            (LayerSpec::Relu, Cache::Relu { input }) => {
                let dx = input
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Grads {
                    params: vec![],
                    inputs: vec![Tensor::new(input.shape().to_vec(), dx)?],
                }
            }
            (LayerSpec::Sigmoid, Cache::Sigmoid { output }) => {
                let dx = output
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                Grads {
                    params: vec![],
                    inputs: vec![Tensor::new(output.shape().to_vec(), dx)?],
                }
            }
            (LayerSpec::GlobalAvgPool, Cache::GlobalAvgPool { shape }) => {
                let s = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(shape.iter().product());
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g / s as f64, s));
                }
                Grads {
                    params: vec![],
                    inputs: vec![Tensor::new(shape, dx)?],
                }
            }
            (
                LayerSpec::SeBlock {
                    channels,
                    reduction,
                },
                Cache::Se(cache),
            ) => {
                let (dparams, dx) = se_backward(
                    &self.params,
                    &cache,
                    dy,
                    *channels,
                    se_hidden(*channels, *reduction),
                )?;
                Grads {
                    params: dparams,
                    inputs: vec![Tensor::new(cache.shape.clone(), dx)?],
                }
            }
            (LayerSpec::EcaBlock { channels, kernel }, Cache::Eca(cache)) => {
                let (dw, dx) = eca_backward(self.params[0].data(), &cache, dy, *channels, *kernel);
                Grads {
                    params: vec![Tensor::vector(dw)],
                    inputs: vec![Tensor::new(cache.shape.clone(), dx)?],
                }
            }
            (
                LayerSpec::Lstm {
                    inputs: din,
                    hidden,
                },
                Cache::Lstm(cache),
            ) => {
                let (b, t) = (cache.batch, cache.steps);
                let (dparams, dx, _) =
                    lstm_backward(&self.params, &cache, dy, None, *din, *hidden)?;
                Grads {
                    params: dparams,
                    inputs: vec![Tensor::new(vec![b, t, *din], dx)?],
                }
            }
            (LayerSpec::Softmax, Cache::Softmax { output }) => {
                let n = output.last_dim();
                let mut dx = vec![0.0; output.len()];
                for r in 0..output.rows() {
                    let y = &output.data()[r * n..(r + 1) * n];
                    let g = &dy[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        dx[r * n + k] = y[k] * (g[k] - dot);
                    }
                }
                Grads {
                    params: vec![],
                    inputs: vec![Tensor::new(output.shape().to_vec(), dx)?],
                }
            }
            (LayerSpec::Concat { widths }, Cache::Concat { shapes }) => {
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut outs: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(rows * w))
                    .collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(widths) {
                        o.extend_from_slice(&dy[off..off + w]);
                        off += w;
                    }
                }
                Grads {
                    params: vec![],
                    inputs: outs
                        .into_iter()
                        .zip(shapes)
                        .map(|(d, s)| Tensor::new(s, d))
                        .collect::<Result<_>>()?,
                }
            }
            _ => return Err(Error::Tape("tape does not belong to this layer".into())),
        };
        Ok(grads)
    }
}

fn check_last(x: &Tensor, width: usize) -> Result<()> {
    if x.shape().is_empty() || x.last_dim() != width {
        return Err(Error::Shape(format!(
            "expected trailing dimension {width}, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn check_image(x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[b, c, h, w] if c == channels => Ok((b, h, w)),
        s => Err(Error::Shape(format!(
            "expected [B,{channels},H,W], got {s:?}"
        ))),
    }
}

/// Batch and spatial size for `[B,C]` or `[B,C,...]` inputs.
fn check_channels(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::Shape(format!(
            "expected [B,{channels},...], got {s:?}"
        )));
    }
    Ok((s[0], s[2..].iter().product()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_rows(x, x.len())
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[r] = W x[r] + b` with `W` stored `[out, in]`.
fn affine(
    x: &[f64],
    rows: usize,
    din: usize,
    w: &[f64],
    b: Option<&[f64]>,
    dout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            y[r * dout + o] = dot(xr, &w[o * din..(o + 1) * din]) + b.map_or(0.0, |b| b[o]);
        }
    }
    y
}

/// Accumulates gradients of [`affine`].
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    din: usize,
    w: &[f64],
    dout: usize,
    dw: &mut [f64],
    mut db: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dy[r * dout + o];
            if g == 0.0 {
                continue;
            }
            axpy(g, xr, &mut dw[o * din..(o + 1) * din]);
            if let Some(db) = db.as_deref_mut() {
                db[o] += g;
            }
            if let Some(dx) = dx.as_deref_mut() {
                axpy(
                    g,
                    &w[o * din..(o + 1) * din],
                    &mut dx[r * din..(r + 1) * din],
                );
            }
        }
    }
}

fn pool(x: &[f64], groups: usize, s: usize) -> Vec<f64> {
    (0..groups)
        .map(|g| x[g * s..(g + 1) * s].iter().sum::<f64>() / s as f64)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut y = vec![0.0; batch * cout * h * wd];
    for b in 0..batch {
        for o in 0..cout {
            let out = &mut y[(b * cout + o) * h * wd..(b * cout + o + 1) * h * wd];
            out.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..cin {
                let img = &x[(b * cin + c) * h * wd..(b * cin + c + 1) * h * wd];
                for i in 0..k {
                    for j in 0..k {
                        let wv = w[((o * cin + c) * k + i) * k + j];
                        for r in 0..h {
                            let rr = r as isize + i as isize - p;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for q in 0..wd {
                                let qq = q as isize + j as isize - p;
                                if qq < 0 || qq >= wd as isize {
                                    continue;
                                }
                                out[r * wd + q] += wv * img[rr as usize * wd + qq as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = (k / 2) as isize;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut dx = vec![0.0; x.len()];
    for b in 0..batch {
        for o in 0..cout {
            let g = &dy[(b * cout + o) * h * wd..(b * cout + o + 1) * h * wd];
            db[o] += g.iter().sum::<f64>();
            for c in 0..cin {
                let base = (b * cin + c) * h * wd;
                for i in 0..k {
                    for j in 0..k {
                        let widx = ((o * cin + c) * k + i) * k + j;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for r in 0..h {
                            let rr = r as isize + i as isize - p;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for q in 0..wd {
                                let qq = q as isize + j as isize - p;
                                if qq < 0 || qq >= wd as isize {
                                    continue;
                                }
                                let xi = base + rr as usize * wd + qq as usize;
                                acc += g[r * wd + q] * x[xi];
                                dx[xi] += g[r * wd + q] * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

#[derive(Debug)]
struct SeCache {
    shape: Vec<usize>,
    input: Vec<f64>,
    batch: usize,
    spatial: usize,
    squeezed: Vec<f64>,
    hidden_pre: Vec<f64>,
    gate: Vec<f64>,
}

fn se_forward(
    params: &[Tensor],
    x: &Tensor,
    batch: usize,
    c: usize,
    s: usize,
    r: usize,
) -> (Vec<f64>, SeCache) {
    let z = pool(x.data(), batch * c, s);
    let a1 = affine(&z, batch, c, params[0].data(), Some(params[1].data()), r);
    let h1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
    let a2 = affine(&h1, batch, r, params[2].data(), Some(params[3].data()), c);
    let gate: Vec<f64> = a2.iter().map(|&v| sigmoid(v)).collect();
    let y = scale_channels(x.data(), &gate, batch * c, s);
    (
        y,
        SeCache {
            shape: x.shape().to_vec(),
            input: x.data().to_vec(),
            batch,
            spatial: s,
            squeezed: z,
            hidden_pre: a1,
            gate,
        },
    )
}

fn scale_channels(x: &[f64], gate: &[f64], groups: usize, s: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for g in 0..groups {
        for v in &mut y[g * s..(g + 1) * s] {
            *v *= gate[g];
        }
    }
    y
}

/// Gradient w.r.t. the gate (summed over space) and the direct input path.
fn gated_backward(
    x: &[f64],
    gate: &[f64],
    dy: &[f64],
    groups: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dgate = vec![0.0; groups];
    let mut dx = vec![0.0; x.len()];
    for g in 0..groups {
        let range = g * s..(g + 1) * s;
        dgate[g] = dot(&x[range.clone()], &dy[range.clone()]);
        for i in range {
            dx[i] = dy[i] * gate[g];
        }
    }
    (dgate, dx)
}

fn se_backward(
    params: &[Tensor],
    cache: &SeCache,
    dy: &[f64],
    c: usize,
    r: usize,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let (b, s) = (cache.batch, cache.spatial);
    let (dgate, mut dx) = gated_backward(&cache.input, &cache.gate, dy, b * c, s);
    let da2: Vec<f64> = dgate
        .iter()
        .zip(&cache.gate)
        .map(|(g, s)| g * s * (1.0 - s))
        .collect();
    let h1: Vec<f64> = cache.hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let mut dw2 = vec![0.0; c * r];
    let mut db2 = vec![0.0; c];
    let mut dh1 = vec![0.0; b * r];
    affine_backward(
        &h1,
        &da2,
        b,
        r,
        params[2].data(),
        c,
        &mut dw2,
        Some(&mut db2),
        Some(&mut dh1),
    );
    let da1: Vec<f64> = dh1
        .iter()
        .zip(&cache.hidden_pre)
        .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
        .collect();
    let mut dw1 = vec![0.0; r * c];
    let mut db1 = vec![0.0; r];
    let mut dz = vec![0.0; b * c];
    affine_backward(
        &cache.squeezed,
        &da1,
        b,
        c,
        params[0].data(),
        r,
        &mut dw1,
        Some(&mut db1),
        Some(&mut dz),
    );
    for g in 0..b * c {
        let share = dz[g] / s as f64;
        for v in &mut dx[g * s..(g + 1) * s] {
            *v += share;
        }
    }
    Ok((
        vec![
            Tensor::new(vec![r, c], dw1)?,
            Tensor::vector(db1),
            Tensor::new(vec![c, r], dw2)?,
            Tensor::vector(db2),
        ],
        dx,
    ))
}

#[derive(Debug)]
struct EcaCache {
    shape: Vec<usize>,
    input: Vec<f64>,
    batch: usize,
    spatial: usize,
    squeezed: Vec<f64>,
    gate: Vec<f64>,
}

/// Channel attention with a width-`k` 1-D convolution over the pooled
/// channel descriptor. Windows are truncated at the first and last channels
/// (zero padding, no wrap-around).
fn eca_forward(
    w: &[f64],
    x: &Tensor,
    batch: usize,
    c: usize,
    s: usize,
    k: usize,
) -> (Vec<f64>, EcaCache) {
    let p = (k / 2) as isize;
    let z = pool(x.data(), batch * c, s);
    let mut gate = vec![0.0; batch * c];
    for b in 0..batch {
        for ch in 0..c {
            let mut a = 0.0;
            for (j, wj) in w.iter().enumerate() {
                let src = ch as isize + j as isize - p;
                if src >= 0 && (src as usize) < c {
                    a += wj * z[b * c + src as usize];
                }
            }
            gate[b * c + ch] = sigmoid(a);
        }
    }
    let y = scale_channels(x.data(), &gate, batch * c, s);
    (
        y,
        EcaCache {
            shape: x.shape().to_vec(),
            input: x.data().to_vec(),
            batch,
            spatial: s,
            squeezed: z,
            gate,
        },
    )
}

fn eca_backward(
    w: &[f64],
    cache: &EcaCache,
    dy: &[f64],
    c: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let p = (k / 2) as isize;
    let (b, s) = (cache.batch, cache.spatial);
    let (dgate, mut dx) = gated_backward(&cache.input, &cache.gate, dy, b * c, s);
    let mut dw = vec![0.0; k];
    let mut dz = vec![0.0; b * c];
    for bi in 0..b {
        for ch in 0..c {
            let g = cache.gate[bi * c + ch];
            let da = dgate[bi * c + ch] * g * (1.0 - g);
            for (j, wj) in w.iter().enumerate() {
                let src = ch as isize + j as isize - p;
                if src >= 0 && (src as usize) < c {
                    let zi = bi * c + src as usize;
                    dw[j] += da * cache.squeezed[zi];
                    dz[zi] += da * wj;
                }
            }
        }
    }
    for g in 0..b * c {
        let share = dz[g] / s as f64;
        for v in &mut dx[g * s..(g + 1) * s] {
            *v += share;
        }
    }
    (dw, dx)
}

/// Hidden and cell state for a batch, each `[B*H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; batch * hidden],
            c: vec![0.0; batch * hidden],
        }
    }
}

/// Everything an LSTM backward pass needs, for a whole sequence.
#[derive(Debug, Clone)]
pub struct LstmCache {
    batch: usize,
    steps: usize,
    input: Vec<f64>,
    // per step, [B*H] each
    h_prev: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    // activated gates per step, [B*4H] in i, f, g, o order
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

/// Runs an LSTM over `x` shaped `[B, T, in]` (row-major).
///
/// Parameters are `W [4H, in]`, `U [4H, H]`, `b [4H]` with gates ordered
/// input, forget, cell, output. Returns all hidden states `[B, T, H]`, the
/// final state, and the cache.
pub fn lstm_forward(
    params: &[Tensor],
    x: &[f64],
    batch: usize,
    steps: usize,
    din: usize,
    hidden: usize,
    init: Option<&LstmState>,
) -> (Vec<f64>, LstmState, LstmCache) {
    let h4 = 4 * hidden;
    let (w, u, bias) = (params[0].data(), params[1].data(), params[2].data());
    let mut state = init
        .cloned()
        .unwrap_or_else(|| LstmState::zeros(batch, hidden));
    let mut out = vec![0.0; batch * steps * hidden];
    let mut cache = LstmCache {
        batch,
        steps,
        input: x.to_vec(),
        h_prev: Vec::with_capacity(steps),
        c_prev: Vec::with_capacity(steps),
        gates: Vec::with_capacity(steps),
        c: Vec::with_capacity(steps),
    };
    let mut xt = vec![0.0; batch * din];
    for t in 0..steps {
        for b in 0..batch {
            let src = (b * steps + t) * din;
            xt[b * din..(b + 1) * din].copy_from_slice(&x[src..src + din]);
        }
        let mut pre = affine(&xt, batch, din, w, Some(bias), h4);
        let rec = affine(&state.h, batch, hidden, u, None, h4);
        for (p, r) in pre.iter_mut().zip(&rec) {
            *p += r;
        }
        let mut c_new = vec![0.0; batch * hidden];
        let mut h_new = vec![0.0; batch * hidden];
        for b in 0..batch {
            let g = &mut pre[b * h4..(b + 1) * h4];
            for k in 0..hidden {
                g[k] = sigmoid(g[k]);
                g[hidden + k] = sigmoid(g[hidden + k]);
                g[2 * hidden + k] = g[2 * hidden + k].tanh();
                g[3 * hidden + k] = sigmoid(g[3 * hidden + k]);
                let idx = b * hidden + k;
                let c = g[hidden + k] * state.c[idx] + g[k] * g[2 * hidden + k];
                c_new[idx] = c;
                h_new[idx] = g[3 * hidden + k] * c.tanh();
            }
        }
        for b in 0..batch {
            let dst = (b * steps + t) * hidden;
            out[dst..dst + hidden].copy_from_slice(&h_new[b * hidden..(b + 1) * hidden]);
        }
        cache.h_prev.push(std::mem::replace(&mut state.h, h_new));
        cache
            .c_prev
            .push(std::mem::replace(&mut state.c, c_new.clone()));
        cache.gates.push(pre);
        cache.c.push(c_new);
    }
    (out, state, cache)
}

/// Backward pass of [`lstm_forward`].
///
/// `d_out` is the gradient w.r.t. every hidden output `[B, T, H]`;
/// `d_final` the gradient w.r.t. the returned final state. Returns parameter
/// gradients, input gradient `[B, T, in]` and the gradient w.r.t. the
/// initial state.
pub fn lstm_backward(
    params: &[Tensor],
    cache: &LstmCache,
    d_out: &[f64],
    d_final: Option<&LstmState>,
    din: usize,
    hidden: usize,
) -> Result<(Vec<Tensor>, Vec<f64>, LstmState)> {
    let (batch, steps) = (cache.batch, cache.steps);
    let h4 = 4 * hidden;
    if d_out.len() != batch * steps * hidden {
        return Err(Error::Shape(
            "LSTM upstream gradient has the wrong size".into(),
        ));
    }
    let (w, u) = (params[0].data(), params[1].data());
    let mut dw = vec![0.0; h4 * din];
    let mut du = vec![0.0; h4 * hidden];
    let mut db = vec![0.0; h4];
    let mut dx = vec![0.0; batch * steps * din];
    let mut state = d_final
        .cloned()
        .unwrap_or_else(|| LstmState::zeros(batch, hidden));
    let mut xt = vec![0.0; batch * din];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let mut da = vec![0.0; batch * h4];
        for b in 0..batch {
            for k in 0..hidden {
                let idx = b * hidden + k;
                let gi = gates[b * h4 + k];
                let gf = gates[b * h4 + hidden + k];
                let gg = gates[b * h4 + 2 * hidden + k];
                let go = gates[b * h4 + 3 * hidden + k];
                let tc = cache.c[t][idx].tanh();
                let dh = state.h[idx] + d_out[(b * steps + t) * hidden + k];
                let dc = state.c[idx] + dh * go * (1.0 - tc * tc);
                da[b * h4 + k] = dc * gg * gi * (1.0 - gi);
                da[b * h4 + hidden + k] = dc * cache.c_prev[t][idx] * gf * (1.0 - gf);
                da[b * h4 + 2 * hidden + k] = dc * gi * (1.0 - gg * gg);
                da[b * h4 + 3 * hidden + k] = dh * tc * go * (1.0 - go);
                state.c[idx] = dc * gf;
            }
        }
        for b in 0..batch {
            let src = (b * steps + t) * din;
            xt[b * din..(b + 1) * din].copy_from_slice(&cache.input[src..src + din]);
        }
        let mut dxt = vec![0.0; batch * din];
        affine_backward(
            &xt,
            &da,
            batch,
            din,
            w,
            h4,
            &mut dw,
            Some(&mut db),
            Some(&mut dxt),
        );
        let mut dh_prev = vec![0.0; batch * hidden];
        affine_backward(
            &cache.h_prev[t],
            &da,
            batch,
            hidden,
            u,
            h4,
            &mut du,
            None,
            Some(&mut dh_prev),
        );
        state.h = dh_prev;
        for b in 0..batch {
            let dst = (b * steps + t) * din;
            dx[dst..dst + din].copy_from_slice(&dxt[b * din..(b + 1) * din]);
        }
    }
    Ok((
        vec![
            Tensor::new(vec![h4, din], dw)?,
            Tensor::new(vec![h4, hidden], du)?,
            Tensor::vector(db),
        ],
        dx,
        state,
    ))
}

/// A plain stack of single-input layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

pub struct SequentialTape {
    tapes: Vec<Tape>,
}

impl Sequential {
    pub fn new(specs: Vec<LayerSpec>, rng: &mut SeedRng) -> Result<Self> {
        Ok(Sequential {
            layers: specs
                .into_iter()
                .map(|s| Layer::new(s, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, SequentialTape)> {
        let mut x = input.clone();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, tape) = layer.forward1(&x, mode)?;
            tapes.push(tape);
            x = y;
        }
        Ok((x, SequentialTape { tapes }))
    }

    /// Parameter gradients flattened in layer order, plus the input gradient.
    pub fn backward(
        &self,
        tape: &mut SequentialTape,
        upstream: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = upstream.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, t) in self.layers.iter().zip(tape.tapes.iter_mut()).rev() {
            let grads = layer.backward(t, &g)?;
            per_layer.push(grads.params);
            g = grads.inputs.into_iter().next().expect("single-input layer");
        }
        per_layer.reverse();
        Ok((per_layer.into_iter().flatten().collect(), g))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    MseSum,
    MseMean,
    /// Cross-entropy of `softmax(pred)` against a probability target, per row.
    SoftCe,
}

/// Loss value and its gradient w.r.t. `pred`.
pub fn loss(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (p, t) = (pred.data(), target.data());
    match kind {
        LossKind::MseSum | LossKind::MseMean => {
            let scale = if kind == LossKind::MseMean {
                1.0 / p.len() as f64
            } else {
                1.0
            };
            let value = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * scale;
            let grad = p
                .iter()
                .zip(t)
                .map(|(a, b)| 2.0 * (a - b) * scale)
                .collect();
            Ok((value, Tensor::new(pred.shape().to_vec(), grad)?))
        }
        LossKind::SoftCe => {
            let n = pred.last_dim();
            let mut value = 0.0;
            let mut grad = vec![0.0; p.len()];
            for r in 0..pred.rows() {
                let tr = &t[r * n..(r + 1) * n];
                let sum: f64 = tr.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || tr.iter().any(|&v| v < 0.0) {
                    return Err(Error::Target(format!(
                        "row {r} is not a probability vector (sum {sum})"
                    )));
                }
                let lp = log_softmax(&p[r * n..(r + 1) * n]);
                for k in 0..n {
                    if tr[k] > 0.0 {
                        value -= tr[k] * lp[k];
                    }
                    grad[r * n + k] = lp[k].exp() - tr[k];
                }
            }
            Ok((value, Tensor::new(pred.shape().to_vec(), grad)?))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        AdamState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(
            "parameter, gradient and moment lists differ".into(),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub(crate) fn accumulate(into: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in into.iter_mut().zip(grads) {
        a.add_assign(g);
    }
}

pub(crate) fn scale_all(grads: &mut [Tensor], s: f64) {
    for g in grads {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

/// Something whose scalar loss and analytic gradients can be checked.
pub trait Differentiable {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Loss and gradients, aligned with `params_mut`.
    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)>;
}

/// Maximum relative error `|a - n| / max(|a|, |n|, 1e-8)` between analytic
/// and central-difference gradients over every parameter entry.
pub fn grad_check(f: &mut dyn Differentiable, eps: f64) -> Result<f64> {
    let (_, analytic) = f.loss_and_grads()?;
    let sizes: Vec<usize> = f.params_mut().iter().map(|p| p.len()).collect();
    if analytic.len() != sizes.len() || analytic.iter().zip(&sizes).any(|(g, &n)| g.len() != n) {
        return Err(Error::Shape(
            "gradients do not line up with parameters".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = f.params_mut()[k].data()[i];
            f.params_mut()[k].data_mut()[i] = orig + eps;
            let (lp, _) = f.loss_and_grads()?;
            f.params_mut()[k].data_mut()[i] = orig - eps;
            let (lm, _) = f.loss_and_grads()?;
            f.params_mut()[k].data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// A layer plus fixed inputs, scored by a fixed random projection of its
/// output. Inputs are treated as parameters, so their gradients are checked
/// too.
pub struct LayerProbe {
    pub layer: Layer,
    pub inputs: Vec<Tensor>,
    pub projection: Tensor,
}

impl LayerProbe {
    pub fn new(layer: Layer, inputs: Vec<Tensor>, rng: &mut SeedRng) -> Result<Self> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let (y, _) = layer.forward(&refs, Mode::Eval)?;
        let proj = y
            .data()
            .iter()
            .map(|_| rng.uniform_range(-1.0, 1.0))
            .collect();
        Ok(LayerProbe {
            layer,
            inputs,
            projection: Tensor::new(y.shape().to_vec(), proj)?,
        })
    }
}

impl Differentiable for LayerProbe {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layer
            .params
            .iter_mut()
            .chain(self.inputs.iter_mut())
            .collect()
    }

    fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
        let refs: Vec<&Tensor> = self.inputs.iter().collect();
        let (y, mut tape) = self.layer.forward(&refs, Mode::Train)?;
        let value = dot(y.data(), self.projection.data());
        let grads = self.layer.backward(&mut tape, &self.projection)?;
        Ok((
            value,
            grads.params.into_iter().chain(grads.inputs).collect(),
        ))
    }
}

const CHECKPOINT_MAGIC: &str = "PHYLOEMBED-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus free-form metadata.
///
/// Text format, version 1:
///
/// ```text
/// PHYLOEMBED-CHECKPOINT 1
/// meta <key> <value...>
/// tensor <name> <rank> <dim>...
/// <values, space separated, shortest round-trip decimal>
/// ```
///
/// Keys and names contain no whitespace; tensors appear in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = write!(out, "tensor {name} {}", t.shape().len());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            match f.next() {
                Some("meta") => {
                    let key = f.next().ok_or_else(|| bad("meta without key"))?;
                    let rest = line.splitn(3, ' ').nth(2).unwrap_or("");
                    ck.meta.insert(key.to_string(), rest.to_string());
                }
                Some("tensor") => {
                    let name = f.next().ok_or_else(|| bad("tensor without name"))?;
                    let rank: usize = f
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("bad rank"))?;
                    let shape: Vec<usize> = f
                        .map(|v| v.parse().map_err(|_| bad("bad dim")))
                        .collect::<Result<_>>()?;
                    if shape.len() != rank {
                        return Err(bad("rank does not match dims"));
                    }
                    let values_line = lines.next().unwrap_or("");
                    let data: Vec<f64> = values_line
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| bad("bad value")))
                        .collect::<Result<_>>()?;
                    ck.tensors
                        .insert(name.to_string(), Tensor::new(shape, data)?);
                }
                _ => return Err(Error::Checkpoint(format!("unexpected line '{line}'"))),
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_err(spec: LayerSpec, shapes: &[Vec<usize>], seed: u64) -> f64 {
        let mut rng = SeedRng::new(seed);
        let layer = Layer::new(spec, &mut rng).unwrap();
        let inputs = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                // keep ReLU inputs away from the kink
                let data = (0..n)
                    .map(|_| {
                        let v = rng.uniform_range(0.1, 1.0);
                        if rng.uniform() < 0.5 {
                            -v
                        } else {
                            v
                        }
                    })
                    .collect();
                Tensor::new(s.clone(), data).unwrap()
            })
            .collect();
        let mut probe = LayerProbe::new(layer, inputs, &mut rng).unwrap();
        grad_check(&mut probe, 1e-5).unwrap()
    }

    #[test]
    fn dense_identity() {
        let layer = Layer::with_params(
            LayerSpec::dense(2, 2),
            vec![
                Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::vector(vec![0.0, 0.0]),
            ],
        )
        .unwrap();
        let (y, _) = layer
            .forward1(&Tensor::vector(vec![3.0, 5.0]), Mode::Eval)
            .unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        let mut rng = SeedRng::new(1);
        let layer = Layer::new(LayerSpec::dense(3, 2), &mut rng).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let (_, mut tape) = layer.forward1(&x, Mode::Train).unwrap();
        let up = Tensor::vector(vec![0.3, -1.0]);
        let g = layer.backward(&mut tape, &up).unwrap();
        let expected: Vec<f64> = up
            .data()
            .iter()
            .flat_map(|u| x.data().iter().map(move |xi| u * xi))
            .collect();
        assert_eq!(g.params[0].data(), expected.as_slice());
        assert_eq!(g.params[1].data(), up.data());
    }

    #[test]
    fn tape_cannot_be_reused() {
        let mut rng = SeedRng::new(2);
        let layer = Layer::new(LayerSpec::dense(2, 2), &mut rng).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0]);
        let (y, mut tape) = layer.forward1(&x, Mode::Train).unwrap();
        layer.backward(&mut tape, &y).unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(layer.backward(&mut tape, &y), Err(Error::Tape(_))));
        let (y, mut eval_tape) = layer.forward1(&x, Mode::Eval).unwrap();
        assert!(matches!(
            layer.backward(&mut eval_tape, &y),
            Err(Error::Tape(_))
        ));
    }

    #[test]
    fn shape_errors() {
        let mut rng = SeedRng::new(3);
        let layer = Layer::new(LayerSpec::dense(3, 2), &mut rng).unwrap();
        assert!(matches!(
            layer.forward1(&Tensor::vector(vec![1.0, 2.0]), Mode::Eval),
            Err(Error::Shape(_))
        ));
        let conv = Layer::new(
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 1,
                kernel: 3,
            },
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            conv.forward1(&Tensor::zeros(&[1, 3, 4, 4]), Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_symmetric_and_normalized() {
        let layer = Layer::new(LayerSpec::Softmax, &mut SeedRng::new(0)).unwrap();
        let (y, _) = layer
            .forward1(&Tensor::vector(vec![0.0, 0.0]), Mode::Eval)
            .unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let mut rng = SeedRng::new(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..7).map(|_| 30.0 * rng.normal()).collect();
            let s = softmax(&x);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sigmoid(-800.0) > 0.0 - 1e-300 && sigmoid(800.0) <= 1.0);
        assert!(sigmoid(30.0) < 1.0 && sigmoid(-30.0) > 0.0);
    }

    #[test]
    fn se_with_saturated_gate_is_identity() {
        let c = 8;
        let r = se_hidden(c, 4);
        let layer = Layer::with_params(
            LayerSpec::se(c),
            vec![
                Tensor::zeros(&[r, c]),
                Tensor::zeros(&[r]),
                Tensor::zeros(&[c, r]),
                Tensor::vector(vec![1000.0; c]),
            ],
        )
        .unwrap();
        let mut rng = SeedRng::new(5);
        let x = Tensor::new(
            vec![2, c, 2, 3],
            (0..2 * c * 6).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let (y, _) = layer.forward1(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn eca_edge_channels_see_truncated_windows() {
        // weights (1, 0, 0): channel c's pre-activation is z[c - 1], so the
        // first channel sees nothing and gets sigmoid(0) = 0.5
        let layer =
            Layer::with_params(LayerSpec::eca(3), vec![Tensor::vector(vec![1.0, 0.0, 0.0])])
                .unwrap();
        let x = Tensor::matrix(1, 3, vec![2.0, 4.0, 6.0]).unwrap();
        let (y, _) = layer.forward1(&x, Mode::Eval).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - 4.0 * sigmoid(2.0)).abs() < 1e-15);
        assert!((y.data()[2] - 6.0 * sigmoid(4.0)).abs() < 1e-15);
    }

    #[test]
    fn lstm_at_zero_weights() {
        let spec = LayerSpec::Lstm {
            inputs: 2,
            hidden: 3,
        };
        let params = spec
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let layer = Layer::with_params(spec, params).unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![0.7, -0.3]).unwrap();
        let (h, mut tape) = layer.forward1(&x, Mode::Train).unwrap();
        // c = sigma(0) * tanh(0) = 0, h = sigma(0) * tanh(0) = 0
        assert_eq!(h.data(), &[0.0; 3]);
        let up = Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = layer.backward(&mut tape, &up).unwrap();
        // dh/d(pre_g) = o * (1 - tanh(c)^2) * i * (1 - g^2) = 0.5 * 0.5 = 0.25,
        // every other pre-activation gradient is zero at the origin
        let db = g.params[2].data();
        for k in 0..3 {
            assert_eq!(db[k], 0.0);
            assert_eq!(db[3 + k], 0.0);
            assert!((db[6 + k] - 0.25).abs() < 1e-15);
            assert_eq!(db[9 + k], 0.0);
        }
        let dw = g.params[0].data();
        assert!((dw[6 * 2] - 0.25 * 0.7).abs() < 1e-15);
        assert!((dw[6 * 2 + 1] + 0.25 * 0.3).abs() < 1e-15);
        assert_eq!(g.inputs[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn losses_by_hand() {
        let p = Tensor::vector(vec![0.0, 0.0]);
        let t = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(loss(LossKind::MseSum, &p, &t).unwrap().0, 1.0);
        assert_eq!(loss(LossKind::MseMean, &p, &t).unwrap().0, 0.5);
        assert_eq!(loss(LossKind::MseSum, &t, &t).unwrap().0, 0.0);
        let half = Tensor::vector(vec![0.5, 0.5]);
        let (ce, g) = loss(LossKind::SoftCe, &p, &half).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert!(matches!(
            loss(LossKind::SoftCe, &p, &Tensor::vector(vec![0.5, 0.6])),
            Err(Error::Target(_))
        ));
    }

    #[test]
    fn loss_gradients_match_differences() {
        struct L(LossKind, Tensor, Tensor);
        impl Differentiable for L {
            fn params_mut(&mut self) -> Vec<&mut Tensor> {
                vec![&mut self.1]
            }
            fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
                let (v, g) = loss(self.0, &self.1, &self.2)?;
                Ok((v, vec![g]))
            }
        }
        let pred = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
        let target = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.7, 0.1, 0.2]).unwrap();
        for kind in [LossKind::MseSum, LossKind::MseMean, LossKind::SoftCe] {
            let err = grad_check(&mut L(kind, pred.clone(), target.clone()), 1e-5).unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn adam_by_hand() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![0.0])], &mut state).unwrap();
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(state.step, 1);

        let mut p = Tensor::vector(vec![0.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![1.0])], &mut state).unwrap();
        let first = p.data()[0];
        assert!((first + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![1.0])], &mut state).unwrap();
        assert!(((p.data()[0] - first) + 1e-4).abs() < 1e-11);

        assert!(matches!(
            adam_step(&mut [&mut p], &[Tensor::vector(vec![f64::NAN])], &mut state),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn every_layer_kind_passes_grad_check() {
        let cases: Vec<(LayerSpec, Vec<Vec<usize>>, f64)> = vec![
            (LayerSpec::dense(4, 3), vec![vec![2, 4]], 1e-6),
            (
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                },
                vec![vec![2, 2, 4, 5]],
                1e-4,
            ),
            (LayerSpec::Relu, vec![vec![3, 4]], 1e-6),
            (LayerSpec::Sigmoid, vec![vec![3, 4]], 1e-6),
            (LayerSpec::GlobalAvgPool, vec![vec![2, 3, 2, 2]], 1e-6),
            (LayerSpec::se(8), vec![vec![3, 8]], 1e-4),
            (LayerSpec::se(8), vec![vec![2, 8, 2, 3]], 1e-4),
            (LayerSpec::eca(6), vec![vec![3, 6]], 1e-4),
            (
                LayerSpec::EcaBlock {
                    channels: 7,
                    kernel: 5,
                },
                vec![vec![2, 7, 3, 1]],
                1e-4,
            ),
            (
                LayerSpec::Lstm {
                    inputs: 3,
                    hidden: 4,
                },
                vec![vec![2, 5, 3]],
                1e-4,
            ),
            (LayerSpec::Softmax, vec![vec![3, 5]], 1e-6),
            (
                LayerSpec::Concat {
                    widths: vec![2, 3, 1],
                },
                vec![vec![2, 2], vec![2, 3], vec![2, 1]],
                1e-6,
            ),
        ];
        for (seed, (spec, shapes, tol)) in cases.into_iter().enumerate() {
            let err = probe_err(spec.clone(), &shapes, seed as u64);
            assert!(err <= tol, "{spec:?}: {err}");
        }
    }

    #[test]
    fn lstm_state_gradients() {
        // checks the initial-state and final-state paths used by seq2seq
        struct P {
            params: Vec<Tensor>,
            x: Tensor,
            h0: Tensor,
            c0: Tensor,
            proj_out: Vec<f64>,
            proj_h: Vec<f64>,
            proj_c: Vec<f64>,
        }
        impl Differentiable for P {
            fn params_mut(&mut self) -> Vec<&mut Tensor> {
                let mut v: Vec<&mut Tensor> = self.params.iter_mut().collect();
                v.push(&mut self.x);
                v.push(&mut self.h0);
                v.push(&mut self.c0);
                v
            }
            fn loss_and_grads(&self) -> Result<(f64, Vec<Tensor>)> {
                let init = LstmState {
                    h: self.h0.data().to_vec(),
                    c: self.c0.data().to_vec(),
                };
                let (out, fin, cache) =
                    lstm_forward(&self.params, self.x.data(), 2, 4, 3, 5, Some(&init));
                let value = dot(&out, &self.proj_out)
                    + dot(&fin.h, &self.proj_h)
                    + dot(&fin.c, &self.proj_c);
                let dfin = LstmState {
                    h: self.proj_h.clone(),
                    c: self.proj_c.clone(),
                };
                let (mut g, dx, d0) =
                    lstm_backward(&self.params, &cache, &self.proj_out, Some(&dfin), 3, 5)?;
                g.push(Tensor::new(self.x.shape().to_vec(), dx)?);
                g.push(Tensor::vector(d0.h));
                g.push(Tensor::vector(d0.c));
                Ok((value, g))
            }
        }
        let mut rng = SeedRng::new(8);
        let layer = Layer::new(
            LayerSpec::Lstm {
                inputs: 3,
                hidden: 5,
            },
            &mut rng,
        )
        .unwrap();
        let mut r = |n: usize| (0..n).map(|_| rng.normal()).collect::<Vec<f64>>();
        let mut p = P {
            params: layer.params,
            x: Tensor::new(vec![2, 4, 3], r(24)).unwrap(),
            h0: Tensor::vector(r(10)),
            c0: Tensor::vector(r(10)),
            proj_out: r(40),
            proj_h: r(10),
            proj_c: r(10),
        };
        let err = grad_check(&mut p, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let mut rng = SeedRng::new(10);
        let mut ck = Checkpoint::default();
        ck.meta.insert("arch".into(), "dense 3 2".into());
        ck.insert(
            "w",
            Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal() * 1e-3).collect()).unwrap(),
        );
        ck.insert("b", Tensor::vector(vec![1.0 / 3.0, -0.0, 1e-300]));
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::from_text("nope").is_err());
        assert!(Checkpoint::from_text("PHYLOEMBED-CHECKPOINT 9\n").is_err());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let mut rng = SeedRng::new(77);
            let mut net = Sequential::new(
                vec![
                    LayerSpec::dense(3, 5),
                    LayerSpec::Relu,
                    LayerSpec::dense(5, 2),
                ],
                &mut rng,
            )
            .unwrap();
            let mut adam = AdamState::new(
                AdamConfig {
                    lr: 1e-2,
                    ..Default::default()
                },
                net.params(),
            );
            let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
            let t = Tensor::matrix(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
            for _ in 0..20 {
                let (y, mut tape) = net.forward(&x, Mode::Train).unwrap();
                let (_, g) = loss(LossKind::MseMean, &y, &t).unwrap();
                let (grads, _) = net.backward(&mut tape, &g).unwrap();
                adam_step(&mut net.params_mut(), &grads, &mut adam).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
