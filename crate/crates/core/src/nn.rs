//! Minimal dense ReLU classifier with an explicit feature-extractor / projection-head split.
//!
//! Parameters live in two flat `f64` arrays, `base` (extractor) and `head`.
//! Each dense layer is stored as its `outputs x inputs` weight matrix in
//! row-major order followed by its `outputs` biases. Every layer except the
//! final logit layer applies ReLU.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::ShuffleStream;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape("matrix row", cols, format!("{} in row {i}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copy the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack matrices of equal width vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("vstack", cols, m.cols));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Position of one dense layer inside a flat parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.outputs
    }

    /// Forward operation count per sample: a multiply-add per weight plus a bias add per output.
    pub fn flops(&self) -> u64 {
        (2 * self.inputs * self.outputs + self.outputs) as u64
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.weight_len();
        &params[start..start + self.outputs]
    }
}

/// Architecture of a classifier: `input_dim -> extractor_layers... -> head_layers...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub extractor_layers: Vec<usize>,
    pub head_layers: Vec<usize>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, extractor_layers: Vec<usize>, head_layers: Vec<usize>) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            extractor_layers,
            head_layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if self.head_layers.is_empty() {
            return Err(Error::InvalidSpec("at least one head layer is required".into()));
        }
        if self.extractor_layers.iter().chain(&self.head_layers).any(|&w| w == 0) {
            return Err(Error::InvalidSpec("all layer widths must be >= 1".into()));
        }
        if self.classes() < 2 {
            return Err(Error::InvalidSpec(format!(
                "final head width (class count) must be >= 2, got {}",
                self.classes()
            )));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        *self.head_layers.last().expect("validated spec has a head layer")
    }

    /// Width of the extractor output fed into the head.
    pub fn feature_dim(&self) -> usize {
        self.extractor_layers.last().copied().unwrap_or(self.input_dim)
    }

    fn shapes(inputs: usize, widths: &[usize]) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(widths.len());
        let mut prev = inputs;
        let mut offset = 0;
        for &w in widths {
            let s = LayerShape {
                inputs: prev,
                outputs: w,
                offset,
            };
            offset += s.param_len();
            prev = w;
            out.push(s);
        }
        out
    }

    pub fn extractor_shapes(&self) -> Vec<LayerShape> {
        Self::shapes(self.input_dim, &self.extractor_layers)
    }

    pub fn head_shapes(&self) -> Vec<LayerShape> {
        Self::shapes(self.feature_dim(), &self.head_layers)
    }

    pub fn base_len(&self) -> usize {
        self.extractor_shapes().iter().map(LayerShape::param_len).sum()
    }

    pub fn head_len(&self) -> usize {
        self.head_shapes().iter().map(LayerShape::param_len).sum()
    }

    pub fn param_count(&self) -> usize {
        self.base_len() + self.head_len()
    }

    /// Compact textual form used in checkpoint headers, e.g. `16|32,32|16,4`.
    pub fn encode(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "{}|{}|{}",
            self.input_dim,
            join(&self.extractor_layers),
            join(&self.head_layers)
        )
    }

    pub fn decode(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('|').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad model spec '{s}'")));
        }
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad layer width '{t}' in '{s}'")))
        };
        let list = |t: &str| -> Result<Vec<usize>> {
            if t.trim().is_empty() {
                Ok(Vec::new())
            } else {
                t.split(',').map(num).collect()
            }
        };
        ModelSpec::new(num(parts[0])?, list(parts[1])?, list(parts[2])?)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

/// Flat parameter arrays for the extractor (`base`) and projection head (`head`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub base: Vec<f64>,
    pub head: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelParams {
            base: vec![0.0; spec.base_len()],
            head: vec![0.0; spec.head_len()],
        }
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let fill = |shapes: &[LayerShape], len: usize, rng: &mut R| {
            let mut v = vec![0.0; len];
            for s in shapes {
                let scale = (2.0 / s.inputs as f64).sqrt();
                for w in &mut v[s.offset..s.offset + s.weight_len()] {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = scale * z;
                }
            }
            v
        };
        let base = fill(&spec.extractor_shapes(), spec.base_len(), rng);
        let head = fill(&spec.head_shapes(), spec.head_len(), rng);
        ModelParams { base, head }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.base.len() != spec.base_len() {
            return Err(Error::shape("base params", spec.base_len(), self.base.len()));
        }
        if self.head.len() != spec.head_len() {
            return Err(Error::shape("head params", spec.head_len(), self.head.len()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.base.iter().chain(&self.head).all(|v| v.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.base.iter().chain(self.head.iter())
    }

    pub fn l2_distance(&self, other: &ModelParams) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Borrowed view of labeled inputs.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a Matrix, labels: &'a [usize]) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::shape("batch labels", inputs.rows(), labels.len()));
        }
        if inputs.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("batch inputs contain NaN".into()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which parameters a training run may modify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    /// Every head layer; the extractor is frozen.
    HeadOnly,
    /// Only the final weight matrix and bias of the head.
    LastLayerOnly,
}

/// Proximal anchor adding `(mu / 2) * ||theta - reference||^2` to the loss.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'a> {
    pub reference: &'a ModelParams,
    pub mu: f64,
}

fn dense(shape: &LayerShape, params: &[f64], x: &Matrix, relu: bool) -> Matrix {
    let w = shape.weights(params);
    let b = shape.bias(params);
    let mut out = Matrix::zeros(x.rows(), shape.outputs);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (o, z) in oi.iter_mut().enumerate() {
            let wo = &w[o * shape.inputs..(o + 1) * shape.inputs];
            let mut acc = b[o];
            for (wj, xj) in wo.iter().zip(xi) {
                acc += wj * xj;
            }
            *z = if relu && acc < 0.0 { 0.0 } else { acc };
        }
    }
    out
}

/// Run a stack of layers, returning every activation including the input.
fn stack_forward(shapes: &[LayerShape], params: &[f64], x: &Matrix, relu_last: bool) -> Vec<Matrix> {
    let mut acts = Vec::with_capacity(shapes.len() + 1);
    acts.push(x.clone());
    for (l, s) in shapes.iter().enumerate() {
        let relu = relu_last || l + 1 < shapes.len();
        let next = dense(s, params, acts.last().unwrap(), relu);
        acts.push(next);
    }
    acts
}

/// Backpropagate `delta` (gradient w.r.t. the pre-activation of the top layer)
/// through layers `lowest..shapes.len()`, accumulating into `grads`.
///
/// `input_relu` says whether `acts[0]` is itself a ReLU output. Returns the
/// gradient w.r.t. the pre-activation feeding `acts[lowest]` when `want_input`.
#[allow(clippy::too_many_arguments)]
fn stack_backward(
    shapes: &[LayerShape],
    params: &[f64],
    acts: &[Matrix],
    mut delta: Matrix,
    grads: &mut [f64],
    lowest: usize,
    input_relu: bool,
    want_input: bool,
) -> Option<Matrix> {
    for l in (lowest..shapes.len()).rev() {
        let s = &shapes[l];
        let x = &acts[l];
        let w = s.weights(params);
        {
            let (gw, gb) = grads[s.offset..s.offset + s.param_len()].split_at_mut(s.weight_len());
            for i in 0..x.rows() {
                let xi = x.row(i);
                let di = delta.row(i);
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xj) in gw[o * s.inputs..(o + 1) * s.inputs].iter_mut().zip(xi) {
                        *g += d * xj;
                    }
                }
            }
        }
        let need_dx = l > lowest || want_input;
        if !need_dx {
            return None;
        }
        let mut dx = Matrix::zeros(x.rows(), s.inputs);
        for i in 0..x.rows() {
            let di = delta.row(i);
            let dxi = dx.row_mut(i);
            for (o, &d) in di.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, wj) in dxi.iter_mut().zip(&w[o * s.inputs..(o + 1) * s.inputs]) {
                    *g += d * wj;
                }
            }
        }
        // acts[l] is a ReLU output for every l > 0, and for l == 0 when the stack input was
        let masked = l > 0 || input_relu;
        if masked {
            for (g, a) in dx.data.iter_mut().zip(&x.data) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = dx;
    }
    Some(delta)
}

fn check_inputs(spec: &ModelSpec, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != spec.input_dim {
        return Err(Error::shape(
            "forward inputs",
            format!("n x {}", spec.input_dim),
            format!("{} x {}", inputs.rows(), inputs.cols()),
        ));
    }
    Ok(())
}

/// Extractor output (post-ReLU features) for every input row.
pub fn features(spec: &ModelSpec, base: &[f64], inputs: &Matrix) -> Result<Matrix> {
    check_inputs(spec, inputs)?;
    if base.len() != spec.base_len() {
        return Err(Error::shape("base params", spec.base_len(), base.len()));
    }
    let shapes = spec.extractor_shapes();
    let mut x = inputs.clone();
    for s in &shapes {
        x = dense(s, base, &x, true);
    }
    Ok(x)
}

/// Head logits for precomputed features.
pub fn head_logits(spec: &ModelSpec, head: &[f64], features: &Matrix) -> Result<Matrix> {
    if features.cols() != spec.feature_dim() {
        return Err(Error::shape("head features", spec.feature_dim(), features.cols()));
    }
    if head.len() != spec.head_len() {
        return Err(Error::shape("head params", spec.head_len(), head.len()));
    }
    let shapes = spec.head_shapes();
    let mut x = features.clone();
    for (l, s) in shapes.iter().enumerate() {
        x = dense(s, head, &x, l + 1 < shapes.len());
    }
    Ok(x)
}

/// Logits `h(phi(x))` for every input row.
pub fn forward(spec: &ModelSpec, params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    let f = features(spec, &params.base, inputs)?;
    head_logits(spec, &params.head, &f)
}

/// Row-wise softmax with max-shift.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax probabilities of the full model.
pub fn predict_proba(spec: &ModelSpec, params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    Ok(softmax(&forward(spec, params, inputs)?))
}

/// Mean cross-entropy of `logits` against `labels`, and `d loss / d logits`.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut delta = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n;
        }
        row[y] -= 1.0 / n;
    }
    (loss / n, delta)
}

fn anchor_term(params: &ModelParams, anchor: Option<Anchor<'_>>) -> f64 {
    match anchor {
        Some(a) if a.mu != 0.0 => {
            let sq: f64 = params
                .iter()
                .zip(a.reference.iter())
                .map(|(p, r)| (p - r) * (p - r))
                .sum();
            0.5 * a.mu * sq
        }
        _ => 0.0,
    }
}

fn add_anchor_grad(grad: &mut [f64], params: &[f64], reference: &[f64], mu: f64) {
    for ((g, p), r) in grad.iter_mut().zip(params).zip(reference) {
        *g += mu * (p - r);
    }
}

/// Mean cross-entropy loss and its gradient w.r.t. every parameter.
///
/// With an anchor the loss gains `(mu/2)||theta - theta_ref||^2` and the
/// gradient gains `mu (theta - theta_ref)`.
pub fn loss_and_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch<'_>,
    anchor: Option<Anchor<'_>>,
) -> Result<(f64, ModelParams)> {
    params.check(spec)?;
    check_inputs(spec, batch.inputs)?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must contain at least one sample".into()));
    }
    check_labels(spec, batch.labels)?;
    if let Some(a) = anchor {
        a.reference.check(spec)?;
    }
    let (loss, grads) = full_grads(spec, params, batch.inputs, batch.labels, anchor);
    Ok((loss, grads))
}

fn check_labels(spec: &ModelSpec, labels: &[usize]) -> Result<()> {
    let k = spec.classes();
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn full_grads(
    spec: &ModelSpec,
    params: &ModelParams,
    inputs: &Matrix,
    labels: &[usize],
    anchor: Option<Anchor<'_>>,
) -> (f64, ModelParams) {
    let ext = spec.extractor_shapes();
    let head = spec.head_shapes();
    let base_acts = stack_forward(&ext, &params.base, inputs, true);
    let feats = base_acts.last().unwrap();
    let head_acts = stack_forward(&head, &params.head, feats, false);
    let (mut loss, delta) = cross_entropy(head_acts.last().unwrap(), labels);

    let mut grads = ModelParams::zeros(spec);
    let has_base = !ext.is_empty();
    let back = stack_backward(
        &head,
        &params.head,
        &head_acts,
        delta,
        &mut grads.head,
        0,
        has_base,
        has_base,
    );
    if let Some(d) = back {
        stack_backward(&ext, &params.base, &base_acts, d, &mut grads.base, 0, false, false);
    }
    if let Some(a) = anchor {
        if a.mu != 0.0 {
            loss += anchor_term(params, anchor);
            add_anchor_grad(&mut grads.base, &params.base, &a.reference.base, a.mu);
            add_anchor_grad(&mut grads.head, &params.head, &a.reference.head, a.mu);
        }
    }
    (loss, grads)
}

/// Loss and head gradient for a head evaluated on fixed features, restricted
/// to head layers `lowest..`.
fn head_grads(spec: &ModelSpec, head: &[f64], feats: &Matrix, labels: &[usize], lowest: usize) -> (f64, Vec<f64>) {
    let shapes = spec.head_shapes();
    let acts = stack_forward(&shapes, head, feats, false);
    let (loss, delta) = cross_entropy(acts.last().unwrap(), labels);
    let mut grad = vec![0.0; head.len()];
    stack_backward(&shapes, head, &acts, delta, &mut grad, lowest, false, false);
    (loss, grad)
}

/// Hyperparameters for [`sgd_epochs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub scope: Scope,
}

/// Result of a training run: final parameters and the mean loss of every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
}

fn batches(n: usize, batch_size: usize, stream: &ShuffleStream, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size >= n {
        return vec![order];
    }
    order.shuffle(&mut stream.epoch_rng(epoch));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mini-batch SGD for `cfg.epochs` epochs over `data`.
///
/// Parameters outside `cfg.scope` are never written. With a frozen extractor
/// the features are computed once up front.
pub fn sgd_epochs(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Batch<'_>,
    cfg: &TrainConfig,
    anchor: Option<Anchor<'_>>,
    stream: ShuffleStream,
) -> Result<Trained> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    params.check(spec)?;
    check_inputs(spec, data.inputs)?;
    check_labels(spec, data.labels)?;
    if let Some(a) = anchor {
        a.reference.check(spec)?;
    }
    let mut cur = params.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(Trained {
            params: cur,
            epoch_losses,
        });
    }
    let n = data.len();

    let frozen_feats = match cfg.scope {
        Scope::All => None,
        Scope::HeadOnly | Scope::LastLayerOnly => Some(features(spec, &cur.base, data.inputs)?),
    };
    let head_shapes = spec.head_shapes();
    let last = head_shapes.len() - 1;
    let last_start = head_shapes[last].offset;

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (b, idx) in batches(n, cfg.batch_size, &stream, epoch).iter().enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let loss = match &frozen_feats {
                None => {
                    let x = data.inputs.select_rows(idx);
                    let (loss, g) = full_grads(spec, &cur, &x, &labels, anchor);
                    for (p, gi) in cur.base.iter_mut().zip(&g.base) {
                        *p -= cfg.lr * gi;
                    }
                    for (p, gi) in cur.head.iter_mut().zip(&g.head) {
                        *p -= cfg.lr * gi;
                    }
                    loss
                }
                Some(feats) => {
                    let x = feats.select_rows(idx);
                    let lowest = if cfg.scope == Scope::LastLayerOnly { last } else { 0 };
                    let (mut loss, mut g) = head_grads(spec, &cur.head, &x, &labels, lowest);
                    if let Some(a) = anchor {
                        if a.mu != 0.0 {
                            loss += anchor_term(&cur, anchor);
                            add_anchor_grad(&mut g, &cur.head, &a.reference.head, a.mu);
                        }
                    }
                    let start = if cfg.scope == Scope::LastLayerOnly {
                        last_start
                    } else {
                        0
                    };
                    for (p, gi) in cur.head[start..].iter_mut().zip(&g[start..]) {
                        *p -= cfg.lr * gi;
                    }
                    loss
                }
            };
            if !loss.is_finite() || !cur.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    lr: cfg.lr,
                });
            }
            total += loss * idx.len() as f64;
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(Trained {
        params: cur,
        epoch_losses,
    })
}
