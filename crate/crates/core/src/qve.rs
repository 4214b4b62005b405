//! The question value estimator: encoder features `h`, reader span
//! probabilities `(p_s, p_e)`, and a feed-forward tanh head producing a
//! value in `(0, 1)`. Also the two supervised trainers (binary classifier
//! and margin ranking) that share the same head.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, ExampleRef};
use crate::error::{Error, Result};
use crate::learners::QaReader;
use crate::seed;
use crate::text;

/// Probabilities are kept in `[EPS, 1 - EPS]`.
pub const EPS: f64 = 1e-6;
pub const DEFAULT_MARGIN: f64 = 0.15;

/// Maps an example to the pooled representation `h`.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, ex: ExampleRef<'_>) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Segment {
    Cls,
    Question,
    AnsMarker,
    Answer,
    Sep,
    Context,
}

/// `[CLS] question [ANS] answer [SEP] context`, truncated to `max_tokens`
/// by dropping context tokens from the tail only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QveInputEncoding {
    pub tokens: Vec<String>,
    pub segments: Vec<Segment>,
    /// Context tokens removed by truncation.
    pub truncated: usize,
}

impl QveInputEncoding {
    pub const CLS: &'static str = "[CLS]";
    pub const ANS: &'static str = "[ANS]";
    pub const SEP: &'static str = "[SEP]";

    pub fn new(question: &str, answer: &str, context: &str, max_tokens: usize) -> Self {
        let mut tokens = vec![Self::CLS.to_string()];
        let mut segments = vec![Segment::Cls];
        let push = |words: Vec<text::Token>, seg: Segment, tokens: &mut Vec<String>, segments: &mut Vec<Segment>| {
            for w in words {
                tokens.push(w.lower);
                segments.push(seg);
            }
        };
        push(text::tokenize(question), Segment::Question, &mut tokens, &mut segments);
        tokens.push(Self::ANS.into());
        segments.push(Segment::AnsMarker);
        push(text::tokenize(answer), Segment::Answer, &mut tokens, &mut segments);
        tokens.push(Self::SEP.into());
        segments.push(Segment::Sep);
        let ctx = text::tokenize(context);
        let room = max_tokens.saturating_sub(tokens.len());
        let kept = ctx.len().min(room);
        let truncated = ctx.len() - kept;
        push(ctx.into_iter().take(kept).collect(), Segment::Context, &mut tokens, &mut segments);
        Self {
            tokens,
            segments,
            truncated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub h: usize,
    pub h1: usize,
    pub h2: usize,
    pub h3: usize,
}

impl HeadDims {
    /// Full-size layout: `H1 = H3 = H = 768`, `H2 = 64`.
    pub const FULL: HeadDims = HeadDims {
        h: 768,
        h1: 768,
        h2: 64,
        h3: 768,
    };

    /// Scale the full-size layout to input width `h`.
    pub fn for_input(h: usize) -> Self {
        Self {
            h,
            h1: h,
            h2: (h / 12).max(8),
            h3: h,
        }
    }

    fn offsets(&self) -> [usize; 9] {
        let HeadDims { h, h1, h2, h3 } = *self;
        let sizes = [h1 * h, h1, h2 * h1, h2, h3 * (h2 + 2), h3, h3, 1];
        let mut out = [0; 9];
        for (i, s) in sizes.iter().enumerate() {
            out[i + 1] = out[i] + s;
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.offsets()[8]
    }
}

/// `raw = W4 . tanh(W3 (tanh(W2 tanh(W1 h + b1) + b2) ++ p_s ++ p_e) + b3) + b4`.
///
/// Parameters live in one flat vector in the order
/// `W1, b1, W2, b2, W3, b3, W4, b4`; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    dims: HeadDims,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionValue {
    pub raw: f64,
    pub prob: f64,
}

impl QuestionValue {
    pub fn from_raw(raw: f64) -> Self {
        Self {
            raw,
            prob: logistic(raw).clamp(EPS, 1.0 - EPS),
        }
    }

    /// `d prob / d raw`; zero where the clamp is active.
    pub fn dprob_draw(&self) -> f64 {
        let p = logistic(self.raw);
        if !(EPS..=1.0 - EPS).contains(&p) {
            0.0
        } else {
            p * (1.0 - p)
        }
    }

    pub fn is_clamped(&self) -> bool {
        self.dprob_draw() == 0.0
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    /// `h' ++ p_s ++ p_e`
    z: Vec<f64>,
    a3: Vec<f64>,
    pub value: QuestionValue,
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bi)| {
            let row = &w[r * n..(r + 1) * n];
            (row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi).tanh()
        })
        .collect()
}

impl ValueHead {
    pub fn zeros(dims: HeadDims) -> Self {
        Self {
            params: vec![0.0; dims.n_params()],
            dims,
        }
    }

    /// Glorot-uniform hidden weights, zero biases, and a zero output layer so
    /// every example starts at value 0.5.
    pub fn random(dims: HeadDims, seed: u64) -> Self {
        let mut head = Self::zeros(dims);
        let mut rng = seed::rng_for(seed, "value_head_init");
        let o = dims.offsets();
        let layers = [
            (0, dims.h, dims.h1),
            (2, dims.h1, dims.h2),
            (4, dims.h2 + 2, dims.h3),
        ];
        for (slot, fan_in, fan_out) in layers {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut head.params[o[slot]..o[slot + 1]] {
                *w = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
        }
        head
    }

    /// Assemble from explicit weights; every part must match `dims`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dims: HeadDims,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: &[f64],
        w3: &[f64],
        b3: &[f64],
        w4: &[f64],
        b4: f64,
    ) -> Result<Self> {
        let o = dims.offsets();
        let mut params = Vec::with_capacity(dims.n_params());
        for (i, part) in [w1, b1, w2, b2, w3, b3, w4, &[b4][..]].into_iter().enumerate() {
            let expected = o[i + 1] - o[i];
            if part.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: part.len(),
                });
            }
            params.extend_from_slice(part);
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> HeadDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn part(&self, i: usize) -> &[f64] {
        let o = self.dims.offsets();
        &self.params[o[i]..o[i + 1]]
    }

    pub fn forward(&self, h: &[f64], p_s: f64, p_e: f64) -> Result<QuestionValue> {
        Ok(self.trace(h, p_s, p_e)?.value)
    }

    pub fn trace(&self, h: &[f64], p_s: f64, p_e: f64) -> Result<HeadTrace> {
        if h.len() != self.dims.h {
            return Err(Error::DimensionMismatch {
                expected: self.dims.h,
                actual: h.len(),
            });
        }
        let a1 = affine_tanh(self.part(0), self.part(1), h);
        let a2 = affine_tanh(self.part(2), self.part(3), &a1);
        let mut z = a2.clone();
        z.push(p_s);
        z.push(p_e);
        let a3 = affine_tanh(self.part(4), self.part(5), &z);
        let raw = self.part(6).iter().zip(&a3).map(|(w, a)| w * a).sum::<f64>() + self.part(7)[0];
        Ok(HeadTrace {
            input: h.to_vec(),
            a1,
            a2,
            z,
            a3,
            value: QuestionValue::from_raw(raw),
        })
    }

    /// Accumulate `d_raw * d raw / d params` into `grad`.
    pub fn backward(&self, trace: &HeadTrace, d_raw: f64, grad: &mut [f64]) {
        if d_raw == 0.0 {
            return;
        }
        let HeadDims { h, h1, h2, h3 } = self.dims;
        let o = self.dims.offsets();
        let w4 = self.part(6);
        grad[o[7]] += d_raw;
        // layer 4
        let mut d3 = vec![0.0; h3];
        for k in 0..h3 {
            grad[o[6] + k] += d_raw * trace.a3[k];
            d3[k] = d_raw * w4[k] * (1.0 - trace.a3[k] * trace.a3[k]);
        }
        // layer 3: z has width h2 + 2, only the h2 part flows further back
        let zw = h2 + 2;
        let w3 = self.part(4);
        let mut d2 = vec![0.0; h2];
        for (k, &dk) in d3.iter().enumerate() {
            if dk == 0.0 {
                continue;
            }
            grad[o[5] + k] += dk;
            let row = o[4] + k * zw;
            for j in 0..zw {
                grad[row + j] += dk * trace.z[j];
            }
            for j in 0..h2 {
                d2[j] += dk * w3[k * zw + j];
            }
        }
        for j in 0..h2 {
            d2[j] *= 1.0 - trace.a2[j] * trace.a2[j];
        }
        // layer 2
        let w2 = self.part(2);
        let mut d1 = vec![0.0; h1];
        for (k, &dk) in d2.iter().enumerate() {
            if dk == 0.0 {
                continue;
            }
            grad[o[3] + k] += dk;
            let row = o[2] + k * h1;
            for j in 0..h1 {
                grad[row + j] += dk * trace.a1[j];
                d1[j] += dk * w2[k * h1 + j];
            }
        }
        // layer 1
        for (k, d) in d1.iter().enumerate() {
            let dk = d * (1.0 - trace.a1[k] * trace.a1[k]);
            if dk == 0.0 {
                continue;
            }
            grad[o[1] + k] += dk;
            let row = o[0] + k * h;
            for j in 0..h {
                grad[row + j] += dk * trace.input[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// A value head plus its optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Qve {
    pub head: ValueHead,
    pub optimizer: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Qve {
    pub fn new(head: ValueHead, optimizer: Optimizer) -> Self {
        let n = head.params.len();
        Self {
            head,
            optimizer,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn value(&self, f: &QveFeatures) -> QuestionValue {
        self.head.forward(&f.h, f.p_s, f.p_e).expect("features built for this head")
    }

    pub fn trace(&self, f: &QveFeatures) -> HeadTrace {
        self.head.trace(&f.h, f.p_s, f.p_e).expect("features built for this head")
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.head.params.len()]
    }

    /// One descent step on a loss gradient.
    pub fn step(&mut self, grad: &[f64], lr: f64) {
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.head.params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const E: f64 = 1e-8;
                self.steps += 1;
                let c1 = 1.0 - B1.powi(self.steps as i32);
                let c2 = 1.0 - B2.powi(self.steps as i32);
                for i in 0..grad.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    self.head.params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + E);
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec(self).map_err(|e| Error::parse("qve checkpoint", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse("qve checkpoint", e))
    }
}

/// Which span the frozen reader's `(p_s, p_e)` describe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanProbs {
    /// The example's labeled answer span.
    #[default]
    Labeled,
    /// The reader's own best span, ignoring the label.
    Argmax,
}

/// Head inputs for one example: `h` from the encoder, `(p_s, p_e)` from the
/// frozen reader on the example's labeled span.
#[derive(Debug, Clone, PartialEq)]
pub struct QveFeatures {
    pub h: Vec<f64>,
    pub p_s: f64,
    pub p_e: f64,
}

pub fn featurize_one(encoder: &dyn Encoder, reader: &dyn QaReader, ex: ExampleRef<'_>) -> QveFeatures {
    featurize_one_with(encoder, reader, ex, SpanProbs::Labeled)
}

pub fn featurize_one_with(encoder: &dyn Encoder, reader: &dyn QaReader, ex: ExampleRef<'_>, span: SpanProbs) -> QveFeatures {
    let (p_s, p_e) = match span {
        SpanProbs::Labeled => reader.span_probs(ex.context, &ex.example.question, &ex.example.answer),
        SpanProbs::Argmax => {
            let p = reader.predict(ex.context, &ex.example.question);
            (p.p_start, p.p_end)
        }
    };
    QveFeatures {
        h: encoder.encode(ex),
        p_s,
        p_e,
    }
}

/// Features for every example of a split, in split order.
pub fn featurize(encoder: &dyn Encoder, reader: &dyn QaReader, split: &CorpusSplit) -> Vec<QveFeatures> {
    featurize_with(encoder, reader, split, SpanProbs::Labeled)
}

pub fn featurize_with(encoder: &dyn Encoder, reader: &dyn QaReader, split: &CorpusSplit, span: SpanProbs) -> Vec<QveFeatures> {
    split.views().map(|v| featurize_one_with(encoder, reader, v, span)).collect()
}

/// Per-split feature memo keyed by example id.
#[derive(Debug, Default, Clone)]
pub struct FeatureCache {
    map: HashMap<String, QveFeatures>,
}

impl FeatureCache {
    pub fn get_or_insert(&mut self, encoder: &dyn Encoder, reader: &dyn QaReader, ex: ExampleRef<'_>) -> &QveFeatures {
        self.map
            .entry(ex.example.example_id.clone())
            .or_insert_with(|| featurize_one(encoder, reader, ex))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// `max(0, m + v_s - v_h)` on probabilities.
pub fn ranking_pair_loss(v_s: f64, v_h: f64, margin: f64) -> f64 {
    (margin + v_s - v_h).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub example_id: String,
    pub raw: f64,
    pub prob: f64,
}

/// One score per example, in split order.
pub fn score_corpus(qve: &Qve, encoder: &dyn Encoder, split: &CorpusSplit, reader: &dyn QaReader) -> Vec<ScoredExample> {
    split
        .views()
        .map(|v| {
            let value = qve.value(&featurize_one(encoder, reader, v));
            ScoredExample {
                example_id: v.example.example_id.clone(),
                raw: value.raw,
                prob: value.prob,
            }
        })
        .collect()
}

/// Score precomputed features, pairing them with the split's ids.
pub fn score_features(qve: &Qve, split: &CorpusSplit, features: &[QveFeatures]) -> Vec<ScoredExample> {
    split
        .examples()
        .iter()
        .zip(features)
        .map(|(ex, f)| {
            let value = qve.value(f);
            ScoredExample {
                example_id: ex.example_id.clone(),
                raw: value.raw,
                prob: value.prob,
            }
        })
        .collect()
}

pub fn write_scores(path: &Path, scores: &[ScoredExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scores {
        let line = serde_json::to_string(s).map_err(|e| Error::parse("score", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse("score", e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 3e-5,
            seed: 0,
        }
    }
}

/// Minimise binary cross-entropy with label 1 for `positives` and 0 for
/// `negatives`, over precomputed features. One call is one training phase.
pub fn train_binary_classifier(qve: &mut Qve, positives: &[QveFeatures], negatives: &[QveFeatures], cfg: &SupervisedConfig) -> Result<()> {
    if positives.is_empty() {
        return Err(Error::EmptySplit("classifier positives".into()));
    }
    if negatives.is_empty() {
        return Err(Error::EmptySplit("classifier negatives".into()));
    }
    let mut items: Vec<(&QveFeatures, f64)> = positives.iter().map(|f| (f, 1.0)).chain(negatives.iter().map(|f| (f, 0.0))).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        items.shuffle(&mut seed::rng(seed::derive_index(seed::derive(cfg.seed, "binary"), epoch as u64)));
        for chunk in items.chunks(bs) {
            let mut grad = qve.zero_grad();
            for (f, y) in chunk {
                let t = qve.trace(f);
                // d BCE / d raw for a logistic output
                let d_raw = (logistic(t.value.raw) - y) / chunk.len() as f64;
                qve.head.backward(&t, d_raw, &mut grad);
            }
            qve.step(&grad, cfg.lr);
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of the head on labeled features.
pub fn binary_loss(qve: &Qve, positives: &[QveFeatures], negatives: &[QveFeatures]) -> f64 {
    let n = positives.len() + negatives.len();
    if n == 0 {
        return 0.0;
    }
    let pos: f64 = positives.iter().map(|f| -qve.value(f).prob.ln()).sum();
    let neg: f64 = negatives.iter().map(|f| -(1.0 - qve.value(f).prob).ln()).sum();
    (pos + neg) / n as f64
}

/// Pair each synthetic example with an annotated one on the same context
/// when possible, otherwise with a random annotated example. Returns index
/// pairs `(synthetic, annotated)`.
pub fn ranking_pairs(synthetic: &CorpusSplit, annotated: &CorpusSplit, seed: u64) -> Result<Vec<(usize, usize)>> {
    if synthetic.is_empty() || annotated.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let mut by_context: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, ex) in annotated.examples().iter().enumerate() {
        by_context.entry(ex.context_id.as_str()).or_default().push(i);
    }
    let mut rng = seed::rng_for(seed, "ranking_pairs");
    Ok(synthetic
        .examples()
        .iter()
        .enumerate()
        .map(|(s, ex)| {
            let a = match by_context.get(ex.context_id.as_str()) {
                Some(c) => c[rng.random_range(0..c.len())],
                None => rng.random_range(0..annotated.len()),
            };
            (s, a)
        })
        .collect())
}

/// Minimise the hinge `max(0, m + v_s - v_h)` over `(synthetic, annotated)`
/// feature pairs.
pub fn train_ranking(qve: &mut Qve, pairs: &[(&QveFeatures, &QveFeatures)], margin: f64, cfg: &SupervisedConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    if margin <= 0.0 {
        return Err(Error::InvalidArgument(format!("margin {margin} must be positive")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_index(seed::derive(cfg.seed, "ranking"), epoch as u64)));
        for chunk in order.chunks(bs) {
            let mut grad = qve.zero_grad();
            for &i in chunk {
                let (s, h) = pairs[i];
                let ts = qve.trace(s);
                let th = qve.trace(h);
                if ranking_pair_loss(ts.value.prob, th.value.prob, margin) > 0.0 {
                    let scale = 1.0 / chunk.len() as f64;
                    qve.head.backward(&ts, scale * ts.value.dprob_draw(), &mut grad);
                    qve.head.backward(&th, -scale * th.value.dprob_draw(), &mut grad);
                }
            }
            qve.step(&grad, cfg.lr);
        }
    }
    Ok(())
}
