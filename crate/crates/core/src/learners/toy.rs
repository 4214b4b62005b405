//! Deterministic toy backend.
//!
//! * [`ToyReader`]: a linear span scorer. Each context position gets a bag of
//!   hashed features (question word x neighbouring context word, question word
//!   x token shape, lexical-match indicators); independent softmax heads score
//!   start and end positions and are trained by span cross-entropy.
//! * [`TemplateGenerator`]: a template sampler whose log-likelihood is the
//!   exact log-product of the template choices it made.
//! * [`HashedEncoder`]: a fixed hashed feature map standing in for a
//!   pretrained sentence encoder in the value estimator.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, GeneratedQuestion, LearnerCheckpoint, Prediction, QaReader, QgGenerator};
use crate::corpus::{AnswerSpan, Context, CorpusSplit, ExampleRef};
use crate::error::{Error, Result};
use crate::qve::{Encoder, QveInputEncoding};
use crate::seed::{self, fnv1a, mix64};
use crate::text::{self, question_words, sentence_bounds, span_to_tokens, Shape, Token};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Hashed feature space of the reader.
    pub vocab_hash_dim: usize,
    /// Longest answer span the reader will predict, in tokens.
    pub max_answer_tokens: usize,
    /// Half-width of the uniform weight initialisation.
    pub init_scale: f64,
    /// Output width `H` of the hashed encoder.
    pub encoder_dim: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_hash_dim: 1 << 14,
            max_answer_tokens: 4,
            init_scale: 1e-3,
            encoder_dim: 64,
        }
    }
}

/// Build a reader and generator that are fully determined by `seed`.
pub fn toy_backend_build(cfg: &ToyConfig, seed: u64) -> (Box<dyn QaReader>, Box<dyn QgGenerator>) {
    let backend = ToyBackend::new(*cfg).expect("valid toy config");
    (backend.reader(seed), backend.generator(seed))
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    cfg: ToyConfig,
    grid_cache: Arc<Mutex<HashMap<u64, Arc<Grid>>>>,
}

impl ToyBackend {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.vocab_hash_dim < 64 {
            return Err(Error::InvalidArgument(format!(
                "vocab_hash_dim {} must be at least 64",
                cfg.vocab_hash_dim
            )));
        }
        if cfg.encoder_dim < HashedEncoder::DENSE + 2 {
            return Err(Error::InvalidArgument(format!("encoder_dim {} too small", cfg.encoder_dim)));
        }
        Ok(Self {
            cfg,
            grid_cache: Arc::default(),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn toy_reader(&self, seed: u64) -> ToyReader {
        ToyReader::new(&self.cfg, seed, Arc::clone(&self.grid_cache))
    }
}

impl Backend for ToyBackend {
    fn reader(&self, seed: u64) -> Box<dyn QaReader> {
        Box::new(self.toy_reader(seed))
    }

    fn generator(&self, seed: u64) -> Box<dyn QgGenerator> {
        Box::new(TemplateGenerator::new(seed))
    }

    fn encoder(&self) -> Box<dyn Encoder> {
        Box::new(HashedEncoder::new(self.cfg.encoder_dim))
    }
}

// ---------------------------------------------------------------------------
// Reader

const START_OFFSETS: [isize; 4] = [-3, -2, -1, 1];
const END_OFFSETS: [isize; 4] = [-1, 1, 2, 3];
const START_MATCH: [isize; 5] = [-3, -2, -1, 0, 1];
const END_MATCH: [isize; 5] = [-1, 0, 1, 2, 3];
const CACHE_LIMIT: usize = 200_000;

/// Per-(context, question) feature lists for every token position.
#[derive(Debug)]
struct Grid {
    tokens: Vec<Token>,
    start: Vec<Vec<u32>>,
    end: Vec<Vec<u32>>,
}

fn grid_key(context: &str, question: &str) -> u64 {
    mix64(fnv1a(context.as_bytes()) ^ fnv1a(question.as_bytes()).rotate_left(17))
}

fn build_grid(context: &str, question: &str, dim: usize) -> Grid {
    let tokens = text::tokenize(context);
    let qwords = question_words(question);
    let qhash: Vec<u64> = qwords.iter().map(|w| fnv1a(w.as_bytes())).collect();
    let thash: Vec<u64> = tokens.iter().map(|t| fnv1a(t.lower.as_bytes())).collect();
    let n = tokens.len() as isize;
    let pad_l = fnv1a(b"<s>");
    let pad_r = fnv1a(b"</s>");
    let tok_at = |k: isize| -> u64 {
        if k < 0 {
            pad_l
        } else if k >= n {
            pad_r
        } else {
            thash[k as usize]
        }
    };
    let in_question = |k: isize| k >= 0 && k < n && qwords.contains(&tokens[k as usize].lower);
    let bucket = |h: u64| (mix64(h) % dim as u64) as u32;

    let features = |head: u64, i: isize, offsets: &[isize], matches: &[isize]| -> Vec<u32> {
        let shape = fnv1a(tokens[i as usize].shape.as_str().as_bytes());
        let mut f = Vec::with_capacity(qhash.len() * (offsets.len() + 1) + matches.len() + 1);
        f.push(bucket(head ^ shape.rotate_left(7)));
        for &qh in &qhash {
            let q = qh.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ head;
            f.push(bucket(q ^ shape.rotate_left(11) ^ 0x51));
            for &k in offsets {
                f.push(bucket(q ^ tok_at(i + k).rotate_left(23) ^ (k as u64).wrapping_mul(0x1f3d_5b79)));
            }
        }
        for &k in matches {
            if in_question(i + k) {
                f.push(bucket(head ^ 0xabcd_0000 ^ (k as u64).wrapping_mul(0x2545_f491)));
            }
        }
        f
    };

    let start_head = fnv1a(b"start");
    let end_head = fnv1a(b"end");
    let start = (0..n).map(|i| features(start_head, i, &START_OFFSETS, &START_MATCH)).collect();
    let end = (0..n).map(|i| features(end_head, i, &END_OFFSETS, &END_MATCH)).collect();
    Grid { tokens, start, end }
}

fn softmax_scores(w: &[f64], rows: &[Vec<u32>]) -> Vec<f64> {
    let scores: Vec<f64> = rows.iter().map(|r| r.iter().map(|&f| w[f as usize]).sum()).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Linear start/end span scorer over hashed features.
pub struct ToyReader {
    dim: usize,
    max_answer_tokens: usize,
    w_start: Vec<f64>,
    w_end: Vec<f64>,
    cache: Arc<Mutex<HashMap<u64, Arc<Grid>>>>,
}

impl std::fmt::Debug for ToyReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyReader")
            .field("dim", &self.dim)
            .field("max_answer_tokens", &self.max_answer_tokens)
            .finish_non_exhaustive()
    }
}

const READER_MAGIC: &[u8; 4] = b"TOYR";

impl ToyReader {
    fn new(cfg: &ToyConfig, seed: u64, cache: Arc<Mutex<HashMap<u64, Arc<Grid>>>>) -> Self {
        let mut rng = seed::rng_for(seed, "toy_reader_init");
        let mut init = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * cfg.init_scale)
                .collect()
        };
        let w_start = init(cfg.vocab_hash_dim);
        let w_end = init(cfg.vocab_hash_dim);
        Self {
            dim: cfg.vocab_hash_dim,
            max_answer_tokens: cfg.max_answer_tokens.max(1),
            w_start,
            w_end,
            cache,
        }
    }

    fn grid(&self, context: &str, question: &str) -> Arc<Grid> {
        let key = grid_key(context, question);
        let mut cache = self.cache.lock().expect("grid cache poisoned");
        if let Some(g) = cache.get(&key) {
            return Arc::clone(g);
        }
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        let g = Arc::new(build_grid(context, question, self.dim));
        cache.insert(key, Arc::clone(&g));
        g
    }

    fn gold_positions(grid: &Grid, span: &AnswerSpan) -> Option<(usize, usize)> {
        span_to_tokens(&grid.tokens, span.char_start, span.char_end)
    }

    fn example_loss(&self, ex: &ExampleRef<'_>) -> f64 {
        let grid = self.grid(&ex.context.text, &ex.example.question);
        match Self::gold_positions(&grid, &ex.example.answer) {
            None => 0.0,
            Some((s, e)) => {
                let ps = softmax_scores(&self.w_start, &grid.start);
                let pe = softmax_scores(&self.w_end, &grid.end);
                -(ps[s].max(f64::MIN_POSITIVE).ln() + pe[e].max(f64::MIN_POSITIVE).ln())
            }
        }
    }
}

impl QaReader for ToyReader {
    fn predict(&self, context: &Context, question: &str) -> Prediction {
        let grid = self.grid(&context.text, question);
        let empty = Prediction {
            answer: String::new(),
            char_start: 0,
            char_end: 0,
            p_start: 0.0,
            p_end: 0.0,
        };
        if grid.tokens.is_empty() {
            return empty;
        }
        let ps = softmax_scores(&self.w_start, &grid.start);
        let pe = softmax_scores(&self.w_end, &grid.end);
        let n = grid.tokens.len();
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if grid.tokens[i].shape == Shape::Punct {
                continue;
            }
            for j in i..n.min(i + self.max_answer_tokens) {
                if grid.tokens[j].shape == Shape::Punct {
                    continue;
                }
                let score = ps[i] * pe[j];
                if best.is_none_or(|(b, _, _)| score > b) {
                    best = Some((score, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else {
            return empty;
        };
        let (cs, ce) = (grid.tokens[i].start, grid.tokens[j].end);
        Prediction {
            answer: context.slice_chars(cs, ce).unwrap_or_default().to_string(),
            char_start: cs,
            char_end: ce,
            p_start: ps[i],
            p_end: pe[j],
        }
    }

    fn span_probs(&self, context: &Context, question: &str, span: &AnswerSpan) -> (f64, f64) {
        let grid = self.grid(&context.text, question);
        match Self::gold_positions(&grid, span) {
            None => (0.0, 0.0),
            Some((s, e)) => {
                let ps = softmax_scores(&self.w_start, &grid.start);
                let pe = softmax_scores(&self.w_end, &grid.end);
                (ps[s], pe[e])
            }
        }
    }

    fn loss(&self, batch: &[ExampleRef<'_>]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        batch.iter().map(|ex| self.example_loss(ex)).sum::<f64>() / batch.len() as f64
    }

    fn train_step(&mut self, batch: &[ExampleRef<'_>], weights: &[f64], lr: f64) -> Result<()> {
        if batch.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: batch.len(),
                right: weights.len(),
            });
        }
        if batch.is_empty() {
            return Ok(());
        }
        // All gradients are taken at the current parameters, then applied.
        let scale = lr / batch.len() as f64;
        let mut d_start: Vec<(u32, f64)> = Vec::new();
        let mut d_end: Vec<(u32, f64)> = Vec::new();
        for (ex, &w) in batch.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let grid = self.grid(&ex.context.text, &ex.example.question);
            let Some((gs, ge)) = Self::gold_positions(&grid, &ex.example.answer) else {
                continue;
            };
            for (probs, gold, rows, out) in [
                (softmax_scores(&self.w_start, &grid.start), gs, &grid.start, &mut d_start),
                (softmax_scores(&self.w_end, &grid.end), ge, &grid.end, &mut d_end),
            ] {
                for (i, row) in rows.iter().enumerate() {
                    let g = probs[i] - f64::from(u8::from(i == gold));
                    if g == 0.0 {
                        continue;
                    }
                    for &f in row {
                        out.push((f, scale * w * g));
                    }
                }
            }
        }
        for (f, d) in d_start {
            self.w_start[f as usize] -= d;
        }
        for (f, d) in d_end {
            self.w_end[f as usize] -= d;
        }
        Ok(())
    }

    fn snapshot(&self, tag: &str) -> LearnerCheckpoint {
        let mut blob = Vec::with_capacity(20 + 16 * self.dim);
        blob.extend_from_slice(READER_MAGIC);
        blob.extend_from_slice(&(self.dim as u64).to_le_bytes());
        blob.extend_from_slice(&(self.max_answer_tokens as u64).to_le_bytes());
        for w in self.w_start.iter().chain(&self.w_end) {
            blob.extend_from_slice(&w.to_le_bytes());
        }
        LearnerCheckpoint::new(tag, blob)
    }

    fn restore(&mut self, checkpoint: &LearnerCheckpoint) -> Result<()> {
        let blob = &checkpoint.blob;
        let expected = 20 + 16 * self.dim;
        if blob.len() != expected || &blob[..4] != READER_MAGIC {
            return Err(Error::DimensionMismatch {
                expected,
                actual: blob.len(),
            });
        }
        let dim = u64::from_le_bytes(blob[4..12].try_into().expect("8 bytes")) as usize;
        if dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dim,
            });
        }
        self.max_answer_tokens = u64::from_le_bytes(blob[12..20].try_into().expect("8 bytes")) as usize;
        let mut vals = blob[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for w in self.w_start.iter_mut().chain(self.w_end.iter_mut()) {
            *w = vals.next().expect("length checked");
        }
        Ok(())
    }

    fn fork(&self) -> Box<dyn QaReader> {
        Box::new(ToyReader {
            dim: self.dim,
            max_answer_tokens: self.max_answer_tokens,
            w_start: self.w_start.clone(),
            w_end: self.w_end.clone(),
            cache: Arc::clone(&self.cache),
        })
    }
}

// ---------------------------------------------------------------------------
// Generator

/// Question openers the generator can emit.
pub const WH_PHRASES: [&str; 8] = ["who", "what", "when", "where", "which", "how many", "what year", "how"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyMode {
    /// Copy the sentence words preceding the answer.
    Prefix,
    /// Copy the sentence words following the answer.
    Suffix,
}

/// Template question generator: `<wh> <copied body> ?`.
///
/// Sampling order: opener given the answer's shape, body mode among the
/// modes with a non-empty body (renormalised), then a fixed-length copy.
/// The returned log-likelihood is `ln P(wh|shape) + ln P(mode) +
/// body_len * ln(p_copy) + ln(p_stop)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateGenerator {
    seed: u64,
    pub wh_table: BTreeMap<Shape, Vec<f64>>,
    pub p_prefix: f64,
    pub p_copy: f64,
    pub p_stop: f64,
    pub max_body: usize,
    /// Pseudo-count weight of the current table when finetuning.
    pub prior_strength: f64,
}

impl TemplateGenerator {
    pub fn new(seed: u64) -> Self {
        let row = |pairs: &[(&str, f64)]| -> Vec<f64> {
            WH_PHRASES
                .iter()
                .map(|w| pairs.iter().find(|(p, _)| p == w).map_or(0.0, |(_, v)| *v))
                .collect()
        };
        let mut wh_table = BTreeMap::new();
        wh_table.insert(Shape::Digit, row(&[("when", 0.5), ("how many", 0.3), ("what year", 0.2)]));
        wh_table.insert(Shape::Capitalized, row(&[("who", 0.45), ("what", 0.35), ("where", 0.2)]));
        wh_table.insert(Shape::Lower, row(&[("what", 0.7), ("which", 0.3)]));
        wh_table.insert(Shape::Punct, row(&[("what", 1.0)]));
        Self {
            seed,
            wh_table,
            p_prefix: 0.6,
            p_copy: 0.9,
            p_stop: 0.8,
            max_body: 6,
            prior_strength: 20.0,
        }
    }

    /// The body a mode would copy for the answer at tokens `[first, last]`.
    pub fn body<'t>(&self, tokens: &'t [Token], first: usize, last: usize, mode: BodyMode) -> Vec<&'t Token> {
        let (s, e) = sentence_bounds(tokens, first);
        let side: Vec<&Token> = match mode {
            BodyMode::Prefix => tokens[s..first].iter().collect(),
            BodyMode::Suffix => tokens[(last + 1).min(e)..e].iter().collect(),
        };
        let side: Vec<&Token> = side.into_iter().filter(|t| t.shape != Shape::Punct).collect();
        match mode {
            BodyMode::Prefix => side[side.len().saturating_sub(self.max_body)..].to_vec(),
            BodyMode::Suffix => side[..side.len().min(self.max_body)].to_vec(),
        }
    }

    /// Log-likelihood of a concrete template choice.
    pub fn template_loglik(&self, shape: Shape, wh_index: usize, mode_prob: f64, body_len: usize) -> f64 {
        let p_wh = self.wh_table[&shape][wh_index];
        p_wh.ln() + mode_prob.ln() + body_len as f64 * self.p_copy.ln() + self.p_stop.ln()
    }

    fn rng_for(&self, context: &Context, answer: &AnswerSpan) -> seed::Rng {
        let key = format!("{}\u{1f}{}\u{1f}{}", context.id, answer.char_start, answer.text);
        seed::rng(seed::derive(self.seed, &key))
    }
}

/// Draw an index with probability proportional to `probs`.
pub(crate) fn sample_index(rng: &mut seed::Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub(crate) fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl QgGenerator for TemplateGenerator {
    fn generate(&self, context: &Context, answer: &AnswerSpan) -> Result<GeneratedQuestion> {
        let tokens = text::tokenize(&context.text);
        let (first, last) = span_to_tokens(&tokens, answer.char_start, answer.char_end).ok_or_else(|| Error::Learner {
            item: context.id.clone(),
            message: "answer covers no tokens".into(),
        })?;
        let mut rng = self.rng_for(context, answer);
        let shape = tokens[first].shape;
        let wh_index = sample_index(&mut rng, &self.wh_table[&shape]);

        let prefix = self.body(&tokens, first, last, BodyMode::Prefix);
        let suffix = self.body(&tokens, first, last, BodyMode::Suffix);
        let (body, mode_prob) = match (prefix.is_empty(), suffix.is_empty()) {
            (false, false) => {
                if rng.random::<f64>() < self.p_prefix {
                    (prefix, self.p_prefix)
                } else {
                    (suffix, 1.0 - self.p_prefix)
                }
            }
            (false, true) => (prefix, 1.0),
            (true, false) => (suffix, 1.0),
            (true, true) => (Vec::new(), 1.0),
        };

        let mut words = vec![capitalize(WH_PHRASES[wh_index])];
        words.extend(body.iter().map(|t| t.text.clone()));
        words.push("?".into());
        Ok(GeneratedQuestion {
            question: words.join(" "),
            gen_loglik: self.template_loglik(shape, wh_index, mode_prob, body.len()),
        })
    }

    /// Re-estimate the opener table from the corpus questions: each row moves
    /// toward the empirical opener distribution for that answer shape, with
    /// `epochs` scaling the evidence weight.
    fn finetune(&mut self, corpus: &CorpusSplit, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let mut counts: BTreeMap<Shape, Vec<f64>> = BTreeMap::new();
        for v in corpus.views() {
            let tokens = text::tokenize(&v.context.text);
            let Some((first, _)) = span_to_tokens(&tokens, v.example.answer.char_start, v.example.answer.char_end) else {
                continue;
            };
            let q = v.example.question.to_lowercase();
            // Longest matching opener wins ("what year" over "what").
            let hit = WH_PHRASES
                .iter()
                .enumerate()
                .filter(|(_, w)| q.starts_with(*w) && q[w.len()..].starts_with(|c: char| !c.is_alphanumeric()))
                .max_by_key(|(_, w)| w.len());
            if let Some((i, _)) = hit {
                counts.entry(tokens[first].shape).or_insert_with(|| vec![0.0; WH_PHRASES.len()])[i] += 1.0;
            }
        }
        for (shape, c) in counts {
            let total: f64 = c.iter().sum();
            let row = self.wh_table.get_mut(&shape).expect("all shapes present");
            let k = self.prior_strength;
            let e = epochs as f64;
            for (p, ci) in row.iter_mut().zip(&c) {
                *p = (k * *p + e * ci) / (k + e * total);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Encoder

/// Fixed hashed feature map producing `h` for the value head.
///
/// The first [`HashedEncoder::DENSE`] coordinates are interpretable overlap
/// statistics; the rest hold signed hashed features of the
/// `[CLS] q [ANS] a [SEP] c` sequence, scaled to unit norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashedEncoder {
    dim: usize,
    max_tokens: usize,
}

impl HashedEncoder {
    pub const DENSE: usize = 8;
    const WINDOW: usize = 4;

    pub fn new(dim: usize) -> Self {
        Self { dim, max_tokens: 384 }
    }
}

impl Encoder for HashedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, ex: ExampleRef<'_>) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        let input = QveInputEncoding::new(&ex.example.question, &ex.example.answer.text, &ex.context.text, self.max_tokens);
        let ctx_tokens = text::tokenize(&ex.context.text);
        let qwords = question_words(&ex.example.question);
        let content: Vec<&String> = qwords.iter().filter(|w| !WH_PHRASES.contains(&w.as_str())).collect();
        let answer_norm = crate::metrics::normalize_answer(&ex.example.answer.text);
        let q_norm = crate::metrics::normalize_answer(&ex.example.question);

        let span = span_to_tokens(&ctx_tokens, ex.example.answer.char_start, ex.example.answer.char_end);
        let frac = |pred: &dyn Fn(&str) -> bool| -> f64 {
            if content.is_empty() {
                0.0
            } else {
                content.iter().filter(|w| pred(w)).count() as f64 / content.len() as f64
            }
        };
        let ctx_words: Vec<&str> = ctx_tokens.iter().map(|t| t.lower.as_str()).collect();
        let (near, sent): (Vec<&str>, Vec<&str>) = match span {
            Some((a, b)) => {
                let lo = a.saturating_sub(Self::WINDOW);
                let hi = (b + 1 + Self::WINDOW).min(ctx_tokens.len());
                let (ss, se) = sentence_bounds(&ctx_tokens, a);
                (ctx_words[lo..hi].to_vec(), ctx_words[ss..se].to_vec())
            }
            None => (Vec::new(), Vec::new()),
        };
        let first = qwords.first().map(String::as_str).unwrap_or_default();
        let answer_shape = span.map_or(Shape::Punct, |(a, _)| ctx_tokens[a].shape);

        h[0] = frac(&|w| near.contains(&w));
        h[1] = frac(&|w| ctx_words.contains(&w));
        h[2] = f64::from(u8::from(!answer_norm.is_empty() && format!(" {q_norm} ").contains(&format!(" {answer_norm} "))));
        h[3] = f64::from(u8::from(WH_PHRASES.iter().any(|w| w.split(' ').next() == Some(first))));
        h[4] = f64::from(u8::from(ex.example.question.trim_end().ends_with('?')));
        h[5] = (1.0 + qwords.len() as f64).ln() / 3.0;
        h[6] = span.map_or(0.0, |(a, b)| (b + 1 - a) as f64 / 4.0);
        h[7] = frac(&|w| sent.contains(&w));
        // Centre the bounded statistics so none of them acts as a constant bias.
        for i in [0, 1, 2, 3, 4, 7] {
            h[i] = 2.0 * h[i] - 1.0;
        }

        let sparse = &mut h[Self::DENSE..];
        let width = sparse.len() as u64;
        let mut add = |key: u64| {
            let m = mix64(key);
            let sign = if m >> 63 == 0 { 1.0 } else { -1.0 };
            sparse[(m % width) as usize] += sign;
        };
        for (tok, seg) in input.tokens.iter().zip(&input.segments) {
            if *seg != crate::qve::Segment::Context {
                add(fnv1a(tok.as_bytes()) ^ (*seg as u64).wrapping_mul(0x9e37_79b9));
            }
        }
        add(fnv1a(format!("wh:{first}|shape:{}", answer_shape.as_str()).as_bytes()));
        for w in &content {
            for c in &near {
                add(fnv1a(format!("{w}|near|{c}").as_bytes()));
            }
        }
        let norm = sparse.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            sparse.iter_mut().for_each(|x| *x /= norm);
        }
        h
    }
}
