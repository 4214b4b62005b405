//! Backend-agnostic contracts for the QA reader and the question generator,
//! and the operations every backend shares.
//!
//! A real transformer backend plugs in by implementing [`QaReader`],
//! [`QgGenerator`] and [`crate::qve::Encoder`]; the [`toy`] backend ships
//! with the crate so every algorithm runs without pretrained weights.

pub mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{AnswerSpan, Context, CorpusSplit, ExampleRef, QaExample, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalResult};
use crate::qve::Encoder;
use crate::seed;

/// Serialized reader parameters. Equal blobs iff equal parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LearnerCheckpoint {
    pub tag: String,
    pub blob: Vec<u8>,
}

impl LearnerCheckpoint {
    pub fn new(tag: impl Into<String>, blob: Vec<u8>) -> Self {
        Self { tag: tag.into(), blob }
    }

    /// SHA-256 of the blob, hex encoded.
    pub fn address(&self) -> String {
        hex::encode(Sha256::digest(&self.blob))
    }

    /// Write under `dir/<tag>`; returns the path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(&self.tag);
        fs::write(&path, &self.blob).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let tag = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint").to_string();
        Ok(Self { tag, blob })
    }
}

/// A reader's answer to one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer: String,
    pub char_start: usize,
    pub char_end: usize,
    /// Probability of the predicted start position.
    pub p_start: f64,
    /// Probability of the predicted end position.
    pub p_end: f64,
}

/// The extractive QA model `f_theta`.
///
/// Single-writer: callers must not train and predict on one instance
/// concurrently. Distinct instances are independent.
pub trait QaReader: Send {
    fn predict(&self, context: &Context, question: &str) -> Prediction;

    /// Start/end probabilities the reader assigns to a labeled span.
    fn span_probs(&self, context: &Context, question: &str, span: &AnswerSpan) -> (f64, f64);

    /// Mean per-example cross-entropy over the batch.
    fn loss(&self, batch: &[ExampleRef<'_>]) -> f64;

    /// `theta <- theta - lr / B * sum_l w_l * grad L_qa(l)` with `B = batch.len()`.
    /// Zero-weight examples contribute nothing.
    fn train_step(&mut self, batch: &[ExampleRef<'_>], weights: &[f64], lr: f64) -> Result<()>;

    fn snapshot(&self, tag: &str) -> LearnerCheckpoint;

    fn restore(&mut self, checkpoint: &LearnerCheckpoint) -> Result<()>;

    fn fork(&self) -> Box<dyn QaReader>;
}

/// A generated question and the generator's log-likelihood of it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQuestion {
    pub question: String,
    pub gen_loglik: f64,
}

/// The question generator `g_phi`.
pub trait QgGenerator: Send {
    fn generate(&self, context: &Context, answer: &AnswerSpan) -> Result<GeneratedQuestion>;

    fn finetune(&mut self, corpus: &CorpusSplit, epochs: usize) -> Result<()>;
}

/// Factory for the learners an experiment needs.
pub trait Backend: Send + Sync {
    fn reader(&self, seed: u64) -> Box<dyn QaReader>;
    fn generator(&self, seed: u64) -> Box<dyn QgGenerator>;
    fn encoder(&self) -> Box<dyn Encoder>;
}

/// One masked inner step of the RL loop.
pub fn qa_weighted_update(reader: &mut dyn QaReader, batch: &[ExampleRef<'_>], weights: &[f64], lr: f64) -> Result<()> {
    if batch.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: batch.len(),
            right: weights.len(),
        });
    }
    reader.train_step(batch, weights, lr)
}

/// Run the generator over (context, answer) pairs, one synthetic example per
/// pair in input order. Example ids are `syn-<index>`.
pub fn generate_synthetic(gen: &dyn QgGenerator, pairs: &[(Context, AnswerSpan)]) -> Result<CorpusSplit> {
    let mut contexts: Vec<Context> = Vec::new();
    let mut examples = Vec::with_capacity(pairs.len());
    for (i, (ctx, answer)) in pairs.iter().enumerate() {
        let id = format!("syn-{i}");
        answer.check(ctx).map_err(|reason| Error::MalformedRecord { id: id.clone(), reason })?;
        let out = gen.generate(ctx, answer).map_err(|e| Error::Learner {
            item: id.clone(),
            message: e.to_string(),
        })?;
        if !contexts.iter().any(|c| c.id == ctx.id) {
            contexts.push(ctx.clone());
        }
        examples.push(QaExample::synthetic(id, ctx.id.clone(), out.question, answer.clone(), out.gen_loglik));
    }
    CorpusSplit::new(SplitKind::TargetSynthetic, contexts, examples)
}

/// (context, answer) pairs for every example of a split, in corpus order.
pub fn answer_pairs(split: &CorpusSplit) -> Vec<(Context, AnswerSpan)> {
    split.views().map(|v| (v.context.clone(), v.example.answer.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            lr: 3e-5,
        }
    }
}

/// Plain supervised finetuning: shuffled minibatches, unit weights.
pub fn finetune_reader(reader: &mut dyn QaReader, split: &CorpusSplit, cfg: &FinetuneConfig, seed: u64) -> Result<()> {
    if split.is_empty() || cfg.epochs == 0 {
        return Ok(());
    }
    let bs = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..split.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::derive_index(seed, epoch as u64)));
        for chunk in order.chunks(bs) {
            let batch: Vec<ExampleRef<'_>> = chunk.iter().map(|&i| split.view(i)).collect();
            reader.train_step(&batch, &vec![1.0; batch.len()], cfg.lr)?;
        }
    }
    Ok(())
}

/// Predict every example and score against gold.
pub fn evaluate_reader(reader: &dyn QaReader, gold: &CorpusSplit) -> EvalResult {
    let per_example = gold
        .views()
        .map(|v| {
            let pred = reader.predict(v.context, &v.example.question);
            metrics::score_against_golds(&v.example.example_id, &pred.answer, v.example.gold_texts())
        })
        .collect();
    EvalResult::from_scores(per_example)
}

/// [`evaluate_reader`] plus the mean loss over the split.
pub fn evaluate_reader_with_loss(reader: &dyn QaReader, gold: &CorpusSplit) -> EvalResult {
    let views: Vec<ExampleRef<'_>> = gold.views().collect();
    let loss = reader.loss(&views);
    evaluate_reader(reader, gold).with_loss(loss)
}
