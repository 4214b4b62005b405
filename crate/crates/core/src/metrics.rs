//! SQuAD-style answer scoring (normalized exact match and token F1) and the
//! reward used to train the value estimator.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};
use crate::seed::fnv1a;

/// Lowercase, strip ASCII punctuation, drop the articles "a", "an", "the"
/// as whole words, and collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();

    // Articles are removed where they form a complete word-character run,
    // mirroring a `\b(a|an|the)\b` substitution.
    let mut spaced = String::with_capacity(no_punct.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if matches!(word.as_str(), "a" | "an" | "the") {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in no_punct.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut spaced);
            spaced.push(c);
        }
    }
    flush(&mut word, &mut spaced);

    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// Bag-of-tokens F1 over normalized strings. Both empty scores 1, exactly
/// one empty scores 0.
pub fn f1_score(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p_toks: Vec<&str> = p.split_whitespace().collect();
    let g_toks: Vec<&str> = g.split_whitespace().collect();
    match (p_toks.is_empty(), g_toks.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g_toks {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p_toks {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p_toks.len() as f64;
    let recall = common as f64 / g_toks.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub em: u8,
    pub f1: f64,
}

/// Aggregate EM/F1 as percentages, plus per-example scores in gold order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub em: f64,
    pub f1: f64,
    pub per_example: Vec<ExampleScore>,
    /// Mean QA loss on the gold split, when the caller measured it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_loss: Option<f64>,
    /// Order-independent fingerprint of the gold id set.
    pub gold_fingerprint: u64,
}

impl EvalResult {
    /// Build from per-example scores. Sums are taken over sorted values so
    /// the aggregate does not depend on example order.
    pub fn from_scores(per_example: Vec<ExampleScore>) -> Self {
        let n = per_example.len();
        let (em, f1) = if n == 0 {
            (0.0, 0.0)
        } else {
            let em_hits: usize = per_example.iter().map(|s| usize::from(s.em)).sum();
            let mut f1s: Vec<f64> = per_example.iter().map(|s| s.f1).collect();
            f1s.sort_by(f64::total_cmp);
            let f1_sum: f64 = f1s.iter().sum();
            (100.0 * em_hits as f64 / n as f64, 100.0 * f1_sum / n as f64)
        };
        let gold_fingerprint = fingerprint(per_example.iter().map(|s| s.example_id.as_str()));
        Self {
            em,
            f1,
            per_example,
            mean_loss: None,
            gold_fingerprint,
        }
    }

    pub fn with_loss(mut self, loss: f64) -> Self {
        self.mean_loss = Some(loss);
        self
    }
}

fn fingerprint<'a>(ids: impl Iterator<Item = &'a str>) -> u64 {
    let mut sorted: Vec<&str> = ids.collect();
    sorted.sort_unstable();
    let mut acc = fnv1a(b"gold");
    for id in sorted {
        acc = fnv1a(&[acc.to_le_bytes().as_slice(), id.as_bytes()].concat());
    }
    acc
}

/// Score predictions against every example of `gold`, taking the max over
/// multiple gold answers. Missing predictions score zero.
pub fn evaluate(predictions: &HashMap<String, String>, gold: &CorpusSplit) -> EvalResult {
    let per_example = gold
        .examples()
        .iter()
        .map(|ex| match predictions.get(&ex.example_id) {
            Some(pred) => score_against_golds(&ex.example_id, pred, ex.gold_texts()),
            None => ExampleScore {
                example_id: ex.example_id.clone(),
                em: 0,
                f1: 0.0,
            },
        })
        .collect();
    EvalResult::from_scores(per_example)
}

pub(crate) fn score_against_golds<'a>(id: &str, pred: &str, golds: impl Iterator<Item = &'a str>) -> ExampleScore {
    let (em, f1) = golds.fold((0u8, 0.0f64), |(em, f1), g| (em.max(exact_match(pred, g)), f1.max(f1_score(pred, g))));
    ExampleScore {
        example_id: id.to_string(),
        em,
        f1,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    EmGain,
    F1Gain,
    LossDrop,
}

/// QA gain between two evaluations on the same gold split: EM points by
/// default, F1 points, or the drop in mean loss.
pub fn reward_fn(before: &EvalResult, after: &EvalResult, mode: RewardMode) -> Result<f64> {
    if before.gold_fingerprint != after.gold_fingerprint {
        return Err(Error::SplitMismatch);
    }
    match mode {
        RewardMode::EmGain => Ok(after.em - before.em),
        RewardMode::F1Gain => Ok(after.f1 - before.f1),
        RewardMode::LossDrop => match (before.mean_loss, after.mean_loss) {
            (Some(b), Some(a)) => Ok(b - a),
            _ => Err(Error::InvalidArgument("loss_drop reward needs mean_loss on both results".into())),
        },
    }
}

/// Read a SQuAD-convention predictions file: `{ "example_id": "answer", ... }`.
pub fn load_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}
