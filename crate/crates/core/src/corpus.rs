//! Extractive-QA corpora: contexts, answer spans, annotated and synthetic
//! question-answer examples, plus SQuAD-JSON / MRQA-JSONL ingestion.
//!
//! Spans are stored as character (Unicode scalar) offsets into the context
//! text, which is what SQuAD's `answer_start` counts. Every loaded span is
//! checked against its context; records that do not line up are rejected.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub text: String,
}

impl Context {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    /// Characters `[start, end)` of the text, or `None` when out of range.
    pub fn slice_chars(&self, start: usize, end: usize) -> Option<&str> {
        char_slice(&self.text, start, end)
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Slice `text` by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut byte_start = None;
    let mut byte_end = None;
    for (ci, (bi, _)) in text.char_indices().enumerate() {
        if ci == start {
            byte_start = Some(bi);
        }
        if ci == end {
            byte_end = Some(bi);
            break;
        }
    }
    let n_chars = text.chars().count();
    if start == n_chars {
        byte_start = Some(text.len());
    }
    if end == n_chars {
        byte_end = Some(text.len());
    }
    Some(&text[byte_start?..byte_end?])
}

/// An answer span, `[char_start, char_end)` in characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

impl AnswerSpan {
    pub fn new(text: impl Into<String>, char_start: usize) -> Self {
        let text = text.into();
        let char_end = char_start + text.chars().count();
        Self {
            text,
            char_start,
            char_end,
        }
    }

    /// Locate the first occurrence of `text` in `context`.
    pub fn find(context: &str, text: &str) -> Option<Self> {
        let byte = context.find(text)?;
        let char_start = context[..byte].chars().count();
        Some(Self::new(text, char_start))
    }

    /// Check the alignment invariant against a context.
    pub fn check(&self, context: &Context) -> std::result::Result<(), String> {
        if self.char_start >= self.char_end {
            return Err(format!(
                "empty or inverted span [{}, {})",
                self.char_start, self.char_end
            ));
        }
        match context.slice_chars(self.char_start, self.char_end) {
            None => Err(format!(
                "span [{}, {}) exceeds context length {}",
                self.char_start,
                self.char_end,
                context.char_len()
            )),
            Some(slice) if slice != self.text => Err(format!(
                "answer text {:?} does not match context slice {:?}",
                self.text, slice
            )),
            Some(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Annotated,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub example_id: String,
    pub context_id: String,
    pub question: String,
    pub answer: AnswerSpan,
    /// Additional gold answers (multi-answer datasets); scoring takes the max.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_answers: Vec<AnswerSpan>,
    pub origin: Origin,
    /// Sum of generator token log-probabilities, synthetic examples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_loglik: Option<f64>,
}

impl QaExample {
    pub fn annotated(
        example_id: impl Into<String>,
        context_id: impl Into<String>,
        question: impl Into<String>,
        answer: AnswerSpan,
    ) -> Self {
        Self {
            example_id: example_id.into(),
            context_id: context_id.into(),
            question: question.into(),
            answer,
            extra_answers: Vec::new(),
            origin: Origin::Annotated,
            gen_loglik: None,
        }
    }

    pub fn synthetic(
        example_id: impl Into<String>,
        context_id: impl Into<String>,
        question: impl Into<String>,
        answer: AnswerSpan,
        gen_loglik: f64,
    ) -> Self {
        Self {
            origin: Origin::Synthetic,
            gen_loglik: Some(gen_loglik),
            ..Self::annotated(example_id, context_id, question, answer)
        }
    }

    /// Every gold answer text, primary first.
    pub fn gold_texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.answer.text.as_str()).chain(self.extra_answers.iter().map(|a| a.text.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    SourceTrain,
    TargetAnnotated,
    TargetContexts,
    TargetSynthetic,
    Eval,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::SourceTrain => "source_train",
            SplitKind::TargetAnnotated => "target_annotated",
            SplitKind::TargetContexts => "target_contexts",
            SplitKind::TargetSynthetic => "target_synthetic",
            SplitKind::Eval => "eval",
        }
    }
}

/// A borrowed (example, context) pair; what learners consume.
#[derive(Debug, Clone, Copy)]
pub struct ExampleRef<'a> {
    pub example: &'a QaExample,
    pub context: &'a Context,
}

impl<'a> ExampleRef<'a> {
    pub fn id(&self) -> &'a str {
        &self.example.example_id
    }
}

/// An immutable, validated collection of contexts and the examples over them.
///
/// Ordering is load order and is the canonical tie-breaking order downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    kind: SplitKind,
    contexts: Vec<Context>,
    examples: Vec<QaExample>,
    context_index: HashMap<String, usize>,
}

impl CorpusSplit {
    /// Build a split, enforcing every corpus invariant.
    pub fn new(kind: SplitKind, contexts: Vec<Context>, examples: Vec<QaExample>) -> Result<Self> {
        let mut context_index = HashMap::with_capacity(contexts.len());
        for (i, c) in contexts.iter().enumerate() {
            if c.text.is_empty() {
                return Err(Error::MalformedRecord {
                    id: c.id.clone(),
                    reason: "empty context text".into(),
                });
            }
            if context_index.insert(c.id.clone(), i).is_some() {
                return Err(Error::MalformedRecord {
                    id: c.id.clone(),
                    reason: "duplicate context id".into(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            validate_example(ex, &contexts, &context_index)?;
            if !seen.insert(ex.example_id.as_str()) {
                return Err(Error::MalformedRecord {
                    id: ex.example_id.clone(),
                    reason: "duplicate example id".into(),
                });
            }
        }
        Ok(Self {
            kind,
            contexts,
            examples,
            context_index,
        })
    }

    pub fn empty(kind: SplitKind) -> Self {
        Self {
            kind,
            contexts: Vec::new(),
            examples: Vec::new(),
            context_index: HashMap::new(),
        }
    }

    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: SplitKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn examples(&self) -> &[QaExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn context(&self, id: &str) -> Option<&Context> {
        self.context_index.get(id).map(|&i| &self.contexts[i])
    }

    pub fn view(&self, i: usize) -> ExampleRef<'_> {
        let example = &self.examples[i];
        ExampleRef {
            example,
            context: &self.contexts[self.context_index[&example.context_id]],
        }
    }

    pub fn views(&self) -> impl ExactSizeIterator<Item = ExampleRef<'_>> + '_ {
        (0..self.examples.len()).map(move |i| self.view(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.example_id.as_str())
    }

    /// A new split holding the examples at `indices` (in the given order) and
    /// only the contexts they reference, in original context order.
    pub fn select(&self, kind: SplitKind, indices: &[usize]) -> Self {
        let examples: Vec<QaExample> = indices.iter().map(|&i| self.examples[i].clone()).collect();
        let used: HashSet<&str> = examples.iter().map(|e| e.context_id.as_str()).collect();
        let contexts: Vec<Context> = self
            .contexts
            .iter()
            .filter(|c| used.contains(c.id.as_str()))
            .cloned()
            .collect();
        Self::from_valid_parts(kind, contexts, examples)
    }

    /// Keep examples whose id is in `ids`, preserving corpus order.
    pub fn retain_ids(&self, kind: SplitKind, ids: &HashSet<&str>) -> Self {
        let idx: Vec<usize> = (0..self.examples.len())
            .filter(|&i| ids.contains(self.examples[i].example_id.as_str()))
            .collect();
        self.select(kind, &idx)
    }

    /// Concatenate two splits. Contexts shared by id must agree.
    pub fn merge(&self, other: &CorpusSplit, kind: SplitKind) -> Result<Self> {
        let mut contexts = self.contexts.clone();
        for c in &other.contexts {
            match self.context(&c.id) {
                Some(existing) if existing != c => {
                    return Err(Error::MalformedRecord {
                        id: c.id.clone(),
                        reason: "context id reused with different text".into(),
                    })
                }
                Some(_) => {}
                None => contexts.push(c.clone()),
            }
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Self::new(kind, contexts, examples)
    }

    /// Contexts only (no examples), e.g. the unlabeled target pool.
    pub fn contexts_only(&self, kind: SplitKind) -> Self {
        Self::from_valid_parts(kind, self.contexts.clone(), Vec::new())
    }

    fn from_valid_parts(kind: SplitKind, contexts: Vec<Context>, examples: Vec<QaExample>) -> Self {
        let context_index = contexts.iter().enumerate().map(|(i, c)| (c.id.clone(), i)).collect();
        Self {
            kind,
            contexts,
            examples,
            context_index,
        }
    }
}

fn validate_example(ex: &QaExample, contexts: &[Context], index: &HashMap<String, usize>) -> Result<()> {
    let bad = |reason: String| Error::MalformedRecord {
        id: ex.example_id.clone(),
        reason,
    };
    let ctx = index
        .get(&ex.context_id)
        .map(|&i| &contexts[i])
        .ok_or_else(|| bad(format!("unknown context {}", ex.context_id)))?;
    if ex.question.trim().is_empty() {
        return Err(bad("empty question".into()));
    }
    ex.answer.check(ctx).map_err(bad)?;
    for extra in &ex.extra_answers {
        extra.check(ctx).map_err(bad)?;
    }
    match (ex.origin, ex.gen_loglik) {
        (Origin::Synthetic, None) => Err(bad("synthetic example without gen_loglik".into())),
        (Origin::Annotated, Some(_)) => Err(bad("annotated example carries gen_loglik".into())),
        (Origin::Synthetic, Some(ll)) if ll.is_nan() || ll > 0.0 => Err(bad(format!("gen_loglik {ll} is not <= 0"))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    SquadJson,
    MrqaJsonl,
}

impl CorpusFormat {
    /// Guess from the file name: `.jsonl` / `.jsonl.gz` are MRQA, `.json` SQuAD.
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let name = name.strip_suffix(".gz").unwrap_or(name);
        if name.ends_with(".jsonl") {
            Ok(CorpusFormat::MrqaJsonl)
        } else if name.ends_with(".json") {
            Ok(CorpusFormat::SquadJson)
        } else {
            Err(Error::UnsupportedFormat(path.display().to_string()))
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squad_json" | "squad" => Ok(CorpusFormat::SquadJson),
            "mrqa_jsonl" | "mrqa" => Ok(CorpusFormat::MrqaJsonl),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

/// Load a corpus file. `kind` labels the resulting split.
pub fn load_corpus(path: &Path, format: CorpusFormat, kind: SplitKind) -> Result<CorpusSplit> {
    let reader = open_maybe_gz(path)?;
    match format {
        CorpusFormat::SquadJson => {
            let value: Value = serde_json::from_reader(reader).map_err(|e| Error::parse(path.display().to_string(), e))?;
            parse_squad(&value, kind)
        }
        CorpusFormat::MrqaJsonl => parse_mrqa(reader, kind, &path.display().to_string()),
    }
}

// SQuAD v1.1 wire types. `context_id`, `origin` and `gen_loglik` are our
// extensions and are optional on input.
#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default)]
    version: Option<String>,
    data: Vec<SquadArticle>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    #[serde(default)]
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_id: Option<String>,
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gen_loglik: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

fn parse_squad(value: &Value, kind: SplitKind) -> Result<CorpusSplit> {
    let file: SquadFile = serde_json::from_value(value.clone()).map_err(|e| Error::parse("SQuAD JSON", e))?;
    let mut contexts = Vec::new();
    let mut examples = Vec::new();
    for (ai, article) in file.data.into_iter().enumerate() {
        for (pi, para) in article.paragraphs.into_iter().enumerate() {
            let cid = para.context_id.unwrap_or_else(|| format!("a{ai}p{pi}"));
            for qa in para.qas {
                let mut answers = qa.answers.into_iter().map(|a| AnswerSpan::new(a.text, a.answer_start));
                let answer = answers.next().ok_or_else(|| Error::MalformedRecord {
                    id: qa.id.clone(),
                    reason: "no answers".into(),
                })?;
                let origin = qa.origin.unwrap_or(if qa.gen_loglik.is_some() {
                    Origin::Synthetic
                } else {
                    Origin::Annotated
                });
                examples.push(QaExample {
                    example_id: qa.id,
                    context_id: cid.clone(),
                    question: qa.question,
                    answer,
                    extra_answers: answers.collect(),
                    origin,
                    gen_loglik: qa.gen_loglik,
                });
            }
            contexts.push(Context::new(cid, para.context));
        }
    }
    CorpusSplit::new(kind, contexts, examples)
}

#[derive(Debug, Deserialize)]
struct MrqaRecord {
    #[serde(default)]
    id: Option<String>,
    context: String,
    qas: Vec<MrqaQa>,
}

#[derive(Debug, Deserialize)]
struct MrqaQa {
    #[serde(alias = "id")]
    qid: String,
    question: String,
    #[serde(default)]
    detected_answers: Vec<MrqaDetected>,
    #[serde(default)]
    gen_loglik: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct MrqaDetected {
    text: String,
    /// Inclusive `[start, end]` character spans, MRQA convention.
    char_spans: Vec<[usize; 2]>,
}

fn parse_mrqa(reader: Box<dyn BufRead>, kind: SplitKind, what: &str) -> Result<CorpusSplit> {
    let mut contexts = Vec::new();
    let mut examples = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(what, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{what}:{}", line_no + 1), e))?;
        if value.get("header").is_some() {
            continue;
        }
        let rec: MrqaRecord = serde_json::from_value(value).map_err(|e| Error::parse(format!("{what}:{}", line_no + 1), e))?;
        let cid = rec.id.unwrap_or_else(|| format!("l{}", line_no + 1));
        for qa in rec.qas {
            let mut spans = Vec::new();
            for det in &qa.detected_answers {
                for &[s, e] in &det.char_spans {
                    let text_chars = det.text.chars().count();
                    // The detected text is the canonical answer; the span
                    // must slice it out exactly.
                    if e + 1 < s || e + 1 - s != text_chars {
                        return Err(Error::MalformedRecord {
                            id: qa.qid.clone(),
                            reason: format!("span [{s}, {e}] does not cover answer {:?}", det.text),
                        });
                    }
                    spans.push(AnswerSpan {
                        text: det.text.clone(),
                        char_start: s,
                        char_end: e + 1,
                    });
                }
            }
            let mut spans = spans.into_iter();
            let answer = spans.next().ok_or_else(|| Error::MalformedRecord {
                id: qa.qid.clone(),
                reason: "no detected answers".into(),
            })?;
            examples.push(QaExample {
                example_id: qa.qid,
                context_id: cid.clone(),
                question: qa.question,
                answer,
                extra_answers: spans.collect(),
                origin: if qa.gen_loglik.is_some() {
                    Origin::Synthetic
                } else {
                    Origin::Annotated
                },
                gen_loglik: qa.gen_loglik,
            });
        }
        contexts.push(Context::new(cid, rec.context));
    }
    CorpusSplit::new(kind, contexts, examples)
}

/// Serialize to canonical SQuAD-style JSON: one article, one paragraph per
/// context in context order, qas grouped under their context in example order.
/// Synthetic examples carry `origin` and `gen_loglik`.
pub fn to_squad_value(split: &CorpusSplit) -> Value {
    let mut by_ctx: HashMap<&str, Vec<&QaExample>> = HashMap::new();
    for ex in &split.examples {
        by_ctx.entry(ex.context_id.as_str()).or_default().push(ex);
    }
    let paragraphs = split
        .contexts
        .iter()
        .map(|c| SquadParagraph {
            context_id: Some(c.id.clone()),
            context: c.text.clone(),
            qas: by_ctx
                .get(c.id.as_str())
                .map(|v| v.as_slice())
                .unwrap_or_default()
                .iter()
                .map(|ex| SquadQa {
                    id: ex.example_id.clone(),
                    question: ex.question.clone(),
                    answers: ex
                        .gold_spans()
                        .map(|a| SquadAnswer {
                            text: a.text.clone(),
                            answer_start: a.char_start,
                        })
                        .collect(),
                    origin: (ex.origin == Origin::Synthetic).then_some(Origin::Synthetic),
                    gen_loglik: ex.gen_loglik,
                })
                .collect(),
        })
        .collect();
    let file = SquadFile {
        version: Some("1.1".into()),
        data: vec![SquadArticle {
            title: split.kind.as_str().to_string(),
            paragraphs,
        }],
    };
    serde_json::to_value(file).expect("SQuAD structs serialize")
}

impl QaExample {
    fn gold_spans(&self) -> impl Iterator<Item = &AnswerSpan> {
        std::iter::once(&self.answer).chain(self.extra_answers.iter())
    }
}

pub fn write_squad_json(split: &CorpusSplit, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &to_squad_value(split)).map_err(|e| Error::parse(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse a split from an in-memory SQuAD value (used by the round-trip law).
pub fn from_squad_value(value: &Value, kind: SplitKind) -> Result<CorpusSplit> {
    parse_squad(value, kind)
}

/// Seeded uniform sample of `n` examples without replacement, kept in
/// corpus order. `n == len` returns the split unchanged.
pub fn subsample_annotations(split: &CorpusSplit, n: usize, seed: u64) -> Result<CorpusSplit> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if n > split.len() {
        return Err(Error::NTooLarge { n, size: split.len() });
    }
    if n == split.len() {
        return Ok(split.clone());
    }
    let mut rng = seed::rng_for(seed, "subsample_annotations");
    let mut picked = index::sample(&mut rng, split.len(), n).into_vec();
    picked.sort_unstable();
    Ok(split.select(split.kind, &picked))
}

/// Context-level partition into `(train, held_out)` with `round(frac * contexts)`
/// contexts on the train side. Both sides keep corpus order.
pub fn split_source_for_classifier(source: &CorpusSplit, frac: f64, seed: u64) -> Result<(CorpusSplit, CorpusSplit)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidArgument(format!("frac {frac} must lie in (0, 1)")));
    }
    let n_ctx = source.contexts.len();
    let n_train = ((n_ctx as f64) * frac).round() as usize;
    let mut order: Vec<usize> = (0..n_ctx).collect();
    order.shuffle(&mut seed::rng_for(seed, "split_source_for_classifier"));
    let train_ctx: HashSet<&str> = order[..n_train].iter().map(|&i| source.contexts[i].id.as_str()).collect();

    let part = |keep: bool| {
        let contexts: Vec<Context> = source
            .contexts
            .iter()
            .filter(|c| train_ctx.contains(c.id.as_str()) == keep)
            .cloned()
            .collect();
        let examples: Vec<QaExample> = source
            .examples
            .iter()
            .filter(|e| train_ctx.contains(e.context_id.as_str()) == keep)
            .cloned()
            .collect();
        CorpusSplit::from_valid_parts(source.kind, contexts, examples)
    };
    Ok((part(true), part(false)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> Context {
        Context::new("c1", "Paris is the capital of France.")
    }

    fn split_of(n_ctx: usize, per_ctx: usize) -> CorpusSplit {
        let mut contexts = Vec::new();
        let mut examples = Vec::new();
        for c in 0..n_ctx {
            let text = format!("Item {c} lives in Town{c} today.");
            let answer = AnswerSpan::find(&text, &format!("Town{c}")).unwrap();
            for q in 0..per_ctx {
                examples.push(QaExample::annotated(
                    format!("q{c}_{q}"),
                    format!("c{c}"),
                    format!("Where does item {c} live?"),
                    answer.clone(),
                ));
            }
            contexts.push(Context::new(format!("c{c}"), text));
        }
        CorpusSplit::new(SplitKind::SourceTrain, contexts, examples).unwrap()
    }

    #[test]
    fn char_slicing_handles_multibyte() {
        let text = "Zoë met Ångström.";
        assert_eq!(char_slice(text, 8, 16), Some("Ångström"));
        assert_eq!(char_slice(text, 0, 3), Some("Zoë"));
        assert_eq!(char_slice(text, 17, 17), Some(""));
        assert_eq!(char_slice(text, 10, 99), None);
    }

    #[test]
    fn span_check_catches_mismatch() {
        let c = ctx();
        assert!(AnswerSpan::new("Paris", 0).check(&c).is_ok());
        assert!(AnswerSpan::new("Rome", 0).check(&c).is_err());
        assert!(AnswerSpan::new("France.", 24).check(&c).is_ok());
        assert!(AnswerSpan::new("France..", 24).check(&c).is_err());
    }

    #[test]
    fn loads_single_paragraph_squad() {
        let json = r#"{"version":"1.1","data":[{"title":"t","paragraphs":[{"context":"Paris is the capital of France.",
            "qas":[{"id":"q1","question":"What is the capital of France?","answers":[{"text":"Paris","answer_start":0}]}]}]}]}"#;
        let mut f = tempfile::NamedTempFile::with_suffix(".json").unwrap();
        f.write_all(json.as_bytes()).unwrap();
        let split = load_corpus(f.path(), CorpusFormat::SquadJson, SplitKind::SourceTrain).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.examples()[0].answer.text, "Paris");
        assert_eq!(split.examples()[0].origin, Origin::Annotated);
    }

    #[test]
    fn rejects_misaligned_answer_with_record_id() {
        let json = r#"{"data":[{"paragraphs":[{"context":"Paris is the capital of France.",
            "qas":[{"id":"bad-7","question":"Capital?","answers":[{"text":"Paris","answer_start":3}]}]}]}]}"#;
        let value: Value = serde_json::from_str(json).unwrap();
        match from_squad_value(&value, SplitKind::SourceTrain) {
            Err(Error::MalformedRecord { id, .. }) => assert_eq!(id, "bad-7"),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_fields_round_trip() {
        let c = ctx();
        let ex = QaExample::synthetic("s1", "c1", "what is paris ?", AnswerSpan::new("Paris", 0), -3.5);
        let split = CorpusSplit::new(SplitKind::TargetSynthetic, vec![c], vec![ex]).unwrap();
        let v = to_squad_value(&split);
        let qa = &v["data"][0]["paragraphs"][0]["qas"][0];
        assert_eq!(qa["origin"], "synthetic");
        assert_eq!(qa["gen_loglik"], -3.5);
        let back = from_squad_value(&v, SplitKind::TargetSynthetic).unwrap();
        assert_eq!(back, split);
    }

    #[test]
    fn synthetic_invariants_enforced() {
        let mut ex = QaExample::synthetic("s1", "c1", "q?", AnswerSpan::new("Paris", 0), 0.5);
        assert!(CorpusSplit::new(SplitKind::TargetSynthetic, vec![ctx()], vec![ex.clone()]).is_err());
        ex.gen_loglik = None;
        assert!(CorpusSplit::new(SplitKind::TargetSynthetic, vec![ctx()], vec![ex]).is_err());
        let blank = QaExample::annotated("a", "c1", "  ", AnswerSpan::new("Paris", 0));
        assert!(CorpusSplit::new(SplitKind::Eval, vec![ctx()], vec![blank]).is_err());
    }

    #[test]
    fn mrqa_jsonl_with_header_and_gzip() {
        let lines = [
            r#"{"header":{"dataset":"NewsQA","split":"train"}}"#,
            r#"{"context":"Paris is the capital of France.","qas":[{"qid":"m1","question":"Capital of France?","answers":["Paris"],"detected_answers":[{"text":"Paris","char_spans":[[0,4]],"token_spans":[[0,0]]}]}]}"#,
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("news.jsonl.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&path).unwrap(), flate2::Compression::default());
        for l in lines {
            writeln!(enc, "{l}").unwrap();
        }
        enc.finish().unwrap();
        let fmt = CorpusFormat::from_path(&path).unwrap();
        assert_eq!(fmt, CorpusFormat::MrqaJsonl);
        let split = load_corpus(&path, fmt, SplitKind::TargetAnnotated).unwrap();
        assert_eq!(split.len(), 1);
        assert_eq!(split.examples()[0].answer, AnswerSpan::new("Paris", 0));
    }

    #[test]
    fn unsupported_extension() {
        assert!(matches!(
            CorpusFormat::from_path(Path::new("data.csv")),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn subsample_laws() {
        let s = split_of(20, 3);
        assert_eq!(subsample_annotations(&s, 60, 1).unwrap(), s);
        let a = subsample_annotations(&s, 7, 42).unwrap();
        let b = subsample_annotations(&s, 7, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        // corpus order preserved
        let pos: Vec<usize> = a.ids().map(|id| s.ids().position(|x| x == id).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(subsample_annotations(&s, 61, 1), Err(Error::NTooLarge { .. })));
    }

    #[test]
    fn classifier_split_is_a_context_partition() {
        let s = split_of(10, 2);
        let (train, held) = split_source_for_classifier(&s, 0.7, 3).unwrap();
        assert_eq!(train.contexts().len(), 7);
        assert_eq!(held.contexts().len(), 3);
        assert_eq!(train.len() + held.len(), s.len());
        let train_ids: HashSet<&str> = train.contexts().iter().map(|c| c.id.as_str()).collect();
        assert!(held.contexts().iter().all(|c| !train_ids.contains(c.id.as_str())));
        assert!(held.examples().iter().all(|e| !train_ids.contains(e.context_id.as_str())));
        let again = split_source_for_classifier(&s, 0.7, 3).unwrap();
        assert_eq!(again.0, train);
        assert!(split_source_for_classifier(&s, 1.0, 3).is_err());
    }
}
