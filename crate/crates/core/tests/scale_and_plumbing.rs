//! Paper-scale counts and filter plumbing on constructed corpora.

use std::collections::HashSet;

use qve_core::corpus::{subsample_annotations, AnswerSpan, Context, CorpusSplit, ExampleRef, QaExample, SplitKind};
use qve_core::filters::{lm_filter, roundtrip_filter, select_top_k, top_k_count};
use qve_core::learners::toy::{ToyBackend, ToyConfig};
use qve_core::learners::{answer_pairs, generate_synthetic, Backend, LearnerCheckpoint, Prediction, QaReader};
use qve_core::sandbox::{generate_sandbox, Quality, SandboxConfig};
use qve_core::Result;

const NEWSQA_TRAIN: usize = 74_160;
const NQ_TRAIN: usize = 104_071;

/// `n` annotated examples over contexts of 40 questions each.
fn annotated_corpus(n: usize) -> CorpusSplit {
    let n_ctx = n.div_ceil(40);
    let contexts: Vec<Context> = (0..n_ctx).map(|c| Context::new(format!("c{c}"), format!("Report {c} says Ada founded Orbis in {}.", 1900 + c % 100))).collect();
    let examples = (0..n)
        .map(|i| {
            let c = i % n_ctx;
            let answer = AnswerSpan::find(&contexts[c].text, "Ada").unwrap();
            QaExample::annotated(format!("q{i}"), format!("c{c}"), format!("Who founded Orbis , item {i} ?"), answer)
        })
        .collect();
    CorpusSplit::new(SplitKind::TargetAnnotated, contexts, examples).unwrap()
}

#[test]
fn generation_yields_one_question_per_training_answer() {
    let train = annotated_corpus(NEWSQA_TRAIN);
    let backend = ToyBackend::new(ToyConfig::default()).unwrap();
    let synthetic = generate_synthetic(backend.generator(0).as_ref(), &answer_pairs(&train)).unwrap();
    assert_eq!(synthetic.len(), NEWSQA_TRAIN);
    assert!(synthetic.examples().iter().all(|e| e.gen_loglik.is_some_and(|l| l <= 0.0)));
}

#[test]
fn thousand_annotations_are_about_one_percent() {
    for n in [NEWSQA_TRAIN, NQ_TRAIN] {
        let train = annotated_corpus(n);
        let ann = subsample_annotations(&train, 1000, 0).unwrap();
        assert_eq!(ann.len(), 1000);
        let frac = 1000.0 / n as f64;
        assert!((0.009..=0.015).contains(&frac), "{frac}");
    }
}

#[test]
fn top_k_counts_at_paper_scale() {
    assert_eq!(top_k_count(NEWSQA_TRAIN, 60.0), 44_496);
    // The published NQ count is 62,443; the floor law gives one fewer.
    assert_eq!(top_k_count(NQ_TRAIN, 60.0), 62_442);
    let scores: Vec<(String, f64)> = (0..NQ_TRAIN).map(|i| (format!("s{i}"), -(((i * 7919) % 1000) as f64))).collect();
    assert_eq!(select_top_k(&scores, 60.0).unwrap().kept_count, 62_442);
}

#[test]
fn lm_filter_on_two_items_keeps_the_likelier() {
    let ctx = Context::new("c", "Ada founded Orbis.");
    let a = AnswerSpan::find(&ctx.text, "Ada").unwrap();
    let split = CorpusSplit::new(
        SplitKind::TargetSynthetic,
        vec![ctx],
        vec![QaExample::synthetic("low", "c", "Who ?", a.clone(), -5.0), QaExample::synthetic("high", "c", "Who founded ?", a, -1.0)],
    )
    .unwrap();
    assert_eq!(lm_filter(&split, 50.0).unwrap().kept_ids, vec!["high".to_string()]);
    assert_eq!(lm_filter(&split, 100.0).unwrap().kept_count, 2);
}

/// Answers with the gold span for questions in `correct`, otherwise with
/// `fallback`.
struct ScriptedReader {
    correct: Option<HashSet<String>>,
    gold: std::collections::HashMap<String, String>,
    fallback: String,
}

impl QaReader for ScriptedReader {
    fn predict(&self, _context: &Context, question: &str) -> Prediction {
        let right = self.correct.as_ref().is_none_or(|c| c.contains(question));
        let answer = if right { self.gold[question].clone() } else { self.fallback.clone() };
        Prediction {
            answer,
            char_start: 0,
            char_end: 0,
            p_start: 1.0,
            p_end: 1.0,
        }
    }
    fn span_probs(&self, _: &Context, _: &str, _: &AnswerSpan) -> (f64, f64) {
        (1.0, 1.0)
    }
    fn loss(&self, _: &[ExampleRef<'_>]) -> f64 {
        0.0
    }
    fn train_step(&mut self, _: &[ExampleRef<'_>], _: &[f64], _: f64) -> Result<()> {
        Ok(())
    }
    fn snapshot(&self, tag: &str) -> LearnerCheckpoint {
        LearnerCheckpoint::new(tag, Vec::new())
    }
    fn restore(&mut self, _: &LearnerCheckpoint) -> Result<()> {
        Ok(())
    }
    fn fork(&self) -> Box<dyn QaReader> {
        unimplemented!("not needed by the filter")
    }
}

fn scripted(split: &CorpusSplit, correct: Option<HashSet<String>>, fallback: &str) -> ScriptedReader {
    ScriptedReader {
        correct,
        gold: split.examples().iter().map(|e| (e.question.clone(), e.answer.text.clone())).collect(),
        fallback: fallback.to_string(),
    }
}

#[test]
fn roundtrip_bounds_and_paper_scale_plumbing() {
    let backend = ToyBackend::new(ToyConfig::default()).unwrap();
    let small = generate_synthetic(backend.generator(0).as_ref(), &answer_pairs(&annotated_corpus(200))).unwrap();
    assert_eq!(roundtrip_filter(&scripted(&small, None, ""), &small).kept_count, 200);
    assert_eq!(roundtrip_filter(&scripted(&small, Some(HashSet::new()), ""), &small).kept_count, 0);
    // Wrong but EM-equal after normalisation still counts as correct.
    assert_eq!(roundtrip_filter(&scripted(&small, Some(HashSet::new()), "the Ada."), &small).kept_count, 200);

    // Table-scale plumbing: a reader right on exactly 33,756 questions.
    let train = annotated_corpus(NEWSQA_TRAIN);
    let unique: Vec<(Context, AnswerSpan)> = answer_pairs(&train);
    let syn = CorpusSplit::new(
        SplitKind::TargetSynthetic,
        train.contexts().to_vec(),
        unique.iter().enumerate().map(|(i, (c, a))| QaExample::synthetic(format!("s{i}"), c.id.clone(), format!("Question {i} ?"), a.clone(), -1.0)).collect(),
    )
    .unwrap();
    let right: HashSet<String> = (0..33_756).map(|i| format!("Question {} ?", i * 2)).collect();
    let report = roundtrip_filter(&scripted(&syn, Some(right), "nobody"), &syn);
    assert_eq!((report.kept_count, report.input_count), (33_756, NEWSQA_TRAIN));
}

#[test]
fn sandbox_label_proportions() {
    let sb = generate_sandbox(&SandboxConfig {
        n_contexts: 1000,
        n_source_contexts: 5,
        n_eval_contexts: 5,
        noise: (0.3, 0.2),
        seed: 21,
    })
    .unwrap();
    let n = sb.planted.len() as f64;
    let share = |q: Quality| sb.planted.iter().filter(|p| p.quality == q).count() as f64 / n;
    assert!((share(Quality::Clean) - 0.5).abs() <= 0.05, "{}", share(Quality::Clean));
    assert!((share(Quality::Mismatched) - 0.3).abs() <= 0.05, "{}", share(Quality::Mismatched));
    assert!((share(Quality::Trivial) - 0.2).abs() <= 0.05, "{}", share(Quality::Trivial));
}
