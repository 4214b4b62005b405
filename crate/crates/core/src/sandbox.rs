//! Planted-noise environment and exact oracles.
//!
//! A template grammar writes short profile passages: person biographies for
//! the source domain and company profiles for the target domain, each
//! sentence expressing one relation with one answer span. Human questions are
//! paraphrase templates. Synthetic questions come from the toy generator and
//! carry a hidden quality label:
//!
//! * `clean`: generated for the true span;
//! * `mismatched`: generated for another span of the passage, paired with this
//!   answer;
//! * `trivial`: an opener followed by a verbatim context window that contains
//!   the answer itself.
//!
//! The oracles enumerate every selection of a small Bernoulli policy to give
//! the exact policy gradient that the REINFORCE estimator must match.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_squad_json, AnswerSpan, Context, CorpusSplit, QaExample, SplitKind};
use crate::error::{Error, Result};
use crate::learners::toy::{capitalize, sample_index, TemplateGenerator, WH_PHRASES};
use crate::learners::QgGenerator;
use crate::qve::QuestionValue;
use crate::reinforce::{raw_coefficients, sample_selection};
use crate::seed;
use crate::text::{self, question_words, sentence_bounds, span_to_tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Clean,
    Mismatched,
    Trivial,
}

impl Quality {
    pub fn is_clean(self) -> bool {
        self == Quality::Clean
    }
}

/// A synthetic example with its hidden label. `latent_features` are
/// `[overlap of question words with the answer sentence, answer appears in
/// question]`, for evaluators only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedExample {
    pub example: QaExample,
    pub quality: Quality,
    pub latent_features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Slot {
    Person,
    City,
    Year,
    Number,
    Company,
    School,
    Product,
    Instrument,
}

const PEOPLE: &[&str] = &[
    "Anna", "Boris", "Chen", "Dara", "Emil", "Farah", "Gustav", "Hana", "Ivo", "Jonas", "Kira", "Lars", "Mira", "Nadia", "Omar", "Petra",
    "Quinn", "Rosa", "Stefan", "Tamar", "Ugo", "Vera", "Wendel", "Xenia", "Yusuf", "Zora", "Amir", "Bettina", "Caspar", "Delia", "Edgar",
    "Fiona", "Greta", "Hugo", "Ines", "Jakob", "Katya", "Leon", "Marta", "Nils",
];
const CITIES: &[&str] = &[
    "Aldport", "Brenmoor", "Castwell", "Dunhollow", "Eastmere", "Fairhaven", "Glenrock", "Harwick", "Ironvale", "Juniper", "Kestrel",
    "Lowbridge", "Marwood", "Northam", "Oakridge", "Pembury", "Queensford", "Ravenholm", "Stonegate", "Thornbury", "Upfield", "Valewick",
    "Westbrook", "Yarrow",
];
const COMPANIES: &[&str] = &[
    "Acmetric", "Brightloom", "Cobaltix", "Dynaform", "Everkeel", "Fluxgate", "Gridwell", "Helionet", "Innovex", "Joltwave", "Kinetica",
    "Lumenary", "Metaforge", "Novaline", "Orbitek", "Pinewire", "Quantora", "Redshift", "Solvane", "Tandemic", "Ultrabyte", "Vantagio",
    "Wirecrest", "Zenolith",
];
const SCHOOLS: &[&str] = &["Ashford", "Bellhaven", "Corvin", "Dunmore", "Elmsworth", "Falkirk", "Granton", "Holloway", "Islay", "Kelso"];
const PRODUCTS: &[&str] = &[
    "Aerocell", "Blinkpad", "Cruxmeter", "Driftcam", "Echobox", "Fablink", "Glowdisk", "Hexadrive", "Inkjetto", "Jetpress", "Koolvane",
    "Loopcore",
];
const INSTRUMENTS: &[&str] = &["violin", "cello", "flute", "piano", "trumpet", "oboe", "harp", "clarinet", "guitar", "viola"];

struct Relation {
    slot: Slot,
    /// `{S}` is the passage subject, `{A}` the answer.
    sentences: &'static [&'static str],
    questions: &'static [&'static str],
}

const SOURCE_RELATIONS: &[Relation] = &[
    Relation {
        slot: Slot::Year,
        sentences: &["{S} was born in {A} .", "{S} came into the world in {A} ."],
        questions: &["When was {S} born ?", "What is the birth year of {S} ?"],
    },
    Relation {
        slot: Slot::City,
        sentences: &["{S} grew up in {A} .", "{S} spent a happy childhood in {A} ."],
        questions: &["Where did {S} grow up ?", "What was the hometown of {S} ?"],
    },
    Relation {
        slot: Slot::Person,
        sentences: &["{S} married {A} .", "{A} became the wife of {S} ."],
        questions: &["Who did {S} marry ?", "Who was the spouse of {S} ?"],
    },
    Relation {
        slot: Slot::Number,
        sentences: &["{S} had {A} children .", "{S} raised {A} children ."],
        questions: &["How many children did {S} have ?", "How many kids did {S} bring up ?"],
    },
    Relation {
        slot: Slot::School,
        sentences: &["{S} studied at {A} college .", "{S} attended {A} college ."],
        questions: &["Which college did {S} attend ?", "Where was {S} educated ?"],
    },
    Relation {
        slot: Slot::Instrument,
        sentences: &["{S} played the {A} .", "As a child {S} learned the {A} ."],
        questions: &["What instrument did {S} play ?", "Which instrument did {S} master ?"],
    },
    Relation {
        slot: Slot::Person,
        sentences: &["{S} trained under {A} .", "{A} taught {S} for many years ."],
        questions: &["Who trained {S} ?", "Who was the mentor of {S} ?"],
    },
    Relation {
        slot: Slot::Year,
        sentences: &["{S} died in {A} .", "{S} passed away in {A} ."],
        questions: &["When did {S} die ?", "What year marked the death of {S} ?"],
    },
    Relation {
        slot: Slot::Number,
        sentences: &["{S} wrote {A} books .", "{S} published {A} books ."],
        questions: &["How many books did {S} write ?", "How many titles did {S} author ?"],
    },
];

const TARGET_RELATIONS: &[Relation] = &[
    Relation {
        slot: Slot::Person,
        sentences: &["{S} was founded by {A} .", "{A} started {S} with a small loan ."],
        questions: &["Who founded {S} ?", "Who set up {S} ?"],
    },
    Relation {
        slot: Slot::Year,
        sentences: &["{S} opened its first office in {A} .", "The first office of {S} opened in {A} ."],
        questions: &["When did {S} open its first office ?", "When did {S} start out ?"],
    },
    Relation {
        slot: Slot::City,
        sentences: &["{S} is headquartered in {A} .", "The main office of {S} sits in {A} ."],
        questions: &["Where is {S} headquartered ?", "Where is {S} based ?"],
    },
    Relation {
        slot: Slot::Number,
        sentences: &["{S} employs {A} engineers .", "About {A} engineers work for {S} ."],
        questions: &["How many engineers does {S} employ ?", "How big is the technical staff of {S} ?"],
    },
    Relation {
        slot: Slot::Person,
        sentences: &["{S} is now run by {A} .", "Today {A} runs {S} as chief executive ."],
        questions: &["Who runs {S} ?", "Who is the boss of {S} ?"],
    },
    Relation {
        slot: Slot::Product,
        sentences: &["{S} is best known for the {A} .", "The {A} made {S} famous ."],
        questions: &["What is {S} best known for ?", "Which gadget is {S} celebrated for ?"],
    },
    Relation {
        slot: Slot::Company,
        sentences: &["{S} was bought by {A} .", "{A} acquired {S} after a long battle ."],
        questions: &["Who bought {S} ?", "Which firm took over {S} ?"],
    },
    Relation {
        slot: Slot::Company,
        sentences: &["{S} competes with {A} .", "The main rival of {S} is {A} ."],
        questions: &["Which company competes with {S} ?", "Who is the biggest competitor of {S} ?"],
    },
    Relation {
        slot: Slot::Year,
        sentences: &["{S} listed its shares in {A} .", "Shares of {S} first traded in {A} ."],
        questions: &["When did {S} list its shares ?", "When did {S} go public ?"],
    },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Target-domain training passages (annotation pool and synthetic contexts).
    pub n_contexts: usize,
    pub n_source_contexts: usize,
    pub n_eval_contexts: usize,
    /// `(p_mismatch, p_trivial)`
    pub noise: (f64, f64),
    pub seed: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            n_contexts: 150,
            n_source_contexts: 300,
            n_eval_contexts: 100,
            noise: (0.3, 0.2),
            seed: 7,
        }
    }
}

/// Generated corpora plus the hidden labels of the synthetic split.
#[derive(Debug, Clone)]
pub struct Sandbox {
    pub source: CorpusSplit,
    /// Planted questions on the source passages, with the same noise rates;
    /// negatives for the source phase of the binary classifier.
    pub source_synthetic: CorpusSplit,
    /// Human-annotated questions on the target training passages.
    pub target_train: CorpusSplit,
    /// Planted synthetic questions on the same passages.
    pub target_synthetic: CorpusSplit,
    pub target_eval: CorpusSplit,
    /// One entry per synthetic example, in split order.
    pub planted: Vec<PlantedExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelLine {
    example_id: String,
    quality: Quality,
    latent_features: Vec<f64>,
}

impl Sandbox {
    pub fn labels(&self) -> HashMap<String, Quality> {
        self.planted.iter().map(|p| (p.example.example_id.clone(), p.quality)).collect()
    }

    /// `source.json`, `source_synthetic.json`, `target_train.json`, `target_synthetic.json`,
    /// `target_eval.json` (SQuAD layout) and a `labels.jsonl` sidecar.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_squad_json(&self.source, &dir.join("source.json"))?;
        write_squad_json(&self.source_synthetic, &dir.join("source_synthetic.json"))?;
        write_squad_json(&self.target_train, &dir.join("target_train.json"))?;
        write_squad_json(&self.target_synthetic, &dir.join("target_synthetic.json"))?;
        write_squad_json(&self.target_eval, &dir.join("target_eval.json"))?;
        let path = dir.join("labels.jsonl");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for p in &self.planted {
            let line = LabelLine {
                example_id: p.example.example_id.clone(),
                quality: p.quality,
                latent_features: p.latent_features.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).map_err(|e| Error::parse("label", e))?).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

pub fn read_labels(path: &Path) -> Result<HashMap<String, Quality>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: LabelLine = serde_json::from_str(l).map_err(|e| Error::parse("label", e))?;
            Ok((line.example_id, line.quality))
        })
        .collect()
}

struct Passage {
    context: Context,
    /// `(answer, human question)` per sentence.
    facts: Vec<(AnswerSpan, String)>,
}

struct Pools<'r> {
    rng: &'r mut seed::Rng,
}

impl Pools<'_> {
    fn pick_distinct(&mut self, slot: Slot, used: &mut Vec<String>) -> String {
        loop {
            let v = match slot {
                Slot::Person => PEOPLE.choose(self.rng).expect("non-empty").to_string(),
                Slot::City => CITIES.choose(self.rng).expect("non-empty").to_string(),
                Slot::Company => COMPANIES.choose(self.rng).expect("non-empty").to_string(),
                Slot::School => SCHOOLS.choose(self.rng).expect("non-empty").to_string(),
                Slot::Product => PRODUCTS.choose(self.rng).expect("non-empty").to_string(),
                Slot::Instrument => INSTRUMENTS.choose(self.rng).expect("non-empty").to_string(),
                Slot::Year => self.rng.random_range(1700..2020).to_string(),
                Slot::Number => self.rng.random_range(2..400).to_string(),
            };
            if !used.contains(&v) {
                used.push(v.clone());
                return v;
            }
        }
    }
}

fn make_passage(domain: Domain, id: String, rng: &mut seed::Rng) -> Passage {
    let relations = match domain {
        Domain::Source => SOURCE_RELATIONS,
        Domain::Target => TARGET_RELATIONS,
    };
    let subject_slot = match domain {
        Domain::Source => Slot::Person,
        Domain::Target => Slot::Company,
    };
    let k = rng.random_range(4..=6);
    let mut chosen: Vec<&Relation> = relations.choose_multiple(rng, k).collect();
    chosen.shuffle(rng);
    let mut used = Vec::new();
    let mut pools = Pools { rng };
    let subject = pools.pick_distinct(subject_slot, &mut used);
    let mut text = String::new();
    let mut facts = Vec::new();
    for rel in chosen {
        let answer = pools.pick_distinct(rel.slot, &mut used);
        let template = *rel.sentences.choose(pools.rng).expect("non-empty");
        let question = rel.questions.choose(pools.rng).expect("non-empty").replace("{S}", &subject);
        if !text.is_empty() {
            text.push(' ');
        }
        let (before, after) = template.split_once("{A}").expect("template has an answer slot");
        text.push_str(&before.replace("{S}", &subject));
        let start = text.chars().count();
        text.push_str(&answer);
        text.push_str(&after.replace("{S}", &subject));
        facts.push((AnswerSpan::new(answer, start), question));
    }
    Passage {
        context: Context::new(id, text),
        facts,
    }
}

fn annotated_split(kind: SplitKind, passages: &[Passage]) -> Result<CorpusSplit> {
    let contexts = passages.iter().map(|p| p.context.clone()).collect();
    let examples = passages
        .iter()
        .flat_map(|p| {
            p.facts
                .iter()
                .enumerate()
                .map(move |(j, (a, q))| QaExample::annotated(format!("{}-q{j}", p.context.id), p.context.id.clone(), q.clone(), a.clone()))
        })
        .collect();
    CorpusSplit::new(kind, contexts, examples)
}

/// `[overlap of question words with the answer sentence, answer in question]`.
pub fn latent_features(context: &Context, question: &str, answer: &AnswerSpan) -> Vec<f64> {
    let tokens = text::tokenize(&context.text);
    let qwords = question_words(question);
    let overlap = match span_to_tokens(&tokens, answer.char_start, answer.char_end) {
        Some((first, _)) if !qwords.is_empty() => {
            let (s, e) = sentence_bounds(&tokens, first);
            let sent: Vec<&str> = tokens[s..e].iter().map(|t| t.lower.as_str()).collect();
            qwords.iter().filter(|w| sent.contains(&w.as_str())).count() as f64 / qwords.len() as f64
        }
        _ => 0.0,
    };
    let a = crate::metrics::normalize_answer(&answer.text);
    let q = crate::metrics::normalize_answer(question);
    let contains = !a.is_empty() && format!(" {q} ").contains(&format!(" {a} "));
    vec![overlap, f64::from(u8::from(contains))]
}

/// Tokens copied on each side of the answer for a trivial question.
const TRIVIAL_WINDOW: usize = 0;

/// One planted synthetic question per fact of every passage, in passage order.
fn plant(passages: &[Passage], generator: &TemplateGenerator, noise: (f64, f64), rng: &mut seed::Rng) -> Result<Vec<PlantedExample>> {
    let (p_mis, p_triv) = noise;
    let mut planted = Vec::new();
    for p in passages {
        let tokens = text::tokenize(&p.context.text);
        for (j, (answer, _)) in p.facts.iter().enumerate() {
            let u: f64 = rng.random();
            let quality = if u < p_mis {
                Quality::Mismatched
            } else if u < p_mis + p_triv {
                Quality::Trivial
            } else {
                Quality::Clean
            };
            let (question, loglik) = match quality {
                Quality::Clean => {
                    let g = generator.generate(&p.context, answer)?;
                    (g.question, g.gen_loglik)
                }
                Quality::Mismatched => {
                    let others: Vec<usize> = (0..p.facts.len()).filter(|&o| o != j).collect();
                    let other = &p.facts[*others.choose(rng).expect("passages have several facts")].0;
                    let g = generator.generate(&p.context, other)?;
                    (g.question, g.gen_loglik)
                }
                Quality::Trivial => {
                    let (first, last) = span_to_tokens(&tokens, answer.char_start, answer.char_end).expect("answers cover tokens");
                    let (s, e) = sentence_bounds(&tokens, first);
                    let lo = first.saturating_sub(TRIVIAL_WINDOW).max(s);
                    let hi = (last + 1 + TRIVIAL_WINDOW).min(e.max(last + 1));
                    let row = &generator.wh_table[&tokens[first].shape];
                    let wh = sample_index(rng, row);
                    let mut words = vec![capitalize(WH_PHRASES[wh])];
                    words.extend(tokens[lo..hi].iter().map(|t| t.text.clone()));
                    let loglik = row[wh].ln() + (hi - lo) as f64 * generator.p_copy.ln() + generator.p_stop.ln();
                    words.push("?".into());
                    (words.join(" "), loglik)
                }
            };
            let example = QaExample::synthetic(format!("{}-s{j}", p.context.id), p.context.id.clone(), question, answer.clone(), loglik);
            let latent = latent_features(&p.context, &example.question, answer);
            planted.push(PlantedExample {
                example,
                quality,
                latent_features: latent,
            });
        }
    }
    Ok(planted)
}

/// Build the sandbox corpora. Deterministic in `cfg`.
pub fn generate_sandbox(cfg: &SandboxConfig) -> Result<Sandbox> {
    let (p_mis, p_triv) = cfg.noise;
    if p_mis < 0.0 || p_triv < 0.0 || p_mis + p_triv >= 1.0 {
        return Err(Error::InvalidArgument(format!("noise rates {:?} must be non-negative with sum below 1", cfg.noise)));
    }
    let mut rng = seed::rng_for(cfg.seed, "sandbox_grammar");
    let source: Vec<Passage> = (0..cfg.n_source_contexts).map(|i| make_passage(Domain::Source, format!("src{i}"), &mut rng)).collect();
    let train: Vec<Passage> = (0..cfg.n_contexts).map(|i| make_passage(Domain::Target, format!("tgt{i}"), &mut rng)).collect();
    let eval: Vec<Passage> = (0..cfg.n_eval_contexts).map(|i| make_passage(Domain::Target, format!("evl{i}"), &mut rng)).collect();

    let generator = TemplateGenerator::new(seed::derive(cfg.seed, "sandbox_qg"));
    let mut label_rng = seed::rng_for(cfg.seed, "sandbox_labels");
    let mut planted = plant(&train, &generator, cfg.noise, &mut label_rng)?;
    // Synthetic examples are presented in shuffled order so corpus position
    // carries no information about the passage.
    planted.shuffle(&mut label_rng);
    let mut source_rng = seed::rng_for(cfg.seed, "sandbox_source_labels");
    let source_planted = plant(&source, &generator, cfg.noise, &mut source_rng)?;
    let source_synthetic = CorpusSplit::new(
        SplitKind::SourceTrain,
        source.iter().map(|p| p.context.clone()).collect(),
        source_planted.into_iter().map(|p| p.example).collect(),
    )?;
    let target_synthetic = CorpusSplit::new(
        SplitKind::TargetSynthetic,
        train.iter().map(|p| p.context.clone()).collect(),
        planted.iter().map(|p| p.example.clone()).collect(),
    )?;
    Ok(Sandbox {
        source: annotated_split(SplitKind::SourceTrain, &source)?,
        source_synthetic,
        target_train: annotated_split(SplitKind::TargetAnnotated, &train)?,
        target_synthetic,
        target_eval: annotated_split(SplitKind::Eval, &eval)?,
        planted,
    })
}

/// Rank AUC of clean (positive) against mismatched and trivial (negative);
/// tied scores count one half.
pub fn auc_clean_vs_noisy(scores: &[(String, f64)], labels: &HashMap<String, Quality>) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (id, s) in scores {
        match labels.get(id) {
            Some(q) if q.is_clean() => pos.push(*s),
            Some(_) => neg.push(*s),
            None => return Err(Error::InvalidArgument(format!("no label for {id}"))),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    // Mann-Whitney U through midranks of the pooled scores.
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Largest batch the enumeration oracles accept.
pub const MAX_ORACLE_BATCH: usize = 12;

/// A Bernoulli policy over `B` items with `v_l = logistic(w . x_l)`, and a
/// reward for every selection (indexed by bitmask, bit `l` = item `l`).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySetup {
    pub params: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub reward_table: Vec<f64>,
}

impl PolicySetup {
    pub fn batch(&self) -> usize {
        self.features.len()
    }

    pub fn values(&self) -> Vec<QuestionValue> {
        self.features
            .iter()
            .map(|x| QuestionValue::from_raw(x.iter().zip(&self.params).map(|(a, b)| a * b).sum()))
            .collect()
    }

    fn check(&self) -> Result<()> {
        let b = self.batch();
        if b > MAX_ORACLE_BATCH {
            return Err(Error::BatchTooLarge(b));
        }
        if self.reward_table.len() != 1 << b {
            return Err(Error::LengthMismatch {
                left: self.reward_table.len(),
                right: 1 << b,
            });
        }
        if let Some(x) = self.features.iter().find(|x| x.len() != self.params.len()) {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Exact and estimated gradients of the policy loss `-E[r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGradient {
    /// `-sum_S pi(S) r(S) grad log pi(S)`.
    pub exact: Vec<f64>,
    /// `-grad sum_S pi(S) r(S)` by the product rule, without logarithms.
    pub direct: Vec<f64>,
    /// Mean of the single-sample estimator; empty when not sampled.
    pub estimate_mean: Vec<f64>,
    pub n_samples: usize,
}

fn selection_of(mask: usize, b: usize) -> Vec<u8> {
    (0..b).map(|l| ((mask >> l) & 1) as u8).collect()
}

/// Enumerate all `2^B` selections.
pub fn exact_policy_gradient(setup: &PolicySetup) -> Result<OracleGradient> {
    setup.check()?;
    let b = setup.batch();
    let d = setup.params.len();
    let v: Vec<f64> = setup.values().iter().map(|q| q.prob).collect();
    let mut exact = vec![0.0; d];
    let mut direct = vec![0.0; d];
    for mask in 0..1usize << b {
        let s = selection_of(mask, b);
        let r = setup.reward_table[mask];
        let factors: Vec<f64> = (0..b).map(|l| if s[l] == 1 { v[l] } else { 1.0 - v[l] }).collect();
        let pi: f64 = factors.iter().product();
        for k in 0..d {
            // score-function path: grad log pi = sum_l (s_l - v_l) x_lk
            let score: f64 = (0..b).map(|l| (f64::from(s[l]) - v[l]) * setup.features[l][k]).sum();
            exact[k] -= pi * r * score;
            // product rule: d factor_l = +-v_l (1 - v_l) x_lk
            let dpi: f64 = (0..b)
                .map(|l| {
                    let sign = if s[l] == 1 { 1.0 } else { -1.0 };
                    let d_factor = sign * v[l] * (1.0 - v[l]) * setup.features[l][k];
                    let others: f64 = (0..b).filter(|&m| m != l).map(|m| factors[m]).product();
                    d_factor * others
                })
                .sum();
            direct[k] -= dpi * r;
        }
    }
    Ok(OracleGradient {
        exact,
        direct,
        estimate_mean: Vec::new(),
        n_samples: 0,
    })
}

/// Average the single-sample estimator `-r(S) grad log pi(S)` over
/// `n_samples` draws of `S`, alongside the exact gradient.
pub fn estimate_policy_gradient(setup: &PolicySetup, n_samples: usize, rng: &mut impl Rng) -> Result<OracleGradient> {
    let mut out = exact_policy_gradient(setup)?;
    let values = setup.values();
    let probs: Vec<f64> = values.iter().map(|q| q.prob).collect();
    let d = setup.params.len();
    let mut sum = vec![0.0; d];
    for _ in 0..n_samples {
        let s = sample_selection(&probs, rng);
        let mask = s.iter().enumerate().fold(0usize, |m, (l, &bit)| m | (usize::from(bit) << l));
        let coef = raw_coefficients(&values, &s, setup.reward_table[mask]);
        for (x, c) in setup.features.iter().zip(&coef) {
            for k in 0..d {
                sum[k] += c * x[k];
            }
        }
    }
    out.estimate_mean = sum.into_iter().map(|g| g / n_samples.max(1) as f64).collect();
    out.n_samples = n_samples;
    Ok(out)
}
