//! End-to-end experiments: source pretraining, annotation finetuning,
//! question generation, filtering, staged QA finetuning and evaluation.
//!
//! Every run owns a directory `runs/<id>/` with the subdirectories
//! `config`, `corpora`, `checkpoints`, `qve`, `log` and `report`. The eval
//! split is only ever handed to [`evaluate_stage`]; the record lists every
//! stage that touched it so the separation can be audited after the fact.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_corpus, split_source_for_classifier, subsample_annotations, to_squad_value, write_squad_json, CorpusFormat, CorpusSplit, SplitKind,
};
use crate::error::{Error, Result};
use crate::filters::{lm_filter, roundtrip_filter, select_top_k, FilterMethod, FilterReport};
use crate::learners::toy::{ToyBackend, ToyConfig};
use crate::learners::{answer_pairs, evaluate_reader, finetune_reader, generate_synthetic, Backend, FinetuneConfig, LearnerCheckpoint, QaReader};
use crate::metrics::{EvalResult, RewardMode};
use crate::qve::{
    featurize_with, ranking_pairs, score_features, train_binary_classifier, train_ranking, write_scores, HeadDims, Qve, QveFeatures, ScoredExample, SpanProbs,
    SupervisedConfig, ValueHead, DEFAULT_MARGIN,
};
use crate::reinforce::{train_qve_rl, CheckpointRule, LogDir, RlData, TrainConfig, TrainingLog};
use crate::sandbox::{auc_clean_vs_noisy, generate_sandbox, Sandbox, SandboxConfig};
use crate::seed;

/// One finetuning stage of the QA reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Source,
    TargetSynthetic,
    TargetAnnotated,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::TargetSynthetic => "target_synthetic",
            Stage::TargetAnnotated => "target_annotated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Toy(ToyConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Toy(ToyConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Backend>> {
        match self {
            BackendConfig::Toy(cfg) => Ok(Box::new(ToyBackend::new(*cfg)?)),
        }
    }
}

/// Finetuning settings per reader stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageFinetune {
    pub source: FinetuneConfig,
    pub target_synthetic: FinetuneConfig,
    pub target_annotated: FinetuneConfig,
}

impl StageFinetune {
    pub fn get(&self, stage: Stage) -> &FinetuneConfig {
        match stage {
            Stage::Source => &self.source,
            Stage::TargetSynthetic => &self.target_synthetic,
            Stage::TargetAnnotated => &self.target_annotated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Defaults to `<method>-n<n>-k<k>`; each seed appends `-s<seed>`.
    pub run_id: Option<String>,
    pub runs_dir: PathBuf,
    pub source_path: PathBuf,
    pub target_train_path: PathBuf,
    pub target_eval_path: PathBuf,
    /// Pre-generated target synthetic corpus; skips question generation.
    pub synthetic_path: Option<PathBuf>,
    /// Pre-generated synthetic questions on source contexts, used as
    /// negatives in the source phase of the binary classifier.
    pub source_synthetic_path: Option<PathBuf>,
    pub n_annotations: usize,
    /// Use the whole target training split as annotations (fully supervised row).
    pub full_target_train: bool,
    pub k_percent: f64,
    pub method: FilterMethod,
    pub finetune_order: Vec<Stage>,
    /// Train one target stage on synthetic and annotated data together.
    pub merge_synthetic_and_annotated: bool,
    pub train_cfg: TrainConfig,
    pub finetune: StageFinetune,
    pub qg_epochs: usize,
    /// Binary and ranking estimator training.
    pub supervised: SupervisedConfig,
    /// Fraction of source contexts kept for QA/QG when the binary classifier
    /// needs held-out source questions.
    pub classifier_source_frac: f64,
    /// Span whose reader probabilities feed the estimator.
    pub span_probs: SpanProbs,
    pub backend: BackendConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            runs_dir: PathBuf::from("runs"),
            source_path: PathBuf::new(),
            target_train_path: PathBuf::new(),
            target_eval_path: PathBuf::new(),
            synthetic_path: None,
            source_synthetic_path: None,
            n_annotations: 1000,
            full_target_train: false,
            k_percent: 60.0,
            method: FilterMethod::None,
            finetune_order: vec![Stage::Source, Stage::TargetSynthetic, Stage::TargetAnnotated],
            merge_synthetic_and_annotated: false,
            train_cfg: TrainConfig::default(),
            finetune: StageFinetune::default(),
            qg_epochs: 3,
            supervised: SupervisedConfig::default(),
            classifier_source_frac: 0.7,
            span_probs: SpanProbs::Labeled,
            backend: BackendConfig::default(),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    /// Read TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("experiment config", e))
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.finetune_order.contains(&stage)
    }

    pub fn needs_synthetic(&self) -> bool {
        self.has_stage(Stage::TargetSynthetic) || self.merge_synthetic_and_annotated
    }

    pub fn needs_annotations(&self) -> bool {
        self.has_stage(Stage::TargetAnnotated)
            || self.needs_synthetic()
            || matches!(self.method, FilterMethod::Roundtrip | FilterMethod::QveBinary | FilterMethod::QveRank | FilterMethod::QveRl)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.finetune_order.is_empty() {
            return bad("finetune_order must not be empty".into());
        }
        let distinct: HashSet<Stage> = self.finetune_order.iter().copied().collect();
        if distinct.len() != self.finetune_order.len() {
            return bad("finetune_order repeats a stage".into());
        }
        if self.merge_synthetic_and_annotated {
            if self.has_stage(Stage::TargetSynthetic) && self.has_stage(Stage::TargetAnnotated) {
                return bad("merge_synthetic_and_annotated excludes separate synthetic and annotated stages".into());
            }
            if !self.has_stage(Stage::TargetSynthetic) && !self.has_stage(Stage::TargetAnnotated) {
                return bad("merge_synthetic_and_annotated needs one target stage".into());
            }
        }
        if self.method != FilterMethod::None && !self.needs_synthetic() {
            return bad(format!("filter method {} needs a synthetic stage", self.method));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return bad(format!("k_percent {} outside (0, 100]", self.k_percent));
        }
        if self.n_annotations == 0 && !self.full_target_train {
            return bad("n_annotations must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(self.classifier_source_frac > 0.0 && self.classifier_source_frac < 1.0) {
            return bad(format!("classifier_source_frac {} outside (0, 1)", self.classifier_source_frac));
        }
        if self.method == FilterMethod::QveRl {
            self.train_cfg.validate()?;
        }
        Ok(())
    }

    pub fn base_run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-n{}-k{}", self.method, self.n_annotations, self.k_percent))
    }
}

/// Corpora an experiment runs on, already in memory.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub source: CorpusSplit,
    pub target_train: CorpusSplit,
    pub target_eval: CorpusSplit,
    pub synthetic: Option<CorpusSplit>,
    pub source_synthetic: Option<CorpusSplit>,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let load = |path: &Path, kind: SplitKind| load_corpus(path, CorpusFormat::from_path(path)?, kind);
        let optional = |path: &Option<PathBuf>, kind: SplitKind| path.as_deref().map(|p| load(p, kind)).transpose();
        Ok(Self {
            source: load(&cfg.source_path, SplitKind::SourceTrain).map_err(|e| e.in_stage("load source"))?,
            target_train: load(&cfg.target_train_path, SplitKind::TargetAnnotated).map_err(|e| e.in_stage("load target train"))?,
            target_eval: load(&cfg.target_eval_path, SplitKind::Eval).map_err(|e| e.in_stage("load eval"))?,
            synthetic: optional(&cfg.synthetic_path, SplitKind::TargetSynthetic).map_err(|e| e.in_stage("load synthetic"))?,
            source_synthetic: optional(&cfg.source_synthetic_path, SplitKind::SourceTrain).map_err(|e| e.in_stage("load source synthetic"))?,
        })
    }
}

/// Headline numbers of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

impl From<&EvalResult> for EvalSummary {
    fn from(r: &EvalResult) -> Self {
        Self {
            em: r.em,
            f1: r.f1,
            n: r.per_example.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub n_train: usize,
    /// Content address of the training data.
    pub data_address: String,
    /// Content address of the reader after the stage.
    pub checkpoint: String,
    pub eval: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything one run produced. Written once to `report/record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub filter: Option<FilterReport>,
    pub stages: Vec<StageRecord>,
    pub final_eval: EvalSummary,
    /// Fingerprint of the eval id set; records are comparable only when equal.
    pub eval_fingerprint: u64,
    /// Stages that read the eval split. Only `evaluate:*` entries are legal.
    pub eval_access: Vec<String>,
    /// Content addresses of the corpora the run used or produced.
    pub corpora: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
}

impl RunRecord {
    /// The record minus wall-clock data, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Vec::new(),
            ..self.clone()
        }
    }

    /// True when no training or selection stage read the eval split.
    pub fn eval_untouched(&self) -> bool {
        self.eval_access.iter().all(|s| s.starts_with("evaluate:"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

/// SHA-256 of the canonical SQuAD serialization.
pub fn split_address(split: &CorpusSplit) -> String {
    let bytes = serde_json::to_vec(&to_squad_value(split)).expect("SQuAD values serialize");
    hex::encode(Sha256::digest(bytes))
}

/// The run directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const SUBDIRS: [&'static str; 6] = ["config", "corpora", "checkpoints", "qve", "log", "report"];

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in Self::SUBDIRS {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn path(&self, sub: &str, name: &str) -> PathBuf {
        self.root.join(sub).join(name)
    }

    pub fn record_path(&self) -> PathBuf {
        self.path("report", "record.json")
    }

    fn write_json<T: Serialize>(&self, sub: &str, name: &str, value: &T) -> Result<()> {
        let path = self.path(sub, name);
        let json = serde_json::to_vec_pretty(value).map_err(|e| Error::parse(name, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    fn log_event(&self, stage: &str, seconds: f64) -> Result<()> {
        let path = self.path("log", "stages.jsonl");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::json!({ "stage": stage, "seconds": seconds });
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Wall-clock and eval-access bookkeeping threaded through a run.
struct Tracker<'a> {
    dir: Option<&'a RunDir>,
    timings: Vec<StageTiming>,
    eval_access: Vec<String>,
}

impl<'a> Tracker<'a> {
    fn new(dir: Option<&'a RunDir>) -> Self {
        Self {
            dir,
            timings: Vec::new(),
            eval_access: Vec::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        info!("stage {stage}: start");
        let out = f(self).map_err(|e| match e {
            already @ Error::StageFailure { .. } => already,
            other => other.in_stage(stage),
        })?;
        let seconds = start.elapsed().as_secs_f64();
        info!("stage {stage}: done in {seconds:.2}s");
        if let Some(dir) = self.dir {
            dir.log_event(stage, seconds)?;
        }
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        Ok(out)
    }
}

/// The only path through which the eval split is read.
fn evaluate_stage(tracker: &mut Tracker<'_>, label: &str, reader: &dyn QaReader, eval: &CorpusSplit) -> EvalResult {
    tracker.eval_access.push(format!("evaluate:{label}"));
    evaluate_reader(reader, eval)
}

/// Result of the selection step.
#[derive(Debug, Clone)]
pub struct Selection {
    pub report: FilterReport,
    /// Estimator scores in synthetic corpus order (QVE methods only).
    pub scores: Option<Vec<ScoredExample>>,
    pub estimator: Option<Qve>,
    pub rl_log: Option<TrainingLog>,
}

/// Inputs shared by all selection methods.
pub struct SelectionInputs<'a> {
    pub backend: &'a dyn Backend,
    /// Row-2 reader: source then annotations. Supplies p_s/p_e and roundtrip answers.
    pub reader: &'a dyn QaReader,
    pub source: &'a CorpusSplit,
    pub annotations: &'a CorpusSplit,
    pub synthetic: &'a CorpusSplit,
    pub source_synthetic: Option<&'a CorpusSplit>,
    pub seed: u64,
}

fn fresh_estimator(backend: &dyn Backend, cfg: &ExperimentConfig, seed: u64) -> Qve {
    let dims = HeadDims::for_input(backend.encoder().dim());
    Qve::new(ValueHead::random(dims, seed::derive(seed, "qve_init")), cfg.train_cfg.optimizer)
}

fn supervised_cfg(cfg: &ExperimentConfig, seed: u64, label: &str) -> SupervisedConfig {
    SupervisedConfig {
        seed: seed::derive(seed, label),
        ..cfg.supervised
    }
}

/// Source-phase data for the binary classifier: human questions on held-out
/// source contexts and synthetic questions on the same contexts.
fn classifier_source_phase(inputs: &SelectionInputs<'_>, cfg: &ExperimentConfig) -> Result<(CorpusSplit, CorpusSplit)> {
    let (kept, held) = split_source_for_classifier(inputs.source, cfg.classifier_source_frac, seed::derive(inputs.seed, "classifier_split"))?;
    let negatives = match inputs.source_synthetic {
        Some(pool) => {
            let ctx: HashSet<&str> = held.contexts().iter().map(|c| c.id.as_str()).collect();
            let idx: Vec<usize> = pool.examples().iter().enumerate().filter(|(_, e)| ctx.contains(e.context_id.as_str())).map(|(i, _)| i).collect();
            pool.select(SplitKind::SourceTrain, &idx)
        }
        None => {
            let mut gen = inputs.backend.generator(seed::derive(inputs.seed, "qg_classifier"));
            gen.finetune(&kept, cfg.qg_epochs)?;
            generate_synthetic(gen.as_ref(), &answer_pairs(&held))?.with_kind(SplitKind::SourceTrain)
        }
    };
    Ok((held, negatives))
}

/// Synthetic examples on the annotated contexts: target-phase negatives.
fn on_annotated_contexts<'a>(synthetic: &CorpusSplit, features: &'a [QveFeatures], annotations: &CorpusSplit) -> Vec<&'a QveFeatures> {
    let ctx: HashSet<&str> = annotations.examples().iter().map(|e| e.context_id.as_str()).collect();
    synthetic
        .examples()
        .iter()
        .zip(features)
        .filter(|(e, _)| ctx.contains(e.context_id.as_str()))
        .map(|(_, f)| f)
        .collect()
}

/// Run one selection method over the synthetic corpus.
pub fn select_synthetic(inputs: &SelectionInputs<'_>, cfg: &ExperimentConfig, rl_log_dir: Option<&LogDir>) -> Result<Selection> {
    let k = cfg.k_percent;
    let plain = |report: FilterReport| Selection {
        report,
        scores: None,
        estimator: None,
        rl_log: None,
    };
    match cfg.method {
        FilterMethod::None => return Ok(plain(FilterReport::keep_all(FilterMethod::None, inputs.synthetic))),
        FilterMethod::Roundtrip => return Ok(plain(roundtrip_filter(inputs.reader, inputs.synthetic))),
        FilterMethod::Lm => return Ok(plain(lm_filter(inputs.synthetic, k)?)),
        FilterMethod::QveBinary | FilterMethod::QveRank | FilterMethod::QveRl => {}
    }

    let encoder = inputs.backend.encoder();
    let mut qve = fresh_estimator(inputs.backend, cfg, inputs.seed);
    let mut rl_log = None;
    let featurize = |split: &CorpusSplit| featurize_with(encoder.as_ref(), inputs.reader, split, cfg.span_probs);
    let features = match cfg.method {
        FilterMethod::QveBinary => {
            let (held, negatives) = classifier_source_phase(inputs, cfg)?;
            let pos = featurize(&held);
            let neg = featurize(&negatives);
            train_binary_classifier(&mut qve, &pos, &neg, &supervised_cfg(cfg, inputs.seed, "binary_source")).map_err(|e| e.in_stage("binary source phase"))?;
            let syn = featurize(inputs.synthetic);
            let pos = featurize(inputs.annotations);
            let neg: Vec<QveFeatures> = on_annotated_contexts(inputs.synthetic, &syn, inputs.annotations).into_iter().cloned().collect();
            train_binary_classifier(&mut qve, &pos, &neg, &supervised_cfg(cfg, inputs.seed, "binary_target")).map_err(|e| e.in_stage("binary target phase"))?;
            syn
        }
        FilterMethod::QveRank => {
            let syn = featurize(inputs.synthetic);
            let ann = featurize(inputs.annotations);
            let idx = ranking_pairs(inputs.synthetic, inputs.annotations, seed::derive(inputs.seed, "ranking_pairs"))?;
            let pairs: Vec<(&QveFeatures, &QveFeatures)> = idx.iter().map(|&(s, a)| (&syn[s], &ann[a])).collect();
            train_ranking(&mut qve, &pairs, DEFAULT_MARGIN, &supervised_cfg(cfg, inputs.seed, "ranking"))?;
            syn
        }
        FilterMethod::QveRl => {
            let train_cfg = TrainConfig {
                seed: seed::derive(inputs.seed, "qve_rl"),
                ..cfg.train_cfg.clone()
            };
            let data = RlData::prepare_with(encoder.as_ref(), inputs.reader, inputs.synthetic, inputs.annotations, train_cfg.reward_mode, cfg.span_probs)?;
            let mut inner = inputs.reader.fork();
            let (trained, log) = train_qve_rl(qve, inner.as_mut(), &data, &train_cfg, rl_log_dir)?;
            qve = trained;
            rl_log = Some(log);
            data.features
        }
        _ => unreachable!("non-estimator methods returned above"),
    };
    let scores = score_features(&qve, inputs.synthetic, &features);
    // Rank by the unclamped logit: same order as prob, but no ties at the clamp.
    let ranked: Vec<(String, f64)> = scores.iter().map(|s| (s.example_id.clone(), s.raw)).collect();
    let report = select_top_k(&ranked, k)?.with_method(cfg.method);
    Ok(Selection {
        report,
        scores: Some(scores),
        estimator: Some(qve),
        rl_log,
    })
}

/// Run every seed of `cfg`, loading corpora from the configured paths.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    cfg.seeds.iter().map(|&s| run_seed(cfg, &data, s, true)).collect()
}

enum Opened {
    Finished(Box<RunRecord>),
    Fresh(RunDir),
}

/// Create `runs_dir/<run_id>/`. A finished record for the same config is
/// returned instead; one for a different config is an error.
fn open_run_dir(cfg: &ExperimentConfig, run_id: &str, run_seed: u64) -> Result<Opened> {
    let dir = RunDir::create(cfg.runs_dir.join(run_id))?;
    if dir.record_path().exists() {
        let existing = RunRecord::read(&dir.record_path())?;
        if existing.config == *cfg && existing.seed == run_seed {
            info!("run {run_id}: reusing finished record");
            return Ok(Opened::Finished(Box::new(existing)));
        }
        return Err(Error::Config(format!("run directory {} holds a record for a different config", dir.root.display())));
    }
    let path = dir.path("config", "config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(Opened::Fresh(dir))
}

/// State after source pretraining and synthetic selection.
struct Prepared {
    annotations: Option<CorpusSplit>,
    reader: Box<dyn QaReader>,
    init: LearnerCheckpoint,
    source_ckpt: LearnerCheckpoint,
    synthetic_kept: Option<CorpusSplit>,
    filter: Option<FilterReport>,
    corpora: BTreeMap<String, String>,
}

fn prepare_run(cfg: &ExperimentConfig, data: &ExperimentData, run_seed: u64, tracker: &mut Tracker<'_>, dir: Option<&RunDir>) -> Result<Prepared> {
    let backend = cfg.backend.build()?;
    let mut corpora = BTreeMap::new();
    corpora.insert("source".to_string(), split_address(&data.source));
    corpora.insert("target_train".to_string(), split_address(&data.target_train));

    let annotations = if !cfg.needs_annotations() {
        None
    } else if cfg.full_target_train {
        Some(data.target_train.clone())
    } else {
        Some(subsample_annotations(&data.target_train, cfg.n_annotations, seed::derive(run_seed, "annotations")).map_err(|e| e.in_stage("annotations"))?)
    };
    if let Some(ann) = &annotations {
        corpora.insert("annotations".to_string(), split_address(ann));
        if let Some(d) = dir {
            write_squad_json(ann, &d.path("corpora", "annotations.json"))?;
        }
    }

    // Row-1 reader, shared by every later stage.
    let mut reader = backend.reader(seed::derive(run_seed, "reader"));
    let init = reader.snapshot("init");
    let source_ckpt = tracker.time("pretrain_source", |_| {
        finetune_reader(reader.as_mut(), &data.source, &cfg.finetune.source, seed::derive(run_seed, "finetune_source"))?;
        Ok(reader.snapshot("source"))
    })?;
    save_checkpoint(dir, &source_ckpt)?;

    let mut synthetic_kept = None;
    let mut filter = None;
    if cfg.needs_synthetic() {
        let ann = annotations.as_ref().expect("synthetic stages need annotations");
        let synthetic = match &data.synthetic {
            Some(s) => s.clone(),
            None => tracker.time("generate", |_| {
                let mut gen = backend.generator(seed::derive(run_seed, "qg"));
                gen.finetune(&data.source, cfg.qg_epochs)?;
                gen.finetune(ann, cfg.qg_epochs)?;
                generate_synthetic(gen.as_ref(), &answer_pairs(&data.target_train))
            })?,
        };
        corpora.insert("target_synthetic".to_string(), split_address(&synthetic));
        if let Some(d) = dir {
            write_squad_json(&synthetic, &d.path("corpora", "target_synthetic.json"))?;
        }

        // Row-2 reader: features for the estimators and roundtrip answers.
        let mut row2 = backend.reader(seed::derive(run_seed, "reader"));
        row2.restore(&source_ckpt)?;
        let row2_ckpt = tracker.time("finetune_annotations_for_selection", |_| {
            finetune_reader(row2.as_mut(), ann, &cfg.finetune.target_annotated, seed::derive(run_seed, "finetune_target_annotated"))?;
            Ok(row2.snapshot("source_annotated"))
        })?;
        save_checkpoint(dir, &row2_ckpt)?;

        let selection = tracker.time("select", |_| {
            let inputs = SelectionInputs {
                backend: backend.as_ref(),
                reader: row2.as_ref(),
                source: &data.source,
                annotations: ann,
                synthetic: &synthetic,
                source_synthetic: data.source_synthetic.as_ref(),
                seed: run_seed,
            };
            let log_dir = dir.map(|d| LogDir::new(d.root.join("qve").join("rl")));
            select_synthetic(&inputs, cfg, log_dir.as_ref())
        })?;
        if let Some(d) = dir {
            selection.report.write_json(&d.path("report", "filter.json"))?;
            if let Some(scores) = &selection.scores {
                write_scores(&d.path("qve", "scores.jsonl"), scores)?;
            }
            if let Some(q) = &selection.estimator {
                q.save(&d.path("qve", "estimator.json"))?;
            }
        }
        let kept = selection.report.apply(&synthetic);
        corpora.insert("selected".to_string(), split_address(&kept));
        if let Some(d) = dir {
            write_squad_json(&kept, &d.path("corpora", "selected.json"))?;
        }
        synthetic_kept = Some(kept);
        filter = Some(selection.report);
    }

    Ok(Prepared {
        annotations,
        reader,
        init,
        source_ckpt,
        synthetic_kept,
        filter,
        corpora,
    })
}

/// Run a seed up to and including selection, persisting the filter report,
/// scores and selected corpus under the run directory. An interrupted
/// REINFORCE run resumes from its training log.
pub fn select_only(cfg: &ExperimentConfig, data: &ExperimentData, run_seed: u64) -> Result<(RunDir, FilterReport)> {
    cfg.validate()?;
    if !cfg.needs_synthetic() {
        return Err(Error::Config("selection needs a synthetic stage in finetune_order".into()));
    }
    let run_id = format!("{}-s{run_seed}", cfg.base_run_id());
    let dir = match open_run_dir(cfg, &run_id, run_seed)? {
        Opened::Fresh(dir) => dir,
        Opened::Finished(_) => RunDir::create(cfg.runs_dir.join(&run_id))?,
    };
    let mut tracker = Tracker::new(Some(&dir));
    let prepared = prepare_run(cfg, data, run_seed, &mut tracker, Some(&dir))?;
    let report = prepared.filter.expect("synthetic stage runs selection");
    Ok((dir, report))
}

/// One seed of an experiment on in-memory corpora. With `persist`, artifacts
/// go to `runs_dir/<run_id>-s<seed>/`, and an existing record for the same
/// config is returned as is.
pub fn run_seed(cfg: &ExperimentConfig, data: &ExperimentData, run_seed: u64, persist: bool) -> Result<RunRecord> {
    cfg.validate()?;
    let run_id = format!("{}-s{run_seed}", cfg.base_run_id());
    let dir = if persist {
        match open_run_dir(cfg, &run_id, run_seed)? {
            Opened::Finished(record) => return Ok(*record),
            Opened::Fresh(dir) => Some(dir),
        }
    } else {
        None
    };
    let dir = dir.as_ref();
    let mut tracker = Tracker::new(dir);
    let Prepared {
        annotations,
        mut reader,
        init,
        source_ckpt,
        synthetic_kept,
        filter,
        corpora,
    } = prepare_run(cfg, data, run_seed, &mut tracker, dir)?;

    // Staged finetuning from the source checkpoint (or from scratch when the
    // order skips the source stage).
    let mut stages = Vec::new();
    reader.restore(&init)?;
    let mut final_eval = None;
    for &stage in &cfg.finetune_order {
        let merged;
        let train: &CorpusSplit = match stage {
            Stage::Source => &data.source,
            _ if cfg.merge_synthetic_and_annotated => {
                let kept = synthetic_kept.as_ref().expect("merge mode builds synthetic data");
                merged = kept.merge(annotations.as_ref().expect("merge mode has annotations"), SplitKind::TargetAnnotated)?;
                &merged
            }
            Stage::TargetSynthetic => synthetic_kept.as_ref().expect("synthetic stage builds synthetic data"),
            Stage::TargetAnnotated => annotations.as_ref().expect("annotated stage has annotations"),
        };
        let label = stage.as_str();
        let ckpt = if stage == Stage::Source {
            reader.restore(&source_ckpt)?;
            source_ckpt.clone()
        } else {
            tracker.time(&format!("finetune_{label}"), |_| {
                finetune_reader(reader.as_mut(), train, cfg.finetune.get(stage), seed::derive(run_seed, &format!("finetune_{label}")))?;
                Ok(reader.snapshot(label))
            })?
        };
        save_checkpoint(dir, &ckpt)?;
        let eval = evaluate_stage(&mut tracker, label, reader.as_ref(), &data.target_eval);
        info!("run {run_id}: after {label} EM {:.2} F1 {:.2}", eval.em, eval.f1);
        stages.push(StageRecord {
            stage,
            n_train: train.len(),
            data_address: split_address(train),
            checkpoint: ckpt.address(),
            eval: EvalSummary::from(&eval),
        });
        final_eval = Some(eval);
    }
    let final_eval = final_eval.expect("finetune_order is non-empty");
    let record = RunRecord {
        run_id,
        seed: run_seed,
        config: cfg.clone(),
        filter,
        stages,
        final_eval: EvalSummary::from(&final_eval),
        eval_fingerprint: final_eval.gold_fingerprint,
        eval_access: tracker.eval_access,
        corpora,
        timings: tracker.timings,
    };
    if let Some(d) = dir {
        d.write_json("report", "eval.json", &final_eval)?;
        d.write_json("report", "record.json", &record)?;
    }
    Ok(record)
}

fn save_checkpoint(dir: Option<&RunDir>, ckpt: &LearnerCheckpoint) -> Result<()> {
    if let Some(d) = dir {
        ckpt.save(&d.root.join("checkpoints"))?;
    }
    Ok(())
}

/// Which config field a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NAnnotations,
    KPercent,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" | "n_annotations" => Ok(SweepAxis::NAnnotations),
            "k" | "k_percent" => Ok(SweepAxis::KPercent),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NAnnotations => "n_annotations",
            SweepAxis::KPercent => "k_percent",
        }
    }

    /// `base` with the axis set to `value`, under a point-specific run id.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let stem = base.base_run_id();
        match self {
            SweepAxis::NAnnotations => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("n_annotations {value} must be a positive integer")));
                }
                cfg.n_annotations = value as usize;
                cfg.run_id = Some(format!("{stem}-sweep-n{}", cfg.n_annotations));
            }
            SweepAxis::KPercent => {
                cfg.k_percent = value;
                cfg.run_id = Some(format!("{stem}-sweep-k{value}"));
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub value: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<SweepFailure>,
    pub table: ReportTable,
}

/// One run per value with shared seeds. A failing point is recorded and the
/// remaining points still run. The comparison table is written to
/// `runs_dir/sweep-<axis>.{csv,md}`.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    base.validate()?;
    let data = ExperimentData::load(base)?;
    sweep_on(base, &data, axis, values, true)
}

/// [`sweep`] over in-memory corpora.
pub fn sweep_on(base: &ExperimentConfig, data: &ExperimentData, axis: SweepAxis, values: &[f64], persist: bool) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &value in values {
        let point = axis.apply(base, value).and_then(|cfg| {
            cfg.seeds.iter().map(|&s| run_seed(&cfg, data, s, persist)).collect::<Result<Vec<_>>>()
        });
        match point {
            Ok(rs) => records.extend(rs),
            Err(e) => {
                log::warn!("sweep {}={value} failed: {e}", axis.as_str());
                failures.push(SweepFailure {
                    value,
                    error: e.to_string(),
                });
            }
        }
    }
    let table = if records.is_empty() { ReportTable::default() } else { report(&records)? };
    if persist {
        table.write(&base.runs_dir, &format!("sweep-{}", axis.as_str()))?;
    }
    Ok(SweepOutcome { records, failures, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub method: FilterMethod,
    pub stages: String,
    pub n_annotations: usize,
    pub k_percent: f64,
    pub seed: u64,
    pub kept: Option<usize>,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

/// EM/F1 per run, one row per record in input order.
pub fn report(records: &[RunRecord]) -> Result<ReportTable> {
    if let Some(first) = records.first() {
        if records.iter().any(|r| r.eval_fingerprint != first.eval_fingerprint) {
            return Err(Error::MixedEvalSplits);
        }
    }
    let rows = records
        .iter()
        .map(|r| ReportRow {
            run_id: r.run_id.clone(),
            method: r.config.method,
            stages: r.config.finetune_order.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(">"),
            n_annotations: if r.config.full_target_train { 0 } else { r.config.n_annotations },
            k_percent: r.config.k_percent,
            seed: r.seed,
            kept: r.filter.as_ref().map(|f| f.kept_count),
            em: r.final_eval.em,
            f1: r.final_eval.f1,
        })
        .collect();
    Ok(ReportTable { rows })
}

impl ReportTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::parse("report csv", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("report csv", e))?;
        String::from_utf8(bytes).map_err(|e| Error::parse("report csv", e))
    }

    /// Method rows with EM and F1 columns.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| run | method | stages | n | K | seed | kept | EM | F1 |\n|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let kept = r.kept.map_or_else(|| "-".to_string(), |k| k.to_string());
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {:.2} | {:.2} |\n",
                r.run_id, r.method, r.stages, r.n_annotations, r.k_percent, r.seed, kept, r.em, r.f1
            ));
        }
        out
    }

    /// `<stem>.csv` and `<stem>.md` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let md_path = dir.join(format!("{stem}.md"));
        fs::write(&md_path, self.to_markdown()).map_err(|e| Error::io(&md_path, e))
    }
}

/// Read `report/record.json` from each run directory (or record file) given.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("report").join("record.json") } else { p.clone() };
            RunRecord::read(&file)
        })
        .collect()
}

/// Settings for the end-to-end sandbox comparison of all selection methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxStudyConfig {
    pub sandbox: SandboxConfig,
    /// Method-independent experiment settings. Paths, method, order and
    /// seeds are ignored.
    pub experiment: ExperimentConfig,
}

impl Default for SandboxStudyConfig {
    fn default() -> Self {
        let experiment = ExperimentConfig {
            n_annotations: 150,
            k_percent: 60.0,
            finetune: StageFinetune {
                source: FinetuneConfig {
                    epochs: 2,
                    batch_size: 8,
                    lr: 0.5,
                },
                target_synthetic: FinetuneConfig {
                    epochs: 1,
                    batch_size: 8,
                    lr: 0.5,
                },
                target_annotated: FinetuneConfig {
                    epochs: 1,
                    batch_size: 8,
                    lr: 0.02,
                },
            },
            train_cfg: TrainConfig {
                outer_iterations: 500,
                outer_batch: 20,
                inner_iterations: 5,
                inner_batch: 4,
                qve_lr: 1e-3,
                qa_lr: 0.1,
                reward_mode: RewardMode::LossDrop,
                checkpoint_rule: CheckpointRule::Last,
                baseline_decay: Some(0.9),
                ..TrainConfig::default()
            },
            supervised: SupervisedConfig {
                epochs: 2,
                batch_size: 16,
                lr: 3e-3,
                seed: 0,
            },
            backend: BackendConfig::Toy(ToyConfig {
                encoder_dim: 16,
                ..ToyConfig::default()
            }),
            ..ExperimentConfig::default()
        };
        Self {
            sandbox: SandboxConfig::default(),
            experiment,
        }
    }
}

impl SandboxStudyConfig {
    /// Study defaults with the keys present in `text` (TOML) replaced.
    /// Nested tables merge key by key.
    pub fn with_overrides(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| Error::parse("study overrides", e))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::parse("study defaults", e))?;
        merge_tables(&mut base, overrides);
        base.try_into().map_err(|e| Error::parse("study overrides", e))
    }
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Selection quality and downstream EM of one method on one sandbox seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: FilterMethod,
    /// AUC of clean vs noisy by the method's score; `None` for roundtrip,
    /// which keeps or drops without a score.
    pub auc: Option<f64>,
    /// Mean estimator prob on clean minus noisy items (QVE methods only).
    pub prob_gap: Option<f64>,
    pub kept: usize,
    pub kept_clean: usize,
    /// EM after source, selected synthetic, then annotations.
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxStudy {
    pub seed: u64,
    pub n_synthetic: usize,
    pub n_clean: usize,
    /// Source only.
    pub em_source: f64,
    /// Source then annotations.
    pub em_source_annotated: f64,
    /// Per method, in [`SandboxStudy::METHODS`] order. `none` is the
    /// unfiltered synthetic row.
    pub methods: Vec<MethodOutcome>,
    /// Staging with exactly the clean synthetic examples.
    pub em_oracle_clean: f64,
}

impl SandboxStudy {
    pub const METHODS: [FilterMethod; 6] = [
        FilterMethod::None,
        FilterMethod::Roundtrip,
        FilterMethod::Lm,
        FilterMethod::QveBinary,
        FilterMethod::QveRank,
        FilterMethod::QveRl,
    ];

    pub fn method(&self, m: FilterMethod) -> Option<&MethodOutcome> {
        self.methods.iter().find(|o| o.method == m)
    }
}

/// Generate a sandbox for `seed` and run every selection method on it.
/// Each method sees the same annotations, row-2 reader and synthetic pool.
pub fn run_sandbox_study(cfg: &SandboxStudyConfig, seed: u64) -> Result<SandboxStudy> {
    let sandbox = generate_sandbox(&SandboxConfig { seed, ..cfg.sandbox })?;
    run_sandbox_study_on(cfg, &sandbox, seed)
}

pub fn run_sandbox_study_on(cfg: &SandboxStudyConfig, sandbox: &Sandbox, seed: u64) -> Result<SandboxStudy> {
    let exp = &cfg.experiment;
    let labels = sandbox.labels();
    let backend = exp.backend.build()?;
    let mut tracker = Tracker::new(None);
    let eval = &sandbox.target_eval;

    let annotations = subsample_annotations(&sandbox.target_train, exp.n_annotations, seed::derive(seed, "annotations"))?;
    let mut reader = backend.reader(seed::derive(seed, "reader"));
    finetune_reader(reader.as_mut(), &sandbox.source, &exp.finetune.source, seed::derive(seed, "finetune_source"))?;
    let source_ckpt = reader.snapshot("source");
    let em_source = evaluate_stage(&mut tracker, "source", reader.as_ref(), eval).em;
    finetune_reader(reader.as_mut(), &annotations, &exp.finetune.target_annotated, seed::derive(seed, "finetune_target_annotated"))?;
    let em_source_annotated = evaluate_stage(&mut tracker, "source_annotated", reader.as_ref(), eval).em;

    let staged_em = |tracker: &mut Tracker<'_>, kept: &CorpusSplit, label: &str| -> Result<f64> {
        let mut r = backend.reader(seed::derive(seed, "reader"));
        r.restore(&source_ckpt)?;
        finetune_reader(r.as_mut(), kept, &exp.finetune.target_synthetic, seed::derive(seed, "finetune_target_synthetic"))?;
        finetune_reader(r.as_mut(), &annotations, &exp.finetune.target_annotated, seed::derive(seed, "finetune_target_annotated"))?;
        Ok(evaluate_stage(tracker, label, r.as_ref(), eval).em)
    };

    let inputs = SelectionInputs {
        backend: backend.as_ref(),
        reader: reader.as_ref(),
        source: &sandbox.source,
        annotations: &annotations,
        synthetic: &sandbox.target_synthetic,
        source_synthetic: Some(&sandbox.source_synthetic),
        seed,
    };
    let mut methods = Vec::new();
    for method in SandboxStudy::METHODS {
        let mcfg = ExperimentConfig { method, ..exp.clone() };
        let selection = tracker.time(method.as_str(), |_| select_synthetic(&inputs, &mcfg, None))?;
        let auc = match (&selection.scores, method) {
            (Some(scores), _) => {
                let s: Vec<(String, f64)> = scores.iter().map(|s| (s.example_id.clone(), s.prob)).collect();
                Some(auc_clean_vs_noisy(&s, &labels)?)
            }
            (None, FilterMethod::Lm) => {
                let s: Vec<(String, f64)> = sandbox
                    .target_synthetic
                    .examples()
                    .iter()
                    .map(|e| e.gen_loglik.map(|l| (e.example_id.clone(), l)).ok_or_else(|| Error::MissingLogLik(e.example_id.clone())))
                    .collect::<Result<_>>()?;
                Some(auc_clean_vs_noisy(&s, &labels)?)
            }
            (None, _) => None,
        };
        let prob_gap = selection.scores.as_ref().map(|scores| {
            let (mut clean, mut noisy) = ((0.0, 0usize), (0.0, 0usize));
            for s in scores {
                let bucket = if labels.get(&s.example_id).is_some_and(|q| q.is_clean()) { &mut clean } else { &mut noisy };
                bucket.0 += s.prob;
                bucket.1 += 1;
            }
            clean.0 / clean.1.max(1) as f64 - noisy.0 / noisy.1.max(1) as f64
        });
        let kept_clean = selection.report.kept_ids.iter().filter(|id| labels.get(id.as_str()).is_some_and(|q| q.is_clean())).count();
        let kept = selection.report.apply(&sandbox.target_synthetic);
        let em = staged_em(&mut tracker, &kept, method.as_str())?;
        info!("sandbox seed {seed}: {method} auc {auc:?} kept {} clean {kept_clean} EM {em:.2}", kept.len());
        methods.push(MethodOutcome {
            method,
            auc,
            prob_gap,
            kept: kept.len(),
            kept_clean,
            em,
        });
    }
    let clean_ids: HashSet<&str> = sandbox.planted.iter().filter(|p| p.quality.is_clean()).map(|p| p.example.example_id.as_str()).collect();
    let clean = sandbox.target_synthetic.retain_ids(SplitKind::TargetSynthetic, &clean_ids);
    let em_oracle_clean = staged_em(&mut tracker, &clean, "oracle_clean")?;
    debug_assert!(tracker.eval_access.iter().all(|s| s.starts_with("evaluate:")));
    Ok(SandboxStudy {
        seed,
        n_synthetic: sandbox.target_synthetic.len(),
        n_clean: clean.len(),
        em_source,
        em_source_annotated,
        methods,
        em_oracle_clean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sandbox(dir: &Path) -> Sandbox {
        let sb = generate_sandbox(&SandboxConfig {
            n_contexts: 30,
            n_source_contexts: 40,
            n_eval_contexts: 20,
            seed: 3,
            ..SandboxConfig::default()
        })
        .unwrap();
        sb.write(dir).unwrap();
        sb
    }

    fn small_config(dir: &Path, method: FilterMethod) -> ExperimentConfig {
        let study = SandboxStudyConfig::default().experiment;
        ExperimentConfig {
            runs_dir: dir.join("runs"),
            source_path: dir.join("source.json"),
            target_train_path: dir.join("target_train.json"),
            target_eval_path: dir.join("target_eval.json"),
            synthetic_path: Some(dir.join("target_synthetic.json")),
            source_synthetic_path: Some(dir.join("source_synthetic.json")),
            n_annotations: 20,
            method,
            train_cfg: TrainConfig {
                outer_iterations: 6,
                outer_batch: 8,
                inner_iterations: 2,
                inner_batch: 4,
                ..study.train_cfg.clone()
            },
            ..study
        }
    }

    #[test]
    fn validate_rejects_bad_orders() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        let dup = ExperimentConfig {
            finetune_order: vec![Stage::Source, Stage::Source],
            ..ok.clone()
        };
        assert!(matches!(dup.validate(), Err(Error::Config(_))));
        let merged = ExperimentConfig {
            merge_synthetic_and_annotated: true,
            ..ok.clone()
        };
        assert!(matches!(merged.validate(), Err(Error::Config(_))));
        let merged_ok = ExperimentConfig {
            merge_synthetic_and_annotated: true,
            finetune_order: vec![Stage::Source, Stage::TargetSynthetic],
            ..ok.clone()
        };
        assert!(merged_ok.validate().is_ok());
        let filter_without_synthetic = ExperimentConfig {
            method: FilterMethod::Lm,
            finetune_order: vec![Stage::Source, Stage::TargetAnnotated],
            ..ok.clone()
        };
        assert!(filter_without_synthetic.validate().is_err());
        for k in [0.0, -5.0, 100.5, f64::NAN] {
            assert!(ExperimentConfig { k_percent: k, ..ok.clone() }.validate().is_err(), "k={k}");
        }
        assert!(ExperimentConfig { seeds: vec![], ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { n_annotations: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = SandboxStudyConfig::default().experiment;
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = toml::from_str("method = \"qve_rl\"\nk_percent = 40.0\nfinetune_order = [\"source\", \"target_synthetic\"]\n").unwrap();
        assert_eq!(partial.method, FilterMethod::QveRl);
        assert_eq!(partial.finetune_order, vec![Stage::Source, Stage::TargetSynthetic]);
        assert_eq!(partial.n_annotations, 1000);
    }

    #[test]
    fn run_writes_layout_and_audits_eval_access() {
        let tmp = tempfile::tempdir().unwrap();
        small_sandbox(tmp.path());
        let cfg = small_config(tmp.path(), FilterMethod::QveRl);
        let records = run_experiment(&cfg).unwrap();
        assert_eq!(records.len(), 1);
        let rec = &records[0];
        let root = cfg.runs_dir.join(&rec.run_id);
        for sub in RunDir::SUBDIRS {
            assert!(root.join(sub).is_dir(), "{sub}");
        }
        for f in ["config/config.toml", "report/record.json", "report/filter.json", "qve/scores.jsonl", "corpora/selected.json"] {
            assert!(root.join(f).is_file(), "{f}");
        }
        assert!(rec.eval_untouched());
        assert_eq!(rec.eval_access.len(), cfg.finetune_order.len());
        assert_eq!(rec.stages.len(), 3);
        let filter = rec.filter.as_ref().unwrap();
        assert_eq!(filter.kept_count, crate::filters::top_k_count(filter.input_count, cfg.k_percent));
        assert_eq!(rec.stages[1].n_train, filter.kept_count);
        assert_eq!(rec.stages[2].n_train, cfg.n_annotations);
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let tmp = tempfile::tempdir().unwrap();
        small_sandbox(tmp.path());
        let cfg = small_config(tmp.path(), FilterMethod::QveRank);
        let data = ExperimentData::load(&cfg).unwrap();
        let a = run_seed(&cfg, &data, 5, false).unwrap();
        let b = run_seed(&cfg, &data, 5, false).unwrap();
        assert_eq!(a.without_timings(), b.without_timings());

        let first = run_experiment(&cfg).unwrap();
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(first, again, "finished record is reused verbatim");
        let changed = ExperimentConfig { k_percent: 30.0, ..cfg };
        let clash = ExperimentConfig {
            run_id: Some(changed.base_run_id().replace("k30", "k60")),
            ..changed
        };
        assert!(matches!(run_experiment(&clash), Err(Error::Config(_))));
    }

    #[test]
    fn every_method_and_merge_mode_runs() {
        let tmp = tempfile::tempdir().unwrap();
        small_sandbox(tmp.path());
        let base = small_config(tmp.path(), FilterMethod::None);
        let data = ExperimentData::load(&base).unwrap();
        for method in SandboxStudy::METHODS {
            let cfg = ExperimentConfig { method, ..base.clone() };
            let rec = run_seed(&cfg, &data, 0, false).unwrap();
            assert_eq!(rec.filter.unwrap().method, method);
        }
        let merged = ExperimentConfig {
            merge_synthetic_and_annotated: true,
            finetune_order: vec![Stage::Source, Stage::TargetSynthetic],
            method: FilterMethod::Lm,
            ..base.clone()
        };
        let rec = run_seed(&merged, &data, 0, false).unwrap();
        let kept = rec.filter.unwrap().kept_count;
        assert_eq!(rec.stages[1].n_train, kept + merged.n_annotations);
        let source_only = ExperimentConfig {
            finetune_order: vec![Stage::Source],
            synthetic_path: None,
            ..base
        };
        let rec = run_seed(&source_only, &data, 0, false).unwrap();
        assert!(rec.filter.is_none());
        assert!(!rec.corpora.contains_key("annotations"));
    }

    #[test]
    fn argmax_span_features_follow_the_reader() {
        let tmp = tempfile::tempdir().unwrap();
        let sb = small_sandbox(tmp.path());
        let cfg = ExperimentConfig {
            span_probs: SpanProbs::Argmax,
            ..small_config(tmp.path(), FilterMethod::QveRank)
        };
        let data = ExperimentData::load(&cfg).unwrap();
        assert!(run_seed(&cfg, &data, 0, false).unwrap().filter.is_some());

        let backend = cfg.backend.build().unwrap();
        let reader = backend.reader(0);
        let enc = backend.encoder();
        let feats = featurize_with(enc.as_ref(), reader.as_ref(), &sb.target_synthetic, SpanProbs::Argmax);
        for (f, v) in feats.iter().zip(sb.target_synthetic.views()) {
            let p = reader.predict(v.context, &v.example.question);
            assert_eq!((f.p_s, f.p_e), (p.p_start, p.p_end));
        }
    }

    #[test]
    fn generator_path_builds_synthetic_corpus() {
        let tmp = tempfile::tempdir().unwrap();
        let sb = small_sandbox(tmp.path());
        let cfg = ExperimentConfig {
            synthetic_path: None,
            source_synthetic_path: None,
            ..small_config(tmp.path(), FilterMethod::QveBinary)
        };
        let data = ExperimentData::load(&cfg).unwrap();
        let rec = run_seed(&cfg, &data, 1, false).unwrap();
        assert_eq!(rec.filter.unwrap().input_count, sb.target_train.len());
    }

    #[test]
    fn sweep_continues_past_failures() {
        let tmp = tempfile::tempdir().unwrap();
        small_sandbox(tmp.path());
        let cfg = small_config(tmp.path(), FilterMethod::Lm);
        let out = sweep(&cfg, SweepAxis::KPercent, &[20.0, 150.0, 100.0]).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].value, 150.0);
        let n = out.records[0].filter.as_ref().unwrap().input_count;
        let kept: Vec<usize> = out.table.rows.iter().map(|r| r.kept.unwrap()).collect();
        assert_eq!(kept, vec![n / 5, n]);
        assert!(cfg.runs_dir.join("sweep-k_percent.csv").is_file());
        assert!(cfg.runs_dir.join("sweep-k_percent.md").is_file());
    }

    #[test]
    fn report_rejects_mixed_eval_splits() {
        let tmp = tempfile::tempdir().unwrap();
        small_sandbox(tmp.path());
        let cfg = ExperimentConfig {
            finetune_order: vec![Stage::Source],
            ..small_config(tmp.path(), FilterMethod::None)
        };
        let data = ExperimentData::load(&cfg).unwrap();
        let rec = run_seed(&cfg, &data, 0, false).unwrap();
        let table = report(&[rec.clone(), rec.clone()]).unwrap();
        let csv = table.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("run_id,method,stages"));
        assert!(table.to_markdown().contains("| EM | F1 |"));
        let mut other = rec.clone();
        other.eval_fingerprint ^= 1;
        assert!(matches!(report(&[rec, other]), Err(Error::MixedEvalSplits)));
    }

    #[test]
    fn study_overrides_merge_into_defaults() {
        let cfg = SandboxStudyConfig::with_overrides("[experiment]\nn_annotations = 40\n[experiment.train_cfg]\nouter_iterations = 7\n").unwrap();
        let def = SandboxStudyConfig::default();
        assert_eq!(cfg.experiment.n_annotations, 40);
        assert_eq!(cfg.experiment.train_cfg.outer_iterations, 7);
        assert_eq!(cfg.experiment.train_cfg.qa_lr, def.experiment.train_cfg.qa_lr);
        assert_eq!(cfg.experiment.finetune, def.experiment.finetune);
        assert!(SandboxStudyConfig::with_overrides("experiment = 3").is_err());
    }

    #[test]
    fn sweep_axis_parsing() {
        assert_eq!("n".parse::<SweepAxis>().unwrap(), SweepAxis::NAnnotations);
        assert_eq!("k_percent".parse::<SweepAxis>().unwrap(), SweepAxis::KPercent);
        assert!("x".parse::<SweepAxis>().is_err());
        assert!(SweepAxis::NAnnotations.apply(&ExperimentConfig::default(), 2.5).is_err());
    }
}
