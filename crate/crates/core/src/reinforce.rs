//! REINFORCE training of the value estimator.
//!
//! Each outer iteration draws `B_o` synthetic examples, scores them, samples a
//! Bernoulli selection, finetunes the reader from `theta_0` for `I_n` masked
//! steps, rewards the selection by the reader's gain on the annotations, takes
//! one score-function gradient step on the estimator, and resets the reader
//! to `theta_0`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, ExampleRef};
use crate::error::{Error, Result};
use crate::learners::{evaluate_reader, evaluate_reader_with_loss, qa_weighted_update, LearnerCheckpoint, QaReader};
use crate::metrics::{reward_fn, EvalResult, RewardMode};
use crate::qve::{featurize_with, Encoder, HeadTrace, Optimizer, QuestionValue, Qve, QveFeatures, SpanProbs};
use crate::seed::{self, Rng as SeedRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRule {
    /// Highest probe reward on the annotations.
    #[default]
    HighestReward,
    /// Lowest reader loss on the annotations after probe training.
    LowestQaLoss,
    /// The estimator after the final iteration.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `I_o`
    pub outer_iterations: usize,
    /// `B_o`
    pub outer_batch: usize,
    /// `I_n`
    pub inner_iterations: usize,
    /// `B_n`
    pub inner_batch: usize,
    /// `alpha_o`
    pub qve_lr: f64,
    /// `alpha_n`
    pub qa_lr: f64,
    pub reward_mode: RewardMode,
    pub seed: u64,
    pub checkpoint_rule: CheckpointRule,
    /// Iterations between checkpoint probes (the last iteration is always probed).
    pub probe_every: usize,
    /// Decay of the moving-average reward baseline; `None` uses the raw reward.
    pub baseline_decay: Option<f64>,
    pub optimizer: Optimizer,
    /// Iterations between persisted resume states when logging to disk.
    pub state_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 2000,
            outer_batch: 80,
            inner_iterations: 20,
            inner_batch: 4,
            qve_lr: 3e-5,
            qa_lr: 3e-5,
            reward_mode: RewardMode::EmGain,
            seed: 0,
            checkpoint_rule: CheckpointRule::HighestReward,
            probe_every: 50,
            baseline_decay: None,
            optimizer: Optimizer::Adam,
            state_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.outer_batch == 0 || self.inner_iterations == 0 || self.inner_batch == 0 {
            return bad("outer_batch, inner_iterations and inner_batch must be positive".into());
        }
        if self.inner_batch > self.outer_batch {
            return bad(format!("inner_batch {} exceeds outer_batch {}", self.inner_batch, self.outer_batch));
        }
        if self.probe_every == 0 || self.state_every == 0 {
            return bad("probe_every and state_every must be positive".into());
        }
        if let Some(d) = self.baseline_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("baseline_decay {d} must lie in [0, 1)"));
            }
        }
        if !(self.qve_lr > 0.0 && self.qa_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }
}

/// One outer iteration, as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub iteration: usize,
    pub batch_ids: Vec<String>,
    pub values: Vec<f64>,
    pub selection: Vec<u8>,
    pub reward: f64,
    /// `sum_l s_l ln v_l + (1 - s_l) ln(1 - v_l)`
    pub log_prob: f64,
    /// Baseline subtracted from the reward, when enabled.
    pub baseline: Option<f64>,
}

/// Independent `s_l ~ Bernoulli(v_l)`.
pub fn sample_selection(values: &[f64], rng: &mut impl Rng) -> Vec<u8> {
    values.iter().map(|&v| u8::from(rng.random::<f64>() < v)).collect()
}

pub fn policy_log_prob(values: &[f64], selection: &[u8]) -> Result<f64> {
    if values.len() != selection.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: selection.len(),
        });
    }
    Ok(values
        .iter()
        .zip(selection)
        .map(|(&v, &s)| if s == 1 { v.ln() } else { (1.0 - v).ln() })
        .sum())
}

/// `d L / d raw_l` for the loss `-r log pi(S)` with logistic values:
/// `-r (s_l - v_l)`, zero where the clamp is active.
pub fn raw_coefficients(values: &[QuestionValue], selection: &[u8], reward: f64) -> Vec<f64> {
    values
        .iter()
        .zip(selection)
        .map(|(v, &s)| {
            if v.is_clamped() {
                0.0
            } else {
                -reward * (f64::from(s) - v.prob)
            }
        })
        .collect()
}

/// Single-sample score-function gradient `-r * grad log pi(S)` with respect
/// to the head parameters.
pub fn qve_gradient(qve: &Qve, traces: &[HeadTrace], selection: &[u8], reward: f64) -> Vec<f64> {
    let values: Vec<QuestionValue> = traces.iter().map(|t| t.value).collect();
    let mut grad = qve.zero_grad();
    for (t, c) in traces.iter().zip(raw_coefficients(&values, selection, reward)) {
        qve.head.backward(t, c, &mut grad);
    }
    grad
}

/// Everything the loop reuses across iterations: frozen features for the
/// synthetic pool, `theta_0`, and the reader's score at `theta_0`.
pub struct RlData<'a> {
    pub synthetic: &'a CorpusSplit,
    pub features: Vec<QveFeatures>,
    pub annotations: &'a CorpusSplit,
    pub theta0: LearnerCheckpoint,
    pub before: EvalResult,
}

impl<'a> RlData<'a> {
    /// Features come from the reader at its current parameters, which become
    /// `theta_0`.
    pub fn prepare(encoder: &dyn Encoder, reader: &dyn QaReader, synthetic: &'a CorpusSplit, annotations: &'a CorpusSplit, mode: RewardMode) -> Result<Self> {
        Self::prepare_with(encoder, reader, synthetic, annotations, mode, SpanProbs::Labeled)
    }

    pub fn prepare_with(
        encoder: &dyn Encoder,
        reader: &dyn QaReader,
        synthetic: &'a CorpusSplit,
        annotations: &'a CorpusSplit,
        mode: RewardMode,
        span: SpanProbs,
    ) -> Result<Self> {
        if synthetic.is_empty() {
            return Err(Error::EmptySplit("synthetic".into()));
        }
        if annotations.is_empty() {
            return Err(Error::EmptySplit("annotations".into()));
        }
        Ok(Self {
            synthetic,
            features: featurize_with(encoder, reader, synthetic, span),
            annotations,
            theta0: reader.snapshot("theta_0"),
            before: eval_for(reader, annotations, mode),
        })
    }
}

fn eval_for(reader: &dyn QaReader, split: &CorpusSplit, mode: RewardMode) -> EvalResult {
    match mode {
        RewardMode::LossDrop => evaluate_reader_with_loss(reader, split),
        _ => evaluate_reader(reader, split),
    }
}

/// Outcome of masked inner training from `theta_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOutcome {
    pub reward: f64,
    /// Reader loss on the annotations after inner training, when requested.
    pub qa_loss: Option<f64>,
}

/// Run `I_n` masked steps on the batch `batch` (indices into the synthetic
/// split) with mask `selection`, score the reader, and restore `theta_0`.
/// Inner batches sample batch positions uniformly with replacement.
pub fn inner_reward(
    reader: &mut dyn QaReader,
    data: &RlData<'_>,
    batch: &[usize],
    selection: &[u8],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    want_loss: bool,
) -> Result<InnerOutcome> {
    if batch.len() != selection.len() {
        return Err(Error::LengthMismatch {
            left: batch.len(),
            right: selection.len(),
        });
    }
    let run = (|| {
        for _ in 0..cfg.inner_iterations {
            let picks: Vec<usize> = (0..cfg.inner_batch).map(|_| rng.random_range(0..batch.len())).collect();
            let views: Vec<ExampleRef<'_>> = picks.iter().map(|&p| data.synthetic.view(batch[p])).collect();
            let weights: Vec<f64> = picks.iter().map(|&p| f64::from(selection[p])).collect();
            qa_weighted_update(reader, &views, &weights, cfg.qa_lr)?;
        }
        let after = eval_for(reader, data.annotations, cfg.reward_mode);
        let reward = reward_fn(&data.before, &after, cfg.reward_mode)?;
        let qa_loss = match (want_loss, after.mean_loss) {
            (false, _) => None,
            (true, Some(l)) => Some(l),
            (true, None) => {
                let views: Vec<ExampleRef<'_>> = data.annotations.views().collect();
                Some(reader.loss(&views))
            }
        };
        Ok(InnerOutcome { reward, qa_loss })
    })();
    reader.restore(&data.theta0)?;
    run
}

fn ensure_at_theta0(reader: &dyn QaReader, theta0: &LearnerCheckpoint) -> Result<()> {
    let actual = reader.snapshot("current").address();
    let expected = theta0.address();
    if actual != expected {
        return Err(Error::CheckpointMismatch { expected, actual });
    }
    Ok(())
}

/// Moving-average reward baseline.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
}

impl Baseline {
    /// Returns the baseline to subtract, then folds `reward` in.
    fn observe(&mut self, reward: f64, decay: Option<f64>) -> Option<f64> {
        let decay = decay?;
        let b = self.value.unwrap_or(0.0);
        self.value = Some(decay * b + (1.0 - decay) * reward);
        Some(b)
    }
}

/// One outer iteration. The reader must equal `theta_0` on entry and equals
/// it again on return.
pub fn run_outer_iteration(
    qve: &mut Qve,
    reader: &mut dyn QaReader,
    data: &RlData<'_>,
    cfg: &TrainConfig,
    iteration: usize,
    baseline: &mut Baseline,
) -> Result<SelectionRound> {
    ensure_at_theta0(reader, &data.theta0)?;
    let mut rng = seed::rng(seed::derive_index(seed::derive(cfg.seed, "rl_iteration"), iteration as u64));
    let n = data.synthetic.len();
    let batch: Vec<usize> = index::sample(&mut rng, n, cfg.outer_batch.min(n)).into_vec();
    let traces: Vec<HeadTrace> = batch.iter().map(|&i| qve.trace(&data.features[i])).collect();
    let values: Vec<f64> = traces.iter().map(|t| t.value.prob).collect();
    let selection = sample_selection(&values, &mut rng);
    let log_prob = policy_log_prob(&values, &selection)?;

    let outcome = inner_reward(reader, data, &batch, &selection, cfg, &mut rng, false)?;
    let b = baseline.observe(outcome.reward, cfg.baseline_decay);
    let advantage = outcome.reward - b.unwrap_or(0.0);
    if advantage != 0.0 {
        let grad = qve_gradient(qve, &traces, &selection, advantage);
        qve.step(&grad, cfg.qve_lr);
    }
    ensure_at_theta0(reader, &data.theta0)?;
    Ok(SelectionRound {
        iteration,
        batch_ids: batch.iter().map(|&i| data.synthetic.examples()[i].example_id.clone()).collect(),
        values,
        selection,
        reward: outcome.reward,
        log_prob,
        baseline: b,
    })
}

/// Deterministic evaluation of an estimator for checkpoint selection: on a
/// fixed probe batch, keep items with value at least 0.5, train from
/// `theta_0` with a fixed inner-sampling stream, and measure the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub iteration: usize,
    pub reward: f64,
    pub qa_loss: Option<f64>,
}

fn probe_batch(cfg: &TrainConfig, n: usize) -> Vec<usize> {
    let mut rng = seed::rng_for(cfg.seed, "rl_probe_batch");
    let mut b = index::sample(&mut rng, n, cfg.outer_batch.min(n)).into_vec();
    b.sort_unstable();
    b
}

pub fn probe(qve: &Qve, reader: &mut dyn QaReader, data: &RlData<'_>, cfg: &TrainConfig, batch: &[usize], iteration: usize) -> Result<ProbeRecord> {
    let selection: Vec<u8> = batch.iter().map(|&i| u8::from(qve.value(&data.features[i]).prob >= 0.5)).collect();
    let mut rng = seed::rng_for(cfg.seed, "rl_probe_inner");
    let out = inner_reward(reader, data, batch, &selection, cfg, &mut rng, cfg.checkpoint_rule == CheckpointRule::LowestQaLoss)?;
    Ok(ProbeRecord {
        iteration,
        reward: out.reward,
        qa_loss: out.qa_loss,
    })
}

fn better(rule: CheckpointRule, candidate: &ProbeRecord, best: &ProbeRecord) -> bool {
    match rule {
        CheckpointRule::HighestReward => candidate.reward >= best.reward,
        CheckpointRule::LowestQaLoss => matches!((candidate.qa_loss, best.qa_loss), (Some(c), Some(b)) if c <= b),
        CheckpointRule::Last => true,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rounds: Vec<SelectionRound>,
    pub probes: Vec<ProbeRecord>,
    /// Iterations completed before the returned estimator was taken.
    pub selected_after: usize,
}

/// Persisted loop state for resuming.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    next_iteration: usize,
    qve: Qve,
    best: Qve,
    best_probe: Option<ProbeRecord>,
    selected_after: usize,
    baseline: Baseline,
    probes: Vec<ProbeRecord>,
}

/// On-disk training log: `rounds.jsonl` plus a periodic `state.json`.
#[derive(Debug, Clone)]
pub struct LogDir {
    pub dir: PathBuf,
}

impl LogDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn rounds_path(&self) -> PathBuf {
        self.dir.join("rounds.jsonl")
    }

    fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    fn load_state(&self) -> Result<Option<ResumeState>> {
        let path = self.state_path();
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::parse("rl state", e))
    }

    fn save_state(&self, state: &ResumeState) -> Result<()> {
        let path = self.state_path();
        let tmp = self.dir.join("state.json.tmp");
        let bytes = serde_json::to_vec(state).map_err(|e| Error::parse("rl state", e))?;
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Rounds with `iteration < keep`, in order; the file is rewritten to
    /// hold exactly those.
    fn truncate_rounds(&self, keep: usize) -> Result<Vec<SelectionRound>> {
        let path = self.rounds_path();
        let mut rounds = Vec::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                // A torn final line is dropped.
                let Ok(round) = serde_json::from_str::<SelectionRound>(&line) else { break };
                if round.iteration >= keep {
                    break;
                }
                rounds.push(round);
            }
        }
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for r in &rounds {
            writeln!(w, "{}", serde_json::to_string(r).map_err(|e| Error::parse("round", e))?).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(rounds)
    }

    pub fn read_rounds(path: &Path) -> Result<Vec<SelectionRound>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::parse("round", e)))
            .collect()
    }
}

/// Run `I_o` outer iterations and return the estimator picked by the
/// checkpoint rule together with the log. With `log_dir`, rounds are
/// appended as JSONL and an interrupted run resumes from its last saved
/// state, producing the same result as an uninterrupted one.
pub fn train_qve_rl(qve: Qve, reader: &mut dyn QaReader, data: &RlData<'_>, cfg: &TrainConfig, log_dir: Option<&LogDir>) -> Result<(Qve, TrainingLog)> {
    cfg.validate()?;
    let probe_ids = probe_batch(cfg, data.synthetic.len());
    let mut state = ResumeState {
        next_iteration: 0,
        best: qve.clone(),
        qve,
        best_probe: None,
        selected_after: 0,
        baseline: Baseline::default(),
        probes: Vec::new(),
    };
    let mut rounds = Vec::new();
    let mut writer = None;
    if let Some(log) = log_dir {
        fs::create_dir_all(&log.dir).map_err(|e| Error::io(&log.dir, e))?;
        if let Some(saved) = log.load_state()? {
            state = saved;
        }
        rounds = log.truncate_rounds(state.next_iteration)?;
        let path = log.rounds_path();
        let file = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writer = Some((BufWriter::new(file), path));
    }

    if cfg.outer_iterations > 0 && cfg.checkpoint_rule != CheckpointRule::Last && state.best_probe.is_none() {
        let p = probe(&state.qve, reader, data, cfg, &probe_ids, 0)?;
        state.probes.push(p);
        state.best_probe = Some(p);
    }

    for it in state.next_iteration..cfg.outer_iterations {
        let round = run_outer_iteration(&mut state.qve, reader, data, cfg, it, &mut state.baseline).map_err(|e| e.in_stage(&format!("rl iteration {it}")))?;
        if let Some((w, path)) = writer.as_mut() {
            let line = serde_json::to_string(&round).map_err(|e| Error::parse("round", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        rounds.push(round);
        let done = it + 1;
        match cfg.checkpoint_rule {
            CheckpointRule::Last => {
                state.best = state.qve.clone();
                state.selected_after = done;
            }
            rule => {
                if done % cfg.probe_every == 0 || done == cfg.outer_iterations {
                    let p = probe(&state.qve, reader, data, cfg, &probe_ids, done).map_err(|e| e.in_stage(&format!("rl probe {done}")))?;
                    state.probes.push(p);
                    if state.best_probe.is_none_or(|b| better(rule, &p, &b)) {
                        state.best_probe = Some(p);
                        state.best = state.qve.clone();
                        state.selected_after = done;
                    }
                }
            }
        }
        state.next_iteration = done;
        if let (Some(log), Some((w, path))) = (log_dir, writer.as_mut()) {
            if done % cfg.state_every == 0 || done == cfg.outer_iterations {
                w.flush().map_err(|e| Error::io(&*path, e))?;
                log.save_state(&state)?;
            }
        }
    }
    if let Some((mut w, path)) = writer {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let log = TrainingLog {
        rounds,
        probes: state.probes,
        selected_after: state.selected_after,
    };
    Ok((state.best, log))
}

/// Convenience wrapper: featurize, set `theta_0` to the reader's current
/// parameters, and train.
pub fn train_qve_rl_on(
    qve: Qve,
    encoder: &dyn Encoder,
    reader: &mut dyn QaReader,
    synthetic: &CorpusSplit,
    annotations: &CorpusSplit,
    cfg: &TrainConfig,
    log_dir: Option<&LogDir>,
) -> Result<(Qve, TrainingLog)> {
    let data = RlData::prepare(encoder, reader, synthetic, annotations, cfg.reward_mode)?;
    train_qve_rl(qve, reader, &data, cfg, log_dir)
}

/// Fresh per-iteration RNG, exposed for tests that replay an iteration.
pub fn iteration_rng(cfg: &TrainConfig, iteration: usize) -> SeedRng {
    seed::rng(seed::derive_index(seed::derive(cfg.seed, "rl_iteration"), iteration as u64))
}
