//! Acceptance gates for the toolkit.
//!
//! Each gate prints exactly one `PASS`/`FAIL` line with its measurements and
//! wall-clock against its budget. A gate passes only if its check holds and
//! it finishes within budget. The process exits non-zero if any gate fails.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use qve_core::corpus::{load_corpus, subsample_annotations, AnswerSpan, Context, CorpusFormat, CorpusSplit, QaExample, SplitKind};
use qve_core::filters::{lm_filter, select_top_k, top_k_count, FilterMethod};
use qve_core::learners::finetune_reader;
use qve_core::metrics::{evaluate, load_predictions};
use qve_core::pipeline::{run_sandbox_study, SandboxStudy, SandboxStudyConfig};
use qve_core::qve::{logistic, ranking_pair_loss, train_binary_classifier, HeadDims, Optimizer, Qve, QveFeatures, SupervisedConfig, ValueHead, EPS};
use qve_core::reinforce::{policy_log_prob, run_outer_iteration, Baseline, RlData, TrainConfig};
use qve_core::sandbox::{estimate_policy_gradient, generate_sandbox, PolicySetup, SandboxConfig};
use qve_core::seed;

struct Outcome {
    pass: bool,
    detail: String,
}

struct Gate {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

const SANDBOX_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn gradient_oracle() -> Outcome {
    const SETUPS: u64 = 20;
    const DRAWS: usize = 100_000;
    let mut worst_rel = 0.0f64;
    let mut worst_paths = 0.0f64;
    for i in 0..SETUPS {
        let mut rng = seed::rng(seed::derive_index(seed::derive(11, "gradient_oracle"), i));
        let params: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(0.5..1.5)).collect()).collect();
        // Additive per-item effects keep every gradient coordinate away from
        // zero; the interaction term makes the table non-additive.
        let effects: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..1.5)).collect();
        let reward_table: Vec<f64> = (0..8usize)
            .map(|mask| {
                let additive: f64 = (0..3).map(|l| effects[l] * (((mask >> l) & 1) as f64 - 0.5)).sum();
                additive + 0.1 * rng.random_range(-1.0..1.0)
            })
            .collect();
        let setup = PolicySetup {
            params,
            features,
            reward_table,
        };
        let g = estimate_policy_gradient(&setup, DRAWS, &mut rng).expect("valid setup");
        for k in 0..2 {
            worst_rel = worst_rel.max((g.estimate_mean[k] - g.exact[k]).abs() / g.exact[k].abs());
            worst_paths = worst_paths.max((g.exact[k] - g.direct[k]).abs());
        }
    }
    Outcome {
        pass: worst_rel <= 0.02 && worst_paths <= 1e-10,
        detail: format!("{SETUPS} setups x {DRAWS} draws: max relative error {worst_rel:.4} (limit 0.02), exact-path disagreement {worst_paths:.1e} (limit 1e-10)"),
    }
}

fn policy_normalization() -> Outcome {
    let mut rng = seed::rng_for(12, "policy_normalization");
    let mut worst = 0.0f64;
    for b in 1..=8usize {
        for _ in 0..20 {
            let values: Vec<f64> = (0..b).map(|_| logistic(rng.random_range(-6.0..6.0)).clamp(EPS, 1.0 - EPS)).collect();
            let total: f64 = (0..1usize << b)
                .map(|mask| {
                    let s: Vec<u8> = (0..b).map(|l| ((mask >> l) & 1) as u8).collect();
                    policy_log_prob(&values, &s).expect("valid selection").exp()
                })
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("B_o in 1..=8, 20 value draws each: max |sum - 1| = {worst:.1e} (limit 1e-12)"),
    }
}

fn reset_contract() -> Outcome {
    let study = SandboxStudyConfig::default();
    let exp = &study.experiment;
    let sb = generate_sandbox(&SandboxConfig { seed: 0, ..study.sandbox }).expect("sandbox");
    let backend = exp.backend.build().expect("backend");
    let mut reader = backend.reader(1);
    finetune_reader(reader.as_mut(), &sb.source, &exp.finetune.source, 2).expect("source finetune");
    let ann = subsample_annotations(&sb.target_train, exp.n_annotations, 3).expect("annotations");
    finetune_reader(reader.as_mut(), &ann, &exp.finetune.target_annotated, 4).expect("annotation finetune");
    let cfg = TrainConfig {
        seed: 5,
        ..exp.train_cfg.clone()
    };
    let encoder = backend.encoder();
    let data = RlData::prepare(encoder.as_ref(), reader.as_ref(), &sb.target_synthetic, &ann, cfg.reward_mode).expect("rl data");
    let theta0 = data.theta0.address();
    let mut qve = Qve::new(ValueHead::random(HeadDims::for_input(encoder.dim()), 6), cfg.optimizer);
    let mut baseline = Baseline::default();
    let (mut matched, mut moved) = (0, 0);
    for it in 0..50 {
        let round = run_outer_iteration(&mut qve, reader.as_mut(), &data, &cfg, it, &mut baseline).expect("outer iteration");
        if round.reward != 0.0 {
            moved += 1;
        }
        if reader.snapshot("after").address() == theta0 {
            matched += 1;
        }
    }
    // A nonzero reward proves the inner loop moved the reader before the reset.
    Outcome {
        pass: matched == 50 && moved > 0,
        detail: format!("{matched}/50 post-iteration addresses equal theta_0; {moved} iterations moved the reader before reset"),
    }
}

fn studies() -> Vec<SandboxStudy> {
    let cfg = SandboxStudyConfig::default();
    SANDBOX_SEEDS.iter().map(|&s| run_sandbox_study(&cfg, s).expect("sandbox study")).collect()
}

fn auc(s: &SandboxStudy, m: FilterMethod) -> f64 {
    s.method(m).and_then(|o| o.auc).expect("scored method")
}

fn sandbox_separation() -> Outcome {
    let studies = studies();
    let rl: Vec<f64> = studies.iter().map(|s| auc(s, FilterMethod::QveRl)).collect();
    let wins = studies
        .iter()
        .filter(|s| [FilterMethod::QveBinary, FilterMethod::QveRank, FilterMethod::Lm].iter().all(|&m| auc(s, FilterMethod::QveRl) > auc(s, m)))
        .count();
    let per_seed: Vec<String> = studies
        .iter()
        .map(|s| {
            format!(
                "rl {:.3}/bin {:.3}/rank {:.3}/lm {:.3}",
                auc(s, FilterMethod::QveRl),
                auc(s, FilterMethod::QveBinary),
                auc(s, FilterMethod::QveRank),
                auc(s, FilterMethod::Lm)
            )
        })
        .collect();
    let med = median(rl);
    Outcome {
        pass: med >= 0.85 && wins >= 4,
        detail: format!("median QVE-RL AUC {med:.3} (limit 0.85), beats all baselines in {wins}/5 seeds (need 4) [{}]", per_seed.join("; ")),
    }
}

fn sandbox_gain() -> Outcome {
    let studies = studies();
    let gains: Vec<f64> = studies
        .iter()
        .map(|s| s.method(FilterMethod::QveRl).expect("rl row").em - s.method(FilterMethod::None).expect("no-filter row").em)
        .collect();
    let listed: Vec<String> = gains.iter().map(|g| format!("{g:+.2}")).collect();
    let med = median(gains);
    Outcome {
        pass: med >= 2.0,
        detail: format!("median row-8 minus row-3 EM {med:+.2} (limit +2.00) per seed [{}]", listed.join(", ")),
    }
}

/// `tanh(W x + b)` written out with explicit row/column loops.
fn layer(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len());
    for (row, bias) in w.iter().zip(b) {
        let mut acc = *bias;
        for (j, xj) in x.iter().enumerate() {
            acc += row[j] * xj;
        }
        out.push(acc.tanh());
    }
    out
}

fn head_arithmetic() -> Outcome {
    let dims = HeadDims { h: 4, h1: 4, h2: 2, h3: 4 };
    let mut rng = seed::rng_for(13, "head_arithmetic");
    let mut mat = |rows: usize, cols: usize| -> Vec<Vec<f64>> { (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w1 = mat(4, 4);
        let b1 = mat(1, 4).remove(0);
        let w2 = mat(2, 4);
        let b2 = mat(1, 2).remove(0);
        let w3 = mat(4, 4);
        let b3 = mat(1, 4).remove(0);
        let w4 = mat(1, 4).remove(0);
        let b4 = mat(1, 1)[0][0];
        let h = mat(1, 4).remove(0);
        let p = mat(1, 2).remove(0);
        let (p_s, p_e) = ((p[0] + 1.0) / 2.0, (p[1] + 1.0) / 2.0);

        let flat = |m: &[Vec<f64>]| m.concat();
        let head = ValueHead::from_parts(dims, &flat(&w1), &b1, &flat(&w2), &b2, &flat(&w3), &b3, &w4, b4).expect("tiny head");
        let got = head.forward(&h, p_s, p_e).expect("forward");

        let a1 = layer(&w1, &b1, &h);
        let mut z = layer(&w2, &b2, &a1);
        z.extend([p_s, p_e]);
        let a3 = layer(&w3, &b3, &z);
        let mut raw = b4;
        for (w, a) in w4.iter().zip(&a3) {
            raw += w * a;
        }
        let prob = (1.0 / (1.0 + (-raw).exp())).clamp(1e-6, 1.0 - 1e-6);
        worst = worst.max((got.raw - raw).abs()).max((got.prob - prob).abs());
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("100 random tiny heads (H=4, H1=H3=4, H2=2): max deviation {worst:.1e} (limit 1e-10)"),
    }
}

fn fraction(s: &str) -> f64 {
    match s.split_once('/') {
        Some((n, d)) => n.parse::<f64>().unwrap() / d.parse::<f64>().unwrap(),
        None => s.parse().unwrap(),
    }
}

fn metrics_golden() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let gold = load_corpus(&dir.join("metrics_gold.json"), CorpusFormat::SquadJson, SplitKind::Eval).expect("gold file");
    let preds = load_predictions(&dir.join("metrics_predictions.json")).expect("predictions");
    let expected: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics_expected.json")).unwrap()).unwrap();
    let result = evaluate(&preds, &gold);
    let by_id: HashMap<&str, (u8, f64)> = result.per_example.iter().map(|s| (s.example_id.as_str(), (s.em, s.f1))).collect();
    let mut mismatches = Vec::new();
    for e in expected["examples"].as_array().unwrap() {
        let id = e["id"].as_str().unwrap();
        let em = e["em"].as_u64().unwrap() as u8;
        let f1 = fraction(e["f1"].as_str().unwrap());
        match by_id.get(id) {
            Some(&(got_em, got_f1)) if got_em == em && (got_f1 - f1).abs() <= 1e-12 => {}
            other => mismatches.push(format!("{id}: got {other:?}, want ({em}, {f1})")),
        }
    }
    let em = 100.0 * fraction(expected["em"].as_str().unwrap());
    let f1 = 100.0 * fraction(expected["f1"].as_str().unwrap());
    let totals_ok = (result.em - em).abs() <= 1e-9 && (result.f1 - f1).abs() <= 1e-9;
    Outcome {
        pass: mismatches.is_empty() && totals_ok && result.per_example.len() == 10,
        detail: format!(
            "{} examples, EM {:.2} (want {em:.2}), F1 {:.2} (want {f1:.2}){}",
            result.per_example.len(),
            result.em,
            result.f1,
            if mismatches.is_empty() { String::new() } else { format!("; mismatches: {}", mismatches.join(" | ")) }
        ),
    }
}

fn synthetic_corpus(n: usize, rng: &mut impl Rng) -> CorpusSplit {
    let n_ctx = n.div_ceil(40);
    let contexts: Vec<Context> = (0..n_ctx).map(|c| Context::new(format!("c{c}"), format!("Passage {c} mentions Alpha and Beta."))).collect();
    let examples = (0..n)
        .map(|i| {
            let answer = AnswerSpan::find(&contexts[i % n_ctx].text, "Alpha").expect("answer in context");
            QaExample::synthetic(format!("s{i}"), format!("c{}", i % n_ctx), format!("Question {i} ?"), answer, -rng.random_range(1.0..30.0))
        })
        .collect();
    CorpusSplit::new(SplitKind::TargetSynthetic, contexts, examples).expect("valid corpus")
}

fn filter_laws() -> Outcome {
    let mut rng = seed::rng_for(14, "filter_laws");
    let mut violations = 0;
    let mut cases = 0;
    for _ in 0..300 {
        let n = rng.random_range(1..200usize);
        let k = rng.random_range(1..=100u32);
        // Few distinct scores force many ties.
        let scores: Vec<(String, f64)> = (0..n).map(|i| (format!("e{i}"), f64::from(rng.random_range(0..5u8)))).collect();
        let report = select_top_k(&scores, f64::from(k)).expect("valid k");
        let want_count = n * k as usize / 100;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1).then(a.cmp(&b)));
        let mut keep: Vec<usize> = order[..want_count].to_vec();
        keep.sort_unstable();
        let want_ids: Vec<String> = keep.iter().map(|&i| scores[i].0.clone()).collect();
        cases += 1;
        if report.kept_count != want_count || report.kept_ids != want_ids {
            violations += 1;
        }
    }
    const NEWSQA_INPUT: usize = 74_160;
    const NEWSQA_KEPT: usize = 44_485;
    let corpus = synthetic_corpus(NEWSQA_INPUT, &mut rng);
    let lm = lm_filter(&corpus, 60.0).expect("lm filter");
    let paper_ratio = NEWSQA_KEPT as f64 / NEWSQA_INPUT as f64;
    let ratio = lm.kept_count as f64 / lm.input_count as f64;
    let rel = (ratio - paper_ratio).abs() / paper_ratio;
    let count_ok = lm.kept_count == top_k_count(NEWSQA_INPUT, 60.0);
    Outcome {
        pass: violations == 0 && rel <= 5e-4 && count_ok,
        detail: format!(
            "{cases} random (N, K) cases, {violations} count/tie-break violations; K=60 on {NEWSQA_INPUT}: kept {} (ratio {ratio:.6} vs {paper_ratio:.6}, relative gap {:.4}%, limit 0.05%)",
            lm.kept_count,
            rel * 100.0
        ),
    }
}

fn ranking_and_classifier() -> Outcome {
    let closed = [(0.5, 0.5, 0.15), (0.2, 0.9, 0.0), (0.9, 0.8, 0.25)];
    let loss_err = closed.iter().map(|&(s, h, want)| (ranking_pair_loss(s, h, 0.15) - want).abs()).fold(0.0, f64::max);
    let dims = HeadDims::for_input(16);
    let mut ordered = 0;
    for s in 0..10u64 {
        let mut rng = seed::rng(seed::derive_index(seed::derive(15, "two_example_classifier"), s));
        let mut feat = || QveFeatures {
            h: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            p_s: rng.random_range(0.0..1.0),
            p_e: rng.random_range(0.0..1.0),
        };
        let (pos, neg) = (feat(), feat());
        let mut qve = Qve::new(ValueHead::random(dims, s), Optimizer::Adam);
        let cfg = SupervisedConfig {
            epochs: 50,
            batch_size: 2,
            lr: 1e-3,
            seed: s,
        };
        train_binary_classifier(&mut qve, std::slice::from_ref(&pos), std::slice::from_ref(&neg), &cfg).expect("training");
        if qve.value(&pos).prob > qve.value(&neg).prob {
            ordered += 1;
        }
    }
    Outcome {
        pass: loss_err <= 1e-12 && ordered == 10,
        detail: format!("pair losses 0.15/0/0.25 max error {loss_err:.1e}; 2-example classifier ordered in {ordered}/10 seeds"),
    }
}

fn main() {
    let gates = [
        Gate {
            name: "policy-gradient oracle",
            budget: Duration::from_secs(60),
            run: gradient_oracle,
        },
        Gate {
            name: "policy normalization",
            budget: Duration::from_secs(5),
            run: policy_normalization,
        },
        Gate {
            name: "reset contract",
            budget: Duration::from_secs(120),
            run: reset_contract,
        },
        Gate {
            name: "sandbox separation",
            budget: Duration::from_secs(15 * 60),
            run: sandbox_separation,
        },
        Gate {
            name: "end-to-end sandbox gain",
            budget: Duration::from_secs(10 * 60),
            run: sandbox_gain,
        },
        Gate {
            name: "value head arithmetic",
            budget: Duration::from_secs(5),
            run: head_arithmetic,
        },
        Gate {
            name: "metrics golden file",
            budget: Duration::from_secs(1),
            run: metrics_golden,
        },
        Gate {
            name: "filter laws",
            budget: Duration::from_secs(1),
            run: filter_laws,
        },
        Gate {
            name: "ranking and classifier trainers",
            budget: Duration::from_secs(30),
            run: ranking_and_classifier,
        },
    ];
    let mut failed = 0;
    for gate in &gates {
        let start = Instant::now();
        let outcome = (gate.run)();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= gate.budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {}: {} [{:.2}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            gate.name,
            outcome.detail,
            elapsed.as_secs_f64(),
            gate.budget.as_secs()
        );
    }
    println!("acceptance: {}/{} gates passed", gates.len() - failed, gates.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
