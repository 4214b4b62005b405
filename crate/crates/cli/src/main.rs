use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use log::info;

use qve_core::filters::FilterMethod;
use qve_core::pipeline::{
    load_records, report, run_experiment, run_sandbox_study, select_only, sweep, ExperimentConfig, ExperimentData, SandboxStudy, SandboxStudyConfig,
    SweepAxis,
};
use qve_core::sandbox::{generate_sandbox, SandboxConfig};

#[derive(Debug, Parser)]
#[command(name = "qve", version, about = "Score and select synthetic QA data by estimated question value")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment for every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Vary annotation budget or K over a list of values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `n` (annotation budget) or `k` (percent kept).
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Tabulate finished runs (run directories or record files).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Select synthetic data with one method and write the kept corpus.
    Filter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: FilterMethod,
        #[arg(long, default_value_t = 60.0)]
        k: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `filtered.json` and `filter_report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the REINFORCE estimator; resumes from the run's training log.
    TrainRl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    #[command(subcommand)]
    Sandbox(SandboxCommand),
}

#[derive(Debug, Subcommand)]
enum SandboxCommand {
    /// Write a planted-noise sandbox corpus with a labels sidecar.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Mismatch and trivial rates.
        #[arg(long, value_parser = parse_noise, default_value = "0.3,0.2")]
        noise: (f64, f64),
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Target training passages.
        #[arg(long)]
        contexts: Option<usize>,
    },
    /// Compare every selection method on fresh sandboxes.
    Study {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// TOML overrides for the study settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-seed outcomes as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_noise(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated rates")?;
    let rate = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    Ok((rate(a)?, rate(b)?))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let records = run_experiment(&cfg)?;
            print!("{}", report(&records)?.to_markdown());
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load_config(&config)?;
            let outcome = sweep(&cfg, axis, &values)?;
            print!("{}", outcome.table.to_markdown());
            for f in &outcome.failures {
                eprintln!("{}={} failed: {}", axis.as_str(), f.value, f.error);
            }
            if outcome.records.is_empty() {
                bail!("every sweep point failed");
            }
        }
        Command::Report { runs, csv } => {
            let table = report(&load_records(&runs)?)?;
            print!("{}", table.to_markdown());
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Filter {
            config,
            method,
            k,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig {
                method,
                k_percent: k,
                ..load_config(&config)?
            };
            let data = ExperimentData::load(&cfg)?;
            let (dir, filter) = select_only(&cfg, &data, seed)?;
            println!("{}: kept {} of {} ({})", filter.method, filter.kept_count, filter.input_count, dir.root.display());
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                std::fs::copy(dir.path("corpora", "selected.json"), out.join("filtered.json"))?;
                filter.write_json(&out.join("filter_report.json"))?;
            }
        }
        Command::TrainRl { config, run_id, seed } => {
            let cfg = ExperimentConfig {
                method: FilterMethod::QveRl,
                run_id: Some(run_id),
                ..load_config(&config)?
            };
            let data = ExperimentData::load(&cfg)?;
            let (dir, filter) = select_only(&cfg, &data, seed)?;
            println!("estimator at {}; kept {} of {}", dir.path("qve", "estimator.json").display(), filter.kept_count, filter.input_count);
        }
        Command::Sandbox(SandboxCommand::Generate { out, noise, seed, contexts }) => {
            let defaults = SandboxConfig::default();
            let sandbox = generate_sandbox(&SandboxConfig {
                n_contexts: contexts.unwrap_or(defaults.n_contexts),
                noise,
                seed,
                ..defaults
            })?;
            sandbox.write(&out)?;
            println!("wrote {} synthetic examples to {}", sandbox.target_synthetic.len(), out.display());
        }
        Command::Sandbox(SandboxCommand::Study { seeds, config, out }) => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    SandboxStudyConfig::with_overrides(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => SandboxStudyConfig::default(),
            };
            let mut studies = Vec::new();
            println!("| seed | method | AUC | kept | kept clean | EM |\n|---|---|---|---|---|---|");
            for seed in seeds {
                info!("sandbox study seed {seed}");
                let study = run_sandbox_study(&cfg, seed)?;
                for m in &study.methods {
                    let auc = m.auc.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
                    println!("| {seed} | {} | {auc} | {} | {} | {:.2} |", m.method, m.kept, m.kept_clean, m.em);
                }
                studies.push(study);
            }
            if let Some(out) = out {
                write_json(&out, &studies)?;
            }
            summarize(&studies);
        }
    }
    Ok(())
}

fn summarize(studies: &[SandboxStudy]) {
    let auc = |s: &SandboxStudy, m| s.method(m).and_then(|o| o.auc).unwrap_or(f64::NAN);
    let wins = studies
        .iter()
        .filter(|s| {
            let rl = auc(s, FilterMethod::QveRl);
            [FilterMethod::QveBinary, FilterMethod::QveRank, FilterMethod::Lm].iter().all(|&m| rl > auc(s, m))
        })
        .count();
    println!("QVE-RL beats binary, ranking and LM AUC in {wins}/{} seeds", studies.len());
}
