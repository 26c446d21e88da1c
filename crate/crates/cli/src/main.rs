use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tokgen_core::checkpoint::{load_checkpoint, save_checkpoint};
use tokgen_core::eval::{
    chance_alignment, emit_report, eval_alignment, eval_diversity, run_ablation, AblationPlan, Generator, DEFAULT_K,
};
use tokgen_core::gradcheck::{grad_check, tiny_config, DEFAULT_TOLERANCE};
use tokgen_core::synth::{
    generate_ambiguous_benchmark, generate_dataset, read_records, write_records, DEFAULT_BENCHMARK_SIZE,
};
use tokgen_core::trainer::{write_metrics, TrainConfig};
use tokgen_core::{Error as CoreError, PromptSpec, Trainer32};

#[derive(Parser)]
#[command(name = "tokgen", version, about = "Two-stage token grid generator: data, training, sampling, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Training configuration (JSON, TrainConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Fraction of records with class-word prompts.
        #[arg(long, default_value_t = 0.0)]
        ambiguous_fraction: f64,
    },
    /// Generate the ambiguous-prompt benchmark.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_BENCHMARK_SIZE)]
        n: usize,
    },
    /// Train a model and write its checkpoint to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Metrics log (JSON lines).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Decode one prompt, e.g. "warm stripes".
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Mean-mode oracle alignment over a dataset.
    EvalAlign {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Interpretation-cluster diversity on a benchmark.
    EvalDiversity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Train and evaluate all four variants per seed; --out is a directory.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Finite-difference gradient check in float64.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

/// Marks failures caused by bad input rather than by the run itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(common: &Common, fallback: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => fallback,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_trainer(path: &Path) -> Result<Trainer32> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n, ambiguous_fraction } => {
            let data = generate_dataset(n, common.seed.unwrap_or(0), ambiguous_fraction)?;
            write_records(&common.out, &data, false)?;
        }
        Command::Bench { common, n } => {
            let data = generate_ambiguous_benchmark(n, common.seed.unwrap_or(0))?;
            write_records(&common.out, &data, true)?;
        }
        Command::Train { common, data, metrics, steps } => {
            let mut cfg = load_config(&common, TrainConfig::default())?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let dataset = read_records(&data)?;
            let mut trainer = Trainer32::new(cfg)?;
            let log = trainer.run(&dataset)?;
            save_checkpoint(&common.out, &trainer)?;
            if let Some(m) = metrics {
                write_metrics(&m, &log)?;
            }
            if let Some(last) = log.last() {
                eprintln!("step {} L_total {:.6}", last.step, last.total);
            }
        }
        Command::Sample { common, checkpoint, prompt, temperature } => {
            let trainer = load_trainer(&checkpoint)?;
            let prompt = PromptSpec::parse(&prompt)?;
            let gen = Generator::new(&trainer.model, trainer.config.use_ambiguity);
            let (lr, hr) = gen.decode(&prompt, temperature, common.seed.unwrap_or(0))?;
            let score = tokgen_core::synth::oracle_score(&hr, &prompt);
            write_json(
                &common.out,
                &json!({
                    "prompt": prompt.text(),
                    "temperature": temperature,
                    "lr": lr.cells(),
                    "hr": hr.cells(),
                    "oracle_score": score,
                }),
            )?;
        }
        Command::EvalAlign { common, checkpoint, data, temperature } => {
            let trainer = load_trainer(&checkpoint)?;
            let dataset = read_records(&data)?;
            let seed = common.seed.unwrap_or(0);
            let gen = Generator::new(&trainer.model, trainer.config.use_ambiguity);
            let report = eval_alignment(gen, &dataset, temperature, seed)?;
            let prompts: Vec<PromptSpec> = dataset.iter().map(|e| e.prompt.clone()).collect();
            let chance = chance_alignment(&prompts, 64, seed);
            write_json(&common.out, &json!({ "alignment": report, "chance_alignment": chance }))?;
            println!("alignment {:.4} (chance {:.4})", report.mean, chance);
        }
        Command::EvalDiversity { common, checkpoint, bench, k } => {
            let trainer = load_trainer(&checkpoint)?;
            let benchmark = read_records(&bench)?;
            let gen = Generator::new(&trainer.model, trainer.config.use_ambiguity);
            let report = eval_diversity(gen, &benchmark, k, common.seed.unwrap_or(0))?;
            write_json(&common.out, &report)?;
            println!(
                "distinct {:.3} plausibility {:.3} (mean mode distinct {:.3})",
                report.sampled.mean_distinct, report.sampled.mean_plausibility, report.mean_mode.mean_distinct
            );
        }
        Command::Ablate { common, data, heldout, bench, seeds, k } => {
            if seeds == 0 {
                return Err(Usage("--seeds must be at least 1".into()).into());
            }
            let base = load_config(&common, TrainConfig::default())?;
            let train = read_records(&data)?;
            let held = read_records(&heldout)?;
            let benchmark = read_records(&bench)?;
            let first = common.seed.unwrap_or(base.seed);
            let plan = AblationPlan {
                base,
                train: &train,
                heldout: &held,
                benchmark: &benchmark,
                seeds: (first..first + seeds).collect(),
                k,
            };
            let result = run_ablation(&plan)?;
            fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            emit_report(&result, &common.out, "ablation")?;
            for row in &result.rows {
                println!("{:>10} alignment {:.4} ± {:.4}", row.variant, row.alignment_mean, row.alignment_std);
            }
        }
        Command::Gradcheck { common, tolerance } => {
            let cfg = load_config(&common, tiny_config())?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let batch = generate_dataset(cfg.batch_size, seed, 0.5)?;
            let report = grad_check(&cfg, &batch, tolerance, seed)?;
            write_json(&common.out, &report)?;
            for e in &report.entries {
                println!(
                    "{:<8} {:<16} rel {:.3e} tol {:.0e} {}",
                    e.loss.name(),
                    e.group,
                    e.max_rel_error,
                    e.tolerance,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            if !report.passed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some() || e.downcast_ref::<CoreError>().is_some_and(CoreError::is_validation)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
