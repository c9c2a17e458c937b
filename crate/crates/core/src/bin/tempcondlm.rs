use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tempcondlm::cli::{
    cmd_eval, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_sample, deterministic_requested, parse_overrides,
    resolve_settings, EvalSettings, SampleSettings,
};
use tempcondlm::conditions::ConditionKind;
use tempcondlm::dataset::DatasetHeader;
use tempcondlm::model::Checkpoint;
use tempcondlm::evaluation::MetricsReport;
use tempcondlm::training::{FinetuneMode, TrainConfig, TrainReport};

#[derive(Parser)]
#[command(name = "tempcondlm", version, about = "Chord- and rhythm-conditioned token LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every parameter with genre-only conditioning.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.jsonl and heldout.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jump-finetune a pretrained checkpoint on the temporal conditions.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Conditions to drop, e.g. `c_pre,c_sum` or `r`.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// baseline, jump, jump+adaptive or jump+full.
        #[arg(long)]
        finetune_mode: Option<String>,
    },
    /// Generate one clip from a chord file, tempo and genre.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        chords: PathBuf,
        #[arg(long)]
        bpm: Option<f64>,
        #[arg(long)]
        genre: Option<String>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample every clip of a dataset and score controllability.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file, or a directory holding heldout.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn overrides(common: &Common, seed_key: &str, extra: Vec<(String, String)>) -> Result<Vec<(String, String)>> {
    let mut pairs = parse_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        pairs.push((seed_key.to_string(), seed.to_string()));
    }
    pairs.extend(extra);
    Ok(pairs)
}

fn train_config(common: &Common, base: TrainConfig, extra: Vec<(String, String)>) -> Result<TrainConfig> {
    let pairs = overrides(common, "seed", extra)?;
    Ok(resolve_settings(&base, common.config.as_deref(), &pairs)?)
}

fn print_training(report: &TrainReport, out: &Path) {
    if let Some(last) = report.metrics.last() {
        println!("{last}");
    }
    println!("checkpoint {}", out.join(format!("ckpt-{}", report.checkpoint.step)).display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let pairs = overrides(&common, "generation.seed", Vec::new())?;
            let header = resolve_settings(&DatasetHeader::default(), common.config.as_deref(), &pairs)?;
            cmd_gen_data(&header, &out).with_context(|| format!("generating into {}", out.display()))?;
            println!(
                "wrote {} training and {} held-out clips to {}",
                header.generation.n_clips,
                header.generation.heldout_clips,
                out.display()
            );
        }
        Command::Pretrain { common, data, out } => {
            let cfg = train_config(&common, TrainConfig::default(), vec![("stage".into(), "pretrain".into())])?;
            let report = cmd_pretrain(&cfg, &data, &out)?;
            print_training(&report, &out);
        }
        Command::Finetune {
            common,
            base,
            data,
            out,
            ablate,
            finetune_mode,
        } => {
            let mut extra = vec![("stage".to_string(), "finetune".to_string())];
            if !ablate.is_empty() {
                for a in &ablate {
                    ConditionKind::parse(a).with_context(|| format!("unknown condition {a:?}"))?;
                }
                extra.push(("condition_ablation".into(), ablate.join(",")));
            }
            if let Some(mode) = finetune_mode {
                FinetuneMode::parse(&mode).with_context(|| format!("unknown finetune mode {mode:?}"))?;
                extra.push(("finetune_mode".into(), mode));
            }
            let base_ckpt = Checkpoint::load(&base)?;
            let defaults = TrainConfig {
                model: base_ckpt.config,
                ..TrainConfig::default()
            };
            let cfg = train_config(&common, defaults, extra)?;
            let report = cmd_finetune(&cfg, &base, &data, &out)?;
            print_training(&report, &out);
        }
        Command::Sample {
            common,
            ckpt,
            chords,
            bpm,
            genre,
            gamma,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(bpm) = bpm {
                extra.push(("bpm".to_string(), bpm.to_string()));
            }
            if let Some(genre) = genre {
                extra.push(("genre".to_string(), genre));
            }
            if let Some(gamma) = gamma {
                extra.push(("gamma".to_string(), gamma.to_string()));
            }
            let pairs = overrides(&common, "seed", extra)?;
            let settings = resolve_settings(&SampleSettings::default(), common.config.as_deref(), &pairs)?;
            let summary = cmd_sample(&ckpt, &chords, &settings, &out)?;
            print!("{}", summary.to_text(&settings));
        }
        Command::Eval {
            common,
            ckpt,
            data,
            gamma,
            out,
        } => {
            let extra = gamma.map(|g| ("gamma".to_string(), g.to_string())).into_iter().collect();
            let pairs = overrides(&common, "seed", extra)?;
            let settings = resolve_settings(&EvalSettings::default(), common.config.as_deref(), &pairs)?;
            let report = cmd_eval(&ckpt, &data, &settings, &out)?;
            let label = ckpt.file_name().map_or("model".into(), |n| n.to_string_lossy().into_owned());
            println!("{}", MetricsReport::summary_header());
            println!("{}", report.summary_row(&label));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if deterministic_requested() {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring the single-threaded pool")
            .and_then(|_| run(cli))
    } else {
        run(cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
