//! A miniature pretrain then finetune cycle followed by a controllability
//! evaluation. Far too short to learn much; it shows the plumbing.

use tempcondlm::dataset::{format_dataset, generate_records, parse_dataset, DatasetHeader, GenerationParams};
use tempcondlm::evaluation::{evaluate_checkpoint, MetricsReport};
use tempcondlm::model::{ModelConfig, SamplingParams};
use tempcondlm::training::{finetune, pretrain, FinetuneMode, Stage, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let header = DatasetHeader {
        generation: GenerationParams {
            n_clips: 32,
            heldout_clips: 4,
            clip_seconds: 2.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let g = &header.generation;
    let train = parse_dataset(&format_dataset(&header, &generate_records(g, &header.codec, 0, g.n_clips)?))?;
    let heldout = parse_dataset(&format_dataset(
        &header,
        &generate_records(g, &header.codec, g.n_clips as u64, g.heldout_clips)?,
    ))?;

    let model = ModelConfig {
        dim: 16,
        mlp_hidden: 32,
        max_frames: 128,
        ..ModelConfig::desk()
    };
    let cfg = TrainConfig {
        steps: 40,
        warmup_steps: 4,
        learning_rate: 2e-3,
        log_every: 10,
        verbose: true,
        model,
        ..Default::default()
    };
    let base = pretrain(&train, Some(&heldout), &cfg, None)?;
    let tuned = finetune(
        &base.checkpoint,
        &train,
        Some(&heldout),
        &TrainConfig {
            stage: Stage::Finetune,
            finetune_mode: FinetuneMode::JumpAdaptive,
            ..cfg
        },
        None,
    )?;
    println!("condition dropout hit {:.1}% of finetune clips", 100.0 * tuned.null_fraction());

    let params = SamplingParams::default();
    let report = evaluate_checkpoint(&tuned.checkpoint, &heldout.clips, &header.codec, &params, 0)?;
    println!("{}", MetricsReport::summary_header());
    println!("{}", report.summary_row("jump+adaptive"));
    Ok(())
}
