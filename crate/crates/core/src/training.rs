//! Pretraining on genre-only conditions and jump finetuning with temporal
//! conditions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::conditions::{ConditionBundle, ConditionKind};
use crate::dataset::{Clip, Dataset};
use crate::evaluation::{evaluate_run, EvalError};
use crate::model::{
    condition_dropout, freeze_mask_for_jump_finetune, write_atomic, Checkpoint, FreezeMask, InAttention, Logits, Model,
    ModelConfig, ModelError, OptimizerState, ParamLayout, SamplingParams, Workspace,
};
use crate::settings;
use crate::tokens::DelayedGrid;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no clips")]
    DatasetEmpty,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Which finetuning variant to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// The pretrained model as is, with gates off and no update steps.
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "jump")]
    Jump,
    #[default]
    #[serde(rename = "jump+adaptive")]
    JumpAdaptive,
    #[serde(rename = "jump+full")]
    JumpFull,
}

impl FinetuneMode {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim() {
            "baseline" => Some(FinetuneMode::Baseline),
            "jump" => Some(FinetuneMode::Jump),
            "jump+adaptive" | "adaptive" => Some(FinetuneMode::JumpAdaptive),
            "jump+full" | "full" => Some(FinetuneMode::JumpFull),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Baseline => "baseline",
            FinetuneMode::Jump => "jump",
            FinetuneMode::JumpAdaptive => "jump+adaptive",
            FinetuneMode::JumpFull => "jump+full",
        }
    }

    pub fn in_attention(self) -> InAttention {
        match self {
            FinetuneMode::Baseline | FinetuneMode::Jump => InAttention::Off,
            FinetuneMode::JumpAdaptive => InAttention::Adaptive,
            FinetuneMode::JumpFull => InAttention::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub dropout_p: f64,
    pub gamma_eval: f64,
    pub seed: u64,
    pub condition_ablation: Vec<ConditionKind>,
    pub finetune_mode: FinetuneMode,
    pub log_every: u64,
    /// Held-out loss every this many steps; `0` only at the end.
    pub eval_every: u64,
    /// Held-out clips scored for loss.
    pub eval_clips: usize,
    /// Held-out clips sampled and scored for controllability at the end.
    pub eval_samples: usize,
    /// Intermediate checkpoints; `0` writes only the final one.
    pub checkpoint_every: u64,
    pub verbose: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 5000,
            batch_size: 4,
            learning_rate: 3e-4,
            warmup_steps: 500,
            grad_clip: 1.0,
            dropout_p: 0.5,
            gamma_eval: 3.0,
            seed: 0,
            condition_ablation: Vec::new(),
            finetune_mode: FinetuneMode::JumpAdaptive,
            log_every: 50,
            eval_every: 1000,
            eval_clips: 32,
            eval_samples: 0,
            checkpoint_every: 0,
            verbose: false,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        settings::to_text(self)
    }
}

/// Targets that are not PAD in a delayed grid.
pub fn target_count(grid: &DelayedGrid) -> usize {
    let t = grid.frames();
    (0..grid.codebooks()).map(|k| t.saturating_sub(k)).sum()
}

/// Mean cross-entropy over non-PAD targets.
pub fn loss(logits: &Logits<f32>, targets: &DelayedGrid) -> Result<f64, TrainError> {
    if logits.frames != targets.frames()
        || logits.codebooks != targets.codebooks()
        || logits.classes != targets.codebook_size() as usize + 1
    {
        return Err(TrainError::ShapeMismatch(format!(
            "logits {}x{}x{} for targets T={} K={} N={}",
            logits.frames,
            logits.codebooks,
            logits.classes,
            targets.frames(),
            targets.codebooks(),
            targets.codebook_size()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in 0..logits.frames {
        for k in 0..logits.codebooks {
            if targets.is_pad(t, k) {
                continue;
            }
            let row = logits.at(t, k);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            total += lse - row[targets.get(t, k) as usize] as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Adam over the trainable ranges of a flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimizerState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// One update of the parameters inside `mask`; everything else is left
    /// untouched.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], mask: &FreezeMask, layout: &ParamLayout, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for range in mask.trainable_ranges(layout) {
            for i in range {
                let g = grads[i];
                let m = &mut self.state.m[i];
                let v = &mut self.state.v[i];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                params[i] -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Learning rate after `step` completed steps under linear warmup.
pub fn scheduled_lr(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// Outcome of a training stage.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    /// Training clips whose conditions were dropped to the null bundle.
    pub null_clips: u64,
    pub total_clips: u64,
    /// The records written to `metrics.jsonl`.
    pub metrics: Vec<serde_json::Value>,
}

impl TrainReport {
    pub fn null_fraction(&self) -> f64 {
        if self.total_clips == 0 {
            0.0
        } else {
            self.null_clips as f64 / self.total_clips as f64
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn check_dataset(model: &ModelConfig, data: &Dataset) -> Result<(), TrainError> {
    let codec = &data.header.codec;
    if codec.codebooks != model.codebooks || codec.codebook_size != model.codebook_size {
        return Err(TrainError::ConfigMismatch(format!(
            "dataset codec K={} N={} but model K={} N={}",
            codec.codebooks, codec.codebook_size, model.codebooks, model.codebook_size
        )));
    }
    if (codec.frame_rate - model.frame_rate).abs() > 1e-9
        || (data.header.generation.prepend_rate - model.prepend_rate).abs() > 1e-9
    {
        return Err(TrainError::ConfigMismatch("frame rates differ between dataset and model".into()));
    }
    Ok(())
}

/// Mean held-out cross-entropy under the stage's conditioning.
pub fn heldout_loss(
    model: &Model<f32>,
    clips: &[Clip],
    bundle_of: &dyn Fn(&Clip) -> ConditionBundle,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        let logits = model.forward(&clip.delayed, &bundle_of(clip))?;
        let n = target_count(&clip.delayed);
        total += loss(&logits, &clip.delayed)? * n as f64;
        count += n;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

struct Stagework<'a> {
    cfg: &'a TrainConfig,
    mask: FreezeMask,
    bundle_of: &'a dyn Fn(&Clip) -> ConditionBundle,
    train: &'a [Clip],
    heldout: &'a [Clip],
    ablation: Vec<ConditionKind>,
    run_dir: Option<&'a Path>,
    spec: &'a crate::toycodec::ToyCodecSpec,
}

fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    Ok(ckpt.save(&dir.join(format!("ckpt-{}", ckpt.step)))?)
}

fn run_stage(model: &mut Model<f32>, work: Stagework<'_>) -> Result<TrainReport, TrainError> {
    let cfg = work.cfg;
    if work.train.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    if let Some(dir) = work.run_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_atomic(&dir.join("config"), cfg.to_text().as_bytes()).map_err(io_err(dir))?;
    }
    let mut metrics_text = String::new();
    let mut metrics = Vec::new();
    let mut emit = |record: serde_json::Value, text: &mut String| -> Result<(), TrainError> {
        text.push_str(&record.to_string());
        text.push('\n');
        metrics.push(record);
        if let Some(dir) = work.run_dir {
            let path = dir.join("metrics.jsonl");
            write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        }
        Ok(())
    };

    let n_params = model.params().len();
    let mut adam = Adam::new(n_params);
    let mut grads = vec![0.0f32; n_params];
    let mut ws = Workspace::default();
    let layout = model.layout().clone();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let (mut null_clips, mut total_clips) = (0u64, 0u64);
    let mut loss_curve = Vec::new();
    let (mut window_loss, mut window_steps) = (0.0f64, 0u64);
    let (mut eval_loss, mut eval_steps) = (0.0f64, 0u64);
    let heldout_eval = &work.heldout[..cfg.eval_clips.min(work.heldout.len())];

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..work.train.len()).collect();
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            batch.push(&work.train[order[cursor]]);
            cursor += 1;
        }
        let targets: usize = batch.iter().map(|c| target_count(&c.delayed)).sum();
        let scale = 1.0 / targets.max(1) as f32;
        grads.fill(0.0);
        let mut step_loss = 0.0;
        for clip in batch {
            let bundle = condition_dropout(&(work.bundle_of)(clip), cfg.dropout_p, &mut drop_rng);
            total_clips += 1;
            if bundle.is_null() {
                null_clips += 1;
            }
            let (sum, _) = model.accumulate_gradients(&clip.delayed, &bundle, scale, &mut grads, &work.mask, &mut ws)?;
            step_loss += sum;
        }
        step_loss /= targets.max(1) as f64;

        if cfg.grad_clip > 0.0 {
            let norm = work
                .mask
                .trainable_ranges(&layout)
                .flat_map(|r| grads[r].iter())
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = scheduled_lr(cfg, step);
        adam.step(model.params_mut(), &grads, &work.mask, &layout, lr);

        window_loss += step_loss;
        window_steps += 1;
        eval_loss += step_loss;
        eval_steps += 1;
        let done = step + 1;
        if done % cfg.log_every.max(1) == 0 || done == cfg.steps {
            let mean = window_loss / window_steps as f64;
            loss_curve.push((done, mean));
            if cfg.verbose {
                eprintln!("step {done:>6}  loss {mean:.4}  lr {lr:.2e}");
            }
            window_loss = 0.0;
            window_steps = 0;
        }
        let eval_now = cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps;
        if eval_now {
            let record = json!({
                "step": done,
                "train_loss": eval_loss / eval_steps as f64,
                "heldout_loss": heldout_loss(model, heldout_eval, work.bundle_of)?,
                "null_fraction": null_clips as f64 / total_clips.max(1) as f64,
            });
            emit(record, &mut metrics_text)?;
            eval_loss = 0.0;
            eval_steps = 0;
        }
        if let Some(dir) = work.run_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
                let mut ckpt = Checkpoint::from_model(model, done);
                ckpt.ablation = work.ablation.clone();
                ckpt.loss_curve = loss_curve.clone();
                ckpt.codec = Some(work.spec.clone());
                save_checkpoint(dir, &ckpt)?;
            }
        }
    }

    let mut record = json!({
        "step": cfg.steps,
        "train_loss": if eval_steps > 0 { eval_loss / eval_steps as f64 } else { f64::NAN },
        "heldout_loss": heldout_loss(model, heldout_eval, work.bundle_of)?,
        "null_fraction": null_clips as f64 / total_clips.max(1) as f64,
    });
    if cfg.eval_samples > 0 && !work.heldout.is_empty() {
        let clips = &work.heldout[..cfg.eval_samples.min(work.heldout.len())];
        let params = SamplingParams {
            gamma: cfg.gamma_eval,
            ..SamplingParams::default()
        };
        let report = evaluate_run(model, &work.ablation, clips, work.spec, &params, cfg.seed)?;
        for (k, v) in [
            ("beat_f1", report.beat_f1),
            ("majmin", report.majmin),
            ("triads", report.triads),
            ("tetrads", report.tetrads),
            ("frechet", report.frechet),
        ] {
            record[k] = json!(v);
        }
    }
    emit(record, &mut metrics_text)?;

    let mut ckpt = Checkpoint::from_model(model, cfg.steps);
    ckpt.ablation = work.ablation;
    ckpt.loss_curve = loss_curve;
    ckpt.optimizer = Some(adam.state().clone());
    ckpt.codec = Some(work.spec.clone());
    if let Some(dir) = work.run_dir {
        save_checkpoint(dir, &ckpt)?;
    }
    Ok(TrainReport {
        checkpoint: ckpt,
        null_clips,
        total_clips,
        metrics,
    })
}

/// Trains every parameter on genre-only conditions.
pub fn pretrain(
    train: &Dataset,
    heldout: Option<&Dataset>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    if cfg.stage != Stage::Pretrain {
        return Err(TrainError::BadConfig("stage must be pretrain".into()));
    }
    cfg.validate()?;
    check_dataset(&cfg.model, train)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mask = FreezeMask::all_trainable(model.layout());
    let bundle_of = |c: &Clip| ConditionBundle::genre_only(c.genre);
    run_stage(
        &mut model,
        Stagework {
            cfg,
            mask,
            bundle_of: &bundle_of,
            train: &train.clips,
            heldout: heldout.map_or(&[][..], |d| &d.clips),
            ablation: Vec::new(),
            run_dir,
            spec: &train.header.codec,
        },
    )
}

/// Jump-finetunes `base` with the dataset's temporal conditions minus the
/// configured ablation. The base's architecture wins over `cfg.model`;
/// only the in-attention gating follows `cfg.finetune_mode`.
pub fn finetune(
    base: &Checkpoint,
    train: &Dataset,
    heldout: Option<&Dataset>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    if cfg.stage != Stage::Finetune {
        return Err(TrainError::BadConfig("stage must be finetune".into()));
    }
    cfg.validate()?;
    if !base.config.same_architecture(&cfg.model) {
        return Err(TrainError::ConfigMismatch(
            "base checkpoint architecture differs from the configured model".into(),
        ));
    }
    check_dataset(&base.config, train)?;
    let mut model = base.to_model::<f32>()?;
    let model_cfg = ModelConfig {
        in_attention: cfg.finetune_mode.in_attention(),
        ..base.config.clone()
    };
    model.reconfigure(model_cfg.clone())?;
    let mut stage_cfg = cfg.clone();
    stage_cfg.model = model_cfg.clone();
    if cfg.finetune_mode == FinetuneMode::Baseline {
        stage_cfg.steps = 0;
    }
    let mask = freeze_mask_for_jump_finetune(&model_cfg);
    let ablation = cfg.condition_ablation.clone();
    let bundle_of = move |c: &Clip| c.bundle.clone().without(&ablation);
    run_stage(
        &mut model,
        Stagework {
            cfg: &stage_cfg,
            mask,
            bundle_of: &bundle_of,
            train: &train.clips,
            heldout: heldout.map_or(&[][..], |d| &d.clips),
            ablation: cfg.condition_ablation.clone(),
            run_dir,
            spec: &train.header.codec,
        },
    )
}

/// Trainable fraction of the parameter buffer under `mask`.
pub fn trainable_fraction(model: &Model<f32>, mask: &FreezeMask) -> f64 {
    mask.trainable_count(model.layout()) as f64 / model.params().len() as f64
}
