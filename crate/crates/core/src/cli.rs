//! Commands behind the `tempcondlm` binary.
//!
//! Each command takes fully resolved settings, writes its artifacts through
//! [`write_atomic`] and returns a value the binary can print. Settings are
//! resolved from an optional `key = value` file plus overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{
    beats_from_bpm, build_condition_bundle, parse_chord_file, ChordSpan, ChordTrack, ConditionError, GenreId,
};
use crate::dataset::{generate_dataset, read_dataset, Dataset, DatasetError, DatasetHeader};
use crate::evaluation::{
    beat_f1, chord_score, evaluate_checkpoint, ChordFrameSeq, ChordLevel, EvalError, MetricsReport, BEAT_TOLERANCE,
};
use crate::model::{sample, write_atomic, Checkpoint, ModelError, SampleRequest, SamplingParams};
use crate::settings::{self, SettingsError};
use crate::toycodec::{decode_clip_lossy, CodecError, ToyCodecSpec};
use crate::training::{finetune, pretrain, Stage, TrainConfig, TrainError, TrainReport};

/// Environment switch for single-threaded reference runs.
pub const DETERMINISTIC_ENV: &str = "TEMPCONDLM_DETERMINISTIC";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Settings { path: String, source: SettingsError },
    #[error("{path}: {source}")]
    Condition { path: String, source: ConditionError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

/// True when the deterministic environment switch is set to `1`.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v.trim() == "1")
}

/// Parses `key=value` override strings.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>, CliError> {
    items
        .iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))
        })
        .collect()
}

/// `base`, then the settings file, then `overrides`.
pub fn resolve_settings<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<T, CliError> {
    let mut pairs = Vec::new();
    let mut origin = String::from("overrides");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        pairs = settings::parse_pairs(&text).map_err(|source| CliError::Settings {
            path: path.display().to_string(),
            source,
        })?;
        origin = path.display().to_string();
    }
    pairs.extend(overrides.iter().cloned());
    settings::apply(base, &pairs).map_err(|source| CliError::Settings { path: origin, source })
}

/// Writes the training and held-out splits plus the resolved `config`.
pub fn cmd_gen_data(header: &DatasetHeader, out_dir: &Path) -> Result<(), CliError> {
    header.generation.validate()?;
    generate_dataset(out_dir, &header.generation, &header.codec)?;
    write_file(&out_dir.join("config"), settings::to_text(header).as_bytes())
}

/// Reads `train.jsonl` and, when present, `heldout.jsonl` from `data_dir`.
pub fn load_splits(data_dir: &Path) -> Result<(Dataset, Option<Dataset>), CliError> {
    let train = read_dataset(&data_dir.join("train.jsonl"))?;
    let heldout_path = data_dir.join("heldout.jsonl");
    let heldout = if heldout_path.exists() {
        Some(read_dataset(&heldout_path)?)
    } else {
        None
    };
    Ok((train, heldout))
}

pub fn cmd_pretrain(cfg: &TrainConfig, data_dir: &Path, run_dir: &Path) -> Result<TrainReport, CliError> {
    let cfg = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.clone()
    };
    let (train, heldout) = load_splits(data_dir)?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    Ok(pretrain(&train, heldout.as_ref(), &cfg, Some(run_dir))?)
}

pub fn cmd_finetune(cfg: &TrainConfig, base: &Path, data_dir: &Path, run_dir: &Path) -> Result<TrainReport, CliError> {
    let cfg = TrainConfig {
        stage: Stage::Finetune,
        ..cfg.clone()
    };
    let base = Checkpoint::load(base)?;
    let (train, heldout) = load_splits(data_dir)?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    Ok(finetune(&base, &train, heldout.as_ref(), &cfg, Some(run_dir))?)
}

/// Symbolic inputs of one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSettings {
    pub bpm: f64,
    pub genre: String,
    pub beats_per_bar: usize,
    /// Clip length in seconds; `0` follows the end of the chord file.
    pub duration: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        let params = SamplingParams::default();
        SampleSettings {
            bpm: 120.0,
            genre: "rock".into(),
            beats_per_bar: 4,
            duration: 0.0,
            gamma: params.gamma,
            temperature: params.temperature,
            top_k: params.top_k,
            greedy: params.greedy,
            seed: 0,
        }
    }
}

impl SampleSettings {
    pub fn sampling(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_k: self.top_k,
            gamma: self.gamma,
            greedy: self.greedy,
        }
    }
}

/// What `sample` produced, in symbolic form.
#[derive(Clone, Debug)]
pub struct SampleSummary {
    pub frames: usize,
    pub requested_genre: GenreId,
    pub decoded_genre: Option<GenreId>,
    pub chords: Vec<ChordSpan>,
    pub beats: Vec<f64>,
    pub beat_f1: f64,
    pub majmin: f64,
    pub unknown_chord_frames: usize,
}

impl SampleSummary {
    pub fn to_text(&self, settings: &SampleSettings) -> String {
        let mut out = String::new();
        let genre = self.decoded_genre.map_or("none", GenreId::name);
        let _ = writeln!(out, "frames {}  bpm {}  gamma {}  seed {}", self.frames, settings.bpm, settings.gamma, settings.seed);
        let _ = writeln!(out, "genre {} (requested {})", genre, self.requested_genre.name());
        let _ = writeln!(out, "beat_f1 {:.4}  majmin {:.4}  unknown chord frames {}", self.beat_f1, self.majmin, self.unknown_chord_frames);
        let _ = writeln!(out, "chords:");
        for span in &self.chords {
            let _ = writeln!(out, "{:.3} {:.3} {}", span.start_sec, span.end_sec, span.symbol);
        }
        let beats: Vec<String> = self.beats.iter().map(|t| format!("{t:.3}")).collect();
        let _ = writeln!(out, "beats: {}", beats.join(" "));
        out
    }
}

fn merge_spans(symbols: &[crate::conditions::ChordSymbol], frame_rate: f64) -> Vec<ChordSpan> {
    let mut spans: Vec<ChordSpan> = Vec::new();
    for (t, &symbol) in symbols.iter().enumerate() {
        let end_sec = (t + 1) as f64 / frame_rate;
        match spans.last_mut() {
            Some(last) if last.symbol == symbol => last.end_sec = end_sec,
            _ => spans.push(ChordSpan {
                start_sec: t as f64 / frame_rate,
                end_sec,
                symbol,
            }),
        }
    }
    spans
}

/// Generates from a chord file, tempo and genre. Writes `grid.json`,
/// `summary.txt` and the resolved `config` into `out_dir`.
pub fn cmd_sample(
    ckpt_path: &Path,
    chords_path: &Path,
    settings: &SampleSettings,
    out_dir: &Path,
) -> Result<SampleSummary, CliError> {
    let condition_err = |source| CliError::Condition {
        path: chords_path.display().to_string(),
        source,
    };
    let text = fs::read_to_string(chords_path).map_err(io_err(chords_path))?;
    let duration = (settings.duration > 0.0).then_some(settings.duration);
    let track: ChordTrack = parse_chord_file(&text, duration).map_err(condition_err)?;
    let genre = GenreId::parse(&settings.genre).map_err(condition_err)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let spec: ToyCodecSpec = ckpt
        .codec
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{} records no codec", ckpt_path.display())))?;
    let cfg = &ckpt.config;
    let beats = beats_from_bpm(settings.bpm, settings.beats_per_bar, track.duration_sec(), 0.0).map_err(condition_err)?;
    let bundle = build_condition_bundle(&track, &beats, genre, cfg.prepend_rate, cfg.frame_rate).map_err(condition_err)?;
    let frames = bundle.n_frames().filter(|&n| n > 0).ok_or_else(|| CliError::Usage("chord file yields no frames".into()))?;
    let model = ckpt.to_model::<f32>()?;
    let request = SampleRequest {
        bundle: bundle.without(&ckpt.ablation),
        frames,
        seed: settings.seed,
    };
    let grid = sample(&model, &request, &settings.sampling())?;
    let decoded = decode_clip_lossy(&grid, &spec)?;
    let symbols = decoded.chord_symbols(&spec);
    let reference = ChordFrameSeq::new(track.frame_symbols(spec.frame_rate, frames), spec.frame_rate);
    let reference_beats: Vec<f64> = beats
        .beat_times()
        .iter()
        .copied()
        .filter(|&t| (t * spec.frame_rate).round() < frames as f64)
        .collect();
    let summary = SampleSummary {
        frames,
        requested_genre: genre,
        decoded_genre: decoded.majority_genre(),
        chords: merge_spans(&symbols, spec.frame_rate),
        beats: decoded.beat_times(),
        beat_f1: beat_f1(&reference_beats, &decoded.beat_times(), BEAT_TOLERANCE)?,
        majmin: chord_score(&reference, &ChordFrameSeq::new(symbols, spec.frame_rate), ChordLevel::MajMin)?,
        unknown_chord_frames: decoded.unknown_chord_frames,
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_file(&out_dir.join("grid.json"), grid.to_json().as_bytes())?;
    write_file(&out_dir.join("summary.txt"), summary.to_text(settings).as_bytes())?;
    write_file(&out_dir.join("config"), settings::to_text(settings).as_bytes())?;
    Ok(summary)
}

/// Evaluation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub gamma: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    /// Scores only the first this many clips; `0` scores all.
    pub max_clips: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let params = SamplingParams::default();
        EvalSettings {
            gamma: params.gamma,
            temperature: params.temperature,
            top_k: params.top_k,
            seed: 0,
            max_clips: 0,
        }
    }
}

/// Samples every clip of `data` from its conditions and writes the report
/// to `out`.
pub fn cmd_eval(ckpt_path: &Path, data: &Path, settings: &EvalSettings, out: &Path) -> Result<MetricsReport, CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let data_file: PathBuf = if data.is_dir() { data.join("heldout.jsonl") } else { data.to_path_buf() };
    let dataset = read_dataset(&data_file)?;
    let clips = match settings.max_clips {
        0 => &dataset.clips[..],
        n => &dataset.clips[..n.min(dataset.clips.len())],
    };
    let params = SamplingParams {
        temperature: settings.temperature,
        top_k: settings.top_k,
        gamma: settings.gamma,
        greedy: false,
    };
    let report = evaluate_checkpoint(&ckpt, clips, &dataset.header.codec, &params, settings.seed)?;
    write_file(out, report.to_json().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::parse_chord_symbol;

    #[test]
    fn overrides_need_equals() {
        let ok = parse_overrides(&["a.b = 3".into()]).unwrap();
        assert_eq!(ok, vec![("a.b".to_string(), "3".to_string())]);
        assert!(matches!(parse_overrides(&["nope".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        fs::write(&path, "bpm = 90\ngenre = jazz\n").unwrap();
        let s: SampleSettings =
            resolve_settings(&SampleSettings::default(), Some(&path), &[("bpm".into(), "100".into())]).unwrap();
        assert_eq!(s.bpm, 100.0);
        assert_eq!(s.genre, "jazz");
    }

    #[test]
    fn spans_merge_runs() {
        let c = parse_chord_symbol("C:maj").unwrap();
        let a = parse_chord_symbol("A:min").unwrap();
        let spans = merge_spans(&[c, c, a, a, a], 10.0);
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start_sec, spans[0].end_sec), (0.0, 0.2));
        assert_eq!((spans[1].start_sec, spans[1].end_sec), (0.2, 0.5));
    }
}
