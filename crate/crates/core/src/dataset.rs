//! Synthetic clip generation and the JSONL dataset format.
//!
//! A dataset file starts with a header line holding the codec spec and the
//! generation parameters, followed by one clip record per line.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{
    beats_from_bpm, build_condition_bundle, BeatGrid, format_beat_file, format_chord_file, parse_beat_file, parse_chord_file,
    ChordSpan, ChordTrack, ConditionBundle, ConditionError, GenreId, GENRES,
};
use crate::model::write_atomic;
use crate::tokens::{apply_delay_pattern, DelayedGrid, GridRecord, TokenError, TokenGrid};
use crate::toycodec::{encode_clip, CodecError, ToyCodecSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("clip {id}: {source}")]
    Condition { id: String, source: ConditionError },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("clip {id}: {source}")]
    Token { id: String, source: TokenError },
    #[error("bad generation parameters: {0}")]
    BadParams(String),
    #[error("dataset has no clips")]
    Empty,
}

/// How synthetic clips are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub n_clips: usize,
    pub heldout_clips: usize,
    pub clip_seconds: f64,
    pub bpm_min: f64,
    pub bpm_max: f64,
    pub beats_per_bar: usize,
    pub min_bars: usize,
    pub max_bars: usize,
    pub prepend_rate: f64,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            n_clips: 2000,
            heldout_clips: 200,
            clip_seconds: 4.0,
            bpm_min: 60.0,
            bpm_max: 180.0,
            beats_per_bar: 4,
            min_bars: 1,
            max_bars: 4,
            prepend_rate: 5.0,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::BadParams(m.to_string()));
        if !(self.clip_seconds > 0.0) {
            return bad("clip_seconds must be positive");
        }
        if !(self.bpm_min > 0.0 && self.bpm_min <= self.bpm_max) {
            return bad("need 0 < bpm_min <= bpm_max");
        }
        if self.beats_per_bar == 0 || self.min_bars == 0 || self.min_bars > self.max_bars {
            return bad("need beats_per_bar > 0 and 0 < min_bars <= max_bars");
        }
        if !(self.prepend_rate > 0.0) {
            return bad("prepend_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub codec: ToyCodecSpec,
    pub generation: GenerationParams,
}

/// One serialised clip.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub genre: u8,
    pub bpm: f64,
    pub phase: f64,
    pub beats_per_bar: usize,
    pub duration: f64,
    /// Chord file text: `start end symbol` per line.
    pub chords: String,
    /// Beat file text: `time beat|downbeat` per line.
    pub beats: String,
    pub grid: GridRecord,
}

/// A loaded clip with its conditions rendered.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub genre: GenreId,
    pub bpm: f64,
    pub track: ChordTrack,
    pub beats: BeatGrid,
    pub bundle: ConditionBundle,
    pub grid: TokenGrid,
    pub delayed: DelayedGrid,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub clips: Vec<Clip>,
}

/// Bar-aligned chord spans drawn uniformly from `vocab`. The pickup before
/// the first downbeat belongs to the first span.
fn random_track<R: Rng>(
    rng: &mut R,
    params: &GenerationParams,
    spec: &ToyCodecSpec,
    downbeats: &[f64],
) -> Result<ChordTrack, ConditionError> {
    let duration = params.clip_seconds;
    let mut spans = Vec::new();
    let mut bar = 0;
    let n_bars = downbeats.len().max(1);
    while bar < n_bars {
        let len = rng.random_range(params.min_bars..=params.max_bars);
        let start = if bar == 0 { 0.0 } else { downbeats[bar] };
        let end = downbeats.get(bar + len).copied().unwrap_or(duration);
        let symbol = spec.chord_vocab[rng.random_range(0..spec.chord_vocab.len())];
        spans.push(ChordSpan {
            start_sec: start,
            end_sec: end,
            symbol,
        });
        bar += len;
    }
    ChordTrack::new(spans, duration)
}

/// Deterministically generates clip `index` of the stream seeded by
/// `params.seed`.
pub fn generate_clip(params: &GenerationParams, spec: &ToyCodecSpec, index: u64) -> Result<ClipRecord, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index);
    let id = format!("clip-{index:05}");
    let cond_err = |source| DatasetError::Condition { id: id.clone(), source };

    let bpm = rng.random_range(params.bpm_min..=params.bpm_max);
    let period = 60.0 / bpm;
    let phase = rng.random_range(0.0..period);
    let genre = GenreId(rng.random_range(0..GENRES.len() as u8));
    let beats = beats_from_bpm(bpm, params.beats_per_bar, params.clip_seconds, phase).map_err(cond_err)?;
    let track = random_track(&mut rng, params, spec, beats.downbeat_times()).map_err(cond_err)?;
    let bundle = build_condition_bundle(&track, &beats, genre, params.prepend_rate, spec.frame_rate).map_err(cond_err)?;
    let grid = encode_clip(&bundle, spec, rng.random())?;
    Ok(ClipRecord {
        id: id.clone(),
        genre: genre.0,
        bpm,
        phase,
        beats_per_bar: params.beats_per_bar,
        duration: params.clip_seconds,
        chords: format_chord_file(&track),
        beats: format_beat_file(&beats),
        grid: GridRecord::from(&grid),
    })
}

/// Generates clips `[start, start + count)`.
pub fn generate_records(
    params: &GenerationParams,
    spec: &ToyCodecSpec,
    start: u64,
    count: usize,
) -> Result<Vec<ClipRecord>, DatasetError> {
    params.validate()?;
    spec.validate()?;
    (start..start + count as u64).map(|i| generate_clip(params, spec, i)).collect()
}

pub fn format_dataset(header: &DatasetHeader, records: &[ClipRecord]) -> String {
    let mut out = serde_json::to_string(header).expect("header serialises");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[ClipRecord]) -> Result<(), DatasetError> {
    write_atomic(path, format_dataset(header, records).as_bytes()).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Clip {
    pub fn from_record(rec: ClipRecord, header: &DatasetHeader) -> Result<Clip, DatasetError> {
        let id = rec.id.clone();
        let cond_err = |source| DatasetError::Condition { id: id.clone(), source };
        let genre = GenreId(rec.genre);
        if rec.genre as usize >= GENRES.len() {
            return Err(cond_err(ConditionError::UnknownGenre(rec.genre.to_string())));
        }
        let track = parse_chord_file(&rec.chords, Some(rec.duration)).map_err(cond_err)?;
        let beats = parse_beat_file(&rec.beats, rec.duration).map_err(cond_err)?;
        let bundle = build_condition_bundle(
            &track,
            &beats,
            genre,
            header.generation.prepend_rate,
            header.codec.frame_rate,
        )
        .map_err(cond_err)?;
        let tok_err = |source| DatasetError::Token { id: id.clone(), source };
        let spec = &header.codec;
        if rec.grid.codebooks != spec.codebooks || rec.grid.codebook_size != spec.codebook_size {
            return Err(tok_err(TokenError::Shape(format!(
                "grid K={} N={} but codec K={} N={}",
                rec.grid.codebooks, rec.grid.codebook_size, spec.codebooks, spec.codebook_size
            ))));
        }
        let grid = TokenGrid::try_from(rec.grid).map_err(tok_err)?;
        if Some(grid.frames()) != bundle.n_frames() {
            return Err(tok_err(TokenError::Shape(format!(
                "{} token frames for {:?} condition frames",
                grid.frames(),
                bundle.n_frames()
            ))));
        }
        let delayed = apply_delay_pattern(&grid);
        Ok(Clip {
            id: rec.id,
            genre,
            bpm: rec.bpm,
            track,
            beats,
            bundle,
            grid,
            delayed,
        })
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(DatasetError::Empty)?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| DatasetError::Parse {
        line: 1,
        reason: format!("header: {e}"),
    })?;
    header.codec.validate()?;
    let mut clips = Vec::new();
    for (i, line) in lines {
        let rec: ClipRecord = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        clips.push(Clip::from_record(rec, &header)?);
    }
    Ok(Dataset { header, clips })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Writes `train.jsonl` and `heldout.jsonl` into `out_dir`. Held-out clips
/// continue the training stream, so the two never share a clip.
pub fn generate_dataset(out_dir: &Path, params: &GenerationParams, spec: &ToyCodecSpec) -> Result<(), DatasetError> {
    fs::create_dir_all(out_dir).map_err(|source| DatasetError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let header = DatasetHeader {
        codec: spec.clone(),
        generation: params.clone(),
    };
    let train = generate_records(params, spec, 0, params.n_clips)?;
    let heldout = generate_records(params, spec, params.n_clips as u64, params.heldout_clips)?;
    write_dataset(&out_dir.join("train.jsonl"), &header, &train)?;
    write_dataset(&out_dir.join("heldout.jsonl"), &header, &heldout)
}
