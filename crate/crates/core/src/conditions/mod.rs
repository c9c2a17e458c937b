//! Symbolic chord and rhythm inputs, and the numeric condition tensors the
//! model consumes.
//!
//! A clip is described by a [`ChordTrack`] (chord symbols with time tags),
//! a [`BeatGrid`] and a genre tag. [`build_condition_bundle`] renders them
//! into three tensors:
//!
//! * `c_pre`: a binary chromagram at the low prepend rate `f_M`,
//! * `c_sum`: the same chromagram at the codec frame rate `f_s`,
//! * `rhythm`: softened beat one-hots plus exact downbeat one-hots at `f_s`.

mod chord;
mod files;
mod rhythm;

pub use chord::{chord_to_pitch_classes, parse_chord_symbol, ChordQuality, ChordSymbol, PitchSet};
pub use files::{format_beat_file, format_chord_file, parse_beat_file, parse_chord_file};
pub use rhythm::{beats_from_bpm, soften_beats, BeatGrid, BEAT_KERNEL};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Codec token frame rate used throughout the toy setup.
pub const DEFAULT_FRAME_RATE: f64 = 50.0;
/// Prepend chromagram rate, an exact 10x downsampling of the frame rate.
pub const DEFAULT_PREPEND_RATE: f64 = 5.0;

/// Genre tags standing in for the text prompt.
pub const GENRES: [&str; 5] = ["rock", "funk", "jazz", "blues", "metal"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("malformed chord symbol {text:?} at position {position}")]
    MalformedChord { text: String, position: usize },
    #[error("chord track has non-positive duration {0}")]
    EmptyTrack(f64),
    #[error("invalid chord span {index}: {reason}")]
    InvalidSpan { index: usize, reason: String },
    #[error("invalid tempo {0} bpm")]
    InvalidTempo(f64),
    #[error("invalid meter: {0} beats per bar")]
    InvalidMeter(usize),
    #[error("beat phase {phase} outside [0, {period})")]
    InvalidPhase { phase: f64, period: f64 },
    #[error("beat time {time} outside [0, {limit})")]
    BeatOutOfRange { time: f64, limit: f64 },
    #[error("invalid beat grid: {0}")]
    InvalidBeatGrid(String),
    #[error("chord track lasts {chords} s but beat grid lasts {beats} s")]
    DurationMismatch { chords: f64, beats: f64 },
    #[error("unknown genre {0:?}")]
    UnknownGenre(String),
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

/// One labelled chord region `[start_sec, end_sec)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChordSpan {
    pub start_sec: f64,
    pub end_sec: f64,
    pub symbol: ChordSymbol,
}

/// Time-ordered, non-overlapping chord spans covering a clip. Gaps read as
/// no-chord.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChordTrack {
    spans: Vec<ChordSpan>,
    duration_sec: f64,
}

impl ChordTrack {
    pub fn new(spans: Vec<ChordSpan>, duration_sec: f64) -> Result<Self, ConditionError> {
        if !(duration_sec > 0.0) {
            return Err(ConditionError::EmptyTrack(duration_sec));
        }
        let mut prev_end = 0.0f64;
        for (index, s) in spans.iter().enumerate() {
            let bad = |reason: &str| ConditionError::InvalidSpan {
                index,
                reason: reason.to_string(),
            };
            if !(s.start_sec.is_finite() && s.end_sec.is_finite()) {
                return Err(bad("non-finite time"));
            }
            if s.start_sec < 0.0 {
                return Err(bad("negative start"));
            }
            if s.start_sec >= s.end_sec {
                return Err(bad("start is not before end"));
            }
            if index > 0 && s.start_sec < prev_end {
                return Err(bad("overlaps or precedes the previous span"));
            }
            prev_end = s.end_sec;
        }
        Ok(ChordTrack {
            spans,
            duration_sec,
        })
    }

    /// A track whose duration is the end of its last span.
    pub fn from_spans(spans: Vec<ChordSpan>) -> Result<Self, ConditionError> {
        let duration = spans.last().map_or(0.0, |s| s.end_sec);
        ChordTrack::new(spans, duration)
    }

    pub fn constant(symbol: ChordSymbol, duration_sec: f64) -> Result<Self, ConditionError> {
        ChordTrack::new(
            vec![ChordSpan {
                start_sec: 0.0,
                end_sec: duration_sec,
                symbol,
            }],
            duration_sec,
        )
    }

    pub fn spans(&self) -> &[ChordSpan] {
        &self.spans
    }

    pub fn duration_sec(&self) -> f64 {
        self.duration_sec
    }

    /// The symbol sounding at time `t` (half-open spans, so a boundary
    /// instant belongs to the later span).
    pub fn symbol_at(&self, t: f64) -> ChordSymbol {
        let idx = self.spans.partition_point(|s| s.start_sec <= t);
        match idx.checked_sub(1).map(|i| &self.spans[i]) {
            Some(s) if t < s.end_sec => s.symbol,
            _ => ChordSymbol::NoChord,
        }
    }

    /// Per-frame symbols sampled at frame centres.
    pub fn frame_symbols(&self, frame_rate: f64, n_frames: usize) -> Vec<ChordSymbol> {
        let mut out = Vec::with_capacity(n_frames);
        let mut span = 0;
        for i in 0..n_frames {
            let t = (i as f64 + 0.5) / frame_rate;
            while span < self.spans.len() && self.spans[span].end_sec <= t {
                span += 1;
            }
            out.push(match self.spans.get(span) {
                Some(s) if s.start_sec <= t => s.symbol,
                _ => ChordSymbol::NoChord,
            });
        }
        out
    }
}

/// Frame count of a clip at a given rate.
pub fn frame_count(duration_sec: f64, frame_rate: f64) -> usize {
    (duration_sec * frame_rate).round() as usize
}

/// Binary chromagram with one row per frame; frame `i` carries the chord
/// sounding at `(i + 0.5) / frame_rate`.
pub fn render_chromagram(
    track: &ChordTrack,
    frame_rate: f64,
    n_frames: usize,
) -> Result<Vec<[f32; 12]>, ConditionError> {
    if !(track.duration_sec > 0.0) {
        return Err(ConditionError::EmptyTrack(track.duration_sec));
    }
    Ok(track
        .frame_symbols(frame_rate, n_frames)
        .into_iter()
        .map(chord_to_pitch_classes)
        .collect())
}

/// Tag standing in for the text condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenreId(pub u8);

impl GenreId {
    pub fn name(self) -> &'static str {
        GENRES.get(self.0 as usize).copied().unwrap_or("?")
    }

    /// Accepts a genre name or its index.
    pub fn parse(text: &str) -> Result<Self, ConditionError> {
        let t = text.trim().to_ascii_lowercase();
        if let Some(i) = GENRES.iter().position(|g| *g == t) {
            return Ok(GenreId(i as u8));
        }
        match t.parse::<u8>() {
            Ok(i) if (i as usize) < GENRES.len() => Ok(GenreId(i)),
            _ => Err(ConditionError::UnknownGenre(text.to_string())),
        }
    }
}

/// `C_pre`: binary chromagram at the prepend rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrependChordCondition {
    pub frames: Vec<[f32; 12]>,
    pub frame_rate: f64,
}

/// `C_sum`: binary chromagram at the codec frame rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameChordCondition {
    pub frames: Vec<[f32; 12]>,
    pub frame_rate: f64,
}

/// `R`: softened beats plus downbeat one-hots, values in `[0, 2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhythmCondition {
    pub frames: Vec<f32>,
    pub frame_rate: f64,
}

/// The model-facing condition set for one clip. A `None` field is an absent
/// condition: dropped for classifier-free guidance or ablated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionBundle {
    pub c_pre: Option<PrependChordCondition>,
    pub c_sum: Option<FrameChordCondition>,
    pub rhythm: Option<RhythmCondition>,
    pub genre: Option<GenreId>,
}

/// The individually switchable sub-conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionKind {
    #[serde(rename = "c_pre")]
    CPre,
    #[serde(rename = "c_sum")]
    CSum,
    #[serde(rename = "r")]
    Rhythm,
}

impl ConditionKind {
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "c_pre" | "cpre" => Some(ConditionKind::CPre),
            "c_sum" | "csum" => Some(ConditionKind::CSum),
            "r" | "rhythm" => Some(ConditionKind::Rhythm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::CPre => "c_pre",
            ConditionKind::CSum => "c_sum",
            ConditionKind::Rhythm => "r",
        }
    }
}

impl ConditionBundle {
    /// Every condition absent, genre included.
    pub fn null() -> Self {
        ConditionBundle::default()
    }

    pub fn genre_only(genre: GenreId) -> Self {
        ConditionBundle {
            genre: Some(genre),
            ..Default::default()
        }
    }

    pub fn is_null(&self) -> bool {
        self.c_pre.is_none() && self.c_sum.is_none() && self.rhythm.is_none() && self.genre.is_none()
    }

    /// Drops the listed sub-conditions.
    pub fn without(mut self, kinds: &[ConditionKind]) -> Self {
        for k in kinds {
            match k {
                ConditionKind::CPre => self.c_pre = None,
                ConditionKind::CSum => self.c_sum = None,
                ConditionKind::Rhythm => self.rhythm = None,
            }
        }
        self
    }

    /// Frame count implied by the frame-rate conditions, if any is present.
    pub fn n_frames(&self) -> Option<usize> {
        self.c_sum
            .as_ref()
            .map(|c| c.frames.len())
            .or(self.rhythm.as_ref().map(|r| r.frames.len()))
    }

    pub fn prepend_len(&self) -> usize {
        self.c_pre.as_ref().map_or(0, |c| c.frames.len())
    }
}

/// Renders a clip's symbolic conditions into model tensors.
pub fn build_condition_bundle(
    track: &ChordTrack,
    grid: &BeatGrid,
    genre: GenreId,
    prepend_rate: f64,
    frame_rate: f64,
) -> Result<ConditionBundle, ConditionError> {
    if (track.duration_sec() - grid.duration_sec()).abs() > 1e-9 {
        return Err(ConditionError::DurationMismatch {
            chords: track.duration_sec(),
            beats: grid.duration_sec(),
        });
    }
    let duration = track.duration_sec();
    let n_pre = frame_count(duration, prepend_rate);
    let n_frames = frame_count(duration, frame_rate);
    let c_pre = render_chromagram(track, prepend_rate, n_pre)?;
    let c_sum = render_chromagram(track, frame_rate, n_frames)?;

    let mut rhythm = soften_beats(grid.beat_times(), frame_rate, n_frames)?;
    for &t in grid.downbeat_times() {
        let frame = (t * frame_rate).round() as usize;
        if let Some(v) = rhythm.get_mut(frame) {
            *v += 1.0;
        }
    }

    Ok(ConditionBundle {
        c_pre: Some(PrependChordCondition {
            frames: c_pre,
            frame_rate: prepend_rate,
        }),
        c_sum: Some(FrameChordCondition {
            frames: c_sum,
            frame_rate,
        }),
        rhythm: Some(RhythmCondition {
            frames: rhythm,
            frame_rate,
        }),
        genre: Some(genre),
    })
}
