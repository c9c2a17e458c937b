//! A deterministic stand-in for a neural audio codec.
//!
//! Codebook 0 packs, per frame, the chord pitch-class set, a rhythm bucket
//! and the genre tag into disjoint bit fields:
//!
//! ```text
//! token = chord_id | rhythm << chord_bits | genre << (chord_bits + beat_bits)
//! ```
//!
//! Codebooks `k >= 1` are pseudorandom in `(seed, t, k)` and carry no
//! condition signal. Decoding codebook 0 recovers the chords and beats
//! exactly, which gives the evaluation a perfect "transcriber".

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{parse_chord_symbol, ChordSymbol, ConditionBundle, GenreId, PitchSet, GENRES};
use crate::tokens::TokenGrid;

/// `R[t]` at or above this is a beat frame; kernel shoulders peak at 0.75.
pub const RHYTHM_THRESHOLD: f32 = 0.99;

pub const RHYTHM_NONE: u8 = 0;
pub const RHYTHM_BEAT: u8 = 1;
pub const RHYTHM_DOWNBEAT: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("codec fields need {needed} bits but codebook size {codebook_size} holds {available}")]
    SpecOverflow {
        needed: u32,
        available: u32,
        codebook_size: u32,
    },
    #[error("invalid codec spec: {0}")]
    InvalidSpec(String),
    #[error("bundle lacks {0}")]
    MissingCondition(&'static str),
    #[error("bundle has {got} frames but the clip needs {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("pitch-class set {0:#05x} at frame {1} is not in the codec vocabulary")]
    ChordNotInVocabulary(u16, usize),
    #[error("chord id {id} at frame {frame} outside vocabulary of {vocab}")]
    UnknownChordId { id: u32, frame: usize, vocab: usize },
    #[error("grid is K={k}, N={n} but codec expects K={spec_k}, N={spec_n}")]
    GridMismatch {
        k: usize,
        n: u32,
        spec_k: usize,
        spec_n: u32,
    },
}

/// Layout and vocabulary of the toy codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCodecSpec {
    pub codebook_size: u32,
    pub codebooks: usize,
    pub frame_rate: f64,
    pub chord_bits: u32,
    pub beat_bits: u32,
    pub genre_bits: u32,
    pub noise_rate: f64,
    /// Chords whose pitch-class sets receive dense ids, in order after the
    /// empty set (id 0).
    pub chord_vocab: Vec<ChordSymbol>,
}

/// 12 major, 12 minor and the seven diatonic sevenths of C major.
pub fn default_chord_vocab() -> Vec<ChordSymbol> {
    use crate::conditions::ChordQuality::{Maj, Min};
    let mut v: Vec<ChordSymbol> = (0..12)
        .flat_map(|r| [ChordSymbol::new(r, Maj), ChordSymbol::new(r, Min)])
        .collect();
    for s in ["C:maj7", "D:min7", "E:min7", "F:maj7", "G:7", "A:min7", "B:hdim7"] {
        v.push(parse_chord_symbol(s).expect("valid literal"));
    }
    v
}

impl Default for ToyCodecSpec {
    fn default() -> Self {
        ToyCodecSpec {
            codebook_size: 1024,
            codebooks: 4,
            frame_rate: 50.0,
            chord_bits: 5,
            beat_bits: 2,
            genre_bits: 3,
            noise_rate: 0.0,
            chord_vocab: default_chord_vocab(),
        }
    }
}

fn bits_for(count: usize) -> u32 {
    usize::BITS - count.saturating_sub(1).leading_zeros()
}

impl ToyCodecSpec {
    /// A spec whose codebook is exactly as large as the packed fields need.
    pub fn fitted(codebooks: usize, frame_rate: f64, chord_vocab: Vec<ChordSymbol>, noise_rate: f64) -> Self {
        let mut spec = ToyCodecSpec {
            codebooks,
            frame_rate,
            noise_rate,
            chord_vocab,
            ..Default::default()
        };
        spec.chord_bits = bits_for(spec.chord_sets().len());
        spec.genre_bits = bits_for(GENRES.len());
        spec.codebook_size = 1 << (spec.chord_bits + spec.beat_bits + spec.genre_bits);
        spec
    }

    /// Distinct pitch-class sets in id order, starting with the empty set.
    pub fn chord_sets(&self) -> Vec<PitchSet> {
        let mut sets = vec![PitchSet::EMPTY];
        for s in &self.chord_vocab {
            let p = s.pitch_set();
            if !sets.contains(&p) {
                sets.push(p);
            }
        }
        sets
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let invalid = |m: String| Err(CodecError::InvalidSpec(m));
        if self.codebooks == 0 {
            return invalid("at least one codebook required".into());
        }
        if !(self.frame_rate > 0.0) {
            return invalid(format!("frame rate {}", self.frame_rate));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return invalid(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        let n_sets = self.chord_sets().len();
        if bits_for(n_sets) > self.chord_bits {
            return invalid(format!("{n_sets} chord sets do not fit {} bits", self.chord_bits));
        }
        if self.beat_bits < 2 {
            return invalid("rhythm needs 2 bits".into());
        }
        if bits_for(GENRES.len()) > self.genre_bits {
            return invalid(format!("{} genres do not fit {} bits", GENRES.len(), self.genre_bits));
        }
        let needed = self.chord_bits + self.beat_bits + self.genre_bits;
        let available = if self.codebook_size == 0 {
            0
        } else {
            u32::BITS - 1 - self.codebook_size.leading_zeros()
        };
        if needed > available {
            return Err(CodecError::SpecOverflow {
                needed,
                available,
                codebook_size: self.codebook_size,
            });
        }
        Ok(())
    }

    pub fn pack(&self, chord_id: u32, rhythm: u8, genre: GenreId) -> u32 {
        chord_id | (rhythm as u32) << self.chord_bits | (genre.0 as u32) << (self.chord_bits + self.beat_bits)
    }

    /// `(chord_id, rhythm bucket, genre)` fields of a codebook-0 token.
    pub fn unpack(&self, token: u32) -> (u32, u8, u8) {
        let chord = token & ((1 << self.chord_bits) - 1);
        let rhythm = (token >> self.chord_bits) & ((1 << self.beat_bits) - 1);
        let genre = token >> (self.chord_bits + self.beat_bits);
        (chord, rhythm as u8, genre as u8)
    }

    /// The vocabulary symbol standing for a pitch-class set (first listed
    /// wins when sets collide).
    pub fn symbol_for_set(&self, set: PitchSet) -> Option<ChordSymbol> {
        if set.is_empty() {
            return Some(ChordSymbol::NoChord);
        }
        self.chord_vocab.iter().copied().find(|s| s.pitch_set() == set)
    }
}

pub fn rhythm_bucket(r: f32) -> u8 {
    if r >= 1.0 + RHYTHM_THRESHOLD {
        RHYTHM_DOWNBEAT
    } else if r >= RHYTHM_THRESHOLD {
        RHYTHM_BEAT
    } else {
        RHYTHM_NONE
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_hash(seed: u64, t: usize, k: usize, salt: u64) -> u64 {
    mix64(mix64(mix64(seed ^ salt).wrapping_add(t as u64)).wrapping_add(k as u64))
}

/// Token grid for one clip.
pub fn encode_clip(bundle: &ConditionBundle, spec: &ToyCodecSpec, seed: u64) -> Result<TokenGrid, CodecError> {
    spec.validate()?;
    let c_sum = bundle.c_sum.as_ref().ok_or(CodecError::MissingCondition("c_sum"))?;
    let rhythm = bundle.rhythm.as_ref().ok_or(CodecError::MissingCondition("rhythm"))?;
    let genre = bundle.genre.ok_or(CodecError::MissingCondition("genre"))?;
    let frames = c_sum.frames.len();
    if rhythm.frames.len() != frames {
        return Err(CodecError::LengthMismatch {
            expected: frames,
            got: rhythm.frames.len(),
        });
    }
    let ids: HashMap<PitchSet, u32> = spec
        .chord_sets()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i as u32))
        .collect();
    let mut tokens = Vec::with_capacity(frames * spec.codebooks);
    for t in 0..frames {
        let set = PitchSet::from_row(&c_sum.frames[t]);
        let chord = *ids.get(&set).ok_or(CodecError::ChordNotInVocabulary(set.0, t))?;
        tokens.push(spec.pack(chord, rhythm_bucket(rhythm.frames[t]), genre));
        for k in 1..spec.codebooks {
            let mut token = cell_hash(seed, t, k, 0) % spec.codebook_size as u64;
            let u = (cell_hash(seed, t, k, 1) >> 11) as f64 / (1u64 << 53) as f64;
            if u < spec.noise_rate {
                token = cell_hash(seed, t, k, 2) % spec.codebook_size as u64;
            }
            tokens.push(token as u32);
        }
    }
    TokenGrid::new(frames, spec.codebooks, spec.codebook_size, tokens)
        .map_err(|e| CodecError::InvalidSpec(e.to_string()))
}

/// Codebook-0 content of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedClip {
    pub chord_sets: Vec<PitchSet>,
    pub rhythm: Vec<u8>,
    /// Frame counts per genre id; index `GENRES.len()` collects out-of-range ids.
    pub genre_votes: Vec<usize>,
    /// Frames whose chord id was outside the vocabulary (lossy decoding only).
    pub unknown_chord_frames: usize,
    pub frame_rate: f64,
}

impl DecodedClip {
    /// Centres of beat-bucket frames (downbeats included).
    pub fn beat_times(&self) -> Vec<f64> {
        self.frame_times(|r| r >= RHYTHM_BEAT)
    }

    pub fn downbeat_times(&self) -> Vec<f64> {
        self.frame_times(|r| r == RHYTHM_DOWNBEAT)
    }

    fn frame_times(&self, keep: impl Fn(u8) -> bool) -> Vec<f64> {
        self.rhythm
            .iter()
            .enumerate()
            .filter(|(_, &r)| keep(r))
            .map(|(t, _)| (t as f64 + 0.5) / self.frame_rate)
            .collect()
    }

    /// Genre with the most votes, ties to the lower id.
    pub fn majority_genre(&self) -> Option<GenreId> {
        let votes = &self.genre_votes[..GENRES.len()];
        let best = votes.iter().copied().max().filter(|&v| v > 0)?;
        votes.iter().position(|&v| v == best).map(|i| GenreId(i as u8))
    }

    pub fn chord_symbols(&self, spec: &ToyCodecSpec) -> Vec<ChordSymbol> {
        self.chord_sets
            .iter()
            .map(|&s| spec.symbol_for_set(s).unwrap_or(ChordSymbol::NoChord))
            .collect()
    }
}

fn decode_inner(grid: &TokenGrid, spec: &ToyCodecSpec, strict: bool) -> Result<DecodedClip, CodecError> {
    if grid.codebooks() != spec.codebooks || grid.codebook_size() != spec.codebook_size {
        return Err(CodecError::GridMismatch {
            k: grid.codebooks(),
            n: grid.codebook_size(),
            spec_k: spec.codebooks,
            spec_n: spec.codebook_size,
        });
    }
    let sets = spec.chord_sets();
    let mut out = DecodedClip {
        chord_sets: Vec::with_capacity(grid.frames()),
        rhythm: Vec::with_capacity(grid.frames()),
        genre_votes: vec![0; GENRES.len() + 1],
        unknown_chord_frames: 0,
        frame_rate: spec.frame_rate,
    };
    for (frame, token) in grid.codebook(0).enumerate() {
        let (chord, rhythm, genre) = spec.unpack(token);
        match sets.get(chord as usize) {
            Some(&s) => out.chord_sets.push(s),
            None if strict => {
                return Err(CodecError::UnknownChordId {
                    id: chord,
                    frame,
                    vocab: sets.len(),
                })
            }
            None => {
                out.unknown_chord_frames += 1;
                out.chord_sets.push(PitchSet::EMPTY);
            }
        }
        out.rhythm.push(rhythm.min(RHYTHM_DOWNBEAT));
        out.genre_votes[(genre as usize).min(GENRES.len())] += 1;
    }
    Ok(out)
}

/// Unpacks codebook 0; ids outside the chord vocabulary are an error.
pub fn decode_clip(grid: &TokenGrid, spec: &ToyCodecSpec) -> Result<DecodedClip, CodecError> {
    decode_inner(grid, spec, true)
}

/// Like [`decode_clip`] but maps unknown chord ids to no-chord and counts
/// them, for scoring model output that may contain any token.
pub fn decode_clip_lossy(grid: &TokenGrid, spec: &ToyCodecSpec) -> Result<DecodedClip, CodecError> {
    decode_inner(grid, spec, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{beats_from_bpm, build_condition_bundle, ChordSpan, ChordTrack};

    fn sym(s: &str) -> ChordSymbol {
        parse_chord_symbol(s).unwrap()
    }

    fn clip(bpm: f64, genre: u8) -> ConditionBundle {
        let track = ChordTrack::new(
            vec![
                ChordSpan { start_sec: 0.0, end_sec: 2.0, symbol: sym("C:maj") },
                ChordSpan { start_sec: 2.0, end_sec: 3.0, symbol: sym("A:min7") },
                ChordSpan { start_sec: 3.5, end_sec: 4.0, symbol: sym("G:7") },
            ],
            4.0,
        )
        .unwrap();
        let grid = beats_from_bpm(bpm, 4, 4.0, 0.0).unwrap();
        build_condition_bundle(&track, &grid, GenreId(genre), 5.0, 50.0).unwrap()
    }

    #[test]
    fn default_spec_is_valid_and_tight() {
        let spec = ToyCodecSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.chord_sets().len(), 32);
        assert_eq!(ToyCodecSpec::fitted(4, 50.0, default_chord_vocab(), 0.0), spec);
    }

    #[test]
    fn overflow_detected() {
        let spec = ToyCodecSpec {
            codebook_size: 64,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(CodecError::SpecOverflow { needed: 10, available: 6, .. })));
    }

    #[test]
    fn constant_input_gives_constant_codebook0() {
        let track = ChordTrack::constant(sym("C:maj"), 2.0).unwrap();
        let beats = crate::conditions::BeatGrid::new(vec![], vec![], 2.0).unwrap();
        let b = build_condition_bundle(&track, &beats, GenreId(0), 5.0, 50.0).unwrap();
        let g = encode_clip(&b, &ToyCodecSpec::default(), 3).unwrap();
        let first = g.get(0, 0);
        assert!(g.codebook(0).all(|x| x == first));
    }

    #[test]
    fn roundtrip_recovers_chords_and_beats() {
        let spec = ToyCodecSpec::default();
        let b = clip(120.0, 3);
        let g = encode_clip(&b, &spec, 11).unwrap();
        let d = decode_clip(&g, &spec).unwrap();
        let c_sum = &b.c_sum.as_ref().unwrap().frames;
        for t in 0..g.frames() {
            assert_eq!(d.chord_sets[t], PitchSet::from_row(&c_sum[t]));
            assert_eq!(d.rhythm[t], rhythm_bucket(b.rhythm.as_ref().unwrap().frames[t]));
        }
        assert_eq!(d.majority_genre(), Some(GenreId(3)));
        assert_eq!(d.beat_times().len(), 8);
        assert_eq!(d.downbeat_times().len(), 2);
        assert_eq!(d.chord_symbols(&spec)[120], sym("A:min7"));
        assert_eq!(d.chord_symbols(&spec)[160], ChordSymbol::NoChord);
    }

    #[test]
    fn beat_frame_decodes_to_centre_time() {
        let spec = ToyCodecSpec::default();
        let track = ChordTrack::constant(sym("C:maj"), 2.0).unwrap();
        let beats = crate::conditions::BeatGrid::new(vec![1.0], vec![], 2.0).unwrap();
        let b = build_condition_bundle(&track, &beats, GenreId(0), 5.0, 50.0).unwrap();
        let d = decode_clip(&encode_clip(&b, &spec, 0).unwrap(), &spec).unwrap();
        let times = d.beat_times();
        assert_eq!(times, vec![50.5 / 50.0]);
        assert!((times[0] - 1.0).abs() < 0.07);
    }

    #[test]
    fn noise_never_touches_codebook0() {
        let clean = ToyCodecSpec::default();
        let noisy = ToyCodecSpec {
            noise_rate: 0.1,
            ..Default::default()
        };
        let b = clip(97.0, 1);
        let reference = decode_clip(&encode_clip(&b, &clean, 0).unwrap(), &clean).unwrap();
        let mut changed = 0;
        for seed in 0..100 {
            let g = encode_clip(&b, &noisy, seed).unwrap();
            let c = encode_clip(&b, &clean, seed).unwrap();
            assert_eq!(decode_clip(&g, &noisy).unwrap(), reference);
            assert!(g.codebook(0).eq(c.codebook(0)));
            changed += (0..g.frames()).filter(|&t| g.get(t, 1) != c.get(t, 1)).count();
        }
        // about 10% of 200 frames x 100 seeds, minus collisions
        let frac = changed as f64 / 20_000.0;
        assert!((0.08..0.12).contains(&frac), "{frac}");
    }

    #[test]
    fn genre_only_changes_genre_field() {
        let spec = ToyCodecSpec::default();
        let a = encode_clip(&clip(120.0, 0), &spec, 5).unwrap();
        let b = encode_clip(&clip(120.0, 4), &spec, 5).unwrap();
        let field = ((1u32 << spec.genre_bits) - 1) << (spec.chord_bits + spec.beat_bits);
        for t in 0..a.frames() {
            for k in 0..a.codebooks() {
                let diff = a.get(t, k) ^ b.get(t, k);
                if k == 0 {
                    assert_eq!(diff & !field, 0);
                    assert_ne!(diff, 0);
                } else {
                    assert_eq!(diff, 0);
                }
            }
        }
    }

    #[test]
    fn unknown_ids() {
        let spec = ToyCodecSpec {
            chord_vocab: vec![sym("C:maj")],
            ..Default::default()
        };
        let g = TokenGrid::new(2, 4, 1024, vec![1, 0, 0, 0, 7, 0, 0, 0]).unwrap();
        assert!(matches!(decode_clip(&g, &spec), Err(CodecError::UnknownChordId { id: 7, frame: 1, .. })));
        let d = decode_clip_lossy(&g, &spec).unwrap();
        assert_eq!(d.unknown_chord_frames, 1);
        assert_eq!(d.chord_sets[1], PitchSet::EMPTY);
    }

    #[test]
    fn chord_outside_vocab_rejected() {
        let spec = ToyCodecSpec::default();
        let track = ChordTrack::constant(sym("C:aug"), 1.0).unwrap();
        let beats = crate::conditions::BeatGrid::new(vec![], vec![], 1.0).unwrap();
        let b = build_condition_bundle(&track, &beats, GenreId(0), 5.0, 50.0).unwrap();
        assert!(matches!(encode_clip(&b, &spec, 0), Err(CodecError::ChordNotInVocabulary(_, 0))));
    }
}
