//! Beat F-measure, frame-wise chord accuracy and Fréchet distance over
//! decoded token grids.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditions::{ChordQuality, ChordSymbol, ConditionKind};
use crate::dataset::Clip;
use crate::model::{sample_delayed, Checkpoint, Model, ModelError, SampleRequest, SamplingParams};
use crate::tokens::{invert_delay_pattern, DelayedGrid, EmbeddingTables, TokenError};
use crate::toycodec::{decode_clip_lossy, CodecError, ToyCodecSpec};

/// Beat matching window in seconds.
pub const BEAT_TOLERANCE: f64 = 0.070;
/// Covariance regulariser of [`frechet_distance`].
pub const FRECHET_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{which} beat list is not sorted ascending")]
    UnsortedInput { which: &'static str },
    #[error("sequence lengths differ: {reference} reference vs {estimated} estimated")]
    LengthMismatch { reference: usize, estimated: usize },
    #[error("embedding set is empty or ragged")]
    DegenerateSet,
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

fn check_sorted(v: &[f64], which: &'static str) -> Result<(), EvalError> {
    if v.windows(2).all(|w| w[0] <= w[1]) {
        Ok(())
    } else {
        Err(EvalError::UnsortedInput { which })
    }
}

/// Beat F-measure. Reference beats are visited in time order and each takes
/// the nearest still-unmatched estimate within `tolerance`.
pub fn beat_f1(reference: &[f64], estimated: &[f64], tolerance: f64) -> Result<f64, EvalError> {
    check_sorted(reference, "reference")?;
    check_sorted(estimated, "estimated")?;
    if reference.is_empty() && estimated.is_empty() {
        return Ok(1.0);
    }
    if reference.is_empty() || estimated.is_empty() {
        return Ok(0.0);
    }
    let mut used = vec![false; estimated.len()];
    let mut hits = 0usize;
    for &r in reference {
        let lo = estimated.partition_point(|&e| e < r - tolerance);
        let mut best: Option<usize> = None;
        for (j, &e) in estimated.iter().enumerate().skip(lo) {
            if e > r + tolerance {
                break;
            }
            if !used[j] && best.is_none_or(|b| (e - r).abs() < (estimated[b] - r).abs()) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[j] = true;
            hits += 1;
        }
    }
    if hits == 0 {
        return Ok(0.0);
    }
    let precision = hits as f64 / estimated.len() as f64;
    let recall = hits as f64 / reference.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Chord comparison strictness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordLevel {
    MajMin,
    Triads,
    Tetrads,
}

impl ChordLevel {
    pub const ALL: [ChordLevel; 3] = [ChordLevel::MajMin, ChordLevel::Triads, ChordLevel::Tetrads];
}

/// Reduced form of `symbol` at `level`, or `None` when the frame is not
/// scored at that level.
pub fn reduce_chord(symbol: ChordSymbol, level: ChordLevel) -> Option<ChordSymbol> {
    use ChordQuality::*;
    let ChordSymbol::Chord { root, quality } = symbol else {
        return Some(ChordSymbol::NoChord);
    };
    let quality = match level {
        ChordLevel::MajMin => match quality {
            Maj | Maj7 | Dom7 => Maj,
            Min | Min7 | MinMaj7 => Min,
            _ => return None,
        },
        ChordLevel::Triads => quality.triad(),
        ChordLevel::Tetrads => quality,
    };
    Some(ChordSymbol::Chord { root, quality })
}

/// Per-frame chord labels at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ChordFrameSeq {
    pub symbols: Vec<ChordSymbol>,
    pub frame_rate: f64,
}

impl ChordFrameSeq {
    pub fn new(symbols: Vec<ChordSymbol>, frame_rate: f64) -> Self {
        ChordFrameSeq { symbols, frame_rate }
    }

    pub fn duration_sec(&self) -> f64 {
        self.symbols.len() as f64 / self.frame_rate
    }
}

/// Fraction of scored reference frames whose reduced labels agree. NaN
/// when no reference frame is scored.
pub fn chord_score(reference: &ChordFrameSeq, estimated: &ChordFrameSeq, level: ChordLevel) -> Result<f64, EvalError> {
    if reference.symbols.len() != estimated.symbols.len() {
        return Err(EvalError::LengthMismatch {
            reference: reference.symbols.len(),
            estimated: estimated.symbols.len(),
        });
    }
    let mut scored = 0usize;
    let mut correct = 0usize;
    for (&r, &e) in reference.symbols.iter().zip(&estimated.symbols) {
        if let Some(r) = reduce_chord(r, level) {
            scored += 1;
            if reduce_chord(e, level) == Some(r) {
                correct += 1;
            }
        }
    }
    Ok(if scored == 0 { f64::NAN } else { correct as f64 / scored as f64 })
}

fn gaussian(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let d = set.first().ok_or(EvalError::DegenerateSet)?.len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(EvalError::DegenerateSet);
    }
    let n = set.len();
    let x = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centred.transpose() * &centred / denom;
    for i in 0..d {
        cov[(i, i)] += FRECHET_EPS;
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    let (mu_a, cov_a) = gaussian(a)?;
    let (mu_b, cov_b) = gaussian(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(EvalError::DegenerateSet);
    }
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0))
}

/// Mean codebook-summed embedding over the rows of a grid.
pub fn grid_embedding(grid: &DelayedGrid, tables: &EmbeddingTables) -> Result<Vec<f64>, EvalError> {
    let rows = crate::tokens::embed_grid(grid, tables)?;
    let mut mean = vec![0.0f64; tables.dim()];
    for row in &rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub id: String,
    pub beat_f1: f64,
    #[serde(with = "nan_as_null")]
    pub majmin: f64,
    #[serde(with = "nan_as_null")]
    pub triads: f64,
    #[serde(with = "nan_as_null")]
    pub tetrads: f64,
    /// Generated frames whose chord id fell outside the vocabulary.
    pub unknown_chord_frames: usize,
}

/// Clip-level scores and their unweighted means. Undefined chord scores
/// are stored as `null` and left out of the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub beat_f1: f64,
    #[serde(with = "nan_as_null")]
    pub majmin: f64,
    #[serde(with = "nan_as_null")]
    pub triads: f64,
    #[serde(with = "nan_as_null")]
    pub tetrads: f64,
    pub frechet: f64,
    pub clips: Vec<ClipMetrics>,
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One line: `beat_f1 majmin triads tetrads frechet` as percentages
    /// (Fréchet distance as is).
    pub fn summary_row(&self, label: &str) -> String {
        format!(
            "{label:<16} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>9.4}",
            100.0 * self.beat_f1,
            100.0 * self.majmin,
            100.0 * self.triads,
            100.0 * self.tetrads,
            self.frechet
        )
    }

    pub fn summary_header() -> String {
        format!(
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "model", "beat_f1", "majmin", "triads", "tetrads", "frechet"
        )
    }
}

/// Reference beats representable on the token frame grid.
fn reference_beats(clip: &Clip, frame_rate: f64) -> Vec<f64> {
    let frames = clip.grid.frames() as f64;
    clip.beats
        .beat_times()
        .iter()
        .copied()
        .filter(|&t| (t * frame_rate).round() < frames)
        .collect()
}

/// Scores generated delayed grids (one per clip, same order) against the
/// clips' reference conditions and grids.
pub fn evaluate_grids(
    clips: &[Clip],
    generated: &[DelayedGrid],
    spec: &ToyCodecSpec,
    tables: &EmbeddingTables,
) -> Result<MetricsReport, EvalError> {
    if clips.len() != generated.len() {
        return Err(EvalError::LengthMismatch {
            reference: clips.len(),
            estimated: generated.len(),
        });
    }
    let rows: Vec<ClipMetrics> = clips
        .par_iter()
        .zip(generated)
        .map(|(clip, grid)| -> Result<ClipMetrics, EvalError> {
            let decoded = decode_clip_lossy(&invert_delay_pattern(grid)?, spec)?;
            let frames = clip.grid.frames();
            let reference = ChordFrameSeq::new(clip.track.frame_symbols(spec.frame_rate, frames), spec.frame_rate);
            let estimated = ChordFrameSeq::new(decoded.chord_symbols(spec), spec.frame_rate);
            let score = |level| chord_score(&reference, &estimated, level);
            Ok(ClipMetrics {
                id: clip.id.clone(),
                beat_f1: beat_f1(&reference_beats(clip, spec.frame_rate), &decoded.beat_times(), BEAT_TOLERANCE)?,
                majmin: score(ChordLevel::MajMin)?,
                triads: score(ChordLevel::Triads)?,
                tetrads: score(ChordLevel::Tetrads)?,
                unknown_chord_frames: decoded.unknown_chord_frames,
            })
        })
        .collect::<Result<_, _>>()?;
    let embed = |g: &DelayedGrid| grid_embedding(g, tables);
    let reference: Vec<Vec<f64>> = clips.iter().map(|c| embed(&c.delayed)).collect::<Result<_, _>>()?;
    let produced: Vec<Vec<f64>> = generated.iter().map(embed).collect::<Result<_, _>>()?;
    Ok(MetricsReport {
        beat_f1: mean_defined(rows.iter().map(|r| r.beat_f1)),
        majmin: mean_defined(rows.iter().map(|r| r.majmin)),
        triads: mean_defined(rows.iter().map(|r| r.triads)),
        tetrads: mean_defined(rows.iter().map(|r| r.tetrads)),
        frechet: frechet_distance(&reference, &produced)?,
        clips: rows,
    })
}

/// Seed of clip `index` in an evaluation run seeded by `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples one grid per clip from its (ablated) conditions and scores the
/// result.
pub fn evaluate_run(
    model: &Model<f32>,
    ablation: &[ConditionKind],
    clips: &[Clip],
    spec: &ToyCodecSpec,
    params: &SamplingParams,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let cfg = model.config();
    if cfg.codebooks != spec.codebooks || cfg.codebook_size != spec.codebook_size {
        return Err(EvalError::Incompatible(format!(
            "model K={} N={} vs codec K={} N={}",
            cfg.codebooks, cfg.codebook_size, spec.codebooks, spec.codebook_size
        )));
    }
    let generated: Vec<DelayedGrid> = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let request = SampleRequest {
                bundle: clip.bundle.clone().without(ablation),
                frames: clip.grid.frames(),
                seed: clip_seed(seed, i),
            };
            sample_delayed(model, &request, params)
        })
        .collect::<Result<_, _>>()?;
    evaluate_grids(clips, &generated, spec, &model.embedding_tables()?)
}

/// [`evaluate_run`] with the checkpoint's own ablation.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    clips: &[Clip],
    spec: &ToyCodecSpec,
    params: &SamplingParams,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let model = ckpt.to_model::<f32>()?;
    evaluate_run(&model, &ckpt.ablation, clips, spec, params, seed)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::conditions::parse_chord_symbol;

    fn sym(s: &str) -> ChordSymbol {
        parse_chord_symbol(s).unwrap()
    }

    #[test]
    fn beat_examples() {
        let r = [0.0, 0.5, 1.0, 1.5];
        assert_eq!(beat_f1(&r, &r, BEAT_TOLERANCE).unwrap(), 1.0);
        let shifted: Vec<f64> = r.iter().map(|t| t + 0.1).collect();
        assert_eq!(beat_f1(&r, &shifted, BEAT_TOLERANCE).unwrap(), 0.0);
        let f = beat_f1(&r, &[0.0, 0.5, 1.0], BEAT_TOLERANCE).unwrap();
        assert!((f - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(beat_f1(&[], &[], BEAT_TOLERANCE).unwrap(), 1.0);
        assert_eq!(beat_f1(&r, &[], BEAT_TOLERANCE).unwrap(), 0.0);
        assert!(matches!(
            beat_f1(&[1.0, 0.0], &r, BEAT_TOLERANCE),
            Err(EvalError::UnsortedInput { which: "reference" })
        ));
    }

    #[test]
    fn nearest_estimate_wins() {
        // 0.95 is closer to 1.0 than 1.06; the second estimate stays unmatched
        let f = beat_f1(&[1.0], &[0.95, 1.06], BEAT_TOLERANCE).unwrap();
        assert!((f - 2.0 * 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(
            reduce_chord(sym("C:maj7"), ChordLevel::MajMin),
            reduce_chord(sym("C:maj"), ChordLevel::MajMin)
        );
        assert_eq!(reduce_chord(sym("C:dim"), ChordLevel::MajMin), None);
        assert_eq!(reduce_chord(sym("C:min7"), ChordLevel::Triads), Some(sym("C:min")));
        assert_eq!(reduce_chord(sym("C:min7"), ChordLevel::Tetrads), Some(sym("C:min7")));
        assert_eq!(reduce_chord(ChordSymbol::NoChord, ChordLevel::MajMin), Some(ChordSymbol::NoChord));
    }

    #[test]
    fn chord_score_examples() {
        let c = ChordFrameSeq::new(vec![sym("C:maj"); 50], 50.0);
        let a = ChordFrameSeq::new(vec![sym("A:min"); 50], 50.0);
        for level in ChordLevel::ALL {
            assert_eq!(chord_score(&c, &c, level).unwrap(), 1.0);
            assert_eq!(chord_score(&c, &a, level).unwrap(), 0.0);
        }
        let dims = ChordFrameSeq::new(vec![sym("C:dim"); 50], 50.0);
        assert!(chord_score(&dims, &c, ChordLevel::MajMin).unwrap().is_nan());
        let short = ChordFrameSeq::new(vec![sym("C:maj"); 49], 50.0);
        assert!(matches!(
            chord_score(&c, &short, ChordLevel::Tetrads),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn frechet_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<Vec<f64>> = (0..300).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
        let shifted: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 2.0, v[1], v[2]]).collect();
        assert!((frechet_distance(&a, &shifted).unwrap() - 4.0).abs() < 1e-6);
        assert!(matches!(frechet_distance(&[], &a), Err(EvalError::DegenerateSet)));
    }

    #[test]
    fn frechet_is_rotation_invariant_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..200).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.random_range(0.0..3.0), rng.random_range(-0.5..0.5)])
            .collect();
        let (s, c) = 0.7f64.sin_cos();
        let rot = |v: &Vec<f64>| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let ra: Vec<_> = a.iter().map(rot).collect();
        let rb: Vec<_> = b.iter().map(rot).collect();
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - frechet_distance(&ra, &rb).unwrap()).abs() < 1e-8);
        assert!((fd - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn report_round_trips_with_undefined_scores() {
        let report = MetricsReport {
            beat_f1: 0.5,
            majmin: f64::NAN,
            triads: 0.25,
            tetrads: 0.125,
            frechet: 1.5,
            clips: vec![ClipMetrics {
                id: "a".into(),
                beat_f1: 0.5,
                majmin: f64::NAN,
                triads: 0.25,
                tetrads: 0.125,
                unknown_chord_frames: 0,
            }],
        };
        let json = report.to_json();
        assert!(json.contains("\"majmin\": null"));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert!(back.majmin.is_nan());
        assert_eq!(back.clips[0].triads, 0.25);
        assert_eq!(mean_defined([f64::NAN, 1.0, 0.0].into_iter()), 0.5);
    }

    fn separated_beats() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.15f64..0.6, 0..20).prop_map(|gaps| {
            gaps.iter()
                .scan(0.0, |t, g| {
                    *t += g;
                    Some(*t)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn beat_f1_is_symmetric(a in separated_beats(), b in separated_beats()) {
            let ab = beat_f1(&a, &b, BEAT_TOLERANCE).unwrap();
            let ba = beat_f1(&b, &a, BEAT_TOLERANCE).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn reduction_is_idempotent(root in 0u8..12, q in 0usize..12, level in 0usize..3) {
            let quality = crate::conditions::ChordQuality::ALL[q];
            let level = ChordLevel::ALL[level];
            let once = reduce_chord(ChordSymbol::new(root, quality), level);
            if let Some(r) = once {
                prop_assert_eq!(reduce_chord(r, level), Some(r));
            }
        }

        #[test]
        fn self_score_is_one(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vocab = ChordSymbol::vocabulary();
            let seq = ChordFrameSeq::new((0..40).map(|_| vocab[rng.random_range(0..vocab.len())]).collect(), 50.0);
            for level in ChordLevel::ALL {
                let s = chord_score(&seq, &seq, level).unwrap();
                prop_assert!(s.is_nan() || s == 1.0);
            }
        }
    }
}
