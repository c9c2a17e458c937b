use serde::{Deserialize, Serialize};

use super::ConditionError;

/// Symmetric ramp stamped around each beat frame: +/-3 frames, i.e. +/-60 ms
/// at 50 Hz.
pub const BEAT_KERNEL: [f32; 7] = [0.25, 0.5, 0.75, 1.0, 0.75, 0.5, 0.25];

const SUBSET_TOL: f64 = 1e-6;

/// Beat and downbeat instants of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatGrid {
    beat_times: Vec<f64>,
    downbeat_times: Vec<f64>,
    duration_sec: f64,
}

impl BeatGrid {
    /// Validates ordering, range and that every downbeat is also a beat.
    pub fn new(
        beat_times: Vec<f64>,
        downbeat_times: Vec<f64>,
        duration_sec: f64,
    ) -> Result<Self, ConditionError> {
        let bad = |m: String| Err(ConditionError::InvalidBeatGrid(m));
        if !(duration_sec > 0.0) {
            return bad(format!("non-positive duration {duration_sec}"));
        }
        for (name, list) in [("beat", &beat_times), ("downbeat", &downbeat_times)] {
            if list.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("{name} times are not strictly increasing"));
            }
            if let Some(t) = list.iter().find(|&&t| !(0.0..duration_sec).contains(&t)) {
                return bad(format!("{name} time {t} outside [0, {duration_sec})"));
            }
        }
        for &d in &downbeat_times {
            let i = beat_times.partition_point(|&b| b < d - SUBSET_TOL);
            if !beat_times.get(i).is_some_and(|&b| (b - d).abs() <= SUBSET_TOL) {
                return bad(format!("downbeat {d} is not a beat"));
            }
        }
        Ok(BeatGrid {
            beat_times,
            downbeat_times,
            duration_sec,
        })
    }

    pub fn beat_times(&self) -> &[f64] {
        &self.beat_times
    }

    pub fn downbeat_times(&self) -> &[f64] {
        &self.downbeat_times
    }

    pub fn duration_sec(&self) -> f64 {
        self.duration_sec
    }

    pub fn is_downbeat(&self, t: f64) -> bool {
        let i = self.downbeat_times.partition_point(|&d| d < t - SUBSET_TOL);
        self.downbeat_times
            .get(i)
            .is_some_and(|&d| (d - t).abs() <= SUBSET_TOL)
    }
}

/// A metronomic grid: beats at `phase + k * 60 / bpm`, every
/// `beats_per_bar`-th beat (starting with the first) a downbeat.
pub fn beats_from_bpm(
    bpm: f64,
    beats_per_bar: usize,
    duration_sec: f64,
    phase_sec: f64,
) -> Result<BeatGrid, ConditionError> {
    if !(bpm > 0.0 && bpm.is_finite()) {
        return Err(ConditionError::InvalidTempo(bpm));
    }
    if beats_per_bar == 0 {
        return Err(ConditionError::InvalidMeter(beats_per_bar));
    }
    let period = 60.0 / bpm;
    if !(0.0..period).contains(&phase_sec) {
        return Err(ConditionError::InvalidPhase {
            phase: phase_sec,
            period,
        });
    }
    let mut beats = Vec::new();
    let mut downbeats = Vec::new();
    for k in 0.. {
        let t = phase_sec + k as f64 * period;
        if t >= duration_sec {
            break;
        }
        beats.push(t);
        if k % beats_per_bar == 0 {
            downbeats.push(t);
        }
    }
    BeatGrid::new(beats, downbeats, duration_sec)
}

/// One-hot beat frames widened by [`BEAT_KERNEL`]; overlapping kernels combine
/// by maximum so the result stays in `[0, 1]`.
pub fn soften_beats(
    beat_times: &[f64],
    frame_rate: f64,
    n_frames: usize,
) -> Result<Vec<f32>, ConditionError> {
    let limit = n_frames as f64 / frame_rate;
    let mut out = vec![0.0f32; n_frames];
    let half = (BEAT_KERNEL.len() / 2) as i64;
    for &t in beat_times {
        if !(0.0..limit).contains(&t) {
            return Err(ConditionError::BeatOutOfRange { time: t, limit });
        }
        let centre = (t * frame_rate).round() as i64;
        for (j, &w) in BEAT_KERNEL.iter().enumerate() {
            let f = centre + j as i64 - half;
            if (0..n_frames as i64).contains(&f) {
                let v = &mut out[f as usize];
                *v = v.max(w);
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bpm_grids() {
        let g = beats_from_bpm(120.0, 4, 2.0, 0.0).unwrap();
        assert_eq!(g.beat_times(), &[0.0, 0.5, 1.0, 1.5]);
        assert_eq!(g.downbeat_times(), &[0.0]);

        let g = beats_from_bpm(60.0, 3, 3.1, 0.0).unwrap();
        assert_eq!(g.beat_times(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.downbeat_times(), &[0.0, 3.0]);
    }

    #[test]
    fn bpm_grid_counts_match_enumeration() {
        // count k >= 0 with 0.2 + k * (60/90) < 30 by scanning integers
        let period = 60.0 / 90.0;
        let n = (0..1000).filter(|&k| 0.2 + k as f64 * period < 30.0).count();
        let downs = (0..n).filter(|k| k % 4 == 0).count();
        assert_eq!((n, downs), (45, 12));
        let g = beats_from_bpm(90.0, 4, 30.0, 0.2).unwrap();
        assert_eq!(g.beat_times().len(), n);
        assert_eq!(g.downbeat_times().len(), downs);
    }

    #[test]
    fn bpm_errors() {
        assert!(matches!(beats_from_bpm(0.0, 4, 2.0, 0.0), Err(ConditionError::InvalidTempo(_))));
        assert!(matches!(beats_from_bpm(-5.0, 4, 2.0, 0.0), Err(ConditionError::InvalidTempo(_))));
        assert!(matches!(beats_from_bpm(120.0, 0, 2.0, 0.0), Err(ConditionError::InvalidMeter(0))));
        assert!(matches!(
            beats_from_bpm(120.0, 4, 2.0, 0.5),
            Err(ConditionError::InvalidPhase { .. })
        ));
    }

    #[test]
    fn single_beat_kernel() {
        let v = soften_beats(&[1.0], 50.0, 100).unwrap();
        assert_eq!(v[50], 1.0);
        assert_eq!(v[49], 0.75);
        assert_eq!(v[51], 0.75);
        assert_eq!(v[47], 0.25);
        assert_eq!(v[53], 0.25);
        assert_eq!(v[46], 0.0);
        assert_eq!(v[54], 0.0);
    }

    #[test]
    fn empty_beats() {
        assert_eq!(soften_beats(&[], 50.0, 10).unwrap(), vec![0.0; 10]);
    }

    #[test]
    fn out_of_range_beat() {
        assert!(matches!(
            soften_beats(&[2.0], 50.0, 100),
            Err(ConditionError::BeatOutOfRange { .. })
        ));
        assert!(soften_beats(&[-0.01], 50.0, 100).is_err());
    }

    /// Stamp each kernel into its own buffer and take the pointwise maximum.
    fn stamp_oracle(beats: &[f64], rate: f64, n: usize) -> Vec<f32> {
        let layers: Vec<Vec<f32>> = beats
            .iter()
            .map(|&t| {
                let c = (t * rate).round() as i64;
                (0..n as i64)
                    .map(|i| {
                        let d = (i - c).abs();
                        if d <= 3 {
                            1.0 - 0.25 * d as f32
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        (0..n)
            .map(|i| layers.iter().map(|l| l[i]).fold(0.0, f32::max))
            .collect()
    }

    #[test]
    fn close_beats_max_combine() {
        let beats = [1.0, 1.04];
        let v = soften_beats(&beats, 50.0, 100).unwrap();
        assert_eq!(v, stamp_oracle(&beats, 50.0, 100));
        assert!(v.iter().all(|&x| x <= 1.0));
        assert_eq!(v[51], 0.75);
    }

    #[test]
    fn downbeat_must_be_beat() {
        assert!(BeatGrid::new(vec![0.0, 0.5], vec![0.25], 1.0).is_err());
        assert!(BeatGrid::new(vec![0.0, 0.5], vec![0.5 + 1e-7], 1.0).is_ok());
        assert!(BeatGrid::new(vec![0.5, 0.0], vec![], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut beats in proptest::collection::vec(0.0f64..4.0, 0..20), seed in 0u64..1000) {
            let a = soften_beats(&beats, 50.0, 200).unwrap();
            prop_assert_eq!(&a, &stamp_oracle(&beats, 50.0, 200));
            // deterministic shuffle
            let n = beats.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                beats.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a, soften_beats(&beats, 50.0, 200).unwrap());
        }
    }
}
