//! Lab-style text files: `start<TAB>end<TAB>symbol` for chords and
//! `time<TAB>{beat|downbeat}` for beats. Blank lines and `#` comments are
//! skipped; fields may be separated by any whitespace.

use std::fmt::Write;

use super::{parse_chord_symbol, BeatGrid, ChordSpan, ChordTrack, ConditionError};

fn bad_line(line: usize, reason: impl Into<String>) -> ConditionError {
    ConditionError::BadLine {
        line,
        reason: reason.into(),
    }
}

fn parse_time(field: &str, line: usize) -> Result<f64, ConditionError> {
    match field.parse::<f64>() {
        Ok(t) if t.is_finite() => Ok(t),
        _ => Err(bad_line(line, format!("bad time {field:?}"))),
    }
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

/// Parses a chord file. With `duration_sec = None` the track ends with its
/// last span.
pub fn parse_chord_file(text: &str, duration_sec: Option<f64>) -> Result<ChordTrack, ConditionError> {
    let mut spans = Vec::new();
    let mut lines = Vec::new();
    for (line, fields) in records(text) {
        let [start, end, symbol] = fields[..] else {
            return Err(bad_line(line, format!("expected 3 fields, found {}", fields.len())));
        };
        let symbol = parse_chord_symbol(symbol).map_err(|e| bad_line(line, e.to_string()))?;
        spans.push(ChordSpan {
            start_sec: parse_time(start, line)?,
            end_sec: parse_time(end, line)?,
            symbol,
        });
        lines.push(line);
    }
    let duration = duration_sec.unwrap_or_else(|| spans.last().map_or(0.0, |s| s.end_sec));
    ChordTrack::new(spans, duration).map_err(|e| match e {
        ConditionError::InvalidSpan { index, reason } => bad_line(lines[index], reason),
        other => other,
    })
}

pub fn format_chord_file(track: &ChordTrack) -> String {
    let mut out = String::new();
    for s in track.spans() {
        let _ = writeln!(out, "{}\t{}\t{}", s.start_sec, s.end_sec, s.symbol);
    }
    out
}

pub fn parse_beat_file(text: &str, duration_sec: f64) -> Result<BeatGrid, ConditionError> {
    let mut beats = Vec::new();
    let mut downbeats = Vec::new();
    for (line, fields) in records(text) {
        let [time, kind] = fields[..] else {
            return Err(bad_line(line, format!("expected 2 fields, found {}", fields.len())));
        };
        let t = parse_time(time, line)?;
        match kind {
            "beat" => {}
            "downbeat" => downbeats.push(t),
            other => return Err(bad_line(line, format!("unknown beat kind {other:?}"))),
        }
        beats.push(t);
    }
    BeatGrid::new(beats, downbeats, duration_sec)
}

pub fn format_beat_file(grid: &BeatGrid) -> String {
    let mut out = String::new();
    for &t in grid.beat_times() {
        let kind = if grid.is_downbeat(t) { "downbeat" } else { "beat" };
        let _ = writeln!(out, "{t}\t{kind}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::beats_from_bpm;

    #[test]
    fn chord_file_roundtrip() {
        let text = "0\t1.5\tC:maj\n1.5\t3\tA:min7\n\n3 4 N\n";
        let track = parse_chord_file(text, None).unwrap();
        assert_eq!(track.spans().len(), 3);
        assert_eq!(track.duration_sec(), 4.0);
        let again = parse_chord_file(&format_chord_file(&track), Some(4.0)).unwrap();
        assert_eq!(again, track);
    }

    #[test]
    fn chord_file_errors_name_line() {
        let text = "0\t1\tC:maj\n# comment\n1\t2\tC:maj13\n";
        match parse_chord_file(text, None) {
            Err(ConditionError::BadLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_chord_file("0\t1\tC\n0.5\t2\tG\n", None) {
            Err(ConditionError::BadLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_chord_file("0 x C\n", None),
            Err(ConditionError::BadLine { line: 1, .. })
        ));
    }

    #[test]
    fn beat_file_roundtrip() {
        let grid = beats_from_bpm(100.0, 3, 5.0, 0.1).unwrap();
        let text = format_beat_file(&grid);
        assert!(text.starts_with("0.1\tdownbeat\n"));
        assert_eq!(parse_beat_file(&text, 5.0).unwrap(), grid);
        assert!(parse_beat_file("0.5\tsnare\n", 1.0).is_err());
    }
}
