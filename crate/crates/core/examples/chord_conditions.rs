//! Parse a chord file, lay beats on a tempo grid and build the condition
//! bundle the model consumes.

use tempcondlm::conditions::{beats_from_bpm, build_condition_bundle, parse_chord_file, GenreId};

const CHORDS: &str = "\
# start end symbol
0.0 2.0 C:maj
2.0 3.0 A:min7
3.0 4.0 G:7
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let track = parse_chord_file(CHORDS, None)?;
    let beats = beats_from_bpm(120.0, 4, track.duration_sec(), 0.0)?;
    let bundle = build_condition_bundle(&track, &beats, GenreId::parse("jazz")?, 5.0, 50.0)?;

    let c_pre = bundle.c_pre.as_ref().unwrap();
    let c_sum = bundle.c_sum.as_ref().unwrap();
    let rhythm = bundle.rhythm.as_ref().unwrap();
    println!("{} prepend rows at {} Hz", c_pre.frames.len(), c_pre.frame_rate);
    println!("{} frame rows at {} Hz", c_sum.frames.len(), c_sum.frame_rate);

    let names = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
    for (i, row) in c_pre.frames.iter().enumerate().step_by(5) {
        let notes: Vec<&str> = row.iter().zip(names).filter(|(v, _)| **v > 0.0).map(|(_, n)| n).collect();
        println!("  t={:.1}s  {}", i as f64 / c_pre.frame_rate, notes.join(" "));
    }

    let peaks: Vec<String> = rhythm
        .frames
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= 0.99)
        .map(|(t, &r)| format!("{}{}", t, if r > 1.0 { "*" } else { "" }))
        .collect();
    println!("beat frames (* = downbeat): {}", peaks.join(" "));
    Ok(())
}
