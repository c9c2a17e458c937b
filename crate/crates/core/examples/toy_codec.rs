//! Pack chord, rhythm and genre into codebook-0 tokens and read them back.

use tempcondlm::conditions::{beats_from_bpm, build_condition_bundle, parse_chord_file, GenreId};
use tempcondlm::toycodec::{decode_clip, encode_clip, ToyCodecSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ToyCodecSpec {
        noise_rate: 0.2,
        ..Default::default()
    };
    let track = parse_chord_file("0 1 F:maj7\n1 2 D:min\n", None)?;
    let beats = beats_from_bpm(90.0, 3, track.duration_sec(), 0.1)?;
    let bundle = build_condition_bundle(&track, &beats, GenreId(2), 5.0, spec.frame_rate)?;

    let grid = encode_clip(&bundle, &spec, 42)?;
    println!("grid: T={} K={} N={}", grid.frames(), grid.codebooks(), grid.codebook_size());
    for t in [0, 5, 49, 50, 99] {
        let (chord, rhythm, genre) = spec.unpack(grid.get(t, 0));
        println!("  frame {t:>3}: token {:>4} -> chord id {chord}, rhythm {rhythm}, genre {genre}", grid.get(t, 0));
    }

    let decoded = decode_clip(&grid, &spec)?;
    let symbols = decoded.chord_symbols(&spec);
    println!("chords at frames 0 and 60: {} {}", symbols[0], symbols[60]);
    println!("genre vote: {:?}", decoded.majority_genre().map(GenreId::name));
    let times: Vec<String> = decoded.beat_times().iter().map(|t| format!("{t:.2}")).collect();
    println!("beats: {}", times.join(" "));
    println!("given beats: {:?}", beats.beat_times());
    Ok(())
}
