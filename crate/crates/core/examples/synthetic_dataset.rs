//! Generate a small synthetic corpus and check that chord changes sit on
//! bar lines.

use tempcondlm::dataset::{generate_dataset, read_dataset, GenerationParams};
use tempcondlm::toycodec::ToyCodecSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("tempcondlm-example-data");
    let params = GenerationParams {
        n_clips: 16,
        heldout_clips: 4,
        seed: 7,
        ..Default::default()
    };
    generate_dataset(&dir, &params, &ToyCodecSpec::default())?;
    let train = read_dataset(&dir.join("train.jsonl"))?;
    let heldout = read_dataset(&dir.join("heldout.jsonl"))?;
    println!("{} training clips, {} held out, in {}", train.clips.len(), heldout.clips.len(), dir.display());

    for clip in train.clips.iter().take(4) {
        let bar = 60.0 / clip.bpm * params.beats_per_bar as f64;
        let spans: Vec<String> = clip
            .track
            .spans()
            .iter()
            .map(|s| format!("{}@{:.2}", s.symbol, s.start_sec))
            .collect();
        println!("{} {:<5} {:>5.1} bpm  bar {:.2}s  T={}  {}", clip.id, clip.genre.name(), clip.bpm, bar, clip.grid.frames(), spans.join(" "));
        let downbeats = clip.beats.downbeat_times();
        for span in &clip.track.spans()[1..] {
            let on_bar = downbeats.iter().any(|d| (d - span.start_sec).abs() < 1e-3);
            assert!(on_bar, "{} change at {:.3} is off the bar grid", clip.id, span.start_sec);
        }
    }
    Ok(())
}
