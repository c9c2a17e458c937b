//! Beat F-measure, chord accuracy at three strictness levels and the
//! Fréchet distance between two embedding sets.

use tempcondlm::conditions::parse_chord_symbol;
use tempcondlm::evaluation::{beat_f1, chord_score, frechet_distance, ChordFrameSeq, ChordLevel, BEAT_TOLERANCE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reference = [0.5, 1.0, 1.5, 2.0];
    let estimated = [0.52, 1.04, 1.62, 2.0, 2.4];
    println!("beat F1 = {:.3}", beat_f1(&reference, &estimated, BEAT_TOLERANCE)?);

    let seq = |labels: &[&str]| -> Result<ChordFrameSeq, Box<dyn std::error::Error>> {
        let symbols = labels.iter().map(|l| parse_chord_symbol(l)).collect::<Result<_, _>>()?;
        Ok(ChordFrameSeq::new(symbols, 50.0))
    };
    let truth = seq(&["C:maj7", "C:maj7", "A:min7", "G:7", "B:hdim7", "N"])?;
    let guess = seq(&["C:maj", "C:maj7", "A:min", "G:maj", "B:dim", "N"])?;
    for level in ChordLevel::ALL {
        println!("{level:?}: {:.3}", chord_score(&truth, &guess, level)?);
    }

    let a: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 0.5, v[1]]).collect();
    println!("FD(a, a) = {:.2e}", frechet_distance(&a, &a)?);
    println!("FD(a, a + 0.5) = {:.4}", frechet_distance(&a, &b)?);
    Ok(())
}
