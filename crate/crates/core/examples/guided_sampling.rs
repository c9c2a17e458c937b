//! Classifier-free guidance: mix conditional and unconditional logits and
//! sample a clip from an untrained model.

use tempcondlm::conditions::{beats_from_bpm, build_condition_bundle, parse_chord_file, GenreId};
use tempcondlm::model::{cfg_logits, sample, Model, ModelConfig, SampleRequest, SamplingParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cond = [2.0f64, 0.5, -1.0];
    let uncond = [1.0f64, 1.0, 1.0];
    for gamma in [0.0, 1.0, 3.0] {
        println!("gamma {gamma}: {:?}", cfg_logits(&cond, &uncond, gamma));
    }

    let config = ModelConfig {
        dim: 16,
        mlp_hidden: 32,
        ..ModelConfig::desk()
    };
    let model = Model::<f32>::new(config.clone(), 1)?;
    let track = parse_chord_file("0 1 E:min\n", None)?;
    let beats = beats_from_bpm(100.0, 4, 1.0, 0.0)?;
    let bundle = build_condition_bundle(&track, &beats, GenreId(0), config.prepend_rate, config.frame_rate)?;
    let request = SampleRequest {
        bundle,
        frames: 50,
        seed: 9,
    };
    let params = SamplingParams {
        top_k: 20,
        ..Default::default()
    };
    let grid = sample(&model, &request, &params)?;
    let again = sample(&model, &request, &params)?;
    assert_eq!(grid, again);
    println!("sampled {} frames; first rows {:?} {:?}", grid.frames(), grid.row(0), grid.row(1));

    let greedy = SamplingParams {
        greedy: true,
        ..params
    };
    let g = sample(&model, &request, &greedy)?;
    println!("greedy first row {:?}", g.row(0));
    Ok(())
}
