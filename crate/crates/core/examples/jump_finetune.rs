//! Which parameters a jump finetune trains, and how many blocks carry the
//! in-attention condition under each mode.

use tempcondlm::model::{freeze_mask_for_jump_finetune, in_attention_blocks, InAttention, Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for blocks in [1, 2, 4, 8, 12] {
        println!("{blocks:>2} blocks -> {} with in-attention", in_attention_blocks(blocks));
    }

    let config = ModelConfig::desk();
    let model = Model::<f32>::new(config.clone(), 0)?;
    let mask = freeze_mask_for_jump_finetune(&config);
    let layout = model.layout();
    println!("trainable layers: {:?}", mask.trainable_layers(layout));
    println!(
        "trainable parameters: {} of {}",
        mask.trainable_count(layout),
        layout.total()
    );
    for (spec, &on) in layout.specs().iter().zip(mask.flags()) {
        if on && !spec.name.starts_with("layers.") {
            println!("  also trained: {}", spec.name);
        }
    }

    for mode in [InAttention::Off, InAttention::Adaptive, InAttention::Full] {
        let cfg = ModelConfig {
            in_attention: mode,
            ..config.clone()
        };
        println!("{mode:?}: block gates {:?}", cfg.gates());
    }
    Ok(())
}
