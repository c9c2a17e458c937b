//! Temporal-conditioning transformer LM over delayed codec tokens.

mod checkpoint;
pub mod config;
mod decode;
pub mod linalg;
mod transformer;

use rand::Rng;
use thiserror::Error;

use crate::conditions::ConditionBundle;

pub use checkpoint::{write_atomic, Checkpoint, CheckpointTensor, OptimizerState};
pub use config::{
    freeze_mask_for_jump_finetune, in_attention_blocks, FreezeMask, InAttention, ModelConfig, ParamGroup,
    ParamLayout, ParamSpec, FRAME_CHANNELS, LAYERS_PER_BLOCK, PREPEND_CHANNELS,
};
pub use decode::{sample, sample_batch, sample_delayed, SampleRequest, SamplingParams};
pub use linalg::Scalar;
pub use transformer::{Logits, Model, Workspace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence needs {needed} positions but the model holds {max}")]
    LengthOverflow { needed: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Token(#[from] crate::tokens::TokenError),
}

/// Classifier-free guidance on logits: `(1 - gamma) * uncond + gamma * cond`.
pub fn cfg_logits<F: Scalar>(cond: &[F], uncond: &[F], gamma: F) -> Vec<F> {
    assert_eq!(cond.len(), uncond.len(), "logit shapes differ");
    let one_minus = F::one() - gamma;
    cond.iter().zip(uncond).map(|(&c, &u)| one_minus * u + gamma * c).collect()
}

/// With probability `p` replaces the whole bundle by the null bundle.
pub fn condition_dropout<R: Rng + ?Sized>(bundle: &ConditionBundle, p: f64, rng: &mut R) -> ConditionBundle {
    if rng.random::<f64>() < p {
        ConditionBundle::null()
    } else {
        bundle.clone()
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng;

    use super::{InAttention, ModelConfig};
    use crate::conditions::{
        ConditionBundle, FrameChordCondition, GenreId, PrependChordCondition, RhythmCondition,
    };
    use crate::tokens::DelayedGrid;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 4,
            dim: 8,
            heads: 2,
            mlp_hidden: 12,
            codebooks: 3,
            codebook_size: 6,
            n_genres: 5,
            frame_rate: 50.0,
            prepend_rate: 25.0,
            max_frames: 64,
            in_attention: InAttention::Adaptive,
        }
    }

    pub fn random_grid<R: Rng>(frames: usize, k: usize, n: u32, rng: &mut R) -> DelayedGrid {
        let tokens = (0..frames * k)
            .map(|i| if i / k < i % k { n } else { rng.random_range(0..n) })
            .collect();
        DelayedGrid::new(frames, k, n, tokens).unwrap()
    }

    pub fn random_bundle<R: Rng>(frames: usize, rng: &mut R) -> ConditionBundle {
        let chroma = |rng: &mut R| std::array::from_fn(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        ConditionBundle {
            c_pre: Some(PrependChordCondition {
                frames: (0..frames.div_ceil(2)).map(|_| chroma(rng)).collect(),
                frame_rate: 25.0,
            }),
            c_sum: Some(FrameChordCondition {
                frames: (0..frames).map(|_| chroma(rng)).collect(),
                frame_rate: 50.0,
            }),
            rhythm: Some(RhythmCondition {
                frames: (0..frames).map(|_| rng.random_range(0.0..2.0)).collect(),
                frame_rate: 50.0,
            }),
            genre: Some(GenreId(rng.random_range(0..5))),
        }
    }
}
