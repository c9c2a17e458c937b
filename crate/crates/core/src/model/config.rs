use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Self-attention layers grouped into one condition-gated block.
pub const LAYERS_PER_BLOCK: usize = 4;

/// Which blocks receive the frame-wise conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InAttention {
    /// No block receives them.
    Off,
    /// The first three quarters of the blocks.
    #[default]
    Adaptive,
    /// Every block.
    Full,
}

/// Number of leading blocks that receive in-attention: three quarters of
/// the blocks rounded down, at least one.
pub fn in_attention_blocks(n_blocks: usize) -> usize {
    (3 * n_blocks / 4).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub codebooks: usize,
    pub codebook_size: u32,
    pub n_genres: usize,
    pub frame_rate: f64,
    pub prepend_rate: f64,
    /// Longest sequence (prepend region plus token frames) the model accepts.
    pub max_frames: usize,
    pub in_attention: InAttention,
}

impl ModelConfig {
    /// 16 layers of width 128, the reference toy scale.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 16,
            dim: 128,
            heads: 4,
            mlp_hidden: 512,
            codebooks: 4,
            codebook_size: 1024,
            n_genres: 5,
            frame_rate: 50.0,
            prepend_rate: 5.0,
            max_frames: 576,
            in_attention: InAttention::Adaptive,
        }
    }

    /// Narrow variant of [`ModelConfig::toy`] that trains on a single CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 32,
            mlp_hidden: 64,
            max_frames: 288,
            ..ModelConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 || self.layers % LAYERS_PER_BLOCK != 0 {
            return bad(format!("layer count {} is not a positive multiple of 4", self.layers));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return bad("width must be even for the sinusoidal encoding".into());
        }
        if self.codebooks == 0 || self.codebook_size == 0 || self.mlp_hidden == 0 {
            return bad("empty codebooks or MLP".into());
        }
        if !(self.frame_rate > 0.0 && self.prepend_rate > 0.0) {
            return bad("frame rates must be positive".into());
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.layers / LAYERS_PER_BLOCK
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Output classes per codebook: `N` tokens plus PAD.
    pub fn classes(&self) -> usize {
        self.codebook_size as usize + 1
    }

    pub fn null_genre(&self) -> usize {
        self.n_genres
    }

    /// Per-block in-attention switches.
    pub fn gates(&self) -> Vec<bool> {
        let n = self.n_blocks();
        match self.in_attention {
            InAttention::Off => vec![false; n],
            InAttention::Full => vec![true; n],
            InAttention::Adaptive => {
                let on = in_attention_blocks(n);
                (0..n).map(|b| b < on).collect()
            }
        }
    }

    /// Same parameter shapes; gating and context length may differ.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.layers == other.layers
            && self.dim == other.dim
            && self.heads == other.heads
            && self.mlp_hidden == other.mlp_hidden
            && self.codebooks == other.codebooks
            && self.codebook_size == other.codebook_size
            && self.n_genres == other.n_genres
    }
}

/// What a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    TokenEmbedding,
    GenreEmbedding,
    PrependProjection,
    ConditionProjection,
    Layer(usize),
    FinalNorm,
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ls1: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub ls2: Range<usize>,
}

/// Where every named tensor sits in the flat parameter buffer.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
    pub(crate) tok_emb: Vec<Range<usize>>,
    pub(crate) genre_emb: Range<usize>,
    pub(crate) cpre_w: Range<usize>,
    pub(crate) cpre_b: Range<usize>,
    pub(crate) cond_w: Range<usize>,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: Range<usize>,
    pub(crate) lnf_b: Range<usize>,
    pub(crate) head_w: Vec<Range<usize>>,
    pub(crate) head_b: Vec<Range<usize>>,
}

/// Chromagram channels of the prepend projection.
pub const PREPEND_CHANNELS: usize = 12;
/// `[C_sum ; R]` channels of the frame-wise projection.
pub const FRAME_CHANNELS: usize = 13;

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, group: ParamGroup| {
            let len: usize = shape.iter().product();
            let range = total..total + len;
            total += len;
            specs.push(ParamSpec {
                name,
                shape,
                range: range.clone(),
                group,
            });
            range
        };
        let (d, h, c) = (cfg.dim, cfg.mlp_hidden, cfg.classes());
        let tok_emb = (0..cfg.codebooks)
            .map(|k| add(format!("tok_emb.{k}"), vec![c, d], ParamGroup::TokenEmbedding))
            .collect();
        let genre_emb = add("genre_emb".into(), vec![cfg.n_genres + 1, d], ParamGroup::GenreEmbedding);
        let cpre_w = add("cpre_proj.w".into(), vec![PREPEND_CHANNELS, d], ParamGroup::PrependProjection);
        let cpre_b = add("cpre_proj.b".into(), vec![d], ParamGroup::PrependProjection);
        let cond_w = add("cond_proj.w".into(), vec![FRAME_CHANNELS, d], ParamGroup::ConditionProjection);
        let layers = (0..cfg.layers)
            .map(|l| {
                let g = ParamGroup::Layer(l);
                let mut p = |n: &str, shape: Vec<usize>| add(format!("layers.{l}.{n}"), shape, g);
                LayerOffsets {
                    ln1_g: p("ln1.g", vec![d]),
                    ln1_b: p("ln1.b", vec![d]),
                    qkv_w: p("attn.qkv.w", vec![d, 3 * d]),
                    qkv_b: p("attn.qkv.b", vec![3 * d]),
                    out_w: p("attn.out.w", vec![d, d]),
                    out_b: p("attn.out.b", vec![d]),
                    ls1: p("ls1", vec![d]),
                    ln2_g: p("ln2.g", vec![d]),
                    ln2_b: p("ln2.b", vec![d]),
                    fc_w: p("mlp.fc.w", vec![d, h]),
                    fc_b: p("mlp.fc.b", vec![h]),
                    proj_w: p("mlp.proj.w", vec![h, d]),
                    proj_b: p("mlp.proj.b", vec![d]),
                    ls2: p("ls2", vec![d]),
                }
            })
            .collect();
        let lnf_g = add("ln_f.g".into(), vec![d], ParamGroup::FinalNorm);
        let lnf_b = add("ln_f.b".into(), vec![d], ParamGroup::FinalNorm);
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for k in 0..cfg.codebooks {
            head_w.push(add(format!("head.{k}.w"), vec![d, c], ParamGroup::Head));
            head_b.push(add(format!("head.{k}.b"), vec![c], ParamGroup::Head));
        }
        ParamLayout {
            specs,
            total,
            tok_emb,
            genre_emb,
            cpre_w,
            cpre_b,
            cond_w,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Per-tensor trainable flags, aligned with [`ParamLayout::specs`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(layout: &ParamLayout) -> Self {
        FreezeMask {
            trainable: vec![true; layout.specs().len()],
        }
    }

    pub fn from_fn(layout: &ParamLayout, f: impl Fn(&ParamSpec) -> bool) -> Self {
        FreezeMask {
            trainable: layout.specs().iter().map(f).collect(),
        }
    }

    pub fn is_trainable(&self, spec_index: usize) -> bool {
        self.trainable[spec_index]
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    /// Flat-buffer ranges of trainable tensors.
    pub fn trainable_ranges<'a>(&'a self, layout: &'a ParamLayout) -> impl Iterator<Item = Range<usize>> + 'a {
        layout
            .specs()
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(s, _)| s.range.clone())
    }

    pub fn trainable_count(&self, layout: &ParamLayout) -> usize {
        self.trainable_ranges(layout).map(|r| r.len()).sum()
    }

    /// Layers whose tensors are all trainable.
    pub fn trainable_layers(&self, layout: &ParamLayout) -> Vec<usize> {
        let mut layers: Vec<usize> = layout
            .specs()
            .iter()
            .zip(&self.trainable)
            .filter_map(|(s, &t)| match s.group {
                ParamGroup::Layer(l) if t => Some(l),
                _ => None,
            })
            .collect();
        layers.dedup();
        layers
            .into_iter()
            .filter(|&l| {
                layout
                    .specs()
                    .iter()
                    .zip(&self.trainable)
                    .all(|(s, &t)| s.group != ParamGroup::Layer(l) || t)
            })
            .collect()
    }
}

/// Jump finetuning: the first layer of every block plus both condition
/// projections train; embeddings, the other layers and the output heads
/// stay frozen.
pub fn freeze_mask_for_jump_finetune(cfg: &ModelConfig) -> FreezeMask {
    let layout = ParamLayout::new(cfg);
    FreezeMask::from_fn(&layout, |s| match s.group {
        ParamGroup::Layer(l) => l % LAYERS_PER_BLOCK == 0,
        ParamGroup::PrependProjection | ParamGroup::ConditionProjection => true,
        _ => false,
    })
}
