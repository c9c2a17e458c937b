//! Full-sequence forward and backward passes.
//!
//! Sequence layout for one clip:
//!
//! ```text
//! [genre] [C_pre rows ...] [token frame 0] ... [token frame T-1]
//! '------ prepend P ------' '------------ token region ------------'
//! ```
//!
//! Token position `t` reads the delayed row `t - 1` (an all-PAD row at
//! `t = 0`) and predicts delayed row `t`, so its logits only depend on rows
//! before `t`. The projected `[C_sum ; R]` frames are added to the token
//! region at the entry of every gated block.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{
    FreezeMask, LayerOffsets, ModelConfig, ParamLayout, FRAME_CHANNELS, LAYERS_PER_BLOCK, PREPEND_CHANNELS,
};
use super::linalg::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, sinusoid_into, MatMut,
    MatRef, Scalar,
};
use super::ModelError;
use crate::conditions::ConditionBundle;
use crate::tokens::{DelayedGrid, EmbeddingTables};

const INIT_STD: f64 = 0.02;
const EMBED_STD: f64 = 1.0;

/// Logits laid out `T x K x (N + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<F> {
    pub frames: usize,
    pub codebooks: usize,
    pub classes: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Logits<F> {
    pub fn zeros(frames: usize, codebooks: usize, classes: usize) -> Self {
        Logits {
            frames,
            codebooks,
            classes,
            data: vec![F::zero(); frames * codebooks * classes],
        }
    }

    pub fn at(&self, t: usize, k: usize) -> &[F] {
        let start = (t * self.codebooks + k) * self.classes;
        &self.data[start..start + self.classes]
    }

    pub fn at_mut(&mut self, t: usize, k: usize) -> &mut [F] {
        let start = (t * self.codebooks + k) * self.classes;
        &mut self.data[start..start + self.classes]
    }

    pub fn same_shape(&self, other: &Logits<F>) -> bool {
        (self.frames, self.codebooks, self.classes) == (other.frames, other.codebooks, other.classes)
    }
}

/// A decoder-only transformer over delayed token grids with a flat
/// parameter buffer.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<F>,
}

/// Model inputs for one clip after validation.
pub(crate) struct Prepared<F> {
    pub genre: usize,
    /// `P' x 12` prepend chromagram, absent when `C_pre` is dropped.
    pub cpre: Option<Vec<F>>,
    /// `T x 13` frame-wise conditions, absent when both are dropped.
    pub cond: Option<Vec<F>>,
    /// `T x K` input rows: delayed row `t - 1`, PAD at `t = 0`.
    pub inputs: Vec<u32>,
    pub frames: usize,
}

impl<F> Prepared<F> {
    pub fn prefix(&self) -> usize {
        1 + self.cpre.as_ref().map_or(0, |c| c.len() / PREPEND_CHANNELS)
    }

    pub fn seq_len(&self) -> usize {
        self.prefix() + self.frames
    }
}

/// Sequence position of prepend row `j`: the token frame at its centre.
pub(crate) fn prepend_position(cfg: &ModelConfig, j: usize) -> f64 {
    (j as f64 + 0.5) * cfg.frame_rate / cfg.prepend_rate - 0.5
}

#[derive(Default)]
struct LayerCache<F> {
    x_in: Vec<F>,
    ln1: Vec<F>,
    ln1_mean: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    att: Vec<F>,
    att_y: Vec<F>,
    a: Vec<F>,
    x_mid: Vec<F>,
    ln2: Vec<F>,
    ln2_mean: Vec<F>,
    ln2_rstd: Vec<F>,
    fc: Vec<F>,
    act: Vec<F>,
    m: Vec<F>,
}

/// Reusable activation and gradient buffers.
#[derive(Default)]
pub struct Workspace<F> {
    layers: Vec<LayerCache<F>>,
    x: Vec<F>,
    u: Vec<F>,
    x_final: Vec<F>,
    y: Vec<F>,
    lnf_mean: Vec<F>,
    lnf_rstd: Vec<F>,
    logits: Vec<F>,
    dx: Vec<F>,
    dy: Vec<F>,
    du: Vec<F>,
    dm: Vec<F>,
    dact: Vec<F>,
    dln: Vec<F>,
    da: Vec<F>,
    datt_y: Vec<F>,
    dqkv: Vec<F>,
    dp: Vec<F>,
}

fn resize<F: Scalar>(v: &mut Vec<F>, n: usize) {
    v.clear();
    v.resize(n, F::zero());
}

/// Two disjoint mutable windows of one buffer; `a` must precede `b`.
fn pair_mut<'a, F>(buf: &'a mut [F], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

impl<F: Scalar> Model<F> {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![F::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.layers as f64).sqrt()).expect("valid std");
        let embed = Normal::new(0.0, EMBED_STD).expect("valid std");
        for spec in layout.specs() {
            let name = spec.name.as_str();
            let block = &mut params[spec.range.clone()];
            if name.ends_with(".g") || name.ends_with("ls1") || name.ends_with("ls2") {
                block.fill(F::one());
            } else if name.ends_with(".b") {
                block.fill(F::zero());
            } else if name.starts_with("tok_emb") || name == "genre_emb" {
                block.iter_mut().for_each(|v| *v = F::of(embed.sample(&mut rng)));
            } else if name.ends_with("attn.out.w") || name.ends_with("mlp.proj.w") {
                block.iter_mut().for_each(|v| *v = F::of(resid.sample(&mut rng)));
            } else {
                block.iter_mut().for_each(|v| *v = F::of(normal.sample(&mut rng)));
            }
        }
        // PAD rows embed to zero
        let (d, pad) = (config.dim, config.codebook_size as usize);
        for r in &layout.tok_emb {
            params[r.start + pad * d..r.start + (pad + 1) * d].fill(F::zero());
        }
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Model { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    /// Changes gating or context length; parameter shapes must not change.
    pub fn reconfigure(&mut self, config: ModelConfig) -> Result<(), ModelError> {
        config.validate()?;
        if !self.config.same_architecture(&config) {
            return Err(ModelError::ConfigMismatch("parameter shapes differ".into()));
        }
        self.config = config;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&[F]> {
        self.layout.find(name).map(|s| &self.params[s.range.clone()])
    }

    /// The per-codebook token embedding tables.
    pub fn embedding_tables(&self) -> Result<EmbeddingTables, ModelError> {
        let tables = self
            .layout
            .tok_emb
            .iter()
            .map(|r| self.params[r.clone()].iter().map(|v| v.f64() as f32).collect())
            .collect();
        Ok(EmbeddingTables::new(self.config.codebook_size, self.config.dim, tables)?)
    }

    /// Converts to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&v| G::of(v.f64())).collect(),
        }
    }

    pub(crate) fn prepare(&self, grid: &DelayedGrid, bundle: &ConditionBundle) -> Result<Prepared<F>, ModelError> {
        let cfg = &self.config;
        if grid.codebooks() != cfg.codebooks || grid.codebook_size() != cfg.codebook_size {
            return Err(ModelError::ShapeMismatch(format!(
                "grid K={} N={} for model K={} N={}",
                grid.codebooks(),
                grid.codebook_size(),
                cfg.codebooks,
                cfg.codebook_size
            )));
        }
        let frames = grid.frames();
        let pad = cfg.codebook_size;
        let mut inputs = vec![pad; frames * cfg.codebooks];
        if frames > 1 {
            inputs[cfg.codebooks..].copy_from_slice(&grid.tokens()[..(frames - 1) * cfg.codebooks]);
        }
        self.prepare_conditions(bundle, frames, inputs)
    }

    pub(crate) fn prepare_conditions(
        &self,
        bundle: &ConditionBundle,
        frames: usize,
        inputs: Vec<u32>,
    ) -> Result<Prepared<F>, ModelError> {
        let cfg = &self.config;
        let genre = match bundle.genre {
            Some(g) if (g.0 as usize) < cfg.n_genres => g.0 as usize,
            Some(g) => return Err(ModelError::ShapeMismatch(format!("genre id {} out of range", g.0))),
            None => cfg.null_genre(),
        };
        let cpre = bundle.c_pre.as_ref().map(|c| {
            c.frames
                .iter()
                .flat_map(|row| row.iter().map(|&v| F::of(v as f64)))
                .collect::<Vec<F>>()
        });
        for (name, len) in [
            ("c_sum", bundle.c_sum.as_ref().map(|c| c.frames.len())),
            ("rhythm", bundle.rhythm.as_ref().map(|r| r.frames.len())),
        ] {
            if let Some(len) = len.filter(|&l| l != frames) {
                return Err(ModelError::ShapeMismatch(format!("{name} has {len} frames, grid {frames}")));
            }
        }
        let cond = (bundle.c_sum.is_some() || bundle.rhythm.is_some()).then(|| {
            let mut c = vec![F::zero(); frames * FRAME_CHANNELS];
            for t in 0..frames {
                let row = &mut c[t * FRAME_CHANNELS..(t + 1) * FRAME_CHANNELS];
                if let Some(cs) = &bundle.c_sum {
                    for (o, &v) in row.iter_mut().zip(&cs.frames[t]) {
                        *o = F::of(v as f64);
                    }
                }
                if let Some(r) = &bundle.rhythm {
                    row[12] = F::of(r.frames[t] as f64);
                }
            }
            c
        });
        let prepared = Prepared {
            genre,
            cpre,
            cond,
            inputs,
            frames,
        };
        if prepared.seq_len() > cfg.max_frames {
            return Err(ModelError::LengthOverflow {
                needed: prepared.seq_len(),
                max: cfg.max_frames,
            });
        }
        Ok(prepared)
    }

    /// Logits for every delayed row of `grid`.
    pub fn forward(&self, grid: &DelayedGrid, bundle: &ConditionBundle) -> Result<Logits<F>, ModelError> {
        let input = self.prepare(grid, bundle)?;
        let mut ws = Workspace::default();
        self.forward_cached(&input, &mut ws);
        Ok(Logits {
            frames: input.frames,
            codebooks: self.config.codebooks,
            classes: self.config.classes(),
            data: std::mem::take(&mut ws.logits),
        })
    }

    /// Mean-cross-entropy contribution of one clip: runs forward and
    /// backward, adds `scale * d(loss_sum)/d(theta)` into `grads` for
    /// trainable tensors, and returns `(loss_sum, target_count)`.
    pub fn accumulate_gradients(
        &self,
        grid: &DelayedGrid,
        bundle: &ConditionBundle,
        scale: F,
        grads: &mut [F],
        mask: &FreezeMask,
        ws: &mut Workspace<F>,
    ) -> Result<(f64, usize), ModelError> {
        assert_eq!(grads.len(), self.params.len());
        let input = self.prepare(grid, bundle)?;
        self.forward_cached(&input, ws);
        let mut logits = Logits {
            frames: input.frames,
            codebooks: self.config.codebooks,
            classes: self.config.classes(),
            data: std::mem::take(&mut ws.logits),
        };
        let (loss, count) = cross_entropy_in_place(&mut logits, grid, scale);
        self.backward(&input, ws, &logits.data, grads, mask);
        ws.logits = logits.data;
        Ok((loss, count))
    }

    /// Writes the genre and prepend rows (`prefix x D`) into `x`.
    pub(crate) fn embed_prefix(&self, input: &Prepared<F>, x: &mut [F]) {
        let cfg = &self.config;
        let d = cfg.dim;
        let p = &self.params;
        let prefix = input.prefix();
        let g = self.layout.genre_emb.start + input.genre * d;
        x[..d].copy_from_slice(&p[g..g + d]);
        if let Some(cpre) = &input.cpre {
            let rows = prefix - 1;
            linear(
                &mut x[d..prefix * d],
                cpre,
                &p[self.layout.cpre_w.clone()],
                Some(&p[self.layout.cpre_b.clone()]),
                rows,
                PREPEND_CHANNELS,
                d,
            );
            for j in 0..rows {
                sinusoid_into(&mut x[(1 + j) * d..(2 + j) * d], prepend_position(cfg, j));
            }
        }
    }

    /// Embedding of token position `t` whose input row is `tokens`.
    pub(crate) fn embed_token(&self, tokens: &[u32], t: usize, out: &mut [F]) {
        let d = self.config.dim;
        out.fill(F::zero());
        for (k, &tok) in tokens.iter().enumerate() {
            let start = self.layout.tok_emb[k].start + tok as usize * d;
            for (o, &v) in out.iter_mut().zip(&self.params[start..start + d]) {
                *o += v;
            }
        }
        sinusoid_into(out, t as f64);
    }

    fn embed(&self, input: &Prepared<F>, x: &mut [F]) {
        let (d, kk) = (self.config.dim, self.config.codebooks);
        let prefix = input.prefix();
        self.embed_prefix(input, x);
        for t in 0..input.frames {
            self.embed_token(
                &input.inputs[t * kk..(t + 1) * kk],
                t,
                &mut x[(prefix + t) * d..(prefix + t + 1) * d],
            );
        }
    }

    fn forward_cached(&self, input: &Prepared<F>, ws: &mut Workspace<F>) {
        let cfg = &self.config;
        let (d, s, prefix, frames) = (cfg.dim, input.seq_len(), input.prefix(), input.frames);
        let p = &self.params;
        resize(&mut ws.x, s * d);
        let mut x = std::mem::take(&mut ws.x);
        self.embed(input, &mut x);

        if let Some(cond) = &input.cond {
            resize(&mut ws.u, frames * d);
            linear(&mut ws.u, cond, &p[self.layout.cond_w.clone()], None, frames, FRAME_CHANNELS, d);
        }
        let gates = cfg.gates();
        ws.layers.resize_with(cfg.layers, LayerCache::default);
        for l in 0..cfg.layers {
            if l % LAYERS_PER_BLOCK == 0 && gates[l / LAYERS_PER_BLOCK] && input.cond.is_some() {
                for (o, &v) in x[prefix * d..].iter_mut().zip(&ws.u) {
                    *o += v;
                }
            }
            self.layer_forward(&self.layout.layers[l], &mut x, s, &mut ws.layers[l]);
        }

        let tok = &x[prefix * d..];
        resize(&mut ws.x_final, frames * d);
        ws.x_final.copy_from_slice(tok);
        resize(&mut ws.y, frames * d);
        resize(&mut ws.lnf_mean, frames);
        resize(&mut ws.lnf_rstd, frames);
        layer_norm(
            &mut ws.y,
            &mut ws.lnf_mean,
            &mut ws.lnf_rstd,
            tok,
            &p[self.layout.lnf_g.clone()],
            &p[self.layout.lnf_b.clone()],
            frames,
            d,
        );
        let (kk, c) = (cfg.codebooks, cfg.classes());
        resize(&mut ws.logits, frames * kk * c);
        for k in 0..kk {
            let bias = &p[self.layout.head_b[k].clone()];
            for t in 0..frames {
                ws.logits[(t * kk + k) * c..(t * kk + k + 1) * c].copy_from_slice(bias);
            }
            if frames > 0 {
                gemm(
                    MatMut::strided(&mut ws.logits[k * c..], frames, c, kk * c, 1),
                    MatRef::new(&ws.y, frames, d),
                    MatRef::new(&p[self.layout.head_w[k].clone()], d, c),
                    F::one(),
                    F::one(),
                );
            }
        }
        ws.x = x;
    }

    fn layer_forward(&self, o: &LayerOffsets, x: &mut [F], s: usize, c: &mut LayerCache<F>) {
        let cfg = &self.config;
        let (d, h, hm) = (cfg.dim, cfg.heads, cfg.mlp_hidden);
        let p = &self.params;
        resize(&mut c.x_in, s * d);
        c.x_in.copy_from_slice(x);
        resize(&mut c.ln1, s * d);
        resize(&mut c.ln1_mean, s);
        resize(&mut c.ln1_rstd, s);
        layer_norm(&mut c.ln1, &mut c.ln1_mean, &mut c.ln1_rstd, x, &p[o.ln1_g.clone()], &p[o.ln1_b.clone()], s, d);
        resize(&mut c.qkv, s * 3 * d);
        linear(&mut c.qkv, &c.ln1, &p[o.qkv_w.clone()], Some(&p[o.qkv_b.clone()]), s, d, 3 * d);
        resize(&mut c.att, h * s * s);
        resize(&mut c.att_y, s * d);
        attention_forward(&c.qkv, &mut c.att, &mut c.att_y, s, d, h);
        resize(&mut c.a, s * d);
        linear(&mut c.a, &c.att_y, &p[o.out_w.clone()], Some(&p[o.out_b.clone()]), s, d, d);
        add_scaled_rows(x, &c.a, &p[o.ls1.clone()]);
        resize(&mut c.x_mid, s * d);
        c.x_mid.copy_from_slice(x);
        resize(&mut c.ln2, s * d);
        resize(&mut c.ln2_mean, s);
        resize(&mut c.ln2_rstd, s);
        layer_norm(&mut c.ln2, &mut c.ln2_mean, &mut c.ln2_rstd, x, &p[o.ln2_g.clone()], &p[o.ln2_b.clone()], s, d);
        resize(&mut c.fc, s * hm);
        linear(&mut c.fc, &c.ln2, &p[o.fc_w.clone()], Some(&p[o.fc_b.clone()]), s, d, hm);
        resize(&mut c.act, s * hm);
        for (a, &f) in c.act.iter_mut().zip(&c.fc) {
            *a = gelu(f);
        }
        resize(&mut c.m, s * d);
        linear(&mut c.m, &c.act, &p[o.proj_w.clone()], Some(&p[o.proj_b.clone()]), s, hm, d);
        add_scaled_rows(x, &c.m, &p[o.ls2.clone()]);
    }

    fn backward(&self, input: &Prepared<F>, ws: &mut Workspace<F>, dlogits: &[F], grads: &mut [F], mask: &FreezeMask) {
        let cfg = &self.config;
        let (d, s, prefix, frames) = (cfg.dim, input.seq_len(), input.prefix(), input.frames);
        let (kk, c) = (cfg.codebooks, cfg.classes());
        let p = &self.params;
        let lay = &self.layout;
        let train = |r: &Range<usize>| -> bool {
            let i = lay.specs().partition_point(|sp| sp.range.start < r.start);
            mask.is_trainable(i)
        };

        resize(&mut ws.dy, frames * d);
        for k in 0..kk {
            let dl = MatRef::strided(&dlogits[k * c..], frames, c, kk * c, 1);
            if frames == 0 {
                continue;
            }
            if train(&lay.head_w[k]) {
                let (dw, db) = pair_mut(grads, &lay.head_w[k], &lay.head_b[k]);
                gemm(MatMut::new(dw, d, c), MatRef::new(&ws.y, frames, d).t(), dl, F::one(), F::one());
                for t in 0..frames {
                    for (a, &g) in db.iter_mut().zip(&dlogits[(t * kk + k) * c..(t * kk + k + 1) * c]) {
                        *a += g;
                    }
                }
            }
            gemm(
                MatMut::new(&mut ws.dy, frames, d),
                dl,
                MatRef::new(&p[lay.head_w[k].clone()], d, c).t(),
                F::one(),
                F::one(),
            );
        }

        resize(&mut ws.dx, s * d);
        {
            let dparams = train(&lay.lnf_g).then(|| pair_mut(grads, &lay.lnf_g, &lay.lnf_b));
            layer_norm_backward(
                &mut ws.dx[prefix * d..],
                dparams,
                &ws.dy,
                &ws.x_final,
                &ws.lnf_mean,
                &ws.lnf_rstd,
                &p[lay.lnf_g.clone()],
                frames,
                d,
            );
        }

        let gates = cfg.gates();
        let has_cond = input.cond.is_some();
        if has_cond {
            resize(&mut ws.du, frames * d);
        }
        for l in (0..cfg.layers).rev() {
            self.layer_backward(l, s, ws, grads, &train);
            if l % LAYERS_PER_BLOCK == 0 && gates[l / LAYERS_PER_BLOCK] && has_cond {
                for (a, &g) in ws.du.iter_mut().zip(&ws.dx[prefix * d..]) {
                    *a += g;
                }
            }
        }

        if train(&lay.genre_emb) {
            let g = lay.genre_emb.start + input.genre * d;
            for (a, &v) in grads[g..g + d].iter_mut().zip(&ws.dx[..d]) {
                *a += v;
            }
        }
        if let (Some(cpre), true) = (&input.cpre, train(&lay.cpre_w)) {
            let (dw, db) = pair_mut(grads, &lay.cpre_w, &lay.cpre_b);
            linear_backward(&ws.dx[d..prefix * d], cpre, &[], prefix - 1, PREPEND_CHANNELS, d, Some(dw), Some(db), None);
        }
        for k in 0..kk {
            if !train(&lay.tok_emb[k]) {
                continue;
            }
            for t in 0..frames {
                let tok = input.inputs[t * kk + k] as usize;
                let start = lay.tok_emb[k].start + tok * d;
                for (a, &v) in grads[start..start + d].iter_mut().zip(&ws.dx[(prefix + t) * d..(prefix + t + 1) * d]) {
                    *a += v;
                }
            }
        }
        if let (Some(cond), true) = (&input.cond, train(&lay.cond_w)) {
            linear_backward(&ws.du, cond, &[], frames, FRAME_CHANNELS, d, Some(&mut grads[lay.cond_w.clone()]), None, None);
        }
    }

    /// Turns `ws.dx` from the gradient of layer `l`'s output into the
    /// gradient of its input.
    fn layer_backward(
        &self,
        l: usize,
        s: usize,
        ws: &mut Workspace<F>,
        grads: &mut [F],
        train: &dyn Fn(&Range<usize>) -> bool,
    ) {
        let cfg = &self.config;
        let (d, h, hm) = (cfg.dim, cfg.heads, cfg.mlp_hidden);
        let o = &self.layout.layers[l];
        let p = &self.params;
        let c = &ws.layers[l];

        // x_out = x_mid + ls2 * m
        if train(&o.ls2) {
            accumulate_scale_grad(&mut grads[o.ls2.clone()], &ws.dx, &c.m, d);
        }
        resize(&mut ws.dm, s * d);
        scale_rows(&mut ws.dm, &ws.dx, &p[o.ls2.clone()]);
        // m = act * proj_w + proj_b
        resize(&mut ws.dact, s * hm);
        {
            let (dw, db) = if train(&o.proj_w) {
                let (a, b) = pair_mut(grads, &o.proj_w, &o.proj_b);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            linear_backward(&ws.dm, &c.act, &p[o.proj_w.clone()], s, hm, d, dw, db, Some((&mut ws.dact, false)));
        }
        for (g, &f) in ws.dact.iter_mut().zip(&c.fc) {
            *g *= gelu_grad(f);
        }
        resize(&mut ws.dln, s * d);
        {
            let (dw, db) = if train(&o.fc_w) {
                let (a, b) = pair_mut(grads, &o.fc_w, &o.fc_b);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            linear_backward(&ws.dact, &c.ln2, &p[o.fc_w.clone()], s, d, hm, dw, db, Some((&mut ws.dln, false)));
        }
        {
            let dparams = train(&o.ln2_g).then(|| pair_mut(grads, &o.ln2_g, &o.ln2_b));
            layer_norm_backward(&mut ws.dx, dparams, &ws.dln, &c.x_mid, &c.ln2_mean, &c.ln2_rstd, &p[o.ln2_g.clone()], s, d);
        }
        // x_mid = x_in + ls1 * a
        if train(&o.ls1) {
            accumulate_scale_grad(&mut grads[o.ls1.clone()], &ws.dx, &c.a, d);
        }
        resize(&mut ws.da, s * d);
        scale_rows(&mut ws.da, &ws.dx, &p[o.ls1.clone()]);
        resize(&mut ws.datt_y, s * d);
        {
            let (dw, db) = if train(&o.out_w) {
                let (a, b) = pair_mut(grads, &o.out_w, &o.out_b);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            linear_backward(&ws.da, &c.att_y, &p[o.out_w.clone()], s, d, d, dw, db, Some((&mut ws.datt_y, false)));
        }
        resize(&mut ws.dqkv, s * 3 * d);
        resize(&mut ws.dp, s * s);
        attention_backward(&c.qkv, &c.att, &ws.datt_y, &mut ws.dqkv, &mut ws.dp, s, d, h);
        {
            let (dw, db) = if train(&o.qkv_w) {
                let (a, b) = pair_mut(grads, &o.qkv_w, &o.qkv_b);
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            linear_backward(&ws.dqkv, &c.ln1, &p[o.qkv_w.clone()], s, d, 3 * d, dw, db, Some((&mut ws.dln, false)));
        }
        let dparams = train(&o.ln1_g).then(|| pair_mut(grads, &o.ln1_g, &o.ln1_b));
        layer_norm_backward(&mut ws.dx, dparams, &ws.dln, &c.x_in, &c.ln1_mean, &c.ln1_rstd, &p[o.ln1_g.clone()], s, d);
    }
}

/// `x[i, j] += scale[j] * v[i, j]`
pub(crate) fn add_scaled_rows<F: Scalar>(x: &mut [F], v: &[F], scale: &[F]) {
    let d = scale.len();
    for (xr, vr) in x.chunks_exact_mut(d).zip(v.chunks_exact(d)) {
        for j in 0..d {
            xr[j] += scale[j] * vr[j];
        }
    }
}

fn scale_rows<F: Scalar>(out: &mut [F], v: &[F], scale: &[F]) {
    let d = scale.len();
    for (or, vr) in out.chunks_exact_mut(d).zip(v.chunks_exact(d)) {
        for j in 0..d {
            or[j] = scale[j] * vr[j];
        }
    }
}

fn accumulate_scale_grad<F: Scalar>(g: &mut [F], dy: &[F], v: &[F], d: usize) {
    for (dr, vr) in dy.chunks_exact(d).zip(v.chunks_exact(d)) {
        for j in 0..d {
            g[j] += dr[j] * vr[j];
        }
    }
}

/// Causal multi-head attention over a packed `s x 3d` QKV buffer. Writes
/// the softmax probabilities per head into `att` (`h x s x s`).
pub(crate) fn attention_forward<F: Scalar>(qkv: &[F], att: &mut [F], y: &mut [F], s: usize, d: usize, h: usize) {
    let hd = d / h;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let qkv_m = MatRef::new(qkv, s, 3 * d);
    for head in 0..h {
        let probs = &mut att[head * s * s..(head + 1) * s * s];
        gemm(
            MatMut::new(probs, s, s),
            qkv_m.cols(head * hd, hd),
            qkv_m.cols(d + head * hd, hd).t(),
            scale,
            F::zero(),
        );
        for i in 0..s {
            let row = &mut probs[i * s..(i + 1) * s];
            causal_softmax(row, i);
        }
        gemm(
            MatMut::new(y, s, d).cols(head * hd, hd),
            MatRef::new(probs, s, s),
            qkv_m.cols(2 * d + head * hd, hd),
            F::one(),
            F::zero(),
        );
    }
}

/// Softmax over `row[..=last]`; entries after `last` are zeroed.
pub(crate) fn causal_softmax<F: Scalar>(row: &mut [F], last: usize) {
    let max = row[..=last].iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in &mut row[..=last] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in &mut row[..=last] {
        *v *= inv;
    }
    for v in &mut row[last + 1..] {
        *v = F::zero();
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    qkv: &[F],
    att: &[F],
    dy: &[F],
    dqkv: &mut [F],
    dp: &mut [F],
    s: usize,
    d: usize,
    h: usize,
) {
    let hd = d / h;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let qkv_m = MatRef::new(qkv, s, 3 * d);
    for head in 0..h {
        let probs = &att[head * s * s..(head + 1) * s * s];
        let dy_h = MatRef::new(dy, s, d).cols(head * hd, hd);
        // dP = dY V^T
        gemm(MatMut::new(dp, s, s), dy_h, qkv_m.cols(2 * d + head * hd, hd).t(), F::one(), F::zero());
        // dV = P^T dY
        gemm(
            MatMut::new(dqkv, s, 3 * d).cols(2 * d + head * hd, hd),
            MatRef::new(probs, s, s).t(),
            dy_h,
            F::one(),
            F::zero(),
        );
        // softmax backward; masked entries have P = 0 and stay 0
        for i in 0..s {
            let pr = &probs[i * s..(i + 1) * s];
            let gr = &mut dp[i * s..(i + 1) * s];
            let dot: F = pr[..=i].iter().zip(&gr[..=i]).map(|(&a, &b)| a * b).sum();
            for j in 0..s {
                gr[j] = if j <= i { pr[j] * (gr[j] - dot) } else { F::zero() };
            }
        }
        // dQ = scale dS K, dK = scale dS^T Q
        gemm(
            MatMut::new(dqkv, s, 3 * d).cols(head * hd, hd),
            MatRef::new(dp, s, s),
            qkv_m.cols(d + head * hd, hd),
            scale,
            F::zero(),
        );
        gemm(
            MatMut::new(dqkv, s, 3 * d).cols(d + head * hd, hd),
            MatRef::new(dp, s, s).t(),
            qkv_m.cols(head * hd, hd),
            scale,
            F::zero(),
        );
    }
}

/// Sums cross-entropy over non-PAD targets and replaces the logits with
/// `scale * (softmax - onehot)` (zero at PAD targets).
pub(crate) fn cross_entropy_in_place<F: Scalar>(logits: &mut Logits<F>, targets: &DelayedGrid, scale: F) -> (f64, usize) {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for t in 0..logits.frames {
        for k in 0..logits.codebooks {
            let row = logits.at_mut(t, k);
            if targets.is_pad(t, k) {
                row.fill(F::zero());
                continue;
            }
            let target = targets.get(t, k) as usize;
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            total += sum.ln().f64() - (row[target].ln()).f64();
            count += 1;
            let inv = F::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv * scale;
            }
            row[target] -= scale;
        }
    }
    (total, count)
}
