//! Autoregressive sampling with a key/value cache and classifier-free
//! guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{FRAME_CHANNELS, LAYERS_PER_BLOCK};
use super::linalg::{gelu, layer_norm, linear, Scalar};
use super::transformer::{add_scaled_rows, causal_softmax, Model, Prepared};
use super::ModelError;
use crate::conditions::ConditionBundle;
use crate::tokens::{invert_delay_pattern, DelayedGrid, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    /// Candidates kept per step; `0` keeps every token.
    pub top_k: usize,
    /// Guidance scale. `1.0` skips the unconditional pass.
    pub gamma: f64,
    /// Pick the most likely token instead of sampling.
    pub greedy: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: 250,
            gamma: 3.0,
            greedy: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub bundle: ConditionBundle,
    pub frames: usize,
    pub seed: u64,
}

/// Single-sequence incremental decoder state.
struct Decoder<'m, F: Scalar> {
    model: &'m Model<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
    ln: Vec<F>,
    mean: [F; 1],
    rstd: [F; 1],
    qkv: Vec<F>,
    scores: Vec<F>,
    y: Vec<F>,
    a: Vec<F>,
    fc: Vec<F>,
}

impl<'m, F: Scalar> Decoder<'m, F> {
    fn new(model: &'m Model<F>, capacity: usize) -> Self {
        let cfg = model.config();
        let d = cfg.dim;
        Decoder {
            model,
            keys: vec![vec![F::zero(); capacity * d]; cfg.layers],
            values: vec![vec![F::zero(); capacity * d]; cfg.layers],
            len: 0,
            ln: vec![F::zero(); d],
            mean: [F::zero()],
            rstd: [F::zero()],
            qkv: vec![F::zero(); 3 * d],
            scores: vec![F::zero(); capacity],
            y: vec![F::zero(); d],
            a: vec![F::zero(); d],
            fc: vec![F::zero(); cfg.mlp_hidden],
        }
    }

    /// Runs one position through every layer. `u` is the frame-wise
    /// condition for token positions. `x` holds the final hidden state.
    fn push(&mut self, x: &mut [F], u: Option<&[F]>) {
        let model = self.model;
        let cfg = model.config();
        let lay = model.layout();
        let p = model.params();
        let (d, h) = (cfg.dim, cfg.heads);
        let hd = d / h;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let gates = cfg.gates();
        let pos = self.len;
        for l in 0..cfg.layers {
            if let Some(u) = u.filter(|_| l % LAYERS_PER_BLOCK == 0 && gates[l / LAYERS_PER_BLOCK]) {
                for (o, &v) in x.iter_mut().zip(u) {
                    *o += v;
                }
            }
            let o = &lay.layers[l];
            layer_norm(&mut self.ln, &mut self.mean, &mut self.rstd, x, &p[o.ln1_g.clone()], &p[o.ln1_b.clone()], 1, d);
            linear(&mut self.qkv, &self.ln, &p[o.qkv_w.clone()], Some(&p[o.qkv_b.clone()]), 1, d, 3 * d);
            self.keys[l][pos * d..(pos + 1) * d].copy_from_slice(&self.qkv[d..2 * d]);
            self.values[l][pos * d..(pos + 1) * d].copy_from_slice(&self.qkv[2 * d..]);
            for head in 0..h {
                let q = &self.qkv[head * hd..(head + 1) * hd];
                for j in 0..=pos {
                    let kr = &self.keys[l][j * d + head * hd..j * d + (head + 1) * hd];
                    self.scores[j] = q.iter().zip(kr).map(|(&a, &b)| a * b).sum::<F>() * scale;
                }
                causal_softmax(&mut self.scores[..=pos], pos);
                let yh = &mut self.y[head * hd..(head + 1) * hd];
                yh.fill(F::zero());
                for j in 0..=pos {
                    let w = self.scores[j];
                    let vr = &self.values[l][j * d + head * hd..j * d + (head + 1) * hd];
                    for (o, &v) in yh.iter_mut().zip(vr) {
                        *o += w * v;
                    }
                }
            }
            linear(&mut self.a, &self.y, &p[o.out_w.clone()], Some(&p[o.out_b.clone()]), 1, d, d);
            add_scaled_rows(x, &self.a, &p[o.ls1.clone()]);
            layer_norm(&mut self.ln, &mut self.mean, &mut self.rstd, x, &p[o.ln2_g.clone()], &p[o.ln2_b.clone()], 1, d);
            linear(&mut self.fc, &self.ln, &p[o.fc_w.clone()], Some(&p[o.fc_b.clone()]), 1, d, cfg.mlp_hidden);
            for v in &mut self.fc {
                *v = gelu(*v);
            }
            linear(&mut self.a, &self.fc, &p[o.proj_w.clone()], Some(&p[o.proj_b.clone()]), 1, cfg.mlp_hidden, d);
            add_scaled_rows(x, &self.a, &p[o.ls2.clone()]);
        }
        self.len += 1;
    }

    fn feed_prefix(&mut self, input: &Prepared<F>) {
        let d = self.model.config().dim;
        let mut rows = vec![F::zero(); input.prefix() * d];
        self.model.embed_prefix(input, &mut rows);
        for row in rows.chunks_exact_mut(d) {
            self.push(row, None);
        }
    }

    /// Final norm and heads for hidden state `x`, laid out `K x (N + 1)`.
    fn logits(&mut self, x: &[F], out: &mut [F]) {
        let cfg = self.model.config();
        let lay = self.model.layout();
        let p = self.model.params();
        let (d, c) = (cfg.dim, cfg.classes());
        layer_norm(&mut self.ln, &mut self.mean, &mut self.rstd, x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], 1, d);
        for k in 0..cfg.codebooks {
            linear(
                &mut out[k * c..(k + 1) * c],
                &self.ln,
                &p[lay.head_w[k].clone()],
                Some(&p[lay.head_b[k].clone()]),
                1,
                d,
                c,
            );
        }
    }
}

/// Token choice among the `N` real tokens (PAD is never sampled).
fn choose<R: Rng + ?Sized>(logits: &[f64], params: &SamplingParams, rng: &mut R) -> u32 {
    let real = &logits[..logits.len() - 1];
    if params.greedy {
        let mut best = 0;
        for (i, &v) in real.iter().enumerate() {
            if v > real[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let temp = params.temperature.max(1e-6);
    let mut idx: Vec<usize> = (0..real.len()).collect();
    let keep = if params.top_k == 0 { real.len() } else { params.top_k.min(real.len()) };
    if keep < real.len() {
        idx.select_nth_unstable_by(keep - 1, |&a, &b| real[b].total_cmp(&real[a]));
        idx.truncate(keep);
    }
    let max = idx.iter().map(|&i| real[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = idx.iter().map(|&i| ((real[i] - max) / temp).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (&i, &w) in idx.iter().zip(&weights) {
        if r < w {
            return i as u32;
        }
        r -= w;
    }
    *idx.last().expect("at least one candidate") as u32
}

/// Samples `request.frames` frames and undoes the delay pattern.
pub fn sample<F: Scalar>(
    model: &Model<F>,
    request: &SampleRequest,
    params: &SamplingParams,
) -> Result<TokenGrid, ModelError> {
    Ok(invert_delay_pattern(&sample_delayed(model, request, params)?)?)
}

/// Samples one delayed grid of `request.frames` rows.
pub fn sample_delayed<F: Scalar>(
    model: &Model<F>,
    request: &SampleRequest,
    params: &SamplingParams,
) -> Result<DelayedGrid, ModelError> {
    let cfg = model.config();
    let (frames, kk, c, d) = (request.frames, cfg.codebooks, cfg.classes(), cfg.dim);
    let pad = cfg.codebook_size;
    let cond_in = model.prepare_conditions(&request.bundle, frames, Vec::new())?;
    let guided = params.gamma != 1.0;
    let uncond_in = model.prepare_conditions(&ConditionBundle::null(), frames, Vec::new())?;

    let u = cond_in.cond.as_ref().map(|cond| {
        let mut u = vec![F::zero(); frames * d];
        linear(&mut u, cond, &model.params()[model.layout().cond_w.clone()], None, frames, FRAME_CHANNELS, d);
        u
    });
    let mut cond_dec = Decoder::new(model, cond_in.seq_len());
    cond_dec.feed_prefix(&cond_in);
    let mut uncond_dec = guided.then(|| {
        let mut dec = Decoder::new(model, uncond_in.seq_len());
        dec.feed_prefix(&uncond_in);
        dec
    });

    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut tokens = vec![pad; frames * kk];
    let mut prev = vec![pad; kk];
    let mut x = vec![F::zero(); d];
    let mut lc = vec![F::zero(); kk * c];
    let mut lu = vec![F::zero(); kk * c];
    let gamma = params.gamma;
    let mut mixed = vec![0.0f64; c];
    for t in 0..frames {
        model.embed_token(&prev, t, &mut x);
        cond_dec.push(&mut x, u.as_ref().map(|u| &u[t * d..(t + 1) * d]));
        cond_dec.logits(&x, &mut lc);
        if let Some(dec) = uncond_dec.as_mut() {
            model.embed_token(&prev, t, &mut x);
            dec.push(&mut x, None);
            dec.logits(&x, &mut lu);
        }
        for k in 0..kk {
            let tok = if t < k {
                pad
            } else {
                for (i, m) in mixed.iter_mut().enumerate() {
                    let cv = lc[k * c + i].f64();
                    *m = if guided { (1.0 - gamma) * lu[k * c + i].f64() + gamma * cv } else { cv };
                }
                choose(&mixed, params, &mut rng)
            };
            tokens[t * kk + k] = tok;
        }
        prev.copy_from_slice(&tokens[t * kk..(t + 1) * kk]);
    }
    Ok(DelayedGrid::new(frames, kk, pad, tokens)?)
}

/// Samples many requests in parallel. Every request owns its RNG, so the
/// result does not depend on the thread count.
pub fn sample_batch<F: Scalar>(
    model: &Model<F>,
    requests: &[SampleRequest],
    params: &SamplingParams,
) -> Result<Vec<DelayedGrid>, ModelError> {
    requests.par_iter().map(|r| sample_delayed(model, r, params)).collect()
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::model::testutil::{random_bundle, random_grid, tiny_config};
    use crate::model::InAttention;

    #[test]
    fn cached_decoding_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [InAttention::Off, InAttention::Adaptive, InAttention::Full] {
            let cfg = super::super::ModelConfig { layers: 8, in_attention: mode, ..tiny_config() };
            let mut model = Model::<f64>::new(cfg, 5).unwrap();
            for v in model.params_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
            let grid = random_grid(7, 3, 6, &mut rng);
            let bundle = random_bundle(7, &mut rng);
            let full = model.forward(&grid, &bundle).unwrap();
            let input = model.prepare(&grid, &bundle).unwrap();
            let mut dec = Decoder::new(&model, input.seq_len());
            dec.feed_prefix(&input);
            let cond = input.cond.as_ref().unwrap();
            let mut u = vec![0.0; 7 * 8];
            linear(&mut u, cond, &model.params()[model.layout().cond_w.clone()], None, 7, FRAME_CHANNELS, 8);
            let mut x = vec![0.0; 8];
            let mut out = vec![0.0; 3 * 7];
            for t in 0..7 {
                model.embed_token(&input.inputs[t * 3..(t + 1) * 3], t, &mut x);
                dec.push(&mut x, Some(&u[t * 8..(t + 1) * 8]));
                dec.logits(&x, &mut out);
                for k in 0..3 {
                    for (a, b) in out[k * 7..(k + 1) * 7].iter().zip(full.at(t, k)) {
                        assert!((a - b).abs() < 1e-10, "{mode:?} t={t} k={k}");
                    }
                }
            }
        }
    }

    #[test]
    fn samples_respect_pad_pattern_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f32>::new(tiny_config(), 0).unwrap();
        let request = SampleRequest {
            bundle: random_bundle(10, &mut rng),
            frames: 10,
            seed: 42,
        };
        let params = SamplingParams { top_k: 3, ..Default::default() };
        let a = sample_delayed(&model, &request, &params).unwrap();
        let b = sample_delayed(&model, &request, &params).unwrap();
        assert_eq!(a, b);
        let batch = sample_batch(&model, &[request.clone(), request], &params).unwrap();
        assert_eq!(batch[0], a);
        assert_eq!(batch[1], a);
    }

    #[test]
    fn greedy_picks_argmax_and_never_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = vec![0.0, 3.0, 1.0, 9.0];
        let greedy = SamplingParams { greedy: true, ..Default::default() };
        assert_eq!(choose(&logits, &greedy, &mut rng), 1);
        logits[2] = 5.0;
        let top1 = SamplingParams { top_k: 1, ..Default::default() };
        for _ in 0..20 {
            assert_eq!(choose(&logits, &top1, &mut rng), 2);
        }
    }

    #[test]
    fn guidance_of_one_is_conditional() {
        let c = [1.0f64, -2.0];
        let u = [4.0f64, 0.5];
        assert_eq!(crate::model::cfg_logits(&c, &u, 1.0), c.to_vec());
        assert_eq!(crate::model::cfg_logits(&c, &u, 0.0), u.to_vec());
        assert_eq!(crate::model::cfg_logits(&c, &u, 3.0), vec![-5.0, -7.0]);
    }
}
