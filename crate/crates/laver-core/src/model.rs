//! The miniature multimodal decoder: raw-pixel patch projector, pre-norm
//! transformer blocks driven by an [`AttentionLayout`] and 2D rotary
//! indices, a language head, and a 3-layer vision head producing visual
//! logits.
//!
//! The forward pass records everything the hand-rolled backward pass
//! needs; [`backward`] turns head-level gradient seeds into parameter
//! gradients plus the gradient at the embedded input sequence, which the
//! training harness routes into the projector, the token table, or the
//! mask embedding depending on how the sequence was assembled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{rope_inv_freq, rope_rotate_head, AttentionLayout};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, layernorm_stats, matmul_a_bt, matmul_at_b_acc, matmul_into,
    sample_gaussian, Rng, Tensor,
};

pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub visual_logit_dim: usize,
    pub vision_head_hidden: usize,
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            vocab_size: 32,
            visual_logit_dim: 128,
            vision_head_hidden: 256,
            patch_size: 4,
            grid_rows: 8,
            grid_cols: 8,
            channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Hidden width of each block's feed-forward, fixed at 4x the model
    /// width.
    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn n_vision(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_height(&self) -> usize {
        self.grid_rows * self.patch_size
    }

    pub fn image_width(&self) -> usize {
        self.grid_cols * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 4 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be divisible by 4 for 2D rotary pairs",
                self.head_dim()
            )));
        }
        if self.n_layers == 0 || self.patch_size == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("zero-sized model dimension".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Every learnable tensor of the model. The same struct doubles as the
/// gradient accumulator (see [`ModelParams::zeros_like`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub tok_embed: Tensor,
    pub mask_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub lm_w: Tensor,
    pub lm_b: Tensor,
    pub vh_w1: Tensor,
    pub vh_b1: Tensor,
    pub vh_w2: Tensor,
    pub vh_b2: Tensor,
    pub vh_w3: Tensor,
    pub vh_b3: Tensor,
}

impl ModelParams {
    /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
        config.validate()?;
        let d = config.d_model;
        let m = config.mlp_hidden();
        let hv = config.vision_head_hidden;
        let dv = config.visual_logit_dim;
        let g = |rng: &mut Rng, shape: &[usize]| sample_gaussian(rng, shape, WEIGHT_INIT_STD);
        let ones = |n: usize| Tensor::from_vec(&[n], vec![1.0; n]).expect("ones");

        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(&[d]),
                wq: g(rng, &[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: g(rng, &[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: g(rng, &[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: g(rng, &[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(&[d]),
                w1: g(rng, &[d, m]),
                b1: Tensor::zeros(&[m]),
                w2: g(rng, &[m, d]),
                b2: Tensor::zeros(&[d]),
            })
            .collect();

        Ok(ModelParams {
            config: *config,
            patch_w: g(rng, &[config.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            tok_embed: g(rng, &[config.vocab_size, d]),
            mask_embed: g(rng, &[d]),
            blocks,
            final_ln_g: ones(d),
            final_ln_b: Tensor::zeros(&[d]),
            lm_w: g(rng, &[d, config.vocab_size]),
            lm_b: Tensor::zeros(&[config.vocab_size]),
            vh_w1: g(rng, &[d, hv]),
            vh_b1: Tensor::zeros(&[hv]),
            vh_w2: g(rng, &[hv, hv]),
            vh_b2: Tensor::zeros(&[hv]),
            vh_w3: g(rng, &[hv, dv]),
            vh_b3: Tensor::zeros(&[dv]),
        })
    }

    /// Same structure, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, t| t.data_mut().fill(0.0));
        out
    }

    /// Zero-valued parameters with the right structure for `config`;
    /// checkpoint loading fills the stored values in afterwards.
    pub fn structural_zeros(config: &ModelConfig) -> Result<ModelParams> {
        let mut p = ModelParams::init(config, &mut Rng::seeded(0))?;
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.numel());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.is_finite());
        ok
    }

    /// Visit every tensor with a stable name, in a fixed order shared by
    /// the optimizer, the EMA teacher, and the checkpoint writer.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("patch_proj.w", &self.patch_w);
        f("patch_proj.b", &self.patch_b);
        f("tok_embed", &self.tok_embed);
        f("mask_embed", &self.mask_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let names = [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("attn.wq", &b.wq),
                ("attn.bq", &b.bq),
                ("attn.wk", &b.wk),
                ("attn.bk", &b.bk),
                ("attn.wv", &b.wv),
                ("attn.bv", &b.bv),
                ("attn.wo", &b.wo),
                ("attn.bo", &b.bo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ];
            for (suffix, t) in names {
                f(&format!("blocks.{i}.{suffix}"), t);
            }
        }
        f("final_ln.g", &self.final_ln_g);
        f("final_ln.b", &self.final_ln_b);
        f("lm_head.w", &self.lm_w);
        f("lm_head.b", &self.lm_b);
        f("vision_head.w1", &self.vh_w1);
        f("vision_head.b1", &self.vh_b1);
        f("vision_head.w2", &self.vh_w2);
        f("vision_head.b2", &self.vh_b2);
        f("vision_head.w3", &self.vh_w3);
        f("vision_head.b3", &self.vh_b3);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("patch_proj.w", &mut self.patch_w);
        f("patch_proj.b", &mut self.patch_b);
        f("tok_embed", &mut self.tok_embed);
        f("mask_embed", &mut self.mask_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let names = [
                ("ln1.g", &mut b.ln1_g),
                ("ln1.b", &mut b.ln1_b),
                ("attn.wq", &mut b.wq),
                ("attn.bq", &mut b.bq),
                ("attn.wk", &mut b.wk),
                ("attn.bk", &mut b.bk),
                ("attn.wv", &mut b.wv),
                ("attn.bv", &mut b.bv),
                ("attn.wo", &mut b.wo),
                ("attn.bo", &mut b.bo),
                ("ln2.g", &mut b.ln2_g),
                ("ln2.b", &mut b.ln2_b),
                ("mlp.w1", &mut b.w1),
                ("mlp.b1", &mut b.b1),
                ("mlp.w2", &mut b.w2),
                ("mlp.b2", &mut b.b2),
            ];
            for (suffix, t) in names {
                f(&format!("blocks.{i}.{suffix}"), t);
            }
        }
        f("final_ln.g", &mut self.final_ln_g);
        f("final_ln.b", &mut self.final_ln_b);
        f("lm_head.w", &mut self.lm_w);
        f("lm_head.b", &mut self.lm_b);
        f("vision_head.w1", &mut self.vh_w1);
        f("vision_head.b1", &mut self.vh_b1);
        f("vision_head.w2", &mut self.vh_w2);
        f("vision_head.b2", &mut self.vh_b2);
        f("vision_head.w3", &mut self.vh_w3);
        f("vision_head.b3", &mut self.vh_b3);
    }

    /// Flat tensor list in the same fixed order as [`for_each_tensor`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = vec![
            &self.patch_w,
            &self.patch_b,
            &self.tok_embed,
            &self.mask_embed,
        ];
        for b in &self.blocks {
            v.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        v.extend([
            &self.final_ln_g,
            &self.final_ln_b,
            &self.lm_w,
            &self.lm_b,
            &self.vh_w1,
            &self.vh_b1,
            &self.vh_w2,
            &self.vh_b2,
            &self.vh_w3,
            &self.vh_b3,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.tok_embed,
            &mut self.mask_embed,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        v.extend([
            &mut self.final_ln_g,
            &mut self.final_ln_b,
            &mut self.lm_w,
            &mut self.lm_b,
            &mut self.vh_w1,
            &mut self.vh_b1,
            &mut self.vh_w2,
            &mut self.vh_b2,
            &mut self.vh_w3,
            &mut self.vh_b3,
        ]);
        v
    }
}

/// Gather token embedding rows for a sequence of ids.
pub fn embed_tokens(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    let d = params.config.d_model;
    let vocab = params.config.vocab_size;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::invalid(
                "embed_tokens",
                format!("token id {id} >= vocab {vocab}"),
            ));
        }
        out.row_mut(i).copy_from_slice(params.tok_embed.row(id));
    }
    Ok(out)
}

/// Rearrange an image `[rows*p, cols*p, ch]` into its patch matrix
/// `[N, p*p*ch]`, raster order over patches and within each patch.
pub fn patch_matrix(config: &ModelConfig, pixels: &Tensor) -> Result<Tensor> {
    let (h, w, c) = pixels.dims3("embed_image")?;
    if h != config.image_height() || w != config.image_width() || c != config.channels {
        return Err(Error::shape(
            "embed_image",
            format!(
                "pixels [{h},{w},{c}] but config wants [{},{},{}]",
                config.image_height(),
                config.image_width(),
                config.channels
            ),
        ));
    }
    let p = config.patch_size;
    let n = config.n_vision();
    let pd = config.patch_dim();
    let mut out = Tensor::zeros(&[n, pd]);
    let px = pixels.data();
    for gr in 0..config.grid_rows {
        for gc in 0..config.grid_cols {
            let token = gr * config.grid_cols + gc;
            let dst = out.row_mut(token);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    let src = ((gr * p + y) * w + (gc * p + x)) * c;
                    dst[k..k + c].copy_from_slice(&px[src..src + c]);
                    k += c;
                }
            }
        }
    }
    Ok(out)
}

/// Project raw pixels into vision tokens: one affine map per patch,
/// tokens in raster order.
pub fn embed_image(params: &ModelParams, pixels: &Tensor) -> Result<Tensor> {
    let patches = patch_matrix(&params.config, pixels)?;
    let mut tokens = crate::tensor::matmul(&patches, &params.patch_w)?;
    add_bias(&mut tokens, &params.patch_b);
    Ok(tokens)
}

fn add_bias(x: &mut Tensor, bias: &Tensor) {
    let cols = bias.numel();
    for row in x.data_mut().chunks_mut(cols) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// 3-layer vision head: affine, ReLU, affine, ReLU, affine.
pub fn vision_head(params: &ModelParams, hidden: &Tensor) -> Result<Tensor> {
    let mut h1 = crate::tensor::matmul(hidden, &params.vh_w1)?;
    add_bias(&mut h1, &params.vh_b1);
    relu_inplace(&mut h1);
    let mut h2 = crate::tensor::matmul(&h1, &params.vh_w2)?;
    add_bias(&mut h2, &params.vh_b2);
    relu_inplace(&mut h2);
    let mut out = crate::tensor::matmul(&h2, &params.vh_w3)?;
    add_bias(&mut out, &params.vh_b3);
    Ok(out)
}

fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Text-vocabulary logits: a single affine map of the hidden states.
pub fn lm_logits(params: &ModelParams, hidden: &Tensor) -> Result<Tensor> {
    let mut out = crate::tensor::matmul(hidden, &params.lm_w)?;
    add_bias(&mut out, &params.lm_b);
    Ok(out)
}

/// Everything a forward pass produces that callers inspect: per-layer
/// hidden states (embedding plus each block output), the post-final-norm
/// states, attention probabilities (when captured), and head outputs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub hidden: Vec<Tensor>,
    pub final_hidden: Tensor,
    pub attn: Vec<Tensor>,
    pub text_logits: Tensor,
    pub visual_logits: Option<Tensor>,
}

struct LayerCache {
    ln1_out: Tensor,
    ln1_stats: Vec<(f64, f64)>,
    q: Tensor, // post-rope, [T, D] with heads contiguous
    k: Tensor, // post-rope
    v: Tensor,
    probs: Tensor, // [H, T, T]
    attn_cat: Tensor,
    h_mid: Tensor,
    ln2_out: Tensor,
    ln2_stats: Vec<(f64, f64)>,
    m1: Tensor,
    gelu_out: Tensor,
}

struct VisionHeadCache {
    input: Tensor, // gathered final-norm rows [N, D]
    m1: Tensor,
    r1: Tensor,
    m2: Tensor,
    r2: Tensor,
    out: Tensor,
}

/// Forward state kept for [`backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    hidden: Vec<Tensor>,
    final_stats: Vec<(f64, f64)>,
    final_hidden: Tensor,
    text_logits: Tensor,
    vision_rows: Vec<usize>,
    vh: Option<VisionHeadCache>,
    seq_len: usize,
}

impl ForwardCache {
    pub fn text_logits(&self) -> &Tensor {
        &self.text_logits
    }

    pub fn visual_logits(&self) -> Option<&Tensor> {
        self.vh.as_ref().map(|vh| &vh.out)
    }

    pub fn final_hidden(&self) -> &Tensor {
        &self.final_hidden
    }

    pub fn hidden(&self) -> &[Tensor] {
        &self.hidden
    }
}

/// Run the model over an embedded sequence and keep the activation cache.
/// `vision_rows` selects which positions feed the vision head (empty: the
/// head is skipped). Attention probabilities are always recorded; NaNs
/// surface as a fault naming the layer.
pub fn forward_cached(
    params: &ModelParams,
    embedded: &Tensor,
    layout: &AttentionLayout,
    vision_rows: &[usize],
) -> Result<ForwardCache> {
    let cfg = &params.config;
    let (t, d) = embedded.dims2("forward")?;
    if d != cfg.d_model {
        return Err(Error::shape(
            "forward",
            format!("embedded width {d} vs d_model {}", cfg.d_model),
        ));
    }
    if layout.len() != t {
        return Err(Error::shape(
            "forward",
            format!("layout is {}-long, sequence is {t}", layout.len()),
        ));
    }
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let inv_freq = rope_inv_freq(dh);
    let m = cfg.mlp_hidden();

    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(embedded.clone());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut h = embedded.clone();

    for (li, block) in params.blocks.iter().enumerate() {
        // pre-norm attention branch
        let (ln1_out, ln1_stats) = layernorm_cached(&h, &block.ln1_g, &block.ln1_b);
        let mut q = linear(&ln1_out, &block.wq, &block.bq, t, d, d);
        let mut k = linear(&ln1_out, &block.wk, &block.bk, t, d, d);
        let v = linear(&ln1_out, &block.wv, &block.bv, t, d, d);
        rope_all(&mut q, layout, heads, dh, &inv_freq, 1.0);
        rope_all(&mut k, layout, heads, dh, &inv_freq, 1.0);

        let mut probs = Tensor::zeros(&[heads, t, t]);
        let mut attn_cat = Tensor::zeros(&[t, d]);
        attention_forward(&q, &k, &v, layout, heads, dh, scale, &mut probs, &mut attn_cat);

        let mut o = linear(&attn_cat, &block.wo, &block.bo, t, d, d);
        for (ov, &hv) in o.data_mut().iter_mut().zip(h.data()) {
            *ov += hv;
        }
        let h_mid = o;

        // feed-forward branch
        let (ln2_out, ln2_stats) = layernorm_cached(&h_mid, &block.ln2_g, &block.ln2_b);
        let m1 = linear(&ln2_out, &block.w1, &block.b1, t, d, m);
        let mut gelu_out = m1.clone();
        for gv in gelu_out.data_mut() {
            *gv = gelu_scalar(*gv as f64) as f32;
        }
        let mut h_next = linear(&gelu_out, &block.w2, &block.b2, t, m, d);
        for (nv, &mv) in h_next.data_mut().iter_mut().zip(h_mid.data()) {
            *nv += mv;
        }

        if !h_next.is_finite() {
            return Err(Error::NonFinite {
                op: "forward",
                layer: li,
            });
        }

        layers.push(LayerCache {
            ln1_out,
            ln1_stats,
            q,
            k,
            v,
            probs,
            attn_cat,
            h_mid,
            ln2_out,
            ln2_stats,
            m1,
            gelu_out,
        });
        hidden.push(h_next.clone());
        h = h_next;
    }

    let (final_hidden, final_stats) = layernorm_cached(&h, &params.final_ln_g, &params.final_ln_b);
    let text_logits = lm_logits(params, &final_hidden)?;

    let vh = if vision_rows.is_empty() {
        None
    } else {
        let mut input = Tensor::zeros(&[vision_rows.len(), d]);
        for (i, &r) in vision_rows.iter().enumerate() {
            if r >= t {
                return Err(Error::invalid(
                    "forward",
                    format!("vision row {r} outside sequence of length {t}"),
                ));
            }
            input.row_mut(i).copy_from_slice(final_hidden.row(r));
        }
        let m1 = linear(&input, &params.vh_w1, &params.vh_b1, vision_rows.len(), d, cfg.vision_head_hidden);
        let mut r1 = m1.clone();
        relu_inplace(&mut r1);
        let m2 = linear(&r1, &params.vh_w2, &params.vh_b2, vision_rows.len(), cfg.vision_head_hidden, cfg.vision_head_hidden);
        let mut r2 = m2.clone();
        relu_inplace(&mut r2);
        let out = linear(&r2, &params.vh_w3, &params.vh_b3, vision_rows.len(), cfg.vision_head_hidden, cfg.visual_logit_dim);
        Some(VisionHeadCache {
            input,
            m1,
            r1,
            m2,
            r2,
            out,
        })
    };

    Ok(ForwardCache {
        layers,
        hidden,
        final_stats,
        final_hidden,
        text_logits,
        vision_rows: vision_rows.to_vec(),
        vh,
        seq_len: t,
    })
}

/// Forward pass returning an inspectable trace. With `capture` the
/// per-layer attention probabilities are included; hidden states and head
/// outputs always are.
pub fn forward(
    params: &ModelParams,
    embedded: &Tensor,
    layout: &AttentionLayout,
    vision_rows: &[usize],
    capture: bool,
) -> Result<ForwardTrace> {
    let cache = forward_cached(params, embedded, layout, vision_rows)?;
    let visual_logits = cache.vh.as_ref().map(|vh| vh.out.clone());
    Ok(ForwardTrace {
        hidden: cache.hidden,
        final_hidden: cache.final_hidden,
        attn: if capture {
            cache.layers.into_iter().map(|l| l.probs).collect()
        } else {
            Vec::new()
        },
        text_logits: cache.text_logits,
        visual_logits,
    })
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor, rows: usize, in_dim: usize, out_dim: usize) -> Tensor {
    let mut out = Tensor::zeros(&[rows, out_dim]);
    matmul_into(x.data(), w.data(), rows, in_dim, out_dim, out.data_mut());
    add_bias(&mut out, b);
    out
}

fn layernorm_cached(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, Vec<(f64, f64)>) {
    let rows = x.shape()[0];
    let d = x.shape()[1];
    let mut out = Tensor::zeros(&[rows, d]);
    let mut stats = Vec::with_capacity(rows);
    let g = gain.data();
    let b = bias.data();
    for i in 0..rows {
        let row = x.row(i);
        let (mean, rstd) = layernorm_stats(row);
        stats.push((mean, rstd));
        let dst = out.row_mut(i);
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * rstd;
            dst[j] = (xhat * g[j] as f64 + b[j] as f64) as f32;
        }
    }
    (out, stats)
}

fn rope_all(
    x: &mut Tensor,
    layout: &AttentionLayout,
    heads: usize,
    dh: usize,
    inv_freq: &[f64],
    sign: f64,
) {
    let t = layout.len();
    let pairs = dh / 2;
    let data = x.data_mut();
    for pos in 0..t {
        for h in 0..heads {
            let off = pos * heads * dh + h * dh;
            rope_rotate_head(
                &mut data[off..off + dh],
                layout.row_index[pos],
                layout.col_index[pos],
                inv_freq,
                pairs,
                sign,
            );
        }
    }
}

/// Masked attention: probabilities are computed over allowed columns only
/// (64-bit denominator), disallowed entries stay exactly zero, and rows
/// with no allowed column produce a zero output vector.
fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &AttentionLayout,
    heads: usize,
    dh: usize,
    scale: f32,
    probs: &mut Tensor,
    attn_cat: &mut Tensor,
) {
    let t = layout.len();
    let d = heads * dh;
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let pd = probs.data_mut();
    let od = attn_cat.data_mut();
    let mut scores: Vec<f32> = Vec::with_capacity(t);
    let mut cols: Vec<usize> = Vec::with_capacity(t);
    for h in 0..heads {
        for qi in 0..t {
            scores.clear();
            cols.clear();
            let allow = layout.allow_row(qi);
            let q_head = &qd[qi * d + h * dh..qi * d + (h + 1) * dh];
            let mut max = f32::NEG_INFINITY;
            for (ki, &ok) in allow.iter().enumerate() {
                if !ok {
                    continue;
                }
                let k_head = &kd[ki * d + h * dh..ki * d + (h + 1) * dh];
                let mut s = 0.0f32;
                for (&a, &b) in q_head.iter().zip(k_head) {
                    s += a * b;
                }
                s *= scale;
                cols.push(ki);
                scores.push(s);
                if s > max {
                    max = s;
                }
            }
            if cols.is_empty() {
                continue; // fully masked (pad) row: zero output
            }
            let mut denom = 0.0f64;
            for s in scores.iter_mut() {
                let e = ((*s - max) as f64).exp();
                denom += e;
                *s = e as f32;
            }
            let inv = 1.0 / denom;
            let out_head = qi * d + h * dh;
            for (&ki, &e) in cols.iter().zip(scores.iter()) {
                let p = (e as f64 * inv) as f32;
                pd[(h * t + qi) * t + ki] = p;
                let v_head = &vd[ki * d + h * dh..ki * d + (h + 1) * dh];
                for (o, &vv) in od[out_head..out_head + dh].iter_mut().zip(v_head) {
                    *o += p * vv;
                }
            }
        }
    }
}

/// Gradient seeds for [`backward`]: upstream gradients of the text logits
/// and/or the visual logits, in f64 row-major.
pub struct GradSeeds<'a> {
    pub d_text_logits: Option<&'a [f64]>,
    pub d_visual_logits: Option<&'a [f64]>,
}

/// Backpropagate through the cached forward pass, accumulating parameter
/// gradients into `grads` (same structure as the params) and returning
/// the gradient at the embedded input sequence.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    layout: &AttentionLayout,
    seeds: GradSeeds,
    grads: &mut ModelParams,
) -> Result<Tensor> {
    let cfg = &params.config;
    let t = cache.seq_len;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let inv_freq = rope_inv_freq(dh);
    let m = cfg.mlp_hidden();

    let mut d_final = Tensor::zeros(&[t, d]);

    if let Some(dtl) = seeds.d_text_logits {
        if dtl.len() != t * cfg.vocab_size {
            return Err(Error::shape(
                "backward",
                format!("text logit seed has {} entries, want {}", dtl.len(), t * cfg.vocab_size),
            ));
        }
        let dtl32 = Tensor::from_vec(&[t, cfg.vocab_size], dtl.iter().map(|&v| v as f32).collect())?;
        // lm head: logits = final . w + b
        matmul_at_b_acc(
            cache.final_hidden.data(),
            dtl32.data(),
            t,
            d,
            cfg.vocab_size,
            grads.lm_w.data_mut(),
        );
        accumulate_bias(&mut grads.lm_b, &dtl32);
        let mut dfh = Tensor::zeros(&[t, d]);
        matmul_a_bt(dtl32.data(), params.lm_w.data(), t, cfg.vocab_size, d, dfh.data_mut());
        for (a, &b) in d_final.data_mut().iter_mut().zip(dfh.data()) {
            *a += b;
        }
    }

    if let Some(dvl) = seeds.d_visual_logits {
        let vh = cache.vh.as_ref().ok_or_else(|| {
            Error::invalid("backward", "visual seed given but forward ran without vision rows")
        })?;
        let n = cache.vision_rows.len();
        let hv = cfg.vision_head_hidden;
        let dv = cfg.visual_logit_dim;
        if dvl.len() != n * dv {
            return Err(Error::shape(
                "backward",
                format!("visual logit seed has {} entries, want {}", dvl.len(), n * dv),
            ));
        }
        let d3 = Tensor::from_vec(&[n, dv], dvl.iter().map(|&v| v as f32).collect())?;
        matmul_at_b_acc(vh.r2.data(), d3.data(), n, hv, dv, grads.vh_w3.data_mut());
        accumulate_bias(&mut grads.vh_b3, &d3);
        let mut dr2 = Tensor::zeros(&[n, hv]);
        matmul_a_bt(d3.data(), params.vh_w3.data(), n, dv, hv, dr2.data_mut());
        relu_backward_inplace(&mut dr2, &vh.m2);

        matmul_at_b_acc(vh.r1.data(), dr2.data(), n, hv, hv, grads.vh_w2.data_mut());
        accumulate_bias(&mut grads.vh_b2, &dr2);
        let mut dr1 = Tensor::zeros(&[n, hv]);
        matmul_a_bt(dr2.data(), params.vh_w2.data(), n, hv, hv, dr1.data_mut());
        relu_backward_inplace(&mut dr1, &vh.m1);

        matmul_at_b_acc(vh.input.data(), dr1.data(), n, d, hv, grads.vh_w1.data_mut());
        accumulate_bias(&mut grads.vh_b1, &dr1);
        let mut din = Tensor::zeros(&[n, d]);
        matmul_a_bt(dr1.data(), params.vh_w1.data(), n, hv, d, din.data_mut());
        for (i, &r) in cache.vision_rows.iter().enumerate() {
            for (a, &b) in d_final.row_mut(r).iter_mut().zip(din.row(i)) {
                *a += b;
            }
        }
    }

    // final layer norm
    let h_last = &cache.hidden[cfg.n_layers];
    let mut d_h = layernorm_backward(
        &d_final,
        h_last,
        &cache.final_stats,
        &params.final_ln_g,
        &mut grads.final_ln_g,
        &mut grads.final_ln_b,
    );

    for li in (0..cfg.n_layers).rev() {
        let block = &params.blocks[li];
        let gblock = &mut grads.blocks[li];
        let lc = &cache.layers[li];

        // h_next = h_mid + (gelu(ln2(h_mid) w1 + b1)) w2 + b2
        let dm2 = &d_h; // gradient at the w2 output
        matmul_at_b_acc(lc.gelu_out.data(), dm2.data(), t, m, d, gblock.w2.data_mut());
        accumulate_bias(&mut gblock.b2, dm2);
        let mut du = Tensor::zeros(&[t, m]);
        matmul_a_bt(dm2.data(), block.w2.data(), t, d, m, du.data_mut());
        for (g, &x) in du.data_mut().iter_mut().zip(lc.m1.data()) {
            *g *= gelu_grad_scalar(x as f64) as f32;
        }
        matmul_at_b_acc(lc.ln2_out.data(), du.data(), t, d, m, gblock.w1.data_mut());
        accumulate_bias(&mut gblock.b1, &du);
        let mut da2 = Tensor::zeros(&[t, d]);
        matmul_a_bt(du.data(), block.w1.data(), t, m, d, da2.data_mut());
        let mut d_hmid = layernorm_backward(
            &da2,
            &lc.h_mid,
            &lc.ln2_stats,
            &block.ln2_g,
            &mut gblock.ln2_g,
            &mut gblock.ln2_b,
        );
        for (a, &b) in d_hmid.data_mut().iter_mut().zip(d_h.data()) {
            *a += b; // residual
        }

        // h_mid = h_in + (attn_cat) wo + bo
        let do_ = &d_hmid;
        matmul_at_b_acc(lc.attn_cat.data(), do_.data(), t, d, d, gblock.wo.data_mut());
        accumulate_bias(&mut gblock.bo, do_);
        let mut dcat = Tensor::zeros(&[t, d]);
        matmul_a_bt(do_.data(), block.wo.data(), t, d, d, dcat.data_mut());

        // attention core
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        attention_backward(
            &lc.q, &lc.k, &lc.v, &lc.probs, &dcat, layout, heads, dh, scale, &mut dq, &mut dk,
            &mut dv,
        );
        // undo the rotations (inverse rope)
        rope_all(&mut dq, layout, heads, dh, &inv_freq, -1.0);
        rope_all(&mut dk, layout, heads, dh, &inv_freq, -1.0);

        let mut da = Tensor::zeros(&[t, d]);
        for (w, b_grad, dproj) in [
            (&block.wq, &mut gblock.wq, &dq),
            (&block.wk, &mut gblock.wk, &dk),
            (&block.wv, &mut gblock.wv, &dv),
        ] {
            matmul_at_b_acc(lc.ln1_out.data(), dproj.data(), t, d, d, b_grad.data_mut());
            let mut part = Tensor::zeros(&[t, d]);
            matmul_a_bt(dproj.data(), w.data(), t, d, d, part.data_mut());
            for (a, &b) in da.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        accumulate_bias(&mut gblock.bq, &dq);
        accumulate_bias(&mut gblock.bk, &dk);
        accumulate_bias(&mut gblock.bv, &dv);

        let h_in = &cache.hidden[li];
        let mut d_hin = layernorm_backward(
            &da,
            h_in,
            &lc.ln1_stats,
            &block.ln1_g,
            &mut gblock.ln1_g,
            &mut gblock.ln1_b,
        );
        for (a, &b) in d_hin.data_mut().iter_mut().zip(d_hmid.data()) {
            *a += b; // residual
        }
        d_h = d_hin;
    }

    Ok(d_h)
}

fn accumulate_bias(bias_grad: &mut Tensor, d: &Tensor) {
    let cols = bias_grad.numel();
    for row in d.data().chunks(cols) {
        for (g, &v) in bias_grad.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
}

fn relu_backward_inplace(d: &mut Tensor, pre_activation: &Tensor) {
    for (g, &x) in d.data_mut().iter_mut().zip(pre_activation.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Standard layer-norm backward given the cached per-row (mean, rstd).
/// Accumulates gain/bias gradients, returns the input gradient.
fn layernorm_backward(
    dy: &Tensor,
    x: &Tensor,
    stats: &[(f64, f64)],
    gain: &Tensor,
    gain_grad: &mut Tensor,
    bias_grad: &mut Tensor,
) -> Tensor {
    let rows = x.shape()[0];
    let d = x.shape()[1];
    let mut dx = Tensor::zeros(&[rows, d]);
    let g = gain.data();
    for i in 0..rows {
        let (mean, rstd) = stats[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for j in 0..d {
            let xhat = (xr[j] as f64 - mean) * rstd;
            let dxhat = dyr[j] as f64 * g[j] as f64;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            gain_grad.data_mut()[j] += (dyr[j] as f64 * xhat) as f32;
            bias_grad.data_mut()[j] += dyr[j];
        }
        let inv_d = 1.0 / d as f64;
        let dst = dx.row_mut(i);
        for j in 0..d {
            let xhat = (xr[j] as f64 - mean) * rstd;
            let dxhat = dyr[j] as f64 * g[j] as f64;
            dst[j] = (rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat)) as f32;
        }
    }
    dx
}

/// Softmax-attention backward over allowed columns only; disallowed
/// entries carry zero probability and contribute nothing.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dcat: &Tensor,
    layout: &AttentionLayout,
    heads: usize,
    dh: usize,
    scale: f32,
    dq: &mut Tensor,
    dk: &mut Tensor,
    dv: &mut Tensor,
) {
    let t = layout.len();
    let d = heads * dh;
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let pd = probs.data();
    let dcd = dcat.data();
    let dqd = dq.data_mut();
    let dkd = dk.data_mut();
    let dvd = dv.data_mut();
    let mut dp: Vec<f64> = Vec::with_capacity(t);
    let mut cols: Vec<usize> = Vec::with_capacity(t);
    for h in 0..heads {
        for qi in 0..t {
            dp.clear();
            cols.clear();
            let allow = layout.allow_row(qi);
            let dout = &dcd[qi * d + h * dh..qi * d + (h + 1) * dh];
            let mut inner = 0.0f64; // sum_j p_j dp_j
            for (ki, &ok) in allow.iter().enumerate() {
                if !ok {
                    continue;
                }
                let p = pd[(h * t + qi) * t + ki] as f64;
                let v_head = &vd[ki * d + h * dh..ki * d + (h + 1) * dh];
                let mut dpk = 0.0f64;
                for (&g, &vv) in dout.iter().zip(v_head) {
                    dpk += g as f64 * vv as f64;
                }
                // dv accumulation: dv_j += p * dout
                let dv_head = &mut dvd[ki * d + h * dh..ki * d + (h + 1) * dh];
                for (dvv, &g) in dv_head.iter_mut().zip(dout) {
                    *dvv += (p * g as f64) as f32;
                }
                cols.push(ki);
                dp.push(dpk);
                inner += p * dpk;
            }
            if cols.is_empty() {
                continue;
            }
            let q_head = &qd[qi * d + h * dh..qi * d + (h + 1) * dh];
            for (idx, &ki) in cols.iter().enumerate() {
                let p = pd[(h * t + qi) * t + ki] as f64;
                let ds = p * (dp[idx] - inner) * scale as f64;
                if ds == 0.0 {
                    continue;
                }
                let k_head = &kd[ki * d + h * dh..ki * d + (h + 1) * dh];
                let dq_head = &mut dqd[qi * d + h * dh..qi * d + (h + 1) * dh];
                for (dqv, &kv) in dq_head.iter_mut().zip(k_head) {
                    *dqv += (ds * kv as f64) as f32;
                }
                let dk_head = &mut dkd[ki * d + h * dh..ki * d + (h + 1) * dh];
                for (dkv, &qv) in dk_head.iter_mut().zip(q_head) {
                    *dkv += (ds * qv as f64) as f32;
                }
            }
        }
    }
}

/// Accumulate projector gradients for an image whose tokens received the
/// gradient rows `d_tokens` (masked rows must already be zeroed or routed
/// to the mask embedding by the caller).
pub fn accumulate_projector_grad(
    config: &ModelConfig,
    pixels: &Tensor,
    d_tokens: &Tensor,
    grads: &mut ModelParams,
) -> Result<()> {
    let patches = patch_matrix(config, pixels)?;
    let (n, pd) = patches.dims2("projector_grad")?;
    matmul_at_b_acc(
        patches.data(),
        d_tokens.data(),
        n,
        pd,
        config.d_model,
        grads.patch_w.data_mut(),
    );
    accumulate_bias(&mut grads.patch_b, d_tokens);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_mixed_layout, build_packed_layout, SegmentSpec};
    use crate::tensor::{l2_normalize, layernorm, matmul};
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 8,
            visual_logit_dim: 8,
            vision_head_hidden: 12,
            patch_size: 2,
            grid_rows: 2,
            grid_cols: 2,
            channels: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_projects_to_bias() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(1);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        for v in params.patch_b.data_mut() {
            *v = 0.37;
        }
        let pixels = Tensor::zeros(&[cfg.image_height(), cfg.image_width(), 3]);
        let tokens = embed_image(&params, &pixels).unwrap();
        for i in 0..cfg.n_vision() {
            for &v in tokens.row(i) {
                assert_eq!(v, 0.37);
            }
        }
    }

    #[test]
    fn patch_permutation_permutes_token_rows() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(2);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let pixels = sample_gaussian(&mut rng, &[cfg.image_height(), cfg.image_width(), 3], 1.0);
        let base = embed_image(&params, &pixels).unwrap();

        // swap patch (0,0) with patch (1,1)
        let mut swapped = pixels.clone();
        let p = cfg.patch_size;
        let w = cfg.image_width();
        let c = cfg.channels;
        for y in 0..p {
            for x in 0..p {
                for ch in 0..c {
                    let a = (y * w + x) * c + ch;
                    let b = ((p + y) * w + (p + x)) * c + ch;
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let out = embed_image(&params, &swapped).unwrap();
        assert_eq!(out.row(0), base.row(3));
        assert_eq!(out.row(3), base.row(0));
        assert_eq!(out.row(1), base.row(1));
        assert_eq!(out.row(2), base.row(2));
    }

    #[test]
    fn patch_count_shape_arithmetic() {
        let cfg = ModelConfig {
            patch_size: 8,
            grid_rows: 2,
            grid_cols: 2,
            channels: 3,
            ..tiny_config()
        };
        let pixels = Tensor::zeros(&[16, 16, 3]);
        let patches = patch_matrix(&cfg, &pixels).unwrap();
        assert_eq!(patches.shape(), &[4, 8 * 8 * 3]);
        let bad = Tensor::zeros(&[15, 16, 3]);
        assert!(patch_matrix(&cfg, &bad).is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..tiny_config()
        };
        let mut rng = Rng::seeded(3);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let layout = build_mixed_layout(&[SegmentSpec::text(1)]).unwrap();
        let x = sample_gaussian(&mut rng, &[1, cfg.d_model], 1.0);
        let trace = forward(&params, &x, &layout, &[], true).unwrap();
        // the only attention prob is exactly 1
        for h in 0..cfg.n_heads {
            assert_eq!(trace.attn[0].data()[h], 1.0);
        }
        // manual block arithmetic: probs == 1 makes attn output the value
        // projection regardless of q/k
        let b = &params.blocks[0];
        let a = layernorm(&x, &b.ln1_g, &b.ln1_b).unwrap();
        let mut v = matmul(&a, &b.wv).unwrap();
        super::add_bias(&mut v, &b.bv);
        let mut o = matmul(&v, &b.wo).unwrap();
        super::add_bias(&mut o, &b.bo);
        let mut h_mid = o.clone();
        for (hv, &xv) in h_mid.data_mut().iter_mut().zip(x.data()) {
            *hv += xv;
        }
        let a2 = layernorm(&h_mid, &b.ln2_g, &b.ln2_b).unwrap();
        let mut m1 = matmul(&a2, &b.w1).unwrap();
        super::add_bias(&mut m1, &b.b1);
        let g = crate::tensor::gelu(&m1);
        let mut m2 = matmul(&g, &b.w2).unwrap();
        super::add_bias(&mut m2, &b.b2);
        for (hv, &mv) in m2.data_mut().iter_mut().zip(h_mid.data()) {
            *hv += mv;
        }
        for (expected, &got) in m2.data().iter().zip(trace.hidden[1].data()) {
            assert_abs_diff_eq!(*expected, got, epsilon = 1e-5);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_leak_nothing() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(4);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let layout =
            build_mixed_layout(&[SegmentSpec::vision(2, 2, 0), SegmentSpec::text(3)]).unwrap();
        let x = sample_gaussian(&mut rng, &[7, cfg.d_model], 1.0);
        let trace = forward(&params, &x, &layout, &[], true).unwrap();
        for attn in &trace.attn {
            for h in 0..cfg.n_heads {
                for qi in 0..7 {
                    let mut sum = 0.0f64;
                    for ki in 0..7 {
                        let p = attn.data()[(h * 7 + qi) * 7 + ki];
                        if !layout.allowed(qi, ki) {
                            assert_eq!(p, 0.0, "leak at ({qi},{ki})");
                        }
                        sum += p as f64;
                    }
                    assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn packed_forward_isolates_images_bitwise() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(5);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let imgs = [SegmentSpec::vision(2, 2, 0), SegmentSpec::vision(2, 2, 1)];
        let layout = build_packed_layout(&imgs, 10).unwrap();
        let a = sample_gaussian(&mut rng, &[10, cfg.d_model], 1.0);
        let mut b = a.clone();
        for i in 0..4 {
            for v in b.row_mut(i) {
                *v += 0.5; // perturb image A rows only
            }
        }
        let ta = forward(&params, &a, &layout, &[], true).unwrap();
        let tb = forward(&params, &b, &layout, &[], true).unwrap();
        for (ha, hb) in ta.hidden.iter().zip(&tb.hidden) {
            for r in 4..8 {
                for (x, y) in ha.row(r).iter().zip(hb.row(r)) {
                    assert_eq!(x.to_bits(), y.to_bits(), "image B row {r} changed");
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(6);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let layout = build_mixed_layout(&[SegmentSpec::text(5)]).unwrap();
        let x = sample_gaussian(&mut rng, &[5, cfg.d_model], 1.0);
        let t1 = forward(&params, &x, &layout, &[], false).unwrap();
        let t2 = forward(&params, &x, &layout, &[], false).unwrap();
        for (a, b) in t1.text_logits.data().iter().zip(t2.text_logits.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn vision_head_zero_and_homogeneity() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(7);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        let zero = Tensor::zeros(&[3, cfg.d_model]);
        let out = vision_head(&params, &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // nonnegative weights + zero biases: doubling input doubles output
        for t in [&mut params.vh_w1, &mut params.vh_w2, &mut params.vh_w3] {
            for v in t.data_mut() {
                *v = v.abs();
            }
        }
        let x = sample_gaussian(&mut rng, &[3, cfg.d_model], 1.0);
        let mut x2 = x.clone();
        for v in x2.data_mut() {
            *v *= 2.0;
        }
        let y = vision_head(&params, &x).unwrap();
        let y2 = vision_head(&params, &x2).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-4);
        }
    }

    #[test]
    fn vision_head_matches_straight_line_reimplementation() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(8);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let x = sample_gaussian(&mut rng, &[4, cfg.d_model], 1.0);
        let got = vision_head(&params, &x).unwrap();
        // independent elementwise loops
        let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
        for i in 0..4 {
            let mut h1 = vec![0.0f64; cfg.vision_head_hidden];
            for (j, h) in h1.iter_mut().enumerate() {
                let mut acc = params.vh_b1.data()[j] as f64;
                for (kk, &xv) in x.row(i).iter().enumerate() {
                    acc += xv as f64 * params.vh_w1.data()[kk * cfg.vision_head_hidden + j] as f64;
                }
                *h = relu(acc);
            }
            let mut h2 = vec![0.0f64; cfg.vision_head_hidden];
            for (j, h) in h2.iter_mut().enumerate() {
                let mut acc = params.vh_b2.data()[j] as f64;
                for (kk, &hv) in h1.iter().enumerate() {
                    acc += hv * params.vh_w2.data()[kk * cfg.vision_head_hidden + j] as f64;
                }
                *h = relu(acc);
            }
            for j in 0..cfg.visual_logit_dim {
                let mut acc = params.vh_b3.data()[j] as f64;
                for (kk, &hv) in h2.iter().enumerate() {
                    acc += hv * params.vh_w3.data()[kk * cfg.visual_logit_dim + j] as f64;
                }
                assert_abs_diff_eq!(got.data()[i * cfg.visual_logit_dim + j] as f64, acc, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn lm_logits_bias_row_and_weight_column() {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(9);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        for (i, v) in params.lm_b.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let zero = Tensor::zeros(&[2, cfg.d_model]);
        let out = lm_logits(&params, &zero).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), params.lm_b.data());
        }
        // one-hot hidden picks a weight row (plus bias)
        let mut onehot = Tensor::zeros(&[1, cfg.d_model]);
        onehot.data_mut()[5] = 1.0;
        let out = lm_logits(&params, &onehot).unwrap();
        for c in 0..cfg.vocab_size {
            let expected = params.lm_w.data()[5 * cfg.vocab_size + c] + params.lm_b.data()[c];
            assert_abs_diff_eq!(out.data()[c], expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerates_to_causal_1d_rope_decoder() {
        // all-causal layout with identical row/col indices must match an
        // independently-written 1-D rotary causal reference forward
        let cfg = tiny_config();
        let mut rng = Rng::seeded(10);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let t = 6;
        let layout = build_mixed_layout(&[SegmentSpec::text(t)]).unwrap();
        let x = sample_gaussian(&mut rng, &[t, cfg.d_model], 1.0);
        let trace = forward(&params, &x, &layout, &[], false).unwrap();
        let reference = reference_causal_forward(&params, &x);
        for (a, b) in trace.text_logits.data().iter().zip(reference.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4);
        }
    }

    /// Plain 1-D-RoPE causal decoder, written independently of the engine:
    /// full score matrix with -inf masking, softmax over whole rows.
    fn reference_causal_forward(params: &ModelParams, x: &Tensor) -> Tensor {
        let cfg = &params.config;
        let (t, d) = (x.shape()[0], cfg.d_model);
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let mut h = x.clone();
        for block in &params.blocks {
            let a = layernorm(&h, &block.ln1_g, &block.ln1_b).unwrap();
            let mut q = matmul(&a, &block.wq).unwrap();
            super::add_bias(&mut q, &block.bq);
            let mut k = matmul(&a, &block.wk).unwrap();
            super::add_bias(&mut k, &block.bk);
            let mut v = matmul(&a, &block.wv).unwrap();
            super::add_bias(&mut v, &block.bv);
            // classic interleaved 1-D rope at position = sequence index
            for tensor in [&mut q, &mut k] {
                for pos in 0..t {
                    for head in 0..heads {
                        for j in 0..dh / 2 {
                            let freq = 10_000f64.powf(-2.0 * j as f64 / dh as f64);
                            let angle = pos as f64 * freq;
                            let (s, c) = angle.sin_cos();
                            let off = pos * d + head * dh + 2 * j;
                            let (xa, xb) = (tensor.data()[off] as f64, tensor.data()[off + 1] as f64);
                            tensor.data_mut()[off] = (xa * c - xb * s) as f32;
                            tensor.data_mut()[off + 1] = (xa * s + xb * c) as f32;
                        }
                    }
                }
            }
            let mut cat = Tensor::zeros(&[t, d]);
            for head in 0..heads {
                for qi in 0..t {
                    let mut scores = vec![f32::NEG_INFINITY; t];
                    for (ki, s) in scores.iter_mut().enumerate().take(qi + 1) {
                        let mut acc = 0.0f32;
                        for j in 0..dh {
                            acc += q.data()[qi * d + head * dh + j] * k.data()[ki * d + head * dh + j];
                        }
                        *s = acc / (dh as f32).sqrt();
                    }
                    crate::tensor::softmax_row_inplace(&mut scores, 1.0);
                    for ki in 0..=qi {
                        for j in 0..dh {
                            cat.data_mut()[qi * d + head * dh + j] +=
                                scores[ki] * v.data()[ki * d + head * dh + j];
                        }
                    }
                }
            }
            let mut o = matmul(&cat, &block.wo).unwrap();
            super::add_bias(&mut o, &block.bo);
            for (ov, &hv) in o.data_mut().iter_mut().zip(h.data()) {
                *ov += hv;
            }
            let a2 = layernorm(&o, &block.ln2_g, &block.ln2_b).unwrap();
            let mut m1 = matmul(&a2, &block.w1).unwrap();
            super::add_bias(&mut m1, &block.b1);
            let g = crate::tensor::gelu(&m1);
            let mut m2 = matmul(&g, &block.w2).unwrap();
            super::add_bias(&mut m2, &block.b2);
            for (hv, &ov) in m2.data_mut().iter_mut().zip(o.data()) {
                *hv += ov;
            }
            h = m2;
        }
        let hf = layernorm(&h, &params.final_ln_g, &params.final_ln_b).unwrap();
        lm_logits(&params, &hf).unwrap()
    }

    /// Full-model loss used to verify the hand-rolled backward pass: LM
    /// cross-entropy on the text logits plus reconstruction and clipped
    /// gram anchoring on the visual logits.
    struct BackwardFixture {
        params: ModelParams,
        embedded: Tensor,
        layout: AttentionLayout,
        vision_rows: Vec<usize>,
        targets: Vec<usize>,
        prompt_len: usize,
        teacher_z: Tensor,
        mask: Vec<bool>,
    }

    fn backward_fixture() -> BackwardFixture {
        let cfg = tiny_config();
        let mut rng = Rng::seeded(77);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        // inflate the init so activations and visual logits are O(1);
        // near-zero logit rows make the gram normalization so curved that
        // finite differences stop being a usable reference
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v *= 6.0;
            }
        }
        let layout =
            build_mixed_layout(&[SegmentSpec::vision(2, 2, 0), SegmentSpec::text(3)]).unwrap();
        let embedded = sample_gaussian(&mut rng, &[7, cfg.d_model], 1.0);
        let teacher_z = sample_gaussian(&mut rng, &[4, cfg.visual_logit_dim], 1.0);
        BackwardFixture {
            params,
            embedded,
            layout,
            vision_rows: vec![0, 1, 2, 3],
            targets: vec![0, 0, 0, 0, 2, 5, 1],
            prompt_len: 5,
            teacher_z,
            mask: vec![true, false, true, true],
        }
    }

    fn fixture_loss(fx: &BackwardFixture, params: &ModelParams, embedded: &Tensor) -> f64 {
        let cache = forward_cached(params, embedded, &fx.layout, &fx.vision_rows).unwrap();
        let temps = crate::losses::Temperatures::default();
        let lm = crate::losses::lm_loss(cache.text_logits(), &fx.targets, fx.prompt_len)
            .unwrap()
            .value;
        let z = cache.visual_logits().unwrap();
        let mim = crate::losses::mim_loss(z, &fx.teacher_z, &fx.mask, &temps)
            .unwrap()
            .value;
        let cga = crate::losses::cga_loss(z, &fx.teacher_z).unwrap().value;
        lm + mim + cga
    }

    fn fixture_grads(fx: &BackwardFixture) -> (ModelParams, Tensor) {
        let cache =
            forward_cached(&fx.params, &fx.embedded, &fx.layout, &fx.vision_rows).unwrap();
        let temps = crate::losses::Temperatures::default();
        let lm = crate::losses::lm_loss(cache.text_logits(), &fx.targets, fx.prompt_len).unwrap();
        let z = cache.visual_logits().unwrap();
        let mim = crate::losses::mim_loss(z, &fx.teacher_z, &fx.mask, &temps).unwrap();
        let cga = crate::losses::cga_loss(z, &fx.teacher_z).unwrap();
        let d_visual: Vec<f64> = mim
            .grad
            .iter()
            .zip(&cga.grad)
            .map(|(&a, &b)| a + b)
            .collect();
        let mut grads = fx.params.zeros_like();
        let d_embedded = backward(
            &fx.params,
            &cache,
            &fx.layout,
            GradSeeds {
                d_text_logits: Some(&lm.grad),
                d_visual_logits: Some(&d_visual),
            },
            &mut grads,
        )
        .unwrap();
        (grads, d_embedded)
    }

    #[test]
    fn backward_per_tensor_spot_check_vs_finite_differences() {
        let fx = backward_fixture();
        let (grads, _) = fixture_grads(&fx);
        let mut names = Vec::new();
        fx.params.for_each_tensor(|n, _| names.push(n.to_string()));
        let gtensors = grads.tensors();
        for (ti, name) in names.iter().enumerate() {
            let g = &gtensors[ti];
            let n = g.numel();
            for &idx in &[0, n / 2, n - 1] {
                let mut p = fx.params.clone();
                let h = 1e-3f32;
                p.tensors_mut()[ti].data_mut()[idx] += h;
                let lp = fixture_loss(&fx, &p, &fx.embedded);
                p.tensors_mut()[ti].data_mut()[idx] -= 2.0 * h;
                let lm = fixture_loss(&fx, &p, &fx.embedded);
                let fd = (lp - lm) / (2.0 * h as f64);
                let a = g.data()[idx] as f64;
                // f32 forward noise puts an absolute floor under the quotient
                let tol = 1e-3 + 2e-2 * a.abs().max(fd.abs());
                assert!(
                    (a - fd).abs() < tol,
                    "{name}[{idx}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_matches_directional_finite_differences() {
        // directional derivative along the gradient itself: the signal is
        // |g|, large enough that the f32 quotient noise is negligible
        let fx = backward_fixture();
        let (grads, _) = fixture_grads(&fx);

        let norm: f64 = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        assert!(norm > 1.0, "fixture gradient unexpectedly small ({norm})");
        let analytic = norm;

        let h = 1e-3f32;
        let shift = |sign: f32| {
            let mut p = fx.params.clone();
            for (t, g) in p.tensors_mut().into_iter().zip(grads.tensors()) {
                for (v, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *v += sign * h * (gv as f64 / norm) as f32;
                }
            }
            fixture_loss(&fx, &p, &fx.embedded)
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h as f64);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        assert!(rel < 1e-2, "analytic {analytic} vs fd {fd} (rel {rel})");
    }

    #[test]
    fn backward_input_gradient_matches_finite_differences() {
        let fx = backward_fixture();
        let (_, d_embedded) = fixture_grads(&fx);
        let fd = crate::fdcheck::fd_grad(&fx.embedded, 5e-3, |x| fixture_loss(&fx, &fx.params, x));
        let analytic: Vec<f64> = d_embedded.data().iter().map(|&v| v as f64).collect();
        let err = crate::fdcheck::max_rel_error(&analytic, &fd, 1e-2);
        assert!(err < 2e-2, "input grad rel err {err}");
    }

    #[test]
    fn gram_of_normalized_rows_has_unit_diagonal() {
        // smoke link between model outputs and the gram pipeline
        let mut rng = Rng::seeded(11);
        let z = sample_gaussian(&mut rng, &[4, 8], 1.0);
        let n = l2_normalize(&z).unwrap();
        let g = crate::losses::gram(&n).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(g.data()[i * 4 + i], 1.0, epsilon = 1e-5);
        }
    }
}
