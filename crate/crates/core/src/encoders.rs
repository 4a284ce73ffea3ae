//! Multi-view image encoder built from Mixture-of-View-Experts blocks, and a
//! compact transformer text encoder. Both project into a shared `d`-dimensional
//! space.
//!
//! Image token layout per study: row 0 is CLS, rows `1..=n_p` are frontal
//! patches, rows `n_p+1..=2n_p` are lateral patches. Both views reuse the same
//! positional rows `1..=n_p`. Inside a block, attention runs over all rows
//! jointly; afterwards CLS and frontal rows go through the frontal expert FFN
//! and lateral rows through the lateral expert FFN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Mat, Var};
use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub text_blocks: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            proj_dim: 32,
            n_blocks: 4,
            n_heads: 4,
            vocab_size: 30,
            max_text_len: 16,
            text_blocks: 2,
            ffn_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config("image_size must be divisible by patch_size".into()));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by n_heads".into()));
        }
        if self.max_text_len < 2 || self.vocab_size < 4 || self.proj_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("max_text_len ≥ 2, vocab_size ≥ 4, proj_dim ≥ 1 required".into()));
        }
        Ok(())
    }

    /// Patches per view.
    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Rows of the image token sequence, `2·n_p + 1`.
    pub fn image_tokens(&self) -> usize {
        2 * self.n_patches() + 1
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Declares parameters either by initialising them or by looking them up in a
/// loaded store, so one layout function serves both paths.
pub trait ParamRegistry {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId>;
}

pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamRegistry for Initializer<'_, R> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        Ok(match init {
            Init::Normal(std) => self.store.normal(name, rows, cols, std, self.rng),
            Init::Zeros => self.store.zeros(name, rows, cols),
            Init::Ones => self.store.ones(name, rows, cols),
        })
    }
}

pub struct Loader<'a> {
    pub store: &'a ParamStore,
}

impl ParamRegistry for Loader<'_> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> Result<ParamId> {
        let id = self.store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let got = self.store.get(id).dim();
        if got != (rows, cols) {
            return Err(Error::Checkpoint(format!("{name}: expected {rows}×{cols}, found {}×{}", got.0, got.1)));
        }
        Ok(id)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Shared attention plus two expert feedforward networks.
#[derive(Clone, Debug)]
pub struct MoveBlockParams {
    pub ln1: LayerNormParams,
    pub attention: AttentionParams,
    pub ln2: LayerNormParams,
    pub f_ffn: FfnParams,
    pub l_ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct TextBlockParams {
    pub ln1: LayerNormParams,
    pub attention: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct ImageEncoderParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<MoveBlockParams>,
    pub ln_final: LayerNormParams,
    pub proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub token_emb: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TextBlockParams>,
    pub ln_final: LayerNormParams,
    pub proj: ParamId,
}

const INIT_STD: f64 = 0.02;

fn xavier(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

fn layer_norm_params(reg: &mut dyn ParamRegistry, prefix: &str, dim: usize) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gamma: reg.param(&format!("{prefix}.gamma"), 1, dim, Init::Ones)?,
        beta: reg.param(&format!("{prefix}.beta"), 1, dim, Init::Zeros)?,
    })
}

fn attention_params(reg: &mut dyn ParamRegistry, prefix: &str, dim: usize) -> Result<AttentionParams> {
    let mut w = |n: &str| reg.param(&format!("{prefix}.{n}"), dim, dim, xavier(dim));
    let (wq, wk, wv, wo) = (w("wq")?, w("wk")?, w("wv")?, w("wo")?);
    let mut b = |n: &str| reg.param(&format!("{prefix}.{n}"), 1, dim, Init::Zeros);
    Ok(AttentionParams { wq, bq: b("bq")?, wk, bk: b("bk")?, wv, bv: b("bv")?, wo, bo: b("bo")? })
}

fn ffn_params(reg: &mut dyn ParamRegistry, prefix: &str, dim: usize, hidden: usize) -> Result<FfnParams> {
    Ok(FfnParams {
        w1: reg.param(&format!("{prefix}.w1"), dim, hidden, xavier(dim))?,
        b1: reg.param(&format!("{prefix}.b1"), 1, hidden, Init::Zeros)?,
        w2: reg.param(&format!("{prefix}.w2"), hidden, dim, xavier(hidden))?,
        b2: reg.param(&format!("{prefix}.b2"), 1, dim, Init::Zeros)?,
    })
}

impl ImageEncoderParams {
    pub fn declare(reg: &mut dyn ParamRegistry, cfg: &EncoderConfig) -> Result<Self> {
        let (d_model, hidden) = (cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult);
        let pix = cfg.patch_size * cfg.patch_size;
        let patch_w = reg.param("image.patch.weight", pix, d_model, xavier(pix))?;
        let patch_b = reg.param("image.patch.bias", 1, d_model, Init::Zeros)?;
        let cls = reg.param("image.cls", 1, d_model, Init::Normal(INIT_STD))?;
        let pos = reg.param("image.pos", cfg.n_patches() + 1, d_model, Init::Normal(INIT_STD))?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for l in 0..cfg.n_blocks {
            let p = format!("image.block{l}");
            blocks.push(MoveBlockParams {
                ln1: layer_norm_params(reg, &format!("{p}.ln1"), d_model)?,
                attention: attention_params(reg, &format!("{p}.attn"), d_model)?,
                ln2: layer_norm_params(reg, &format!("{p}.ln2"), d_model)?,
                f_ffn: ffn_params(reg, &format!("{p}.f_ffn"), d_model, hidden)?,
                l_ffn: ffn_params(reg, &format!("{p}.l_ffn"), d_model, hidden)?,
            });
        }
        Ok(Self {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            ln_final: layer_norm_params(reg, "image.ln_final", d_model)?,
            proj: reg.param("image.proj", d_model, cfg.proj_dim, Init::Normal(INIT_STD))?,
        })
    }
}

impl TextEncoderParams {
    pub fn declare(reg: &mut dyn ParamRegistry, cfg: &EncoderConfig) -> Result<Self> {
        let (d_model, hidden) = (cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult);
        let token_emb = reg.param("text.token_emb", cfg.vocab_size, d_model, Init::Normal(1.0))?;
        let pos = reg.param("text.pos", cfg.max_text_len, d_model, Init::Normal(INIT_STD))?;
        let mut blocks = Vec::with_capacity(cfg.text_blocks);
        for l in 0..cfg.text_blocks {
            let p = format!("text.block{l}");
            blocks.push(TextBlockParams {
                ln1: layer_norm_params(reg, &format!("{p}.ln1"), d_model)?,
                attention: attention_params(reg, &format!("{p}.attn"), d_model)?,
                ln2: layer_norm_params(reg, &format!("{p}.ln2"), d_model)?,
                ffn: ffn_params(reg, &format!("{p}.ffn"), d_model, hidden)?,
            });
        }
        Ok(Self {
            token_emb,
            pos,
            blocks,
            ln_final: layer_norm_params(reg, "text.ln_final", d_model)?,
            proj: reg.param("text.proj", d_model, cfg.proj_dim, Init::Normal(INIT_STD))?,
        })
    }
}

/// Splits an image into flattened `patch×patch` tiles in raster order.
pub fn patchify(img: &Mat, patch: usize) -> Mat {
    let per_side = img.nrows() / patch;
    Mat::from_shape_fn((per_side * per_side, patch * patch), |(p, k)| {
        let (pr, pc) = (p / per_side, p % per_side);
        let (r, c) = (k / patch, k % patch);
        img[[pr * patch + r, pc * patch + c]]
    })
}

/// Per-block switches used by tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockOptions {
    /// Skip the attention residual branch entirely.
    pub bypass_attention: bool,
}

fn layer_norm(g: &mut Graph, b: &Bound, p: &LayerNormParams, x: Var) -> Var {
    let n = g.layer_norm(x);
    let s = g.mul_row(n, b.var(p.gamma));
    g.add_row(s, b.var(p.beta))
}

fn linear(g: &mut Graph, x: Var, w: Var, bias: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, bias)
}

fn attention(g: &mut Graph, b: &Bound, p: &AttentionParams, x: Var, spec: AttentionSpec) -> Var {
    let q = linear(g, x, b.var(p.wq), b.var(p.bq));
    let k = linear(g, x, b.var(p.wk), b.var(p.bk));
    let v = linear(g, x, b.var(p.wv), b.var(p.bv));
    let o = g.attention(q, k, v, spec);
    linear(g, o, b.var(p.wo), b.var(p.bo))
}

fn ffn(g: &mut Graph, b: &Bound, p: &FfnParams, x: Var) -> Var {
    let h = linear(g, x, b.var(p.w1), b.var(p.b1));
    let h = g.gelu(h);
    linear(g, h, b.var(p.w2), b.var(p.b2))
}

/// Token matrices for a stack of `batch` studies.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// `batch×d`
    pub globals: Var,
    /// `(batch·2n_p)×d`, frontal rows then lateral rows for each study.
    pub patches: Var,
}

#[derive(Clone, Debug)]
pub struct TextFeatures {
    /// `batch×d`
    pub globals: Var,
    /// `(batch·W)×d`
    pub tokens: Var,
    /// `true` at padded positions, `batch·W` entries.
    pub pad_mask: Vec<bool>,
}

impl ImageEncoderParams {
    /// Builds `H_0` for every study: `(batch·(2n_p+1))×D`.
    pub fn embed_views(&self, g: &mut Graph, b: &Bound, cfg: &EncoderConfig, frontal: &[&Mat], lateral: &[&Mat]) -> Result<Var> {
        if frontal.len() != lateral.len() || frontal.is_empty() {
            return Err(Error::Shape("need equally many (≥1) frontal and lateral images".into()));
        }
        let size = cfg.image_size;
        for img in frontal.iter().chain(lateral) {
            if img.dim() != (size, size) {
                return Err(Error::Shape(format!("image {:?} is not {size}×{size}", img.dim())));
            }
        }
        let np = cfg.n_patches();
        let batch = frontal.len();
        let pix = cfg.patch_size * cfg.patch_size;
        let mut patches = Mat::zeros((batch * 2 * np, pix));
        for (i, (f, l)) in frontal.iter().zip(lateral).enumerate() {
            let base = i * 2 * np;
            patches.slice_mut(ndarray::s![base..base + np, ..]).assign(&patchify(f, cfg.patch_size));
            patches.slice_mut(ndarray::s![base + np..base + 2 * np, ..]).assign(&patchify(l, cfg.patch_size));
        }
        let patches = g.constant(patches);
        let emb = linear(g, patches, b.var(self.patch_w), b.var(self.patch_b));
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| (1..=np).chain(1..=np)).collect();
        let pos_rows = g.gather_rows(b.var(self.pos), pos_idx);
        let emb = g.add(emb, pos_rows);
        let pos0 = g.slice_rows(b.var(self.pos), 0, 1);
        let cls = g.add(b.var(self.cls), pos0);
        let stacked = g.concat_rows(&[emb, cls]);
        let cls_row = batch * 2 * np;
        let order: Vec<usize> = (0..batch)
            .flat_map(|i| std::iter::once(cls_row).chain(i * 2 * np..(i + 1) * 2 * np))
            .collect();
        Ok(g.gather_rows(stacked, order))
    }

    /// One MoVE block over a stack of `batch` token sequences.
    pub fn move_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &EncoderConfig,
        block: usize,
        h: Var,
        opts: BlockOptions,
    ) -> Result<Var> {
        let p = &self.blocks[block];
        let t = cfg.image_tokens();
        let (rows, cols) = g.shape(h);
        if rows % t != 0 || cols != cfg.embed_dim {
            return Err(Error::Shape(format!("move_block input {rows}×{cols}, expected k·{t}×{}", cfg.embed_dim)));
        }
        let batch = rows / t;
        let mid = if opts.bypass_attention {
            h
        } else {
            let n = layer_norm(g, b, &p.ln1, h);
            let a = attention(g, b, &p.attention, n, AttentionSpec { heads: cfg.n_heads, seq_len: t, key_valid: None });
            g.add(h, a)
        };
        let np = cfg.n_patches();
        let f_idx: Vec<usize> = (0..batch).flat_map(|i| i * t..i * t + np + 1).collect();
        let l_idx: Vec<usize> = (0..batch).flat_map(|i| i * t + np + 1..(i + 1) * t).collect();
        let mut expert = |idx: Vec<usize>, params: &FfnParams| {
            let x = g.gather_rows(mid, idx);
            let n = layer_norm(g, b, &p.ln2, x);
            let y = ffn(g, b, params, n);
            g.add(x, y)
        };
        let yf = expert(f_idx, &p.f_ffn);
        let yl = expert(l_idx, &p.l_ffn);
        let joined = g.concat_rows(&[yf, yl]);
        let n_f = batch * (np + 1);
        let restore: Vec<usize> = (0..batch)
            .flat_map(|i| (0..t).map(move |r| if r <= np { i * (np + 1) + r } else { n_f + i * np + (r - np - 1) }))
            .collect();
        let out = g.gather_rows(joined, restore);
        if !g.value(out).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("image block {block}")));
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, cfg: &EncoderConfig, frontal: &[&Mat], lateral: &[&Mat]) -> Result<ImageFeatures> {
        let mut h = self.embed_views(g, b, cfg, frontal, lateral)?;
        for l in 0..self.blocks.len() {
            h = self.move_block(g, b, cfg, l, h, BlockOptions::default())?;
        }
        let n = layer_norm(g, b, &self.ln_final, h);
        let z = g.matmul(n, b.var(self.proj));
        let t = cfg.image_tokens();
        let batch = frontal.len();
        let globals = g.gather_rows(z, (0..batch).map(|i| i * t).collect());
        let patches = g.gather_rows(z, (0..batch).flat_map(|i| i * t + 1..(i + 1) * t).collect());
        Ok(ImageFeatures { globals, patches })
    }
}

impl TextEncoderParams {
    /// Encodes token lists (each starting with `[CLS]`), right-padded to `W`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, cfg: &EncoderConfig, tokens: &[&[usize]]) -> Result<TextFeatures> {
        let w = cfg.max_text_len;
        let mut ids = Vec::with_capacity(tokens.len() * w);
        let mut pad_mask = Vec::with_capacity(tokens.len() * w);
        for seq in tokens {
            if seq.len() > w || seq.is_empty() {
                return Err(Error::Shape(format!("token list of length {} (max {w})", seq.len())));
            }
            for &id in seq.iter() {
                if id >= cfg.vocab_size {
                    return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
                }
            }
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat(PAD_ID).take(w - seq.len()));
            pad_mask.extend((0..w).map(|j| j >= seq.len()));
        }
        let batch = tokens.len();
        let emb = g.gather_rows(b.var(self.token_emb), ids);
        let pos = g.gather_rows(b.var(self.pos), (0..batch).flat_map(|_| 0..w).collect());
        let mut h = g.add(emb, pos);
        let key_valid: Vec<bool> = pad_mask.iter().map(|p| !p).collect();
        for (l, p) in self.blocks.iter().enumerate() {
            let n = layer_norm(g, b, &p.ln1, h);
            let spec = AttentionSpec { heads: cfg.n_heads, seq_len: w, key_valid: Some(key_valid.clone()) };
            let a = attention(g, b, &p.attention, n, spec);
            let mid = g.add(h, a);
            let n = layer_norm(g, b, &p.ln2, mid);
            let f = ffn(g, b, &p.ffn, n);
            h = g.add(mid, f);
            if !g.value(h).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("text block {l}")));
            }
        }
        let n = layer_norm(g, b, &self.ln_final, h);
        let z = g.matmul(n, b.var(self.proj));
        let globals = g.gather_rows(z, (0..batch).map(|i| i * w).collect());
        Ok(TextFeatures { globals, tokens: z, pad_mask })
    }
}

/// Output of the image encoder for one study.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    /// Global multi-view feature, length `d`.
    pub x_g: Vec<f64>,
    /// `2n_p × d` patch features, frontal rows first.
    pub patches: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub r_g: Vec<f64>,
    /// `W × d` token features.
    pub tokens: Mat,
    pub pad_mask: Vec<bool>,
}

/// Image and text encoders sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
}

impl Encoders {
    pub fn declare(reg: &mut dyn ParamRegistry, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            image: ImageEncoderParams::declare(reg, config)?,
            text: TextEncoderParams::declare(reg, config)?,
        })
    }

    pub fn embed_views(&self, store: &ParamStore, frontal: &Mat, lateral: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let h = self.image.embed_views(&mut g, &b, &self.config, &[frontal], &[lateral])?;
        Ok(g.value(h).clone())
    }

    pub fn move_block(&self, store: &ParamStore, block: usize, h: &Mat, opts: BlockOptions) -> Result<Mat> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let hv = g.constant(h.clone());
        let out = self.image.move_block(&mut g, &b, &self.config, block, hv, opts)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_image(&self, store: &ParamStore, frontal: &Mat, lateral: &Mat) -> Result<ImageEncoding> {
        Ok(self.encode_images(store, &[frontal], &[lateral])?.remove(0))
    }

    pub fn encode_images(&self, store: &ParamStore, frontal: &[&Mat], lateral: &[&Mat]) -> Result<Vec<ImageEncoding>> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let f = self.image.forward(&mut g, &b, &self.config, frontal, lateral)?;
        let (globals, patches) = (g.value(f.globals), g.value(f.patches));
        let m = 2 * self.config.n_patches();
        Ok((0..frontal.len())
            .map(|i| ImageEncoding {
                x_g: globals.row(i).to_vec(),
                patches: patches.slice(ndarray::s![i * m..(i + 1) * m, ..]).to_owned(),
            })
            .collect())
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<TextEncoding> {
        Ok(self.encode_texts(store, &[tokens])?.remove(0))
    }

    pub fn encode_texts(&self, store: &ParamStore, tokens: &[&[usize]]) -> Result<Vec<TextEncoding>> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let f = self.text.forward(&mut g, &b, &self.config, tokens)?;
        let (globals, toks) = (g.value(f.globals), g.value(f.tokens));
        let w = self.config.max_text_len;
        Ok((0..tokens.len())
            .map(|i| TextEncoding {
                r_g: globals.row(i).to_vec(),
                tokens: toks.slice(ndarray::s![i * w..(i + 1) * w, ..]).to_owned(),
                pad_mask: f.pad_mask[i * w..(i + 1) * w].to_vec(),
            })
            .collect())
    }
}
