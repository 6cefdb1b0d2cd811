//! The manipulation network at toy scale.
//!
//! * text encoder: token embedding followed by two `tanh` projections; the
//!   per-token rows form the word-visual matrix and their mean the
//!   word-instruction vector
//! * image encoder: three frozen, randomly initialized stride-2 convolutions
//!   producing features at 1/2, 1/4 and 1/8 of the working size
//! * main module: three stages at 1/4, 1/2 and full working size, each
//!   fusing its hidden features with encoded canvas features through an ACM
//!   and emitting an image
//! * TRDCM: spatial and channel-wise word attention on the last hidden
//!   features, ACM fusion with upsampled canvas features, residual
//!   refinement, and an output head conditioned on the instruction vector
//! * one discriminator per generated image, each with an unconditional
//!   real/fake logit and a text-image correlation score in `[0, 1]`
//!
//! Every generated image is `bounded_residual(tanh(head), canvas)` selected
//! inside the target mask, so it stays in `[0, 1]` and equals the canvas
//! exactly outside the mask.

use std::sync::Arc;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use segedit_core::image::{ImageBuffer, MaskMap, SegMap};
use segedit_core::instruction::ParsedInstruction;
use segedit_core::preproc::CanvasPatch;
use segedit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::hash::Hasher;

use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const ENCODER_CHANNELS: [usize; 3] = [8, 16, 16];
pub const DISC_CHANNELS: [usize; 2] = [8, 16];
pub const OOV_BUCKETS: usize = 16;
pub const DAMSM_GAMMA: f64 = 5.0;

/// In-vocabulary tokens; anything else hashes into one of
/// [`OOV_BUCKETS`] shared rows.
pub const VOCAB: &[&str] = &[
    "the", "a", "an", "is", "are", "be", "make", "it", "this", "that", "to", "and", "with", "color", "colored",
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "black", "gray", "grey",
    "pink", "brown", "circle", "square", "triangle", "shape", "object", "bird", "large", "small", "bright",
    "dark", "light",
];

pub fn vocab_size() -> usize {
    VOCAB.len() + OOV_BUCKETS
}

pub fn fnv_hash(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

pub fn token_id(token: &str) -> usize {
    VOCAB
        .iter()
        .position(|w| *w == token)
        .unwrap_or_else(|| VOCAB.len() + (fnv_hash(token) % OOV_BUCKETS as u64) as usize)
}

/// Architecture hyper-parameters, stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub working_size: usize,
    pub embed_dim: usize,
    pub noise_dim: usize,
    /// Hidden depth of the three main-module stages; the last one is also
    /// the TRDCM depth.
    pub stage_channels: [usize; 3],
    pub residual_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            working_size: 128,
            embed_dim: 16,
            noise_dim: 8,
            stage_channels: [16, 16, 8],
            residual_blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.working_size < 16 || self.working_size % 8 != 0 {
            return Err(Error::Parameter(format!(
                "working size must be a multiple of 8 and at least 16, got {}",
                self.working_size
            )));
        }
        if self.embed_dim == 0 || self.noise_dim == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if self.embed_dim > 64 || self.stage_channels.iter().any(|c| *c > 64) {
            return Err(Error::Parameter("model depths are limited to 64".into()));
        }
        Ok(())
    }

    /// Side lengths of the three stage images.
    pub fn stage_sizes(&self) -> [usize; 3] {
        let w = self.working_size;
        [w / 4, w / 2, w]
    }
}

/// Feature map laid out `(y, x, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if depth == 0 || data.len() != height * width * depth {
            return Err(Error::Shape(format!("feature map {height}x{width}x{depth} with {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                component: "feature_map".into(),
                detail: "non-finite value".into(),
            });
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn from_image(image: &ImageBuffer) -> Self {
        Self {
            height: image.height(),
            width: image.width(),
            depth: image.channels(),
            data: image.data().to_vec(),
        }
    }

    pub fn get(&self, y: usize, x: usize, d: usize) -> f64 {
        self.data[(y * self.width + x) * self.depth + d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width, self.depth],
            data: self.data.clone(),
        }
    }

    fn from_tensor(t: &Tensor) -> Self {
        Self {
            height: t.shape[0],
            width: t.shape[1],
            depth: t.shape[2],
            data: t.data.clone(),
        }
    }
}

/// Encoded instruction: one word-visual row per token and the sequence
/// summary vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    /// `[T, D]`
    pub word_visual: Tensor,
    /// `[D]`
    pub word_instruction: Tensor,
    pub token_count: usize,
}

impl TextEmbedding {
    pub fn new(word_visual: Tensor, word_instruction: Tensor) -> Result<Self> {
        let [t, d] = word_visual.shape[..] else {
            return Err(Error::Shape("word-visual matrix must be 2-D".into()));
        };
        if t == 0 || word_instruction.len() != d {
            return Err(Error::Shape(format!(
                "text embedding with {t} tokens of dim {d} and instruction dim {}",
                word_instruction.len()
            )));
        }
        if !word_visual.is_finite() || !word_instruction.is_finite() {
            return Err(Error::Numeric {
                component: "text_encoder".into(),
                detail: "non-finite embedding".into(),
            });
        }
        Ok(Self {
            word_visual,
            word_instruction,
            token_count: t,
        })
    }

    pub fn dim(&self) -> usize {
        self.word_instruction.len()
    }
}

/// Text encoder, image encoder, main module and TRDCM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

/// Stage discriminators `disc.d0..d2` and the TRDCM discriminator `disc.d3`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorWeights {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// He-normal over the given fan-in.
    He(usize),
    Normal(f64),
    Const(f64),
}

fn make_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Const(v) => Tensor::filled(shape, v),
        Init::He(fan_in) => make_tensor(seed, name, shape, Init::Normal((2.0 / fan_in as f64).sqrt())),
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv_hash(name));
            let dist = Normal::new(0.0, std).expect("valid std");
            let n = shape.iter().product();
            Tensor {
                shape: shape.to_vec(),
                data: (0..n).map(|_| dist.sample(&mut rng)).collect(),
            }
        }
    }
}

struct Builder {
    seed: u64,
    store: ParamStore,
}

impl Builder {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) {
        let t = make_tensor(self.seed, name, shape, init);
        self.store.insert(name, t);
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, weight: Init) {
        self.add(&format!("{name}.w"), &[k, k, cin, cout], weight);
        self.add(&format!("{name}.b"), &[cout], Init::Const(0.0));
    }

    fn linear(&mut self, name: &str, nin: usize, nout: usize, weight: Init) {
        self.add(&format!("{name}.w"), &[nin, nout], weight);
        self.add(&format!("{name}.b"), &[nout], Init::Const(0.0));
    }

    fn acm(&mut self, name: &str, cv: usize, ch: usize) {
        self.add(&format!("{name}.scale.w"), &[3, 3, cv, ch], Init::Normal(0.02));
        self.add(&format!("{name}.scale.b"), &[ch], Init::Const(1.0));
        self.add(&format!("{name}.shift.w"), &[3, 3, cv, ch], Init::Normal(0.02));
        self.add(&format!("{name}.shift.b"), &[ch], Init::Const(0.0));
    }
}

const HEAD_INIT: Init = Init::Normal(1e-3);

pub fn init_generator(config: &ModelConfig, seed: u64) -> Result<GeneratorWeights> {
    config.validate()?;
    let d = config.embed_dim;
    let [c1, c2, c3] = config.stage_channels;
    let [e1, e2, e3] = ENCODER_CHANNELS;
    let mut b = Builder {
        seed,
        store: ParamStore::new(),
    };
    b.add("text.embed", &[vocab_size(), d], Init::Normal(1.0));
    b.linear("text.visual", d, d, Init::He(d));
    b.linear("text.instruction", d, d, Init::He(d));

    b.conv("enc.c1", 3, 3, e1, Init::He(27));
    b.conv("enc.c2", 3, e1, e2, Init::He(9 * e1));
    b.conv("enc.c3", 3, e2, e3, Init::He(9 * e2));
    b.add("enc.proj", &[e3, d], Init::Normal(1.0 / (e3 as f64).sqrt()));

    b.linear("main.s0.fc", config.noise_dim + d, c1, Init::He(config.noise_dim + d));
    b.conv("main.s0.conv", 3, c1 + e2, c1, Init::He(9 * (c1 + e2)));
    b.acm("main.s0.acm", e2, c1);
    b.conv("main.s0.head", 3, c1, 3, HEAD_INIT);
    b.conv("main.s1.conv", 3, c1 + d, c2, Init::He(9 * (c1 + d)));
    b.acm("main.s1.acm", e1, c2);
    b.conv("main.s1.head", 3, c2, 3, HEAD_INIT);
    b.conv("main.s2.conv", 3, c2 + d, c3, Init::He(9 * (c2 + d)));
    b.acm("main.s2.acm", e1, c3);
    b.conv("main.s2.head", 3, c3, 3, HEAD_INIT);

    b.add("trdcm.att.key", &[d, c3], Init::Normal(1.0 / (d as f64).sqrt()));
    b.add("trdcm.att.value", &[d, c3], Init::Normal(1.0 / (d as f64).sqrt()));
    b.add("trdcm.att.channel", &[d, c3], Init::Normal(1.0 / (d as f64).sqrt()));
    b.conv("trdcm.fuse", 1, 2 * c3, c3, Init::Normal(0.02));
    b.acm("trdcm.acm", e1, c3);
    for i in 0..config.residual_blocks {
        b.conv(&format!("trdcm.res{i}.c1"), 3, c3, c3, Init::He(9 * c3));
        b.conv(&format!("trdcm.res{i}.c2"), 3, c3, c3, Init::Normal(0.02));
    }
    b.conv("trdcm.head", 3, c3 + d, 3, HEAD_INIT);
    Ok(GeneratorWeights {
        config: config.clone(),
        seed,
        params: b.store,
    })
}

pub const NUM_DISCRIMINATORS: usize = 4;

pub fn init_discriminator(config: &ModelConfig, seed: u64) -> Result<DiscriminatorWeights> {
    config.validate()?;
    let d = config.embed_dim;
    let [k1, k2] = DISC_CHANNELS;
    let mut b = Builder {
        seed: seed ^ 0x5eed_d15c,
        store: ParamStore::new(),
    };
    for i in 0..NUM_DISCRIMINATORS {
        let p = format!("disc.d{i}");
        b.conv(&format!("{p}.c1"), 3, 3, k1, Init::He(27));
        b.conv(&format!("{p}.c2"), 3, k1, k2, Init::He(9 * k1));
        b.linear(&format!("{p}.uncond"), k2, 1, Init::He(k2));
        b.linear(&format!("{p}.cor1"), k2 + d, 16, Init::He(k2 + d));
        b.linear(&format!("{p}.cor2"), 16, 1, Init::He(16));
    }
    Ok(DiscriminatorWeights {
        config: config.clone(),
        seed,
        params: b.store,
    })
}

/// Which parameters of a store receive gradients in a graph.
#[derive(Debug, Clone, Copy)]
pub enum Trainable<'a> {
    None,
    All,
    Prefixes(&'a [&'a str]),
}

impl Trainable<'_> {
    fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p)),
        }
    }
}

/// Graph-building view over a parameter store.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub store: &'a ParamStore,
    pub trainable: Trainable<'a>,
}

impl<'a> Net<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable<'a>) -> Self {
        Self { store, trainable }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, Trainable::None)
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.store, name, self.trainable.admits(name) && !name.starts_with("enc."))
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        let k = g.value(w).shape[0];
        g.conv2d(x, w, b, stride, k / 2)
    }

    /// `[1, N] → [1, M]`
    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        let m = g.matmul(x, w);
        g.add_row_bias(m, b)
    }

    fn lrelu(g: &mut Graph, x: Var) -> Var {
        g.leaky_relu(x, LEAKY_SLOPE)
    }

    /// `(word_visual [T, D], word_instruction [1, D])`.
    pub fn text(&self, g: &mut Graph, ids: &[usize]) -> (Var, Var) {
        let table = self.p(g, "text.embed");
        let e = g.gather(table, ids);
        let v = self.linear(g, e, "text.visual");
        let tv = g.tanh(v);
        let i = self.linear(g, e, "text.instruction");
        let i = g.tanh(i);
        let ti = g.mean_rows(i);
        let d = g.value(ti).len();
        let ti = g.reshape(ti, &[1, d]);
        (tv, ti)
    }

    /// Frozen image encoder: features at 1/2, 1/4 and 1/8 resolution.
    pub fn encode_image(&self, g: &mut Graph, image: Var) -> [Var; 3] {
        let c1 = self.conv(g, image, "enc.c1", 2);
        let e1 = Self::lrelu(g, c1);
        let c2 = self.conv(g, e1, "enc.c2", 2);
        let e2 = Self::lrelu(g, c2);
        let c3 = self.conv(g, e2, "enc.c3", 2);
        let e3 = Self::lrelu(g, c3);
        [e1, e2, e3]
    }

    /// Word-region matching loss `1 − mean_t cos(c_t, w_t)`, where `c_t` is
    /// the attention-weighted sum of projected 1/8-resolution image regions
    /// for word `w_t`.
    pub fn damsm(&self, g: &mut Graph, e3: Var, tv: Var) -> Var {
        let s = g.value(e3).shape.clone();
        let r = g.reshape(e3, &[s[0] * s[1], s[2]]);
        let proj = self.p(g, "enc.proj");
        let regions = g.matmul(r, proj);
        let wn = g.l2_normalize_rows(tv);
        let rn = g.l2_normalize_rows(regions);
        let rt = g.transpose(rn);
        let sim = g.matmul(wn, rt);
        let sim = g.scale(sim, DAMSM_GAMMA);
        let a = g.softmax_rows(sim);
        let ctx = g.matmul(a, regions);
        let cn = g.l2_normalize_rows(ctx);
        let prod = g.mul(cn, wn);
        let cos = g.row_sum(prod);
        let m = g.mean_all(cos);
        g.one_minus(m)
    }

    /// `h ⊙ conv(v) + conv(v)`.
    pub fn acm(&self, g: &mut Graph, h: Var, v: Var, name: &str) -> Var {
        let s = self.conv(g, v, &format!("{name}.scale"), 1);
        let b = self.conv(g, v, &format!("{name}.shift"), 1);
        let m = g.mul(h, s);
        g.add(m, b)
    }

    /// Spatial and channel-wise word attention. Returns the `[H, W, 2C]`
    /// context together with the `[HW, T]` spatial and `[C, T]` channel
    /// weight matrices.
    pub fn attend(&self, g: &mut Graph, h: Var, tv: Var, name: &str) -> (Var, Var, Var) {
        let shape = g.value(h).shape.clone();
        let (hh, ww, c) = (shape[0], shape[1], shape[2]);
        let hm = g.reshape(h, &[hh * ww, c]);
        let wk = self.p(g, &format!("{name}.key"));
        let keys = g.matmul(tv, wk);
        let kt = g.transpose(keys);
        let logits = g.matmul(hm, kt);
        let alpha = g.softmax_rows(logits);
        let wv = self.p(g, &format!("{name}.value"));
        let vals = g.matmul(tv, wv);
        let sctx = g.matmul(alpha, vals);
        let sctx = g.reshape(sctx, &[hh, ww, c]);

        let wc = self.p(g, &format!("{name}.channel"));
        let u = g.matmul(tv, wc);
        let ut = g.transpose(u);
        let gap = g.mean_rows(h);
        let cl = g.scale_rows(ut, gap);
        let beta = g.softmax_rows(cl);
        let weighted = g.mul(beta, ut);
        let cctx = g.row_sum(weighted);
        let cctx = g.broadcast_rows(cctx, &[hh, ww, c]);
        let out = g.concat(&[sctx, cctx]);
        (out, alpha, beta)
    }

    /// `select(mask, bounded_residual(tanh(conv(x)), canvas), canvas)`.
    pub fn image_head(&self, g: &mut Graph, x: Var, name: &str, canvas: Var, mask: &Arc<Vec<bool>>) -> Var {
        let d = self.conv(g, x, name, 1);
        let t = g.tanh(d);
        let y = g.bounded_residual(t, canvas);
        g.select(mask.clone(), y, canvas)
    }

    /// The three main-module stages. Returns `(h_last, stage images)`.
    pub fn main_module(&self, g: &mut Graph, inputs: &CanvasInputs, ti: Var, noise: Var) -> (Var, [Var; 3]) {
        let [e1, e2, _] = inputs.features;
        let s0 = g.value(e2).shape[0];
        let d = g.value(ti).len();

        let z = g.concat(&[noise, ti]);
        let f = self.linear(g, z, "main.s0.fc");
        let f = Self::lrelu(g, f);
        let c1 = g.value(f).len();
        let fb = g.broadcast_rows(f, &[s0, s0, c1]);
        let x = g.concat(&[fb, e2]);
        let x = self.conv(g, x, "main.s0.conv", 1);
        let x = Self::lrelu(g, x);
        let h0 = self.acm(g, x, e2, "main.s0.acm");
        let img0 = self.image_head(g, h0, "main.s0.head", inputs.canvases[0], &inputs.masks[0]);

        let u = g.upsample2x(h0);
        let tb = g.broadcast_rows(ti, &[2 * s0, 2 * s0, d]);
        let x = g.concat(&[u, tb]);
        let x = self.conv(g, x, "main.s1.conv", 1);
        let x = Self::lrelu(g, x);
        let h1 = self.acm(g, x, e1, "main.s1.acm");
        let img1 = self.image_head(g, h1, "main.s1.head", inputs.canvases[1], &inputs.masks[1]);

        let u = g.upsample2x(h1);
        let tb = g.broadcast_rows(ti, &[4 * s0, 4 * s0, d]);
        let x = g.concat(&[u, tb]);
        let x = self.conv(g, x, "main.s2.conv", 1);
        let x = Self::lrelu(g, x);
        let v = g.upsample2x(e1);
        let h2 = self.acm(g, x, v, "main.s2.acm");
        let img2 = self.image_head(g, h2, "main.s2.head", inputs.canvases[2], &inputs.masks[2]);
        (h2, [img0, img1, img2])
    }

    /// Detail correction on top of `h_last`; the output image lives inside
    /// `mask` and equals `canvas` elsewhere.
    pub fn trdcm(&self, g: &mut Graph, h_last: Var, tv: Var, ti: Var, e1: Var, canvas: Var, mask: &Arc<Vec<bool>>, blocks: usize) -> Var {
        let (att, _, _) = self.attend(g, h_last, tv, "trdcm.att");
        let fused = self.conv(g, att, "trdcm.fuse", 1);
        let a = g.add(h_last, fused);
        let v = g.upsample2x(e1);
        let mut x = self.acm(g, a, v, "trdcm.acm");
        for i in 0..blocks {
            let r = self.conv(g, x, &format!("trdcm.res{i}.c1"), 1);
            let r = Self::lrelu(g, r);
            let r = self.conv(g, r, &format!("trdcm.res{i}.c2"), 1);
            x = g.add(x, r);
        }
        let shape = g.value(x).shape.clone();
        let d = g.value(ti).len();
        let tb = g.broadcast_rows(ti, &[shape[0], shape[1], d]);
        let x = g.concat(&[x, tb]);
        self.image_head(g, x, "trdcm.head", canvas, mask)
    }

    /// Discriminator `index` on an image. Returns the unconditional logit and
    /// the correlation score with `ti`, both `[1, 1]`.
    pub fn discriminate(&self, g: &mut Graph, image: Var, ti: Var, index: usize) -> (Var, Var) {
        let p = format!("disc.d{index}");
        let x = self.conv(g, image, &format!("{p}.c1"), 2);
        let x = Self::lrelu(g, x);
        let x = self.conv(g, x, &format!("{p}.c2"), 2);
        let x = Self::lrelu(g, x);
        let f = g.mean_rows(x);
        let k = g.value(f).len();
        let f = g.reshape(f, &[1, k]);
        let logit = self.linear(g, f, &format!("{p}.uncond"));
        let c = g.concat(&[f, ti]);
        let c = self.linear(g, c, &format!("{p}.cor1"));
        let c = Self::lrelu(g, c);
        let c = self.linear(g, c, &format!("{p}.cor2"));
        let cor = g.sigmoid(c);
        (logit, cor)
    }
}

/// Canvas image and mask at the three stage resolutions plus the encoder
/// features of the full-size canvas.
pub struct CanvasInputs {
    pub canvases: [Var; 3],
    pub masks: [Arc<Vec<bool>>; 3],
    pub features: [Var; 3],
}

fn image_tensor(image: &ImageBuffer) -> Tensor {
    Tensor {
        shape: vec![image.height(), image.width(), image.channels()],
        data: image.data().to_vec(),
    }
}

pub fn tensor_to_image(t: &Tensor) -> Result<ImageBuffer> {
    ImageBuffer::new(t.shape[0], t.shape[1], t.shape[2], t.data.clone())
}

/// Halves a mask by 2×2 majority (ties count as set).
pub fn pool_mask(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (hh, hw) = (h / 2, w / 2);
    let mut out = vec![false; hh * hw];
    for y in 0..hh {
        for x in 0..hw {
            let n = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .filter(|(dy, dx)| mask[(2 * y + dy) * w + 2 * x + dx])
                .count();
            out[y * hw + x] = n >= 2;
        }
    }
    out
}

impl CanvasInputs {
    /// Records the canvas pyramid as constants and runs the frozen encoder.
    pub fn build(g: &mut Graph, net: &Net, image: &ImageBuffer, mask: &MaskMap) -> Self {
        let full = g.constant(image_tensor(image));
        let half = g.avgpool2(full);
        let quarter = g.avgpool2(half);
        let (h, w) = mask.dims();
        let m2 = mask.data().to_vec();
        let m1 = pool_mask(&m2, h, w);
        let m0 = pool_mask(&m1, h / 2, w / 2);
        let features = net.encode_image(g, full);
        Self {
            canvases: [quarter, half, full],
            masks: [Arc::new(m0), Arc::new(m1), Arc::new(m2)],
            features,
        }
    }
}

fn check_canvas(canvas: &CanvasPatch, config: &ModelConfig) -> Result<()> {
    let w = config.working_size;
    if canvas.image.dims() != (w, w) || canvas.mask.dims() != (w, w) || canvas.image.channels() != 3 {
        return Err(Error::Shape(format!(
            "canvas {:?} does not match the working size {w}",
            canvas.image.dims()
        )));
    }
    Ok(())
}

/// Token ids of the instruction's descriptive text.
pub fn instruction_token_ids(instruction: &ParsedInstruction) -> Result<Vec<usize>> {
    let tokens = instruction.descriptive_tokens();
    if tokens.is_empty() {
        return Err(Error::Parameter("instruction has no descriptive tokens to encode".into()));
    }
    Ok(tokens.iter().map(|t| token_id(t)).collect())
}

pub fn encode_tokens(ids: &[usize], weights: &GeneratorWeights) -> Result<TextEmbedding> {
    if ids.is_empty() {
        return Err(Error::Parameter("empty token list".into()));
    }
    let mut g = Graph::new();
    let (tv, ti) = Net::frozen(&weights.params).text(&mut g, ids);
    let ti = g.value(ti);
    TextEmbedding::new(g.value(tv).clone(), Tensor::new(vec![ti.len()], ti.data.clone())?)
}

pub fn encode_text(instruction: &ParsedInstruction, weights: &GeneratorWeights) -> Result<TextEmbedding> {
    encode_tokens(&instruction_token_ids(instruction)?, weights)
}

/// ACM convolution parameters: `scale` multiplies the hidden features and
/// `shift` is added.
#[derive(Debug, Clone, PartialEq)]
pub struct AcmParams {
    pub scale_w: Tensor,
    pub scale_b: Tensor,
    pub shift_w: Tensor,
    pub shift_b: Tensor,
}

impl AcmParams {
    /// Parameters for which the module returns `hidden` unchanged.
    pub fn identity(visual_depth: usize, hidden_depth: usize) -> Self {
        Self {
            scale_w: Tensor::zeros(&[3, 3, visual_depth, hidden_depth]),
            scale_b: Tensor::filled(&[hidden_depth], 1.0),
            shift_w: Tensor::zeros(&[3, 3, visual_depth, hidden_depth]),
            shift_b: Tensor::zeros(&[hidden_depth]),
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .get(&format!("{prefix}.{s}"))
                .cloned()
                .ok_or_else(|| Error::Parameter(format!("missing parameter {prefix}.{s}")))
        };
        Ok(Self {
            scale_w: get("scale.w")?,
            scale_b: get("scale.b")?,
            shift_w: get("shift.w")?,
            shift_b: get("shift.b")?,
        })
    }

    pub fn to_store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(format!("{prefix}.scale.w"), self.scale_w.clone());
        s.insert(format!("{prefix}.scale.b"), self.scale_b.clone());
        s.insert(format!("{prefix}.shift.w"), self.shift_w.clone());
        s.insert(format!("{prefix}.shift.b"), self.shift_b.clone());
        s
    }
}

/// Nearest-neighbour upsampling of `visual` to `hidden`'s size when the
/// ratio is a power of two.
fn align(g: &mut Graph, visual: Var, height: usize, width: usize) -> Result<Var> {
    let mut v = visual;
    loop {
        let s = &g.value(v).shape;
        if (s[0], s[1]) == (height, width) {
            return Ok(v);
        }
        if 2 * s[0] > height || 2 * s[1] > width {
            return Err(Error::Shape(format!("cannot align {}x{} features to {height}x{width}", s[0], s[1])));
        }
        v = g.upsample2x(v);
    }
}

/// `hidden ⊙ conv_scale(visual) + conv_shift(visual)`, upsampling `visual`
/// to `hidden`'s size first when needed.
pub fn acm_fuse(hidden: &FeatureMap, visual: &FeatureMap, params: &AcmParams) -> Result<FeatureMap> {
    let (cv, ch) = (params.scale_w.shape[2], params.scale_w.shape[3]);
    if visual.depth != cv || hidden.depth != ch || params.shift_w.shape != params.scale_w.shape {
        return Err(Error::Shape(format!(
            "ACM expects visual depth {cv} and hidden depth {ch}, got {} and {}",
            visual.depth, hidden.depth
        )));
    }
    let store = params.to_store("acm");
    let net = Net::frozen(&store);
    let mut g = Graph::new();
    let h = g.constant(hidden.to_tensor());
    let v = g.constant(visual.to_tensor());
    let v = align(&mut g, v, hidden.height, hidden.width)?;
    let out = net.acm(&mut g, h, v, "acm");
    Ok(FeatureMap::from_tensor(g.value(out)))
}

/// Word-attention projections, each `[D, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub key: Tensor,
    pub value: Tensor,
    pub channel: Tensor,
}

impl AttentionParams {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .get(&format!("{prefix}.{s}"))
                .cloned()
                .ok_or_else(|| Error::Parameter(format!("missing parameter {prefix}.{s}")))
        };
        Ok(Self {
            key: get("key")?,
            value: get("value")?,
            channel: get("channel")?,
        })
    }

    pub fn to_store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(format!("{prefix}.key"), self.key.clone());
        s.insert(format!("{prefix}.value"), self.value.clone());
        s.insert(format!("{prefix}.channel"), self.channel.clone());
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Spatial context followed by channel context, depth `2C`.
    pub features: FeatureMap,
    /// `[H·W, T]`, rows sum to 1.
    pub spatial_weights: Tensor,
    /// `[C, T]`, rows sum to 1.
    pub channel_weights: Tensor,
}

pub fn attend(hidden: &FeatureMap, text: &TextEmbedding, params: &AttentionParams) -> Result<AttentionOutput> {
    let d = text.dim();
    for p in [&params.key, &params.value, &params.channel] {
        if p.shape != [d, hidden.depth] {
            return Err(Error::Shape(format!(
                "attention projection {:?} does not map dim {d} to depth {}",
                p.shape, hidden.depth
            )));
        }
    }
    let store = params.to_store("att");
    let net = Net::frozen(&store);
    let mut g = Graph::new();
    let h = g.constant(hidden.to_tensor());
    let tv = g.constant(text.word_visual.clone());
    let (out, alpha, beta) = net.attend(&mut g, h, tv, "att");
    Ok(AttentionOutput {
        features: FeatureMap::from_tensor(g.value(out)),
        spatial_weights: g.value(alpha).clone(),
        channel_weights: g.value(beta).clone(),
    })
}

fn noise_tensor(noise: &[f64], config: &ModelConfig) -> Result<Tensor> {
    if noise.len() != config.noise_dim {
        return Err(Error::Shape(format!("noise has {} values, expected {}", noise.len(), config.noise_dim)));
    }
    Tensor::new(vec![1, noise.len()], noise.to_vec())
}

fn text_vars(g: &mut Graph, text: &TextEmbedding, config: &ModelConfig) -> Result<(Var, Var)> {
    if text.dim() != config.embed_dim {
        return Err(Error::Shape(format!("text dim {} vs model dim {}", text.dim(), config.embed_dim)));
    }
    let tv = g.constant(text.word_visual.clone());
    let ti = g.constant(Tensor::new(vec![1, text.dim()], text.word_instruction.data.clone())?);
    Ok((tv, ti))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainOutput {
    pub h_last: FeatureMap,
    pub stage_images: [ImageBuffer; 3],
}

pub fn main_module_forward(canvas: &CanvasPatch, text: &TextEmbedding, noise: &[f64], weights: &GeneratorWeights) -> Result<MainOutput> {
    check_canvas(canvas, &weights.config)?;
    let net = Net::frozen(&weights.params);
    let mut g = Graph::new();
    let inputs = CanvasInputs::build(&mut g, &net, &canvas.image, &canvas.mask);
    let (_, ti) = text_vars(&mut g, text, &weights.config)?;
    let z = g.constant(noise_tensor(noise, &weights.config)?);
    let (h, imgs) = net.main_module(&mut g, &inputs, ti, z);
    let stage_images = [
        tensor_to_image(g.value(imgs[0]))?,
        tensor_to_image(g.value(imgs[1]))?,
        tensor_to_image(g.value(imgs[2]))?,
    ];
    Ok(MainOutput {
        h_last: FeatureMap::from_tensor(g.value(h)),
        stage_images,
    })
}

/// Runs the TRDCM. `seg` is at canvas resolution; the output differs from
/// the canvas only on `target_class` pixels.
pub fn trdcm_forward(
    h_last: &FeatureMap,
    text: &TextEmbedding,
    canvas: &CanvasPatch,
    seg: &SegMap,
    target_class: u32,
    weights: &GeneratorWeights,
) -> Result<ImageBuffer> {
    let config = &weights.config;
    check_canvas(canvas, config)?;
    let w = config.working_size;
    if seg.dims() != (w, w) {
        return Err(Error::Shape(format!("seg {:?} vs working size {w}", seg.dims())));
    }
    if (h_last.height, h_last.width, h_last.depth) != (w, w, config.stage_channels[2]) {
        return Err(Error::Shape(format!(
            "h_last {}x{}x{} vs expected {w}x{w}x{}",
            h_last.height, h_last.width, h_last.depth, config.stage_channels[2]
        )));
    }
    if !seg.contains(target_class) {
        return Err(Error::NoTarget(format!("class {target_class} is not in the segmentation map")));
    }
    let mask = seg.mask_of(target_class);
    let net = Net::frozen(&weights.params);
    let mut g = Graph::new();
    let full = g.constant(image_tensor(&canvas.image));
    let [e1, _, _] = net.encode_image(&mut g, full);
    let (tv, ti) = text_vars(&mut g, text, config)?;
    let h = g.constant(h_last.to_tensor());
    let out = net.trdcm(&mut g, h, tv, ti, e1, full, &Arc::new(mask.data().to_vec()), config.residual_blocks);
    tensor_to_image(g.value(out))
}

/// Seg map at canvas resolution holding `class` on the canvas mask.
pub fn canvas_segmap(canvas: &CanvasPatch, class: u32, palette: &std::collections::BTreeMap<u32, String>) -> Result<SegMap> {
    let (h, w) = canvas.mask.dims();
    let data = canvas.mask.data().iter().map(|m| if *m { class } else { 0 }).collect();
    SegMap::new(h, w, data, palette.clone())
}
