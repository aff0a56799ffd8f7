//! Identity token extraction: face masking, the pluggable face encoder
//! interface with its frozen toy implementation, and the learned projection
//! of raw encoder tokens into the diffusion model's token space.

use rand::Rng;

use crate::error::{invalid_config, invalid_input, numeric, Result};
use crate::nn::{self, AttnIds, AttnWeights, FfnIds};
use crate::params::{normal, xavier, Binding, ParamId, ParamStore, Role};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// A face photo with its binary face-region mask.
///
/// Pixels are (H, W, C) in [0, 1]; the mask is (H, W) with entries in {0, 1}.
#[derive(Clone, Debug)]
pub struct FaceImage<T> {
    pub pixels: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> FaceImage<T> {
    pub fn new(pixels: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(invalid_input(format!(
                "face image pixels must be (H, W, C), got {:?}",
                pixels.shape()
            )));
        }
        if mask.shape() != &pixels.shape()[..2] {
            return Err(invalid_input(format!(
                "face mask shape {:?} does not match image {:?}",
                mask.shape(),
                pixels.shape()
            )));
        }
        if !mask.data().iter().all(|&m| m == T::zero() || m == T::one()) {
            return Err(invalid_input("face mask entries must be 0 or 1"));
        }
        Ok(FaceImage { pixels, mask })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Zero out every pixel outside the face mask. The mask is unchanged, and
/// applying the operation twice gives the same result as applying it once.
pub fn mask_face_region<T: Scalar>(image: &FaceImage<T>) -> Result<FaceImage<T>> {
    if image.mask.shape() != &image.pixels.shape()[..2] {
        return Err(invalid_input("mask/pixel shape mismatch"));
    }
    let c = image.channels();
    let mut pixels = image.pixels.clone();
    for (px, &m) in pixels.data_mut().chunks_exact_mut(c).zip(image.mask.data()) {
        if m == T::zero() {
            for v in px {
                *v = T::zero();
            }
        }
    }
    Ok(FaceImage { pixels, mask: image.mask.clone() })
}

/// Token sequence straight out of the face encoder: (N_f, d_f).
#[derive(Clone, Debug)]
pub struct RawFaceTokens<T> {
    pub tokens: Tensor<T>,
}

/// Identity tokens projected into the diffusion token space: (N_id, d_model).
#[derive(Clone, Debug)]
pub struct IdentityEmbedding<T> {
    pub tokens: Tensor<T>,
}

/// Pluggable face expert encoder.
///
/// Implementations must be deterministic: byte-identical inputs produce
/// byte-identical tokens. `global_embedding` returns a unit vector and is
/// used only for evaluation.
pub trait FaceEncoder<T: Scalar> {
    /// Penultimate-layer token features, shape (token_count, embed_dim).
    fn encode(&self, image: &FaceImage<T>) -> Result<RawFaceTokens<T>>;
    fn embed_dim(&self) -> usize;
    fn token_count(&self) -> usize;
    /// L2-normalized whole-face embedding for similarity measurements.
    fn global_embedding(&self, image: &FaceImage<T>) -> Result<Tensor<T>>;
}

/// Penultimate-layer tokens of an already face-masked image.
pub fn extract_penultimate_tokens<T: Scalar>(
    image: &FaceImage<T>,
    encoder: &dyn FaceEncoder<T>,
) -> Result<RawFaceTokens<T>> {
    let raw = encoder.encode(image)?;
    if !raw.tokens.all_finite() {
        return Err(numeric("encoder produced non-finite tokens"));
    }
    raw.tokens
        .require_shape(&[encoder.token_count(), encoder.embed_dim()], "encoder tokens")?;
    Ok(raw)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Encoder plugin selector; `toy` is the built-in frozen stand-in.
    pub kind: String,
    pub image_size: usize,
    pub patch: usize,
    pub d_f: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { kind: "toy".into(), image_size: 64, patch: 8, d_f: 32, heads: 2, ffn_hidden: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind != "toy" {
            return Err(invalid_config(format!(
                "unknown encoder.kind {:?} (supported: \"toy\")",
                self.kind
            )));
        }
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(invalid_config(format!(
                "encoder image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.d_f % self.heads != 0 {
            return Err(invalid_config("encoder d_f must be divisible by heads"));
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }
}

struct ToyBlock<T> {
    wq: Tensor<T>,
    wk: Tensor<T>,
    wv: Tensor<T>,
    wo: Tensor<T>,
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

/// Frozen randomly-initialized patch-embedding + 2-block transformer that
/// stands in for a recognition-trained face expert. Fully determined by its
/// seed; never trained.
pub struct ToyEncoder<T> {
    cfg: EncoderConfig,
    channels: usize,
    w_patch: Tensor<T>,
    pos: Tensor<T>,
    blocks: Vec<ToyBlock<T>>,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn build(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let channels = 3;
        let mut rng = crate::rng::stream(seed, "toy-encoder", 0);
        let patch_dim = cfg.patch * cfg.patch * channels;
        let n_f = cfg.token_count();
        let w_patch = xavier(patch_dim, cfg.d_f, &mut rng);
        let pos = normal(&[n_f, cfg.d_f], 0.2, &mut rng);
        let blocks = (0..2)
            .map(|_| ToyBlock {
                wq: xavier(cfg.d_f, cfg.d_f, &mut rng),
                wk: xavier(cfg.d_f, cfg.d_f, &mut rng),
                wv: xavier(cfg.d_f, cfg.d_f, &mut rng),
                wo: xavier(cfg.d_f, cfg.d_f, &mut rng),
                w1: xavier(cfg.d_f, cfg.ffn_hidden, &mut rng),
                b1: Tensor::zeros(&[cfg.ffn_hidden]),
                w2: xavier(cfg.ffn_hidden, cfg.d_f, &mut rng),
                b2: Tensor::zeros(&[cfg.d_f]),
            })
            .collect();
        Ok(ToyEncoder { cfg: cfg.clone(), channels, w_patch, pos, blocks })
    }

    /// Token features after each block; index 0 is the penultimate layer.
    fn forward(&self, image: &FaceImage<T>) -> Result<Vec<Tensor<T>>> {
        if image.height() != self.cfg.image_size
            || image.width() != self.cfg.image_size
            || image.channels() != self.channels
        {
            return Err(invalid_input(format!(
                "toy encoder expects ({s}, {s}, {c}) images, got {:?}",
                image.pixels.shape(),
                s = self.cfg.image_size,
                c = self.channels,
            )));
        }
        let patches = patchify(&image.pixels, self.cfg.patch);
        let mut tape = Tape::new();
        let p = tape.constant(patches);
        let wp = tape.constant(self.w_patch.clone());
        let pos = tape.constant(self.pos.clone());
        let emb = tape.matmul(p, wp);
        let mut x = tape.add(emb, pos);

        let eps = T::from_f64(nn::LN_EPS);
        let mut outs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let w = AttnWeights {
                wq: tape.constant(blk.wq.clone()),
                wk: tape.constant(blk.wk.clone()),
                wv: tape.constant(blk.wv.clone()),
                wo: tape.constant(blk.wo.clone()),
            };
            let w1 = tape.constant(blk.w1.clone());
            let b1 = tape.constant(blk.b1.clone());
            let w2 = tape.constant(blk.w2.clone());
            let b2 = tape.constant(blk.b2.clone());
            let n = tape.layer_norm_rows(x, eps);
            let a = nn::multi_head_attention(&mut tape, n, n, &w, self.cfg.heads);
            x = tape.add(x, a);
            let n2 = tape.layer_norm_rows(x, eps);
            let h = tape.matmul(n2, w1);
            let h = tape.add_row(h, b1);
            let act = tape.silu(h);
            let o = tape.matmul(act, w2);
            let o = tape.add_row(o, b2);
            x = tape.add(x, o);
            outs.push(tape.value(x).clone());
        }
        Ok(outs)
    }
}

impl<T: Scalar> FaceEncoder<T> for ToyEncoder<T> {
    fn encode(&self, image: &FaceImage<T>) -> Result<RawFaceTokens<T>> {
        let outs = self.forward(image)?;
        Ok(RawFaceTokens { tokens: outs[0].clone() })
    }

    fn embed_dim(&self) -> usize {
        self.cfg.d_f
    }

    fn token_count(&self) -> usize {
        self.cfg.token_count()
    }

    fn global_embedding(&self, image: &FaceImage<T>) -> Result<Tensor<T>> {
        let outs = self.forward(image)?;
        let last = outs.last().unwrap();
        let (n, d) = (last.rows(), last.cols());
        let mut mean = vec![T::zero(); d];
        for row in last.data().chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = T::from_f64(1.0 / n as f64);
        for m in &mut mean {
            *m *= inv;
        }
        let t = Tensor::from_vec(&[d], mean);
        let norm = t.l2();
        if norm.as_f64() < 1e-12 {
            return Err(numeric("global embedding has zero norm"));
        }
        Ok(t.scale(T::one() / norm))
    }
}

/// Split an (H, W, C) image into non-overlapping patch rows, raster order:
/// output is (n_patches, patch*patch*C).
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, patch: usize) -> Tensor<T> {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    assert!(h % patch == 0 && w % patch == 0, "image not divisible into patches");
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * c);
    let src = pixels.data();
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let base = ((py * patch + dy) * w + px * patch + dx) * c;
                    data.extend_from_slice(&src[base..base + c]);
                }
            }
        }
    }
    Tensor::from_vec(&[gh * gw, patch * patch * c], data)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Number of identity tokens handed to the adapter.
    pub n_id: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub heads: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { n_id: 4, blocks: 4, ffn_hidden: 128, heads: 2 }
    }
}

struct ProjBlockIds {
    attn: AttnIds,
    ffn: FfnIds,
}

/// Learned projection from raw encoder tokens (N_f, d_f) to identity tokens
/// (N_id, d_model): input linear, a stack of pre-norm transformer blocks,
/// then a learned linear resampling over the token axis.
pub struct ProjectionHead {
    pub d_f: usize,
    pub n_f: usize,
    pub d_model: usize,
    pub n_id: usize,
    heads: usize,
    w_in: ParamId,
    b_in: ParamId,
    blocks: Vec<ProjBlockIds>,
    resample: ParamId,
}

impl ProjectionHead {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &ProjectionConfig,
        d_f: usize,
        n_f: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d_model % cfg.heads != 0 {
            return Err(invalid_config("projection: d_model must be divisible by heads"));
        }
        if cfg.n_id == 0 || cfg.blocks == 0 {
            return Err(invalid_config("projection: n_id and blocks must be positive"));
        }
        let w_in = store.register("proj.w_in", Role::Trainable, xavier(d_f, d_model, rng));
        let b_in = store.register("proj.b_in", Role::Trainable, Tensor::zeros(&[d_model]));
        let blocks = (0..cfg.blocks)
            .map(|i| ProjBlockIds {
                attn: AttnIds::register(store, &format!("proj.block{i}.attn"), d_model, Role::Trainable, rng),
                ffn: FfnIds::register(store, &format!("proj.block{i}.ffn"), d_model, cfg.ffn_hidden, Role::Trainable, rng),
            })
            .collect();
        let resample = store.register("proj.resample", Role::Trainable, xavier(cfg.n_id, n_f, rng));
        Ok(ProjectionHead {
            d_f,
            n_f,
            d_model,
            n_id: cfg.n_id,
            heads: cfg.heads,
            w_in,
            b_in,
            blocks,
            resample,
        })
    }

    /// Differentiable forward: raw tokens (N_f, d_f) -> identity tokens
    /// (N_id, d_model).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, raw: Var) -> Var {
        let x0 = tape.matmul(raw, binding.var(self.w_in));
        let mut x = tape.add_row(x0, binding.var(self.b_in));
        for blk in &self.blocks {
            let w = blk.attn.bind(binding);
            x = nn::encoder_block(tape, x, &w, &blk.ffn, binding, self.heads);
        }
        tape.matmul(binding.var(self.resample), x)
    }

    pub fn param_names<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<String> {
        store
            .iter()
            .filter(|(n, _, _)| n.starts_with("proj."))
            .map(|(n, _, _)| n.to_string())
            .collect()
    }
}

/// Project raw face tokens into the diffusion token space (pure wrapper
/// around the differentiable forward).
pub fn project_identity<T: Scalar>(
    store: &ParamStore<T>,
    head: &ProjectionHead,
    raw: &RawFaceTokens<T>,
) -> Result<IdentityEmbedding<T>> {
    if raw.tokens.shape().len() != 2 || raw.tokens.cols() != head.d_f {
        return Err(invalid_config(format!(
            "projection expects token width {}, got shape {:?}",
            head.d_f,
            raw.tokens.shape()
        )));
    }
    if raw.tokens.rows() != head.n_f {
        return Err(invalid_config(format!(
            "projection expects {} tokens, got {}",
            head.n_f,
            raw.tokens.rows()
        )));
    }
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, store, false);
    let raw_var = tape.constant(raw.tokens.clone());
    let out = head.forward(&mut tape, &binding, raw_var);
    Ok(IdentityEmbedding { tokens: tape.value(out).clone() })
}
