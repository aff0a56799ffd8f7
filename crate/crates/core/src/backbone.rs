//! Miniature latent diffusion U-Net.
//!
//! Two resolution levels of pre-norm transformer blocks over 8x8 latent
//! tokens, with a face adapter slotted between each block's self-attention
//! and cross-attention. The base network (attention, FFN, embeddings, text
//! table) is frozen at construction; only the adapters, the identity
//! projection, and the learned null-identity tokens ever train.


use crate::adapter::{AdapterScale, GsaIds, IncrementRecord};
use crate::encoder::{
    EncoderConfig, IdentityEmbedding, ProjectionConfig, ProjectionHead, ToyEncoder,
};
use crate::error::{invalid_config, invalid_input, numeric, Result};
use crate::nn::{self, AttnIds, FfnIds};
use crate::params::{xavier, Binding, ParamId, ParamStore, Role};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// One transformer block: position in the stack and its resolution level.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct BlockDesc {
    pub index: usize,
    pub level: usize,
    #[serde(default = "default_true")]
    pub gsa: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub levels: usize,
    pub blocks: Vec<BlockDesc>,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub n_timesteps: usize,
    /// (channels, height, width) of the latent the model denoises.
    pub latent: (usize, usize, usize),
    pub text_tokens: usize,
    pub text_vocab: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 2,
            blocks: vec![
                BlockDesc { index: 0, level: 0, gsa: true },
                BlockDesc { index: 1, level: 0, gsa: true },
                BlockDesc { index: 2, level: 1, gsa: true },
                BlockDesc { index: 3, level: 1, gsa: true },
                BlockDesc { index: 4, level: 0, gsa: true },
                BlockDesc { index: 5, level: 0, gsa: true },
            ],
            d_model: 64,
            heads: 2,
            ffn_hidden: 128,
            n_timesteps: 100,
            latent: (4, 8, 8),
            text_tokens: 8,
            text_vocab: 16,
            beta_start: 1e-3,
            beta_end: 0.15,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(invalid_config("unet: at least one block required"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.index != i {
                return Err(invalid_config(format!(
                    "unet: block indices must be 0..n in order, found {} at position {i}",
                    b.index
                )));
            }
            if b.level >= self.levels {
                return Err(invalid_config(format!(
                    "unet: block {} level {} exceeds levels {}",
                    b.index, b.level, self.levels
                )));
            }
        }
        for lvl in 0..self.levels {
            if !self.blocks.iter().any(|b| b.level == lvl) {
                return Err(invalid_config(format!("unet: level {lvl} has no blocks")));
            }
        }
        if self.blocks[0].level != 0 || self.blocks.last().unwrap().level != 0 {
            return Err(invalid_config("unet: block stack must start and end at level 0"));
        }
        for pair in self.blocks.windows(2) {
            let (a, b) = (pair[0].level as i64, pair[1].level as i64);
            if (a - b).abs() > 1 {
                return Err(invalid_config("unet: level may change by at most 1 between blocks"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid_config("unet: d_model must be divisible by heads"));
        }
        let (_, h, w) = self.latent;
        let div = 1 << (self.levels - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(invalid_config(format!(
                "unet: latent {h}x{w} not divisible across {} levels",
                self.levels
            )));
        }
        if self.n_timesteps == 0 {
            return Err(invalid_config("unet: n_timesteps must be positive"));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return Err(invalid_config("unet: betas must satisfy 0 < start <= end < 1"));
        }
        if self.text_vocab < 1 {
            return Err(invalid_config("unet: text_vocab must hold at least the null row"));
        }
        Ok(())
    }

    /// Token grid at a resolution level.
    pub fn grid_at_level(&self, level: usize) -> (usize, usize) {
        let (_, h, w) = self.latent;
        (h >> level, w >> level)
    }

    /// Token grid seen by a block.
    pub fn grid_of_block(&self, block_index: usize) -> (usize, usize) {
        self.grid_at_level(self.blocks[block_index].level)
    }

    /// Indices of blocks that carry an adapter.
    pub fn gsa_blocks(&self) -> Vec<usize> {
        self.blocks.iter().filter(|b| b.gsa).map(|b| b.index).collect()
    }
}

/// DDPM forward-process schedule.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..n)
            .map(|t| {
                if n == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (n - 1) as f64
                }
            })
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        NoiseSchedule { betas, alphas_cumprod }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(invalid_config("schedule: betas must lie in (0, 1)"));
        }
        let mut prev = 1.0;
        for &a in &self.alphas_cumprod {
            if !(0.0 < a && a <= 1.0) || a > prev {
                return Err(invalid_config("schedule: alpha-bar must be nonincreasing in (0, 1]"));
            }
            prev = a;
        }
        Ok(())
    }
}

/// Forward-process corruption at a known signal level:
/// sqrt(abar) * z0 + sqrt(1 - abar) * eps.
pub fn add_noise_with<T: Scalar>(alpha_bar: f64, z0: &Tensor<T>, eps: &Tensor<T>) -> Tensor<T> {
    assert_eq!(z0.shape(), eps.shape(), "noise shape mismatch");
    let sa = T::from_f64(alpha_bar.sqrt());
    let sn = T::from_f64((1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| sa * z + sn * e)
}

/// Forward-process corruption at timestep t of the schedule.
pub fn add_noise<T: Scalar>(
    schedule: &NoiseSchedule,
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t >= schedule.len() {
        return Err(invalid_input(format!(
            "timestep {t} out of range 0..{}",
            schedule.len()
        )));
    }
    if eps.shape() != z0.shape() {
        return Err(invalid_input("noise tensor must match latent shape"));
    }
    Ok(add_noise_with(schedule.alphas_cumprod[t], z0, eps))
}

/// How a dropped identity condition is represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// A trainable zero-initialized token sequence (also the CFG null branch).
    LearnedNull,
    /// Constant zero tokens.
    Zeros,
    /// Skip the adapter path entirely.
    Bypass,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
    pub drop_mode: DropMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            unet: UNetConfig::default(),
            encoder: EncoderConfig::default(),
            projection: ProjectionConfig::default(),
            drop_mode: DropMode::LearnedNull,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.encoder.validate()?;
        Ok(())
    }
}

struct BlockIds {
    level: usize,
    self_attn: AttnIds,
    gsa: Option<GsaIds>,
    cross: AttnIds,
    ffn: FfnIds,
}

struct UNetIds {
    embed_w: ParamId,
    embed_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    pos: Vec<ParamId>,
    blocks: Vec<BlockIds>,
    downs: Vec<ParamId>,
    ups: Vec<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
    text_table: ParamId,
}

/// The full model: frozen base + trainable adapter stack, its parameter
/// store, the noise schedule, and the frozen face encoder.
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub schedule: NoiseSchedule,
    pub encoder: ToyEncoder<T>,
    pub proj: ProjectionHead,
    pub null_identity: ParamId,
    unet: UNetIds,
    pub seed: u64,
}

/// Tape-level output of one denoising forward pass.
pub struct ForwardVars {
    pub prediction: Var,
    pub increments: Vec<IncrementVar>,
}

/// Tape handles for one adapter increment, for building the training loss.
pub struct IncrementVar {
    pub block_index: usize,
    pub increment: Var,
    pub input_tokens: Var,
    pub grid: (usize, usize),
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, "model-init", 0);
        let mut store = ParamStore::new();
        let u = &cfg.unet;
        let d = u.d_model;
        let (c, _, _) = u.latent;

        let embed_w = store.register("unet.embed.w", Role::Frozen, xavier(c, d, &mut rng));
        let embed_b = store.register("unet.embed.b", Role::Frozen, Tensor::zeros(&[d]));
        let time_w1 = store.register("unet.time.w1", Role::Frozen, xavier(d, d, &mut rng));
        let time_b1 = store.register("unet.time.b1", Role::Frozen, Tensor::zeros(&[d]));
        let time_w2 = store.register("unet.time.w2", Role::Frozen, xavier(d, d, &mut rng));
        let time_b2 = store.register("unet.time.b2", Role::Frozen, Tensor::zeros(&[d]));

        let mut pos = Vec::new();
        for lvl in 0..u.levels {
            let (h, w) = u.grid_at_level(lvl);
            pos.push(store.register(
                &format!("unet.pos.level{lvl}"),
                Role::Frozen,
                crate::params::normal(&[h * w, d], 0.3, &mut rng),
            ));
        }

        let mut blocks = Vec::new();
        for b in &u.blocks {
            let p = format!("unet.block{}", b.index);
            let self_attn = AttnIds::register(&mut store, &format!("{p}.self"), d, Role::Frozen, &mut rng);
            let gsa = b
                .gsa
                .then(|| GsaIds::register(&mut store, &format!("{p}.gsa"), d, &mut rng));
            let cross = AttnIds::register(&mut store, &format!("{p}.cross"), d, Role::Frozen, &mut rng);
            let ffn = FfnIds::register(&mut store, &format!("{p}.ffn"), d, u.ffn_hidden, Role::Frozen, &mut rng);
            blocks.push(BlockIds { level: b.level, self_attn, gsa, cross, ffn });
        }

        let transitions = u.blocks.windows(2).filter(|p| p[1].level > p[0].level).count();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        for i in 0..transitions {
            downs.push(store.register(&format!("unet.down{i}.w"), Role::Frozen, xavier(d, d, &mut rng)));
        }
        for i in 0..transitions {
            ups.push(store.register(&format!("unet.up{i}.w"), Role::Frozen, xavier(d, d, &mut rng)));
        }

        let out_w = store.register("unet.out.w", Role::Frozen, xavier(d, c, &mut rng));
        let out_b = store.register("unet.out.b", Role::Frozen, Tensor::zeros(&[c]));

        // caption row 0 is the null text embedding and stays zero
        let mut table = crate::params::normal::<T>(&[u.text_vocab, u.text_tokens * d], 1.0, &mut rng);
        table.data_mut()[..u.text_tokens * d].fill(T::zero());
        let text_table = store.register("text.table", Role::Frozen, table);

        let encoder = ToyEncoder::build(&cfg.encoder, seed)?;
        let proj = ProjectionHead::register(
            &mut store,
            &cfg.projection,
            cfg.encoder.d_f,
            cfg.encoder.token_count(),
            d,
            &mut rng,
        )?;

        let null_identity = store.register(
            "null_identity",
            Role::Trainable,
            Tensor::zeros(&[cfg.projection.n_id, d]),
        );

        let schedule = NoiseSchedule::linear(u.n_timesteps, u.beta_start, u.beta_end);
        schedule.validate()?;

        Ok(Model {
            cfg: cfg.clone(),
            store,
            schedule,
            encoder,
            proj,
            null_identity,
            unet: UNetIds {
                embed_w,
                embed_b,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                pos,
                blocks,
                downs,
                ups,
                out_w,
                out_b,
                text_table,
            },
            seed,
        })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.unet.d_model
    }

    /// Text embedding for a caption id, shape (text_tokens, d_model).
    /// Row 0 of the table is the null (empty) caption.
    pub fn text_embedding(&self, caption: usize) -> Result<Tensor<T>> {
        let u = &self.cfg.unet;
        if caption >= u.text_vocab {
            return Err(invalid_input(format!(
                "caption id {caption} outside vocab 0..{}",
                u.text_vocab
            )));
        }
        let table = self.store.get(self.unet.text_table);
        let row_len = u.text_tokens * u.d_model;
        let row = table.data()[caption * row_len..(caption + 1) * row_len].to_vec();
        Ok(Tensor::from_vec(&[u.text_tokens, u.d_model], row))
    }

    pub fn null_text_embedding(&self) -> Tensor<T> {
        self.text_embedding(0).expect("null caption row")
    }

    /// Learned null identity tokens used for dropped conditions and CFG.
    pub fn null_identity_tokens(&self) -> IdentityEmbedding<T> {
        IdentityEmbedding { tokens: self.store.get(self.null_identity).clone() }
    }

    /// Names of the tensors the training objective optimizes through the
    /// model graph: every adapter's parameters plus the identity projection.
    /// The learned null-identity tokens are optimized alongside but belong
    /// to the conditioning path, not the model graph.
    pub fn trainable_parameters(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(n, role, _)| *role == Role::Trainable && *n != "null_identity")
            .map(|(n, _, _)| n.to_string())
            .collect()
    }

    /// Differentiable denoising forward pass.
    ///
    /// `z_t` is an (h, w, c) latent variable on the tape; `e_id` of None
    /// bypasses the adapter path entirely.
    pub fn predict_noise_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        z_t: Var,
        t: usize,
        e_text: Var,
        e_id: Option<Var>,
        alpha: AdapterScale,
    ) -> Result<ForwardVars> {
        let u = &self.cfg.unet;
        if t >= u.n_timesteps {
            return Err(invalid_input(format!("timestep {t} out of range 0..{}", u.n_timesteps)));
        }
        let (c, h, w) = u.latent;
        tape.value(z_t).require_shape(&[h, w, c], "latent input")?;
        if tape.value(e_text).shape() != [u.text_tokens, u.d_model] {
            return Err(invalid_input(format!(
                "text embedding shape {:?}, expected ({}, {})",
                tape.value(e_text).shape(),
                u.text_tokens,
                u.d_model
            )));
        }
        let ids = &self.unet;
        let eps = T::from_f64(nn::LN_EPS);
        let alpha_t = T::from_f64(alpha.value());

        // timestep features -> frozen 2-layer MLP
        let sin = tape.constant(nn::sinusoidal_embedding(t, u.d_model).reshape(&[1, u.d_model]));
        let th = tape.matmul(sin, binding.var(ids.time_w1));
        let th = tape.add_row(th, binding.var(ids.time_b1));
        let ta = tape.silu(th);
        let tv = tape.matmul(ta, binding.var(ids.time_w2));
        let tv = tape.add_row(tv, binding.var(ids.time_b2));
        let tvec = tape.reshape(tv, &[u.d_model]);

        // latent -> tokens
        let flat = tape.reshape(z_t, &[h * w, c]);
        let emb = tape.matmul(flat, binding.var(ids.embed_w));
        let emb = tape.add_row(emb, binding.var(ids.embed_b));
        let emb = tape.add_row(emb, tvec);
        let mut x = tape.add(emb, binding.var(ids.pos[0]));

        let mut level = 0usize;
        let mut skips: Vec<Var> = Vec::new();
        let mut down_i = 0;
        let mut up_i = 0;
        let mut increments = Vec::new();

        for (bi, blk) in ids.blocks.iter().enumerate() {
            while blk.level > level {
                let (gh, gw) = u.grid_at_level(level);
                skips.push(x);
                let pooled = tape.avg_pool2(x, gh, gw);
                let projd = tape.matmul(pooled, binding.var(ids.downs[down_i]));
                let pos = binding.var(ids.pos[level + 1]);
                x = tape.add(projd, pos);
                let tvec2 = tvec;
                x = tape.add_row(x, tvec2);
                down_i += 1;
                level += 1;
            }
            while blk.level < level {
                let (gh, gw) = u.grid_at_level(level);
                let up = tape.upsample2(x, gh, gw);
                let projd = tape.matmul(up, binding.var(ids.ups[up_i]));
                let skip = skips.pop().expect("skip stack underflow");
                x = tape.add(projd, skip);
                up_i += 1;
                level -= 1;
            }

            // self-attention (frozen)
            let n1 = tape.layer_norm_rows(x, eps);
            let w_self = blk.self_attn.bind(binding);
            let sa = nn::multi_head_attention(tape, n1, n1, &w_self, u.heads);
            x = tape.add(x, sa);

            // face adapter
            if let (Some(gsa), Some(eid)) = (blk.gsa.as_ref(), e_id) {
                let inc = crate::adapter::gsa_increment(tape, gsa, binding, x, eid, u.heads);
                increments.push(IncrementVar {
                    block_index: bi,
                    increment: inc,
                    input_tokens: x,
                    grid: u.grid_at_level(blk.level),
                });
                let scaled = tape.scale(inc, alpha_t);
                x = tape.add(x, scaled);
            }

            // cross-attention over text tokens (frozen)
            let n2 = tape.layer_norm_rows(x, eps);
            let w_cross = blk.cross.bind(binding);
            let ca = nn::multi_head_attention(tape, n2, e_text, &w_cross, u.heads);
            x = tape.add(x, ca);

            // feed-forward (frozen)
            let n3 = tape.layer_norm_rows(x, eps);
            let ff = nn::feed_forward(tape, n3, &blk.ffn, binding);
            x = tape.add(x, ff);

            if !tape.value(x).all_finite() {
                return Err(numeric(format!("non-finite activations after block {bi}")));
            }
        }
        debug_assert_eq!(level, 0, "execution plan must return to level 0");

        let nf = tape.layer_norm_rows(x, eps);
        let out = tape.matmul(nf, binding.var(ids.out_w));
        let out = tape.add_row(out, binding.var(ids.out_b));
        let prediction = tape.reshape(out, &[h, w, c]);
        Ok(ForwardVars { prediction, increments })
    }

    /// Pure denoising forward pass on plain tensors.
    pub fn predict_noise(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        e_text: &Tensor<T>,
        e_id: Option<&IdentityEmbedding<T>>,
        alpha: AdapterScale,
    ) -> Result<(Tensor<T>, Vec<IncrementRecord<T>>)> {
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &self.store, false);
        let z = tape.constant(z_t.clone());
        let txt = tape.constant(e_text.clone());
        let eid = match e_id {
            Some(e) => {
                if e.tokens.cols() != self.d_model() {
                    return Err(invalid_input(format!(
                        "identity tokens width {} != d_model {}",
                        e.tokens.cols(),
                        self.d_model()
                    )));
                }
                Some(tape.constant(e.tokens.clone()))
            }
            None => None,
        };
        let fwd = self.predict_noise_on_tape(&mut tape, &binding, z, t, txt, eid, alpha)?;
        let recs = fwd
            .increments
            .iter()
            .map(|iv| IncrementRecord {
                block_index: iv.block_index,
                increment: tape.value(iv.increment).clone(),
                input_tokens: tape.value(iv.input_tokens).clone(),
                grid: iv.grid,
            })
            .collect();
        Ok((tape.value(fwd.prediction).clone(), recs))
    }
}
