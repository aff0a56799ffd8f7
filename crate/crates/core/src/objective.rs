//! Training objective: the adapter-increment regularizer, the randomly
//! face-masked denoising loss, and their weighted combination.
//!
//! The regularizer penalizes the relative L2 magnitude of each adapter's
//! increment outside the face region, so the adapter learns to leave
//! non-face latents alone instead of repainting the whole image.

use rand::Rng;

use crate::adapter::{AdapterScale, IncrementRecord};
use crate::backbone::{DropMode, Model, UNetConfig};
use crate::error::{invalid_config, invalid_input, numeric, Result};
use crate::params::Binding;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Guard for the regularizer denominator; inactive whenever the masked
/// input norm is meaningfully nonzero.
pub const FAIR_DEN_EPS: f64 = 1e-8;

/// Face mask at full resolution plus its downsampled versions on every
/// token grid the model uses.
#[derive(Clone, Debug)]
pub struct MaskPyramid<T> {
    pub base: Tensor<T>,
    per_block: std::collections::BTreeMap<usize, Tensor<T>>,
    latent: Tensor<T>,
}

impl<T: Scalar> MaskPyramid<T> {
    pub fn build(base: &Tensor<T>, unet: &UNetConfig) -> Result<Self> {
        if base.shape().len() != 2 {
            return Err(invalid_input("mask must be rank-2"));
        }
        let mut per_block = std::collections::BTreeMap::new();
        for b in &unet.blocks {
            per_block.insert(b.index, downsample_mask(base, unet.grid_of_block(b.index))?);
        }
        let (_, h, w) = unet.latent;
        let latent = downsample_mask(base, (h, w))?;
        Ok(MaskPyramid { base: base.clone(), per_block, latent })
    }

    pub fn for_block(&self, block_index: usize) -> Result<&Tensor<T>> {
        self.per_block
            .get(&block_index)
            .ok_or_else(|| invalid_input(format!("no mask for block {block_index}")))
    }

    /// Mask at the latent grid, used by the denoising loss and inpainting.
    pub fn latent(&self) -> &Tensor<T> {
        &self.latent
    }

    pub fn block_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_block.keys().copied()
    }
}

/// Area-average pooling of a full-resolution mask onto a coarser grid.
/// Output values lie in [0, 1]; a partially covered cell gets its covered
/// fraction.
pub fn downsample_mask<T: Scalar>(base: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    if base.shape().len() != 2 {
        return Err(invalid_input("mask must be rank-2"));
    }
    let (hh, ww) = (base.shape()[0], base.shape()[1]);
    let (h, w) = grid;
    if h == 0 || w == 0 || h > hh || w > ww || hh % h != 0 || ww % w != 0 {
        return Err(invalid_config(format!(
            "mask grid {h}x{w} does not evenly divide {hh}x{ww}"
        )));
    }
    let (sy, sx) = (hh / h, ww / w);
    let cell = T::from_f64(1.0 / (sy * sx) as f64);
    let mut out = Tensor::zeros(&[h, w]);
    let src = base.data();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for dy in 0..sy {
                for dx in 0..sx {
                    acc += src[(y * sy + dy) * ww + (x * sx + dx)];
                }
            }
            dst[y * w + x] = acc * cell;
        }
    }
    Ok(out)
}

/// Differentiable increment regularizer for one block:
/// ||increment . (1-m)|| / ||input . (1-m)||, zero when the whole grid is
/// face. The denominator is floored at `FAIR_DEN_EPS` to guard near-empty
/// non-face regions.
pub fn fair_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    increment: Var,
    input_tokens: Var,
    mask: &Tensor<T>,
) -> Result<Var> {
    let n = tape.value(increment).rows();
    if tape.value(input_tokens).shape() != tape.value(increment).shape() {
        return Err(invalid_input("increment/input shape mismatch"));
    }
    if mask.len() != n {
        return Err(invalid_input(format!(
            "mask with {} cells cannot broadcast over {n} tokens",
            mask.len()
        )));
    }
    let complement: Vec<T> = mask.data().iter().map(|&m| T::one() - m).collect();
    if complement.iter().all(|&c| c == T::zero()) {
        // the face fills the frame: nothing outside it to regularize
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let comp = Tensor::from_vec(&[n], complement);
    let masked_inc = tape.mul_col_const(increment, comp.clone());
    let masked_in = tape.mul_col_const(input_tokens, comp);
    let num = tape.l2_norm(masked_inc);
    let den_raw = tape.l2_norm(masked_in);
    let den = tape.max_const(den_raw, T::from_f64(FAIR_DEN_EPS));
    Ok(tape.div_ss(num, den))
}

/// Increment regularizer on captured tensors (profiling / oracle form).
pub fn fair_loss<T: Scalar>(rec: &IncrementRecord<T>, mask: &Tensor<T>) -> Result<T> {
    if !rec.increment.all_finite() || !rec.input_tokens.all_finite() {
        return Err(numeric("non-finite increment record"));
    }
    let mut tape = Tape::new();
    let inc = tape.constant(rec.increment.clone());
    let inp = tape.constant(rec.input_tokens.clone());
    let v = fair_loss_on_tape(&mut tape, inc, inp, mask)?;
    Ok(tape.value(v).item())
}

/// Random face mask: the face mask with probability p, otherwise all ones.
/// One decision per call; callers draw once per sample.
pub fn random_face_mask<T: Scalar>(face_mask: &Tensor<T>, p: f64, rng: &mut impl Rng) -> Tensor<T> {
    debug_assert!((0.0..=1.0).contains(&p));
    if rng.gen::<f64>() < p {
        face_mask.clone()
    } else {
        Tensor::full(face_mask.shape(), T::one())
    }
}

/// Norm convention for the denoising term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionNorm {
    /// Mean squared error over the mask-weighted elements (default).
    MaskedMse,
    /// Plain L2 norm of the masked residual.
    L2,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_fair: f64,
    /// Probability that the denoising loss is restricted to the face mask.
    pub mask_prob: f64,
    pub diffusion_norm: DiffusionNorm,
    /// Restrict the regularizer to these blocks (empty = every adapter block).
    pub fair_blocks: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_fair: 0.01,
            mask_prob: 0.5,
            diffusion_norm: DiffusionNorm::MaskedMse,
            fair_blocks: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_fair < 0.0 {
            return Err(invalid_config("lambda_fair must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(invalid_config("mask_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn fair_applies_to(&self, block_index: usize) -> bool {
        self.fair_blocks.is_empty() || self.fair_blocks.contains(&block_index)
    }
}

/// Differentiable denoising loss with a spatial mask broadcast over the
/// channel axis. `pred` and `eps` are (h, w, c); `mask` has h*w cells.
pub fn masked_diffusion_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    eps: Var,
    mask: &Tensor<T>,
    norm: DiffusionNorm,
) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if tape.value(eps).shape() != shape {
        return Err(invalid_input("prediction/noise shape mismatch"));
    }
    let (cells, channels) = match shape.as_slice() {
        [h, w, c] => (h * w, *c),
        [n, c] => (*n, *c),
        other => return Err(invalid_input(format!("unsupported latent shape {other:?}"))),
    };
    if mask.len() != cells {
        return Err(invalid_input(format!(
            "mask with {} cells cannot broadcast over {cells} latent cells",
            mask.len()
        )));
    }
    let diff = tape.sub(pred, eps);
    let flat = tape.reshape(diff, &[cells, channels]);
    let masked = tape.mul_col_const(flat, mask.reshape(&[cells]));
    match norm {
        DiffusionNorm::MaskedMse => {
            let weight: f64 = mask.data().iter().map(|&m| m.as_f64() * m.as_f64()).sum();
            let denom = weight * channels as f64;
            if denom == 0.0 {
                return Ok(tape.constant(Tensor::scalar(T::zero())));
            }
            let sq = tape.mul(masked, masked);
            let total = tape.sum(sq);
            Ok(tape.scale(total, T::from_f64(1.0 / denom)))
        }
        DiffusionNorm::L2 => Ok(tape.l2_norm(masked)),
    }
}

/// Denoising loss on plain tensors.
pub fn masked_diffusion_loss<T: Scalar>(
    pred: &Tensor<T>,
    eps: &Tensor<T>,
    mask: &Tensor<T>,
    norm: DiffusionNorm,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let e = tape.constant(eps.clone());
    let v = masked_diffusion_loss_on_tape(&mut tape, p, e, mask, norm)?;
    Ok(tape.value(v).item())
}

/// Identity condition of one training sample, already resolved by the
/// curriculum.
#[derive(Clone, Debug)]
pub enum IdentityInput<T> {
    /// Raw encoder tokens to run through the trainable projection.
    Tokens(Tensor<T>),
    /// Dropped condition, representation chosen by the model's drop mode.
    Dropped,
}

/// Everything the objective needs for one sample.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub z_t: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
    pub e_text: Tensor<T>,
    pub identity: IdentityInput<T>,
    pub pyramid: MaskPyramid<T>,
    /// Random face mask for the denoising term, at the latent grid.
    pub diffusion_mask: Tensor<T>,
}

/// Per-sample loss terms for the diagnostics stream.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossDiagnostics {
    pub loss_total: f64,
    pub loss_diffusion: f64,
    pub fair_per_block: Vec<(usize, f64)>,
}

/// Differentiable total objective for one sample:
/// masked denoising loss + lambda * sum of per-block increment regularizers.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    model: &Model<T>,
    sample: &TrainSample<T>,
    weights: &LossConfig,
    alpha: AdapterScale,
) -> Result<(Var, LossDiagnostics)> {
    weights.validate()?;
    let e_id = match &sample.identity {
        IdentityInput::Tokens(raw) => {
            let rv = tape.constant(raw.clone());
            Some(model.proj.forward(tape, binding, rv))
        }
        IdentityInput::Dropped => match model.cfg.drop_mode {
            DropMode::LearnedNull => Some(binding.var(model.null_identity)),
            DropMode::Zeros => Some(tape.constant(Tensor::zeros(&[
                model.cfg.projection.n_id,
                model.d_model(),
            ]))),
            DropMode::Bypass => None,
        },
    };

    let z = tape.constant(sample.z_t.clone());
    let txt = tape.constant(sample.e_text.clone());
    let fwd = model.predict_noise_on_tape(tape, binding, z, sample.t, txt, e_id, alpha)?;

    let eps = tape.constant(sample.eps.clone());
    let diff_loss = masked_diffusion_loss_on_tape(
        tape,
        fwd.prediction,
        eps,
        &sample.diffusion_mask,
        weights.diffusion_norm,
    )?;

    let mut fair_per_block = Vec::new();
    let mut total = diff_loss;
    if weights.lambda_fair > 0.0 {
        let mut fair_sum: Option<Var> = None;
        for iv in &fwd.increments {
            if !weights.fair_applies_to(iv.block_index) {
                continue;
            }
            let mask = sample.pyramid.for_block(iv.block_index)?;
            let fl = fair_loss_on_tape(tape, iv.increment, iv.input_tokens, mask)?;
            fair_per_block.push((iv.block_index, tape.value(fl).item().as_f64()));
            fair_sum = Some(match fair_sum {
                None => fl,
                Some(acc) => tape.add(acc, fl),
            });
        }
        if let Some(fs) = fair_sum {
            let weighted = tape.scale(fs, T::from_f64(weights.lambda_fair));
            total = tape.add(total, weighted);
        }
    }

    let diag = LossDiagnostics {
        loss_total: tape.value(total).item().as_f64(),
        loss_diffusion: tape.value(diff_loss).item().as_f64(),
        fair_per_block,
    };
    if !diag.loss_total.is_finite() {
        return Err(numeric(format!("non-finite loss at t={}", sample.t)));
    }
    Ok((total, diag))
}

/// Mean objective over a batch, values only.
pub fn total_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[TrainSample<T>],
    weights: &LossConfig,
    alpha: AdapterScale,
) -> Result<(f64, Vec<LossDiagnostics>)> {
    if batch.is_empty() {
        return Err(invalid_input("empty batch"));
    }
    let mut diags = Vec::with_capacity(batch.len());
    let mut acc = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &model.store, false);
        let (_, diag) = total_loss_on_tape(&mut tape, &binding, model, sample, weights, alpha)?;
        acc += diag.loss_total;
        diags.push(diag);
    }
    Ok((acc / batch.len() as f64, diags))
}
