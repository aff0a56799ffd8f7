//! Guided sampling: ancestral reverse diffusion with classifier-free
//! guidance, masked inpainting that preserves the template outside the
//! face, and the per-block increment profiler.

use std::collections::BTreeMap;


use crate::adapter::AdapterScale;
use crate::backbone::{add_noise_with, Model};
use crate::encoder::IdentityEmbedding;
use crate::error::{invalid_config, invalid_input, numeric, Result};
use crate::objective::downsample_mask;
use crate::params::normal;
use crate::tensor::{Scalar, Tensor};

/// Where the guidance combination is applied. The reverse update is affine
/// in the noise estimate, so both choices agree up to float association;
/// both are kept selectable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgSpace {
    /// Combine the two noise predictions, then take the scheduler step.
    Epsilon,
    /// Take the scheduler step per branch (shared step noise), then combine.
    Latent,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    pub steps: usize,
    pub alpha: f64,
    /// Caption id for the negative/unconditional text branch (0 = null).
    pub neg_caption: usize,
    pub seed: u64,
    pub space: CfgSpace,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            cfg_scale: 7.0,
            steps: 100,
            alpha: 0.5,
            neg_caption: 0,
            seed: 0,
            space: CfgSpace::Epsilon,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(invalid_config("sampler: steps must be >= 1"));
        }
        if self.cfg_scale < 0.0 {
            return Err(invalid_config("sampler: cfg_scale must be nonnegative"));
        }
        AdapterScale::new(self.alpha)?;
        Ok(())
    }

    pub fn adapter_scale(&self) -> AdapterScale {
        AdapterScale::new(self.alpha).expect("validated")
    }
}

/// Classifier-free guidance: (1 + scale) * cond - scale * uncond, computed
/// as cond + scale * (cond - uncond) so equal branches pass through exactly.
pub fn cfg_combine<T: Scalar>(
    cond: &Tensor<T>,
    uncond: &Tensor<T>,
    cfg_scale: f64,
) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(invalid_input(format!(
            "cfg_combine: shapes {:?} vs {:?}",
            cond.shape(),
            uncond.shape()
        )));
    }
    let s = T::from_f64(cfg_scale);
    Ok(cond.zip_map(uncond, |c, u| c + s * (c - u)))
}

/// Timestep-averaged, per-block map of increment magnitudes, each map
/// normalized by its own maximum (an all-zero map stays zero).
#[derive(Clone, Debug)]
pub struct IncrementProfile<T> {
    pub per_block: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> IncrementProfile<T> {
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (block, grid) in &self.per_block {
            let (h, w) = (grid.shape()[0], grid.shape()[1]);
            let rows: Vec<Vec<f64>> = (0..h)
                .map(|y| (0..w).map(|x| grid.data()[y * w + x].as_f64()).collect())
                .collect();
            map.insert(block.to_string(), serde_json::json!(rows));
        }
        serde_json::Value::Object(map)
    }
}

struct ProfileAccumulator<T> {
    sums: BTreeMap<usize, Tensor<T>>,
    steps: usize,
}

impl<T: Scalar> ProfileAccumulator<T> {
    fn new() -> Self {
        ProfileAccumulator { sums: BTreeMap::new(), steps: 0 }
    }

    fn add(&mut self, recs: &[crate::adapter::IncrementRecord<T>]) {
        self.steps += 1;
        for rec in recs {
            let (h, w) = rec.grid;
            let d = rec.increment.cols();
            let entry = self.sums.entry(rec.block_index).or_insert_with(|| Tensor::zeros(&[h, w]));
            let dst = entry.data_mut();
            for (cell, row) in rec.increment.data().chunks_exact(d).enumerate() {
                let norm = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                dst[cell] += norm;
            }
        }
    }

    fn finish(self) -> IncrementProfile<T> {
        let steps = T::from_f64(self.steps.max(1) as f64);
        let per_block = self
            .sums
            .into_iter()
            .map(|(b, mut t)| {
                for v in t.data_mut() {
                    *v /= steps;
                }
                let max = t.data().iter().fold(T::zero(), |acc, &v| acc.max(v));
                if max > T::zero() {
                    for v in t.data_mut() {
                        *v /= max;
                    }
                }
                (b, t)
            })
            .collect();
        IncrementProfile { per_block }
    }
}

/// Evenly spaced descending timesteps ending at 0.
fn timestep_schedule(n_timesteps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.min(n_timesteps);
    if steps == 1 {
        return vec![n_timesteps - 1];
    }
    (0..steps)
        .map(|i| {
            let frac = (steps - 1 - i) as f64 / (steps - 1) as f64;
            ((n_timesteps - 1) as f64 * frac).round() as usize
        })
        .collect()
}

struct InpaintPlan<T> {
    template: Tensor<T>,
    mask: Tensor<T>,
}

/// Ancestral reverse-diffusion loop shared by generation and inpainting.
fn sample_loop<T: Scalar>(
    model: &Model<T>,
    e_text: &Tensor<T>,
    e_id: Option<&IdentityEmbedding<T>>,
    cfg: &SamplerConfig,
    inpaint: Option<InpaintPlan<T>>,
    collect_profile: bool,
) -> Result<(Tensor<T>, Option<IncrementProfile<T>>)> {
    cfg.validate()?;
    let (c, h, w) = model.cfg.unet.latent;
    let sched = &model.schedule;
    let alpha = cfg.adapter_scale();
    let neg_text = model.text_embedding(cfg.neg_caption)?;
    let drop_id = model.drop_identity_tokens();

    let mut rng_init = crate::rng::stream(cfg.seed, "sample-init", 0);
    let mut z: Tensor<T> = normal(&[h, w, c], 1.0, &mut rng_init);
    let mut profile = collect_profile.then(ProfileAccumulator::new);

    let plan = timestep_schedule(sched.len(), cfg.steps);
    for (i, &t) in plan.iter().enumerate() {
        let abar_t = sched.alphas_cumprod[t];
        // next signal level; 1.0 means fully denoised
        let abar_s = match plan.get(i + 1) {
            Some(&s) => sched.alphas_cumprod[s],
            None => 1.0,
        };
        let sigma2 = if abar_s < 1.0 {
            (1.0 - abar_s) / (1.0 - abar_t) * (1.0 - abar_t / abar_s)
        } else {
            0.0
        };

        let (cond, recs) = model.predict_noise(&z, t, e_text, e_id, alpha)?;
        let (uncond, _) = model.predict_noise(&z, t, &neg_text, drop_id.as_ref(), alpha)?;
        if let Some(p) = profile.as_mut() {
            p.add(&recs);
        }

        let noise = if sigma2 > 0.0 {
            let mut rng = crate::rng::stream(cfg.seed, "sample-noise", t as u64);
            Some(normal::<T>(&[h, w, c], 1.0, &mut rng))
        } else {
            None
        };

        z = match cfg.space {
            CfgSpace::Epsilon => {
                let eps_hat = cfg_combine(&cond, &uncond, cfg.cfg_scale)?;
                reverse_update(&z, &eps_hat, abar_t, abar_s, sigma2, noise.as_ref())
            }
            CfgSpace::Latent => {
                let zc = reverse_update(&z, &cond, abar_t, abar_s, sigma2, noise.as_ref());
                let zu = reverse_update(&z, &uncond, abar_t, abar_s, sigma2, noise.as_ref());
                cfg_combine(&zc, &zu, cfg.cfg_scale)?
            }
        };

        if let Some(ip) = inpaint.as_ref() {
            let reference = if abar_s < 1.0 {
                let mut rng = crate::rng::stream(cfg.seed, "template-noise", t as u64);
                let eps = normal::<T>(&[h, w, c], 1.0, &mut rng);
                add_noise_with(abar_s, &ip.template, &eps)
            } else {
                ip.template.clone()
            };
            z = blend_masked(&z, &reference, &ip.mask);
        }

        if !z.all_finite() {
            return Err(numeric(format!("non-finite latent after sampling step {i} (t={t})")));
        }
    }
    Ok((z, profile.map(ProfileAccumulator::finish)))
}

/// One ancestral update from signal level abar_t to abar_s.
fn reverse_update<T: Scalar>(
    z: &Tensor<T>,
    eps_hat: &Tensor<T>,
    abar_t: f64,
    abar_s: f64,
    sigma2: f64,
    noise: Option<&Tensor<T>>,
) -> Tensor<T> {
    let inv_sa = T::from_f64(1.0 / abar_t.sqrt());
    let sn_t = T::from_f64((1.0 - abar_t).sqrt());
    let sa_s = T::from_f64(abar_s.sqrt());
    let dir = T::from_f64((1.0 - abar_s - sigma2).max(0.0).sqrt());
    let mut out = z.zip_map(eps_hat, |zv, ev| {
        let z0 = (zv - sn_t * ev) * inv_sa;
        sa_s * z0 + dir * ev
    });
    if let Some(n) = noise {
        let s = T::from_f64(sigma2.sqrt());
        out = out.zip_map(n, |o, nv| o + s * nv);
    }
    out
}

/// Per-cell select/mix: cells with mask exactly 0 take the reference
/// bit-for-bit, cells at exactly 1 take the generated latent, fractional
/// cells blend linearly.
fn blend_masked<T: Scalar>(generated: &Tensor<T>, reference: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let c = generated.shape()[2];
    let mut out = generated.clone();
    let dst = out.data_mut();
    let rf = reference.data();
    for (cell, &m) in mask.data().iter().enumerate() {
        let base = cell * c;
        if m == T::zero() {
            dst[base..base + c].copy_from_slice(&rf[base..base + c]);
        } else if m != T::one() {
            for k in base..base + c {
                dst[k] = dst[k] * m + rf[k] * (T::one() - m);
            }
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Identity tokens representing a dropped condition, per the configured
    /// drop mode; None bypasses the adapter.
    pub fn drop_identity_tokens(&self) -> Option<IdentityEmbedding<T>> {
        match self.cfg.drop_mode {
            crate::backbone::DropMode::LearnedNull => Some(self.null_identity_tokens()),
            crate::backbone::DropMode::Zeros => Some(IdentityEmbedding {
                tokens: Tensor::zeros(&[self.cfg.projection.n_id, self.cfg.unet.d_model]),
            }),
            crate::backbone::DropMode::Bypass => None,
        }
    }
}

/// Text-(and optionally identity-)conditioned generation.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    e_text: &Tensor<T>,
    e_id: Option<&IdentityEmbedding<T>>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    let (z, _) = sample_loop(model, e_text, e_id, cfg, None, false)?;
    Ok(z)
}

/// Identity-swapping inpainting: regenerate inside the face mask, keep the
/// template latent bit-exact outside it.
pub fn inpaint<T: Scalar>(
    model: &Model<T>,
    template_latent: &Tensor<T>,
    face_mask: &Tensor<T>,
    e_text: &Tensor<T>,
    e_id: Option<&IdentityEmbedding<T>>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    let (c, h, w) = model.cfg.unet.latent;
    template_latent.require_shape(&[h, w, c], "template latent")?;
    let mask = if face_mask.shape() == [h, w] {
        face_mask.clone()
    } else {
        downsample_mask(face_mask, (h, w))?
    };
    let plan = InpaintPlan { template: template_latent.clone(), mask };
    let (z, _) = sample_loop(model, e_text, e_id, cfg, Some(plan), false)?;
    Ok(z)
}

/// Run a generation and record where each adapter pushed on the latent.
pub fn increment_profile<T: Scalar>(
    model: &Model<T>,
    e_text: &Tensor<T>,
    e_id: Option<&IdentityEmbedding<T>>,
    cfg: &SamplerConfig,
) -> Result<IncrementProfile<T>> {
    let (_, profile) = sample_loop(model, e_text, e_id, cfg, None, true)?;
    Ok(profile.expect("profile requested"))
}

/// Generation that also returns the increment profile of its own run.
pub fn generate_with_profile<T: Scalar>(
    model: &Model<T>,
    e_text: &Tensor<T>,
    e_id: Option<&IdentityEmbedding<T>>,
    cfg: &SamplerConfig,
) -> Result<(Tensor<T>, IncrementProfile<T>)> {
    let (z, profile) = sample_loop(model, e_text, e_id, cfg, None, true)?;
    Ok((z, profile.expect("profile requested")))
}
