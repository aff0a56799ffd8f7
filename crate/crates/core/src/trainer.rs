//! Training loop: batch assembly under the condition curriculum, parallel
//! per-sample gradients with ordered reduction (bit-reproducible regardless
//! of thread count), Adam updates over the trainable partition, JSON-lines
//! diagnostics, and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::adapter::AdapterScale;
use crate::backbone::{add_noise, Model};
use crate::checkpoint;
use crate::config::{diff_json, Precision, TrainConfig};
use crate::curriculum::{sample_condition, ConditionCase};
use crate::dataset::{generate_synthetic_identity_dataset, IdentityDataset};
use crate::encoder::{extract_penultimate_tokens, mask_face_region};
use crate::error::{invalid_config, numeric, Error, Result};
use crate::objective::{
    random_face_mask, total_loss_on_tape, IdentityInput, MaskPyramid, TrainSample,
};
use crate::optim::AdamState;
use crate::params::{Binding, ParamId};
use crate::rng::stream2;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_dir: PathBuf,
    pub params_digest: String,
    pub steps_run: usize,
    /// (step, batch-mean diffusion loss), decimated for reporting.
    pub loss_curve: Vec<(usize, f64)>,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Train from scratch or continue from a checkpoint directory.
pub fn train(cfg: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, resume_from),
        Precision::F64 => train_typed::<f64>(cfg, resume_from),
    }
}

/// Load the run's dataset: from `train.dataset_dir` when set, otherwise
/// regenerated bit-exactly from the dataset seed.
pub fn load_dataset(cfg: &TrainConfig) -> Result<IdentityDataset> {
    match &cfg.train.dataset_dir {
        Some(dir) => IdentityDataset::load_dir(Path::new(dir)),
        None => generate_synthetic_identity_dataset(&cfg.dataset),
    }
}

/// Per-record immutable caches shared across steps.
pub struct RecordCache<T> {
    pub raw_tokens: Vec<Tensor<T>>,
    pub latents: Vec<Tensor<T>>,
    pub pyramids: Vec<MaskPyramid<T>>,
}

pub fn build_record_cache<T: Scalar>(
    model: &Model<T>,
    dataset: &IdentityDataset,
) -> Result<RecordCache<T>> {
    let (_, h, w) = model.cfg.unet.latent;
    let mut raw_tokens = Vec::with_capacity(dataset.len());
    let mut latents = Vec::with_capacity(dataset.len());
    let mut pyramids = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let img = dataset.face_image::<T>(i)?;
        let masked = mask_face_region(&img)?;
        raw_tokens.push(extract_penultimate_tokens(&masked, &model.encoder)?.tokens);
        latents.push(dataset.latent::<T>(i, (h, w))?);
        pyramids.push(MaskPyramid::build(&img.mask, &model.cfg.unet)?);
    }
    Ok(RecordCache { raw_tokens, latents, pyramids })
}

fn prepare_sample<T: Scalar>(
    cfg: &TrainConfig,
    model: &Model<T>,
    dataset: &IdentityDataset,
    cache: &RecordCache<T>,
    step: usize,
    slot: usize,
) -> Result<TrainSample<T>> {
    let seed = cfg.train.seed;
    let sched = cfg.curriculum_schedule();
    let n_t = model.cfg.unet.n_timesteps;

    let record = stream2(seed, "batch", step as u64, slot as u64).gen_range(0..dataset.len());
    let plan = {
        let mut rng = stream2(seed, "cond", step as u64, slot as u64);
        sample_condition(dataset, record, step, &sched, &mut rng)
    };
    let caption = {
        let mut rng = stream2(seed, "text-drop", step as u64, slot as u64);
        if rng.gen::<f64>() < sched.text_drop_prob {
            0
        } else {
            dataset.records[record].caption_id
        }
    };
    let t = stream2(seed, "timestep", step as u64, slot as u64).gen_range(0..n_t);
    let eps = {
        let mut rng = stream2(seed, "noise", step as u64, slot as u64);
        let (c, h, w) = model.cfg.unet.latent;
        crate::params::normal::<T>(&[h, w, c], 1.0, &mut rng)
    };
    let z_t = add_noise(&model.schedule, &cache.latents[record], t, &eps)?;
    let pyramid = cache.pyramids[record].clone();
    let diffusion_mask = {
        let mut rng = stream2(seed, "mask-drop", step as u64, slot as u64);
        random_face_mask(pyramid.latent(), cfg.loss.mask_prob, &mut rng)
    };
    let identity = match plan.case {
        ConditionCase::Dropped => IdentityInput::Dropped,
        ConditionCase::Paired | ConditionCase::Shuffled => {
            let source = plan.source_record.expect("non-dropped plan has a source");
            IdentityInput::Tokens(cache.raw_tokens[source].clone())
        }
    };
    Ok(TrainSample {
        z_t,
        t,
        eps,
        e_text: model.text_embedding(caption)?,
        identity,
        pyramid,
        diffusion_mask,
    })
}

struct StepOutput<T> {
    grads: Vec<(ParamId, Tensor<T>)>,
    loss_total: f64,
    loss_diffusion: f64,
    fair_per_block: Vec<(usize, f64)>,
}

fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    sample: &TrainSample<T>,
    cfg: &TrainConfig,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, &model.store, true);
    let alpha = AdapterScale::new(cfg.train.alpha)?;
    let (loss, diag) = total_loss_on_tape(&mut tape, &binding, model, sample, &cfg.loss, alpha)?;
    let grads = tape.backward(loss);
    Ok(StepOutput {
        grads: binding.trainable_grads(&model.store, &grads),
        loss_total: diag.loss_total,
        loss_diffusion: diag.loss_diffusion,
        fair_per_block: diag.fair_per_block,
    })
}

fn train_typed<T: Scalar>(cfg: &TrainConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let mut model: Model<T> = Model::build(&cfg.model, cfg.train.seed)?;
    let mut adam: AdamState<T> = AdamState::new(&model.store);
    let config_hash = cfg.config_hash();
    let config_json = cfg.to_json();

    let mut start_step = 0usize;
    if let Some(dir) = resume_from {
        let manifest = checkpoint::load_manifest(dir)?;
        if manifest.config_hash != config_hash {
            let stored = checkpoint::load_config_json(dir)?;
            let diffs = diff_json(&stored, &config_json);
            let summary = if diffs.is_empty() {
                "stored config unavailable for diff".to_string()
            } else {
                diffs.join("; ")
            };
            return Err(invalid_config(format!(
                "checkpoint config hash {} does not match current {}: {summary}",
                &manifest.config_hash[..12.min(manifest.config_hash.len())],
                &config_hash[..12]
            )));
        }
        checkpoint::load_into_store(dir, &manifest, &mut model.store)?;
        adam = checkpoint::load_adam(dir, &manifest, &model.store)?;
        start_step = manifest.step;
    }

    let cache = build_record_cache(&model, &dataset)?;
    let out_dir = PathBuf::from(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let diag_path = out_dir.join("diagnostics.jsonl");
    let mut diag_file = std::fs::OpenOptions::new()
        .create(true)
        .append(start_step > 0)
        .truncate(start_step == 0)
        .write(true)
        .open(&diag_path)?;

    let frozen_digest = model.store.digest(Some(crate::params::Role::Frozen));
    let batch = cfg.optimizer.batch_size;
    let total = cfg.train.total_steps;
    let mut loss_curve = Vec::new();
    let mut first_loss = None;
    let mut last_loss = None;
    let mut last_good: Option<PathBuf> = resume_from.map(|p| p.to_path_buf());

    let save_at = |step: usize,
                   name: &str,
                   model: &Model<T>,
                   adam: &AdamState<T>|
     -> Result<PathBuf> {
        let dir = out_dir.join(name);
        checkpoint::save(&dir, &model.store, Some(adam), step, cfg.train.seed, &config_hash, &config_json)?;
        Ok(dir)
    };

    for step in start_step..total {
        let samples: Vec<TrainSample<T>> = (0..batch)
            .map(|slot| prepare_sample(cfg, &model, &dataset, &cache, step, slot))
            .collect::<Result<_>>()?;

        let outputs: Vec<Result<StepOutput<T>>> = samples
            .par_iter()
            .map(|s| sample_gradients(&model, s, cfg))
            .collect();

        // Dense accumulation over the trainable set: a sample that skipped a
        // path (e.g. dropped identity never touches the projection)
        // contributes a zero gradient there. Reduction order is the slot
        // order, so f32 sums never depend on thread scheduling.
        let trainable: Vec<ParamId> = model.store.trainable_ids();
        let mut acc: Vec<(ParamId, Tensor<T>)> = trainable
            .iter()
            .map(|&id| (id, Tensor::zeros(model.store.get(id).shape())))
            .collect();
        let slot_of: std::collections::HashMap<usize, usize> =
            trainable.iter().enumerate().map(|(i, id)| (id.index(), i)).collect();
        let mut loss_total = 0.0;
        let mut loss_diffusion = 0.0;
        let mut fair_acc: std::collections::BTreeMap<usize, f64> = Default::default();
        for out in outputs {
            let out = match out {
                Ok(o) => o,
                Err(e) => {
                    let kept = last_good
                        .as_ref()
                        .map(|p| format!("; last good checkpoint at {}", p.display()))
                        .unwrap_or_default();
                    return Err(numeric(format!("step {step}: {e}{kept}")));
                }
            };
            loss_total += out.loss_total;
            loss_diffusion += out.loss_diffusion;
            for (b, v) in out.fair_per_block {
                *fair_acc.entry(b).or_insert(0.0) += v;
            }
            for (id, g) in out.grads {
                let slot = slot_of[&id.index()];
                let a = &mut acc[slot].1;
                *a = a.add(&g);
            }
        }
        let inv_b = T::from_f64(1.0 / batch as f64);
        for (_, g) in &mut acc {
            *g = g.scale(inv_b);
        }
        loss_total /= batch as f64;
        loss_diffusion /= batch as f64;

        if !loss_total.is_finite() {
            let kept = last_good
                .as_ref()
                .map(|p| format!("; last good checkpoint at {}", p.display()))
                .unwrap_or_default();
            return Err(numeric(format!("non-finite loss at step {step}{kept}")));
        }

        adam.apply(&mut model.store, &acc, &cfg.optimizer);

        let fair_json: Vec<serde_json::Value> = fair_acc
            .iter()
            .map(|(b, v)| serde_json::json!([b, v / batch as f64]))
            .collect();
        writeln!(
            diag_file,
            "{}",
            serde_json::json!({
                "step": step,
                "loss_total": loss_total,
                "loss_diff": loss_diffusion,
                "fair_per_block": fair_json,
            })
        )?;

        if first_loss.is_none() {
            first_loss = Some(loss_diffusion);
        }
        last_loss = Some(loss_diffusion);
        if step % 10 == 0 || step + 1 == total {
            loss_curve.push((step, loss_diffusion));
        }

        let done = step + 1;
        if done % cfg.train.checkpoint_every == 0 && done < total {
            let dir = save_at(done, &format!("step_{done:06}"), &model, &adam)?;
            last_good = Some(dir);
        }
    }

    debug_assert_eq!(
        frozen_digest,
        model.store.digest(Some(crate::params::Role::Frozen)),
        "frozen weights must never change"
    );
    let final_dir = save_at(total, "final", &model, &adam)?;
    Ok(TrainOutcome {
        final_dir,
        params_digest: model.store.digest(None),
        steps_run: total.saturating_sub(start_step),
        loss_curve,
        first_loss,
        last_loss,
    })
}

/// Rebuild a model and load checkpoint weights into it. The checkpoint must
/// carry the same config hash as `cfg`.
pub fn load_model<T: Scalar>(cfg: &TrainConfig, dir: &Path) -> Result<Model<T>> {
    let manifest = checkpoint::load_manifest(dir)?;
    if manifest.config_hash != cfg.config_hash() {
        let stored = checkpoint::load_config_json(dir).unwrap_or(serde_json::Value::Null);
        let diffs = diff_json(&stored, &cfg.to_json());
        return Err(invalid_config(format!(
            "checkpoint at {} belongs to a different config: {}",
            dir.display(),
            diffs.join("; ")
        )));
    }
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    checkpoint::load_into_store(dir, &manifest, &mut model.store)?;
    Ok(model)
}

/// Map an error to the CLI exit code contract.
pub fn exit_code_for(err: &Error) -> i32 {
    err.exit_code()
}
