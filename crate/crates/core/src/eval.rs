//! Desk-scale evaluation: toy-encoder identity similarity, increment
//! locality ratios against the face mask, and the ablation runner that
//! trains configuration variants from a shared seed and dataset.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::config::TrainConfig;
use crate::dataset::IdentityDataset;
use crate::encoder::{
    extract_penultimate_tokens, mask_face_region, project_identity, FaceEncoder, FaceImage,
};
use crate::error::{invalid_config, invalid_input, Result};
use crate::image_io::image_from_latent;
use crate::objective::MaskPyramid;
use crate::sampler::{generate_with_profile, IncrementProfile, SamplerConfig};
use crate::tensor::Scalar;
use crate::trainer::{load_dataset, load_model, train};

/// Cosine similarity of the encoder's global embeddings of two face-masked
/// images.
pub fn identity_similarity<T: Scalar>(
    generated: &FaceImage<T>,
    reference: &FaceImage<T>,
    encoder: &dyn FaceEncoder<T>,
) -> Result<f64> {
    let a = encoder.global_embedding(generated)?;
    let b = encoder.global_embedding(reference)?;
    let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Per-block ratio of the mean profile value outside the face to the mean
/// inside it. Masks may be soft; means are mask-weighted. Blocks whose
/// inside mean is zero (or whose grid has no face cells) report None.
pub fn locality_ratio<T: Scalar>(
    profile: &IncrementProfile<T>,
    masks: &MaskPyramid<T>,
) -> Result<BTreeMap<usize, Option<f64>>> {
    let mut out = BTreeMap::new();
    for (&block, grid) in &profile.per_block {
        let mask = masks.for_block(block)?;
        if mask.shape() != grid.shape() {
            return Err(invalid_input(format!(
                "block {block}: profile grid {:?} vs mask grid {:?}",
                grid.shape(),
                mask.shape()
            )));
        }
        let mut inside = (0.0f64, 0.0f64);
        let mut outside = (0.0f64, 0.0f64);
        for (&p, &m) in grid.data().iter().zip(mask.data()) {
            let (p, m) = (p.as_f64(), m.as_f64());
            inside = (inside.0 + p * m, inside.1 + m);
            outside = (outside.0 + p * (1.0 - m), outside.1 + (1.0 - m));
        }
        let ratio = if inside.1 == 0.0 || outside.1 == 0.0 {
            None
        } else {
            let inside_mean = inside.0 / inside.1;
            let outside_mean = outside.0 / outside.1;
            if inside_mean == 0.0 {
                None
            } else {
                Some(outside_mean / inside_mean)
            }
        };
        out.insert(block, ratio);
    }
    Ok(out)
}

fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Mean cosine between each generated face and its own reference.
    pub identity_sim: f64,
    /// Median over blocks of the identity-averaged locality ratio.
    pub locality_ratio: Option<f64>,
    pub per_block_locality: BTreeMap<usize, Option<f64>>,
    /// Identities whose generation is closer to its own reference than to
    /// the next identity's reference.
    pub identity_margin_wins: usize,
    pub n_identities: usize,
    pub loss_curve: Vec<(usize, f64)>,
    pub config_hash: String,
}

/// Evaluate a trained model on its dataset: per-identity conditional
/// generation, similarity against own vs. foreign references, and
/// mask-partitioned increment locality.
pub fn evaluate_model<T: Scalar>(
    model: &crate::backbone::Model<T>,
    dataset: &IdentityDataset,
    sampler: &SamplerConfig,
    loss_curve: Vec<(usize, f64)>,
    config_hash: String,
) -> Result<EvalReport> {
    let n = dataset.n_identities();
    let size = dataset.image_size;
    let mut sims = Vec::with_capacity(n);
    let mut wins = 0usize;
    let mut ratio_acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();

    for k in 0..n {
        let ref_idx = dataset.of_identity(k)[0];
        let ref_img = dataset.face_image::<T>(ref_idx)?;
        let masked_ref = mask_face_region(&ref_img)?;
        let raw = extract_penultimate_tokens(&masked_ref, &model.encoder)?;
        let e_id = project_identity(&model.store, &model.proj, &raw)?;
        let e_text = model.text_embedding(dataset.records[ref_idx].caption_id)?;

        let mut cfg_k = sampler.clone();
        cfg_k.seed = sampler.seed.wrapping_add(k as u64);
        let (latent, profile) = generate_with_profile(model, &e_text, Some(&e_id), &cfg_k)?;
        let image = image_from_latent(&latent, (size, size))?;
        let gen_face = mask_face_region(&FaceImage::new(image, ref_img.mask.clone())?)?;

        let sim_own = identity_similarity(&gen_face, &masked_ref, &model.encoder)?;
        let other_idx = dataset.of_identity((k + 1) % n)[0];
        let other_ref = mask_face_region(&dataset.face_image::<T>(other_idx)?)?;
        let sim_other = identity_similarity(&gen_face, &other_ref, &model.encoder)?;
        sims.push(sim_own);
        if sim_own > sim_other {
            wins += 1;
        }

        let pyramid = MaskPyramid::build(&ref_img.mask, &model.cfg.unet)?;
        for (block, ratio) in locality_ratio(&profile, &pyramid)? {
            if let Some(r) = ratio {
                let e = ratio_acc.entry(block).or_insert((0.0, 0));
                e.0 += r;
                e.1 += 1;
            } else {
                ratio_acc.entry(block).or_insert((0.0, 0));
            }
        }
    }

    let per_block_locality: BTreeMap<usize, Option<f64>> = ratio_acc
        .into_iter()
        .map(|(b, (sum, cnt))| (b, (cnt > 0).then(|| sum / cnt as f64)))
        .collect();
    let mut block_values: Vec<f64> = per_block_locality.values().filter_map(|v| *v).collect();

    Ok(EvalReport {
        identity_sim: sims.iter().sum::<f64>() / n as f64,
        locality_ratio: median(&mut block_values),
        per_block_locality,
        identity_margin_wins: wins,
        n_identities: n,
        loss_curve,
        config_hash,
    })
}

/// Named configuration variants for the ablation sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Increment regularizer on (the default configuration).
    Fair,
    /// Regularizer weight zeroed.
    NoFair,
    /// No face condition drop or shuffle.
    NoDs,
    /// Drop and shuffle on, but shuffle fixed at its final value.
    NoCl,
    /// Drop + shuffle with the ramped schedule (the default).
    DsCl,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "fair" => Ok(Variant::Fair),
            "nofair" => Ok(Variant::NoFair),
            "no_ds" => Ok(Variant::NoDs),
            "no_cl" => Ok(Variant::NoCl),
            "ds_cl" => Ok(Variant::DsCl),
            other => Err(invalid_config(format!(
                "unknown ablation variant {other:?} (valid: fair, nofair, no_ds, no_cl, ds_cl)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Fair => "fair",
            Variant::NoFair => "nofair",
            Variant::NoDs => "no_ds",
            Variant::NoCl => "no_cl",
            Variant::DsCl => "ds_cl",
        }
    }

    pub fn apply(&self, cfg: &mut TrainConfig) {
        match self {
            Variant::Fair | Variant::DsCl => {}
            Variant::NoFair => cfg.loss.lambda_fair = 0.0,
            Variant::NoDs => {
                cfg.curriculum.drop_prob = 0.0;
                cfg.curriculum.shuffle_start = 0.0;
                cfg.curriculum.shuffle_end = 0.0;
            }
            Variant::NoCl => {
                cfg.curriculum.shuffle_start = cfg.curriculum.shuffle_end;
            }
        }
    }
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationOutcome {
    pub variant: String,
    pub config_hash: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Train and evaluate each variant from the same base seed and dataset.
/// A diverging variant is reported, not fatal to the sweep.
pub fn run_ablation(base: &TrainConfig, variants: &[Variant]) -> Vec<AblationOutcome> {
    variants
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            v.apply(&mut cfg);
            cfg.train.out_dir = PathBuf::from(&base.train.out_dir)
                .join(v.name())
                .to_string_lossy()
                .into_owned();
            let hash = cfg.config_hash();
            match run_variant(&cfg) {
                Ok(report) => AblationOutcome {
                    variant: v.name().to_string(),
                    config_hash: hash,
                    report: Some(report),
                    error: None,
                },
                Err(e) => AblationOutcome {
                    variant: v.name().to_string(),
                    config_hash: hash,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

fn run_variant(cfg: &TrainConfig) -> Result<EvalReport> {
    let outcome = train(cfg, None)?;
    let dataset = load_dataset(cfg)?;
    match cfg.train.precision {
        crate::config::Precision::F32 => {
            let model = load_model::<f32>(cfg, &outcome.final_dir)?;
            evaluate_model(&model, &dataset, &cfg.sampler, outcome.loss_curve, cfg.config_hash())
        }
        crate::config::Precision::F64 => {
            let model = load_model::<f64>(cfg, &outcome.final_dir)?;
            evaluate_model(&model, &dataset, &cfg.sampler, outcome.loss_curve, cfg.config_hash())
        }
    }
}

/// Render ablation outcomes as a fixed-width text table.
pub fn render_report_table(outcomes: &[AblationOutcome]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:>12} {:>14} {:>10} {:>12}\n",
        "variant", "identity_sim", "locality", "wins", "final_loss"
    ));
    for o in outcomes {
        match (&o.report, &o.error) {
            (Some(r), _) => {
                let loc = r
                    .locality_ratio
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "null".into());
                let last = r.loss_curve.last().map(|(_, l)| format!("{l:.4}")).unwrap_or_default();
                s.push_str(&format!(
                    "{:<10} {:>12.4} {:>14} {:>7}/{:<2} {:>12}\n",
                    o.variant, r.identity_sim, loc, r.identity_margin_wins, r.n_identities, last
                ));
            }
            (None, Some(e)) => {
                s.push_str(&format!("{:<10} failed: {e}\n", o.variant));
            }
            (None, None) => unreachable!("outcome must carry a report or an error"),
        }
    }
    s
}
