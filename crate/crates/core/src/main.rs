//! Command-line surface: train, generate, inpaint, profile, ablate,
//! make-dataset and report, all driven by a TOML config with overrides.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use faceadapt::backbone::Model;
use faceadapt::config::{load_config, Precision, TrainConfig};
use faceadapt::dataset::{generate_synthetic_identity_dataset, IdentityDataset};
use faceadapt::encoder::{
    extract_penultimate_tokens, mask_face_region, project_identity, FaceImage, IdentityEmbedding,
};
use faceadapt::error::{Error, Result};
use faceadapt::eval::{render_report_table, run_ablation, Variant};
use faceadapt::image_io;
use faceadapt::sampler::{generate, increment_profile, inpaint, SamplerConfig};
use faceadapt::tensor::Tensor;
use faceadapt::trainer::{load_dataset, load_model, train};

#[derive(Parser)]
#[command(name = "faceadapt", version, about = "Identity-preserved portrait generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        load_config(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Checkpoint directory to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Identity reference: dataset record index...
    #[arg(long)]
    identity_index: Option<usize>,
    /// ...or an external face image (PNG or raw f32 + JSON sidecar).
    #[arg(long)]
    face_image: Option<PathBuf>,
    /// Face mask PNG for --face-image.
    #[arg(long)]
    face_mask: Option<PathBuf>,
    /// Caption id for the conditional branch.
    #[arg(long)]
    caption: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplerArgs {
    fn sampler_config(&self, base: &SamplerConfig) -> SamplerConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.cfg_scale {
            cfg.cfg_scale = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the adapter stack (optionally resuming from a checkpoint).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shortcut for --set train.total_steps=N.
        #[arg(long)]
        steps: Option<usize>,
        /// Shortcut for --set train.seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Shortcut for --set train.out_dir=DIR.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an image from text (and optionally an identity reference).
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw latent (f32 + JSON sidecar).
        #[arg(long)]
        latent_out: Option<PathBuf>,
    },
    /// Regenerate the face region of a template, keeping the rest bit-exact.
    Inpaint {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Dataset record index providing the template image and mask.
        #[arg(long)]
        template_index: Option<usize>,
        /// External template image (PNG or raw f32).
        #[arg(long)]
        template_image: Option<PathBuf>,
        /// Mask PNG for --template-image.
        #[arg(long)]
        template_mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        latent_out: Option<PathBuf>,
    },
    /// Emit the per-block increment profile of a guided generation as JSON.
    Profile {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate configuration variants from one seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variants: fair,nofair,no_ds,no_cl,ds_cl.
        #[arg(long)]
        variants: String,
        /// Directory for the JSON reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic identity dataset as PNGs plus a manifest.
    MakeDataset {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render ablation report JSONs as a text table.
    Report {
        /// Report files produced by `ablate`.
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, steps, seed, out } => {
            let mut cfg = config.load()?;
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.train.out_dir = o.to_string_lossy().into_owned();
            }
            let outcome = train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps -> {} (digest {})",
                outcome.steps_run,
                outcome.final_dir.display(),
                &outcome.params_digest[..16]
            );
            if let (Some(first), Some(last)) = (outcome.first_loss, outcome.last_loss) {
                println!("diffusion loss: {first:.4} -> {last:.4}");
            }
            Ok(())
        }
        Command::Generate { config, sampler, out, latent_out } => {
            let cfg = config.load()?;
            require_f32(&cfg)?;
            let model = load_model::<f32>(&cfg, &sampler.checkpoint)?;
            let scfg = sampler.sampler_config(&cfg.sampler);
            let (e_text, e_id) = conditioning(&cfg, &model, &sampler)?;
            let latent = generate(&model, &e_text, e_id.as_ref(), &scfg)?;
            write_outputs(&latent, cfg.dataset.image_size, &out, latent_out.as_deref())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Inpaint {
            config,
            sampler,
            template_index,
            template_image,
            template_mask,
            out,
            latent_out,
        } => {
            let cfg = config.load()?;
            require_f32(&cfg)?;
            let model = load_model::<f32>(&cfg, &sampler.checkpoint)?;
            let scfg = sampler.sampler_config(&cfg.sampler);
            let (e_text, e_id) = conditioning(&cfg, &model, &sampler)?;
            let (_, h, w) = cfg.model.unet.latent;
            let (template, mask) = match (template_index, template_image) {
                (Some(idx), None) => {
                    let ds = load_dataset(&cfg)?;
                    let rec = ds
                        .records
                        .get(idx)
                        .ok_or_else(|| Error::InvalidInput(format!("template index {idx} out of range")))?;
                    (
                        image_io::latent_from_image(&rec.image.cast::<f32>(), (h, w))?,
                        rec.face_mask.clone(),
                    )
                }
                (None, Some(path)) => {
                    let img = image_io::load_image_auto(&path)?;
                    let mask_path = template_mask.ok_or_else(|| {
                        Error::InvalidInput("--template-mask required with --template-image".into())
                    })?;
                    (
                        image_io::latent_from_image(&img, (h, w))?,
                        image_io::load_mask_png(&mask_path)?,
                    )
                }
                _ => {
                    return Err(Error::InvalidInput(
                        "provide exactly one of --template-index or --template-image".into(),
                    ))
                }
            };
            let latent = inpaint(&model, &template, &mask, &e_text, e_id.as_ref(), &scfg)?;
            write_outputs(&latent, cfg.dataset.image_size, &out, latent_out.as_deref())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Profile { config, sampler, out } => {
            let cfg = config.load()?;
            require_f32(&cfg)?;
            let model = load_model::<f32>(&cfg, &sampler.checkpoint)?;
            let scfg = sampler.sampler_config(&cfg.sampler);
            let (e_text, e_id) = conditioning(&cfg, &model, &sampler)?;
            let profile = increment_profile(&model, &e_text, e_id.as_ref(), &scfg)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&profile.to_json())?)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Ablate { config, variants, out } => {
            let cfg = config.load()?;
            let parsed: Vec<Variant> = variants
                .split(',')
                .map(|s| Variant::parse(s.trim()))
                .collect::<Result<_>>()?;
            let outcomes = run_ablation(&cfg, &parsed);
            std::fs::create_dir_all(&out)?;
            for o in &outcomes {
                let path = out.join(format!("{}.json", o.variant));
                std::fs::write(&path, serde_json::to_vec_pretty(o)?)?;
                println!("wrote {}", path.display());
            }
            print!("{}", render_report_table(&outcomes));
            if outcomes.iter().any(|o| o.error.is_some()) {
                return Err(Error::Numeric("at least one ablation variant diverged".into()));
            }
            Ok(())
        }
        Command::MakeDataset { config, out } => {
            let cfg = config.load()?;
            let ds = generate_synthetic_identity_dataset(&cfg.dataset)?;
            ds.save_dir(&out)?;
            println!("wrote {} records to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Report { inputs } => {
            let mut outcomes = Vec::new();
            for path in &inputs {
                let bytes = std::fs::read(path)?;
                outcomes.push(serde_json::from_slice(&bytes)?);
            }
            print!("{}", render_report_table(&outcomes));
            Ok(())
        }
    }
}

fn require_f32(cfg: &TrainConfig) -> Result<()> {
    if cfg.train.precision != Precision::F32 {
        return Err(Error::InvalidConfig(
            "sampling commands run at f32; set train.precision = \"f32\"".into(),
        ));
    }
    Ok(())
}

/// Resolve the text and identity conditioning from CLI arguments.
fn conditioning(
    cfg: &TrainConfig,
    model: &Model<f32>,
    args: &SamplerArgs,
) -> Result<(Tensor<f32>, Option<IdentityEmbedding<f32>>)> {
    let face: Option<FaceImage<f32>> = match (&args.identity_index, &args.face_image) {
        (Some(idx), None) => {
            let ds: IdentityDataset = load_dataset(cfg)?;
            if *idx >= ds.len() {
                return Err(Error::InvalidInput(format!(
                    "identity index {idx} out of range 0..{}",
                    ds.len()
                )));
            }
            Some(ds.face_image::<f32>(*idx)?)
        }
        (None, Some(path)) => {
            let img = image_io::load_image_auto(path)?;
            let mask_path = args
                .face_mask
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("--face-mask required with --face-image".into()))?;
            let mask = image_io::load_mask_png(mask_path)?;
            Some(FaceImage::new(img, mask)?)
        }
        (None, None) => None,
        (Some(_), Some(_)) => {
            return Err(Error::InvalidInput(
                "provide at most one of --identity-index or --face-image".into(),
            ))
        }
    };
    let e_id = match face {
        Some(img) => {
            let masked = mask_face_region(&img)?;
            let raw = extract_penultimate_tokens(&masked, &model.encoder)?;
            Some(project_identity(&model.store, &model.proj, &raw)?)
        }
        None => None,
    };
    let e_text = model.text_embedding(args.caption.unwrap_or(0))?;
    Ok((e_text, e_id))
}

fn write_outputs(
    latent: &Tensor<f32>,
    image_size: usize,
    out: &Path,
    latent_out: Option<&Path>,
) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let image = image_io::image_from_latent(latent, (image_size, image_size))?;
    image_io::save_png(out, &image)?;
    if let Some(lp) = latent_out {
        image_io::save_raw(lp, latent)?;
    }
    Ok(())
}
