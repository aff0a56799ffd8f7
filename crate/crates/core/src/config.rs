//! Run configuration: TOML file + `key.path=value` overrides, unknown-key
//! detection with nearest-key suggestions, and the canonical config hash
//! that ties checkpoints to the configuration that produced them.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::curriculum::CurriculumSchedule;
use crate::dataset::DatasetConfig;
use crate::error::{invalid_config, Result};
use crate::objective::LossConfig;
use crate::optim::AdamConfig;
use crate::sampler::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub out_dir: String,
    pub precision: Precision,
    /// Adapter residual scale during training.
    pub alpha: f64,
    /// Load the dataset from this directory instead of regenerating it.
    pub dataset_dir: Option<String>,
    /// Frozen-backbone weights produced by `pretrain-base`. Adapter
    /// training attaches to these; without them the backbone stays at its
    /// random initialization.
    pub base_checkpoint: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            total_steps: 2000,
            seed: 1,
            checkpoint_every: 500,
            out_dir: "runs/default".into(),
            precision: Precision::F32,
            alpha: 1.0,
            dataset_dir: None,
            base_checkpoint: None,
        }
    }
}

/// Settings for the backbone pretraining phase that produces the frozen
/// base model the adapters are later attached to.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Caption drop probability so the null caption used by guidance is
    /// trained too.
    pub text_drop_prob: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 800, lr: 1e-3, text_drop_prob: 0.1 }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub loss: LossConfig,
    pub curriculum: CurriculumSchedule,
    pub optimizer: AdamConfig,
    pub pretrain: PretrainSection,
    pub sampler: SamplerConfig,
    pub train: TrainSection,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.loss.validate()?;
        self.curriculum.validate()?;
        self.optimizer.validate()?;
        self.sampler.validate()?;
        crate::adapter::AdapterScale::new(self.train.alpha)?;
        if self.train.checkpoint_every == 0 {
            return Err(invalid_config("train.checkpoint_every must be >= 1"));
        }
        if self.pretrain.lr <= 0.0 {
            return Err(invalid_config("pretrain.lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.text_drop_prob) {
            return Err(invalid_config("pretrain.text_drop_prob must lie in [0, 1]"));
        }
        // the latent grid must divide the dataset image for masks and latents
        let (_, h, w) = self.model.unet.latent;
        if self.dataset.image_size % h != 0 || self.dataset.image_size % w != 0 {
            return Err(invalid_config(format!(
                "dataset image_size {} must be a multiple of the latent grid {h}x{w}",
                self.dataset.image_size
            )));
        }
        if self.model.encoder.image_size != self.dataset.image_size {
            return Err(invalid_config("encoder.image_size must match dataset.image_size"));
        }
        Ok(())
    }

    /// Curriculum schedule with the run length filled in.
    pub fn curriculum_schedule(&self) -> CurriculumSchedule {
        self.curriculum.clone().with_total_steps(self.train.total_steps)
    }

    /// SHA-256 of the canonical JSON serialization, with the output
    /// directory blanked so relocating a run does not orphan its
    /// checkpoints.
    pub fn config_hash(&self) -> String {
        let mut hashable = self.clone();
        hashable.train.out_dir = String::new();
        let json = serde_json::to_string(&hashable).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        crate::params::hex_string(&h.finalize())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Load a TOML config file (or defaults when None) and apply
/// `key.path=value` overrides. Unknown keys fail with a suggestion.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| invalid_config(format!("cannot read config {p:?}: {e}")))?;
            text.parse()
                .map_err(|e| invalid_config(format!("config {p:?}: {e}")))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let reference =
        toml::Value::try_from(TrainConfig::default()).expect("default config serializes");
    validate_keys(&value, &reference, "")?;
    value
        .try_into()
        .map_err(|e| invalid_config(format!("config: {e}")))
}

fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid_config(format!("override {spec:?} must look like key.path=value")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(t)) => t.get("v").cloned().unwrap(),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut cursor = value;
    let parts: Vec<&str> = path.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| invalid_config(format!("override {spec:?}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            break;
        }
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Recursively reject keys that do not exist in the reference config,
/// suggesting the nearest valid sibling.
fn validate_keys(value: &toml::Value, reference: &toml::Value, path: &str) -> Result<()> {
    match (value, reference) {
        (toml::Value::Table(vt), toml::Value::Table(rt)) => {
            for (k, v) in vt {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match rt.get(k) {
                    Some(r) => validate_keys(v, r, &full)?,
                    None => {
                        let suggestion = rt
                            .keys()
                            .min_by_key(|cand| levenshtein(k, cand))
                            .filter(|cand| levenshtein(k, cand) <= 3)
                            .map(|cand| {
                                let prefix = if path.is_empty() { String::new() } else { format!("{path}.") };
                                format!("; did you mean \"{prefix}{cand}\"?")
                            })
                            .unwrap_or_default();
                        return Err(invalid_config(format!("unknown config key \"{full}\"{suggestion}")));
                    }
                }
            }
            Ok(())
        }
        (toml::Value::Array(va), toml::Value::Array(ra)) => {
            if let Some(relem) = ra.first() {
                for (i, v) in va.iter().enumerate() {
                    validate_keys(v, relem, &format!("{path}[{i}]"))?;
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Path-wise differences between two JSON documents, for resume refusals.
pub fn diff_json(old: &serde_json::Value, new: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_walk(old, new, "", &mut out);
    out
}

fn diff_walk(old: &serde_json::Value, new: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    use serde_json::Value;
    match (old, new) {
        (Value::Object(o), Value::Object(n)) => {
            for key in o.keys().chain(n.keys().filter(|k| !o.contains_key(*k))) {
                let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match (o.get(key), n.get(key)) {
                    (Some(a), Some(b)) => diff_walk(a, b, &full, out),
                    (Some(a), None) => out.push(format!("{full}: {a} -> <absent>")),
                    (None, Some(b)) => out.push(format!("{full}: <absent> -> {b}")),
                    (None, None) => unreachable!(),
                }
            }
        }
        (a, b) if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.config_hash(), cfg.config_hash());

        let mut other = cfg.clone();
        other.train.out_dir = "elsewhere".into();
        assert_eq!(cfg.config_hash(), other.config_hash(), "out_dir excluded from hash");

        other.train.seed = 2;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn toml_round_trip_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            "[train]\ntotal_steps = 50\n[loss]\nlambda_fair = 0.02\n",
        )
        .unwrap();
        let cfg = load_config(Some(&path), &["optimizer.lr=0.001".into(), "train.seed=9".into()])
            .unwrap();
        assert_eq!(cfg.train.total_steps, 50);
        assert_eq!(cfg.loss.lambda_fair, 0.02);
        assert_eq!(cfg.optimizer.lr, 0.001);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\ntotal_step = 50\n").unwrap();
        let err = load_config(Some(&path), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("total_step"), "{msg}");
        assert!(msg.contains("total_steps"), "suggestion missing: {msg}");

        let err = load_config(None, &["sampler.cfg_scales=3.0".into()]).unwrap_err();
        assert!(err.to_string().contains("cfg_scale"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[trainer]\ntotal_steps = 50\n").unwrap();
        let err = load_config(Some(&path), &[]).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidConfig(_)));
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn diff_reports_changed_paths() {
        let a = serde_json::json!({"train": {"seed": 1, "steps": 10}});
        let b = serde_json::json!({"train": {"seed": 2, "steps": 10}});
        let d = diff_json(&a, &b);
        assert_eq!(d, vec!["train.seed: 1 -> 2".to_string()]);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("seed", "seed"), 0);
        assert_eq!(levenshtein("sed", "seed"), 1);
        assert_eq!(levenshtein("abc", "xyz"), 3);
    }
}
