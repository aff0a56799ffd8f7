//! Checkpoint directory format: one little-endian f32 flat binary per
//! parameter tensor, optimizer moment files, and a JSON manifest tying
//! them to names, shapes, roles, the config hash and the rng scheme.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{ParamStore, Role};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    /// Streams are re-derived from (seed, domain, step); nothing else to store.
    pub scheme: String,
    pub seed: u64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub config_hash: String,
    pub rng: RngState,
    pub params_digest: String,
    pub params: Vec<ManifestParam>,
    /// Optimizer moment tensors stored alongside (m/v per trainable name).
    pub optimizer: Vec<String>,
    pub optimizer_t: usize,
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Write a complete checkpoint. `config_json` is the full run configuration
/// for later diffing on resume.
pub fn save<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
    step: usize,
    seed: u64,
    config_hash: &str,
    config_json: &serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (name, role, tensor) in store.iter() {
        std::fs::write(tensor_path(dir, name), tensor.to_f32_le_bytes())?;
        params.push(ManifestParam { name: name.to_string(), shape: tensor.shape().to_vec(), role });
    }
    let mut optimizer = Vec::new();
    let mut optimizer_t = 0;
    if let Some(adam) = adam {
        optimizer_t = adam.t;
        for (name, (m, v)) in &adam.moments {
            std::fs::write(tensor_path(dir, &format!("opt_m__{name}")), m.to_f32_le_bytes())?;
            std::fs::write(tensor_path(dir, &format!("opt_v__{name}")), v.to_f32_le_bytes())?;
            optimizer.push(name.clone());
        }
    }
    let manifest = Manifest {
        step,
        config_hash: config_hash.to_string(),
        rng: RngState { scheme: "keyed-chacha8".into(), seed },
        params_digest: store.digest(None),
        params,
        optimizer,
        optimizer_t,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config_json)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path)
        .map_err(|e| ckpt_err(format!("cannot read manifest {path:?}: {e}")))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_config_json(dir: &Path) -> Result<serde_json::Value> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?)
}

fn load_tensor<T: Scalar>(dir: &Path, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let path = tensor_path(dir, name);
    let bytes = std::fs::read(&path).map_err(|e| ckpt_err(format!("tensor {name}: {e}")))?;
    Tensor::from_f32_le_bytes(shape, &bytes)
        .map_err(|e| ckpt_err(format!("tensor {name} at {path:?}: {e}")))
}

/// Load checkpoint tensors into an already-constructed store. Every
/// manifest entry must exist in the store with a matching shape and role.
pub fn load_into_store<T: Scalar>(dir: &Path, manifest: &Manifest, store: &mut ParamStore<T>) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(ckpt_err(format!(
            "manifest lists {} tensors, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for p in &manifest.params {
        let id = store
            .id_of(&p.name)
            .ok_or_else(|| ckpt_err(format!("tensor {} not part of this model", p.name)))?;
        if store.role(id) != p.role {
            return Err(ckpt_err(format!("tensor {} role mismatch", p.name)));
        }
        let t = load_tensor::<T>(dir, &p.name, &p.shape)?;
        store
            .set_by_name(&p.name, t)
            .map_err(|e| ckpt_err(format!("tensor {}: {e}", p.name)))?;
    }
    Ok(())
}

/// Load the optimizer moments recorded in the manifest.
pub fn load_adam<T: Scalar>(dir: &Path, manifest: &Manifest, store: &ParamStore<T>) -> Result<AdamState<T>> {
    let mut adam = AdamState::new(store);
    adam.t = manifest.optimizer_t;
    for name in &manifest.optimizer {
        let shape = store
            .id_of(name)
            .map(|id| store.get(id).shape().to_vec())
            .ok_or_else(|| ckpt_err(format!("optimizer state {name} without parameter")))?;
        let m = load_tensor::<T>(dir, &format!("opt_m__{name}"), &shape)?;
        let v = load_tensor::<T>(dir, &format!("opt_v__{name}"), &shape)?;
        adam.moments.insert(name.clone(), (m, v));
    }
    Ok(adam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;

    fn demo_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("a.w", Role::Frozen, Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        s.register("b.gamma", Role::Trainable, Tensor::scalar(0.25));
        s
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let store = demo_store();
        let mut adam = AdamState::new(&store);
        adam.t = 3;
        let cfg = serde_json::json!({"train": {"seed": 7}});
        save(dir.path(), &store, Some(&adam), 42, 7, "deadbeef", &cfg).unwrap();

        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.step, 42);
        assert_eq!(manifest.optimizer_t, 3);
        assert_eq!(manifest.params_digest, store.digest(None));

        let mut fresh = demo_store();
        fresh.set_by_name("b.gamma", Tensor::scalar(9.0)).unwrap();
        load_into_store(dir.path(), &manifest, &mut fresh).unwrap();
        assert_eq!(fresh.digest(None), store.digest(None));

        let back = load_adam(dir.path(), &manifest, &fresh).unwrap();
        assert_eq!(back.t, 3);
    }

    #[test]
    fn corrupted_tensor_file_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = demo_store();
        save(dir.path(), &store, None, 0, 1, "h", &serde_json::json!({})).unwrap();
        // truncate one weight file
        std::fs::write(dir.path().join("a.w.bin"), [0u8; 3]).unwrap();
        let manifest = load_manifest(dir.path()).unwrap();
        let mut fresh = demo_store();
        let err = load_into_store(dir.path(), &manifest, &mut fresh).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.w"), "error must name the tensor: {msg}");
    }

    #[test]
    fn unknown_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = demo_store();
        save(dir.path(), &store, None, 0, 1, "h", &serde_json::json!({})).unwrap();
        let mut manifest = load_manifest(dir.path()).unwrap();
        manifest.params[0].name = "ghost".into();
        let mut fresh = demo_store();
        assert!(load_into_store(dir.path(), &manifest, &mut fresh).is_err());
    }
}
