//! Adam optimizer over the trainable entries of a parameter store.

use indexmap::IndexMap;

use crate::error::{invalid_config, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { kind: "adam".into(), lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind != "adam" {
            return Err(invalid_config(format!("optimizer.kind {:?} unsupported (only \"adam\")", self.kind)));
        }
        if self.lr <= 0.0 {
            return Err(invalid_config("optimizer.lr must be positive"));
        }
        if self.batch_size < 1 {
            return Err(invalid_config("optimizer.batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid_config("optimizer betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// First/second moment accumulators keyed by parameter name.
pub struct AdamState<T> {
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
    pub t: usize,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh zeroed state for every trainable entry of the store.
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamState::new_for(store, &store.trainable_ids())
    }

    /// Fresh zeroed state for an explicit parameter set.
    pub fn new_for(store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        let mut moments = IndexMap::new();
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            moments.insert(
                store.name(id).to_string(),
                (Tensor::zeros(&shape), Tensor::zeros(&shape)),
            );
        }
        AdamState { moments, t: 0 }
    }

    /// One Adam update from already-averaged gradients.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        cfg: &AdamConfig,
    ) {
        self.t += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);

        for (id, g) in grads {
            let name = store.name(*id).to_string();
            let (m, v) = self.moments.get_mut(&name).expect("gradient for unknown parameter");
            debug_assert_eq!(g.shape(), m.shape(), "gradient shape for {name}");
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = store.get_mut(*id).data_mut();
            for ((p, (mi, vi)), &gi) in pd.iter_mut().zip(md.iter_mut().zip(vd.iter_mut())).zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
