//! The sequential face adapter: gated self-attention over concatenated
//! visual + identity tokens, visual-token selection, and scaled residual
//! injection. The gate starts at zero so a fresh adapter is an exact no-op.

use rand::Rng;

use crate::encoder::IdentityEmbedding;
use crate::error::{invalid_input, Result};
use crate::nn::{self, AttnIds};
use crate::params::{Binding, ParamId, ParamStore, Role};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Latent tokens flowing through a transformer block, with their grid shape.
#[derive(Clone, Debug)]
pub struct VisualTokens<T> {
    pub tokens: Tensor<T>,
    pub spatial: (usize, usize),
}

impl<T: Scalar> VisualTokens<T> {
    pub fn new(tokens: Tensor<T>, spatial: (usize, usize)) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != spatial.0 * spatial.1 {
            return Err(invalid_input(format!(
                "visual tokens {:?} inconsistent with grid {:?}",
                tokens.shape(),
                spatial
            )));
        }
        if tokens.rows() == 0 {
            return Err(invalid_input("visual tokens must be non-empty"));
        }
        Ok(VisualTokens { tokens, spatial })
    }
}

/// Residual scale for the adapter; 1.0 during training, 0.5 at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterScale {
    alpha: f64,
}

impl AdapterScale {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=2.0).contains(&alpha) {
            return Err(invalid_input(format!("adapter scale {alpha} outside [0, 2]")));
        }
        Ok(AdapterScale { alpha })
    }

    pub fn training() -> Self {
        AdapterScale { alpha: 1.0 }
    }

    pub fn inference() -> Self {
        AdapterScale { alpha: 0.5 }
    }

    pub fn value(&self) -> f64 {
        self.alpha
    }
}

/// Adapter increment captured before the residual addition, along with the
/// tokens that entered the adapter. Consumed by the increment regularizer
/// and the depth profiler.
#[derive(Clone, Debug)]
pub struct IncrementRecord<T> {
    pub block_index: usize,
    pub increment: Tensor<T>,
    pub input_tokens: Tensor<T>,
    pub grid: (usize, usize),
}

/// Gate + attention parameters of one adapter, as plain tensors.
#[derive(Clone, Debug)]
pub struct GsaParams<T> {
    pub gamma: T,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub heads: usize,
}

/// Store ids for one adapter. The gate is registered at exactly zero.
#[derive(Clone, Copy, Debug)]
pub struct GsaIds {
    pub gamma: ParamId,
    pub attn: AttnIds,
}

impl GsaIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gamma = store.register(&format!("{prefix}.gamma"), Role::Trainable, Tensor::scalar(T::zero()));
        let attn = AttnIds::register(store, &format!("{prefix}.attn"), d_model, Role::Trainable, rng);
        GsaIds { gamma, attn }
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>, heads: usize) -> GsaParams<T> {
        GsaParams {
            gamma: store.get(self.gamma).item(),
            wq: store.get(self.attn.wq).clone(),
            wk: store.get(self.attn.wk).clone(),
            wv: store.get(self.attn.wv).clone(),
            wo: store.get(self.attn.wo).clone(),
            heads,
        }
    }
}

/// Keep the first `n_visual` rows of a concatenated token sequence; the
/// visual tokens occupy the prefix.
pub fn token_select<T: Scalar>(concat: &Tensor<T>, n_visual: usize) -> Result<Tensor<T>> {
    if concat.shape().len() != 2 || n_visual > concat.rows() {
        return Err(invalid_input(format!(
            "token_select: cannot take {} rows from {:?}",
            n_visual,
            concat.shape()
        )));
    }
    let d = concat.cols();
    Ok(Tensor::from_vec(&[n_visual, d], concat.data()[..n_visual * d].to_vec()))
}

/// Differentiable adapter increment:
/// tanh(gamma) * select_visual(self_attn(layer_norm([x; e_id]))).
pub fn gsa_increment<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &GsaIds,
    binding: &Binding,
    x: Var,
    e_id: Var,
    heads: usize,
) -> Var {
    let n_visual = tape.value(x).rows();
    let concat = tape.concat_rows(x, e_id);
    let normed = tape.layer_norm_rows(concat, T::from_f64(nn::LN_EPS));
    let w = ids.attn.bind(binding);
    let attn = nn::multi_head_attention(tape, normed, normed, &w, heads);
    let selected = tape.slice_rows(attn, 0, n_visual);
    let gate = tape.tanh(binding.var(ids.gamma));
    tape.mul_scalar_var(selected, gate)
}

/// Pure adapter forward from plain tensors; captures the increment record.
pub fn gated_self_attention<T: Scalar>(
    x: &VisualTokens<T>,
    e_id: &IdentityEmbedding<T>,
    p: &GsaParams<T>,
    block_index: usize,
) -> Result<IncrementRecord<T>> {
    let d = x.tokens.cols();
    if e_id.tokens.shape().len() != 2 || e_id.tokens.cols() != d {
        return Err(invalid_input(format!(
            "identity tokens {:?} do not share width {} with visual tokens",
            e_id.tokens.shape(),
            d
        )));
    }
    let mut store = ParamStore::new();
    let gamma = store.register("gamma", Role::Trainable, Tensor::scalar(p.gamma));
    let attn = AttnIds {
        wq: store.register("wq", Role::Trainable, p.wq.clone()),
        wk: store.register("wk", Role::Trainable, p.wk.clone()),
        wv: store.register("wv", Role::Trainable, p.wv.clone()),
        wo: store.register("wo", Role::Trainable, p.wo.clone()),
    };
    let ids = GsaIds { gamma, attn };
    let mut tape = Tape::new();
    let binding = Binding::bind(&mut tape, &store, false);
    let xv = tape.constant(x.tokens.clone());
    let ev = tape.constant(e_id.tokens.clone());
    let inc = gsa_increment(&mut tape, &ids, &binding, xv, ev, p.heads);
    Ok(IncrementRecord {
        block_index,
        increment: tape.value(inc).clone(),
        input_tokens: x.tokens.clone(),
        grid: x.spatial,
    })
}

/// Residual injection: tokens + alpha * increment.
pub fn apply_adapter<T: Scalar>(
    x: &VisualTokens<T>,
    rec: &IncrementRecord<T>,
    scale: AdapterScale,
) -> Result<VisualTokens<T>> {
    if rec.increment.shape() != x.tokens.shape() {
        return Err(invalid_input(format!(
            "increment shape {:?} does not match tokens {:?}",
            rec.increment.shape(),
            x.tokens.shape()
        )));
    }
    let alpha = T::from_f64(scale.value());
    let tokens = x.tokens.zip_map(&rec.increment, |xv, iv| xv + alpha * iv);
    Ok(VisualTokens { tokens, spatial: x.spatial })
}
