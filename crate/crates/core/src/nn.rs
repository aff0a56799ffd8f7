//! Reusable network pieces built on the tape: multi-head attention, the
//! feed-forward block, and parameter-id bundles for both.

use rand::Rng;

use crate::params::{xavier, Binding, ParamId, ParamStore, Role};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Query/key/value/output projection weights bound on a tape.
#[derive(Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Store ids for one attention layer's square d_model maps.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttnIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        role: Role,
        rng: &mut impl Rng,
    ) -> Self {
        let mut reg = |suffix: &str| {
            store.register(&format!("{prefix}.{suffix}"), role, xavier(d_model, d_model, rng))
        };
        AttnIds { wq: reg("wq"), wk: reg("wk"), wv: reg("wv"), wo: reg("wo") }
    }

    pub fn bind(&self, binding: &Binding) -> AttnWeights {
        AttnWeights {
            wq: binding.var(self.wq),
            wk: binding.var(self.wk),
            wv: binding.var(self.wv),
            wo: binding.var(self.wo),
        }
    }
}

/// Store ids for one two-layer feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        hidden: usize,
        role: Role,
        rng: &mut impl Rng,
    ) -> Self {
        FfnIds {
            w1: store.register(&format!("{prefix}.w1"), role, xavier(d_model, hidden, rng)),
            b1: store.register(&format!("{prefix}.b1"), role, Tensor::zeros(&[hidden])),
            w2: store.register(&format!("{prefix}.w2"), role, xavier(hidden, d_model, rng)),
            b2: store.register(&format!("{prefix}.b2"), role, Tensor::zeros(&[d_model])),
        }
    }
}

/// Scaled dot-product multi-head attention.
///
/// `q_in` is (Nq, d), `kv_in` is (Nk, d); d must split evenly over `heads`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    w: &AttnWeights,
    heads: usize,
) -> Var {
    let d = tape.value(q_in).cols();
    assert!(d % heads == 0, "d_model {d} not divisible by {heads} heads");
    let hd = d / heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let q = tape.matmul(q_in, w.wq);
    let k = tape.matmul(kv_in, w.wk);
    let v = tape.matmul(kv_in, w.wv);

    let mut ctx: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd);
        let kh = tape.slice_cols(k, h * hd, hd);
        let vh = tape.slice_cols(v, h * hd, hd);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let oh = tape.matmul(attn, vh);
        ctx = Some(match ctx {
            None => oh,
            Some(acc) => tape.concat_cols(acc, oh),
        });
    }
    tape.matmul(ctx.expect("at least one head"), w.wo)
}

/// Two-layer feed-forward with SiLU.
pub fn feed_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    ids: &FfnIds,
    binding: &Binding,
) -> Var {
    let h = tape.matmul(x, binding.var(ids.w1));
    let h = tape.add_row(h, binding.var(ids.b1));
    let a = tape.silu(h);
    let o = tape.matmul(a, binding.var(ids.w2));
    tape.add_row(o, binding.var(ids.b2))
}

/// Pre-norm residual self-attention followed by a pre-norm residual FFN.
pub fn encoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    attn: &AttnWeights,
    ffn: &FfnIds,
    binding: &Binding,
    heads: usize,
) -> Var {
    let eps = T::from_f64(LN_EPS);
    let n = tape.layer_norm_rows(x, eps);
    let a = multi_head_attention(tape, n, n, attn, heads);
    let x = tape.add(x, a);
    let n2 = tape.layer_norm_rows(x, eps);
    let f = feed_forward(tape, n2, ffn, binding);
    tape.add(x, f)
}

/// Sinusoidal position/timestep features of width `dim`.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut data = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        data[2 * i] = T::from_f64(angle.sin());
        data[2 * i + 1] = T::from_f64(angle.cos());
    }
    Tensor::from_vec(&[dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;
    use rand::SeedableRng;

    #[test]
    fn attention_reduces_to_value_average_with_zero_queries() {
        // Wq = Wk = 0 makes every score 0, so softmax is uniform and each
        // output row is the mean value row (Wv = Wo = identity).
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let eye = {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            t
        };
        let wq = store.register("wq", Role::Frozen, Tensor::zeros(&[d, d]));
        let wk = store.register("wk", Role::Frozen, Tensor::zeros(&[d, d]));
        let wv = store.register("wv", Role::Frozen, eye.clone());
        let wo = store.register("wo", Role::Frozen, eye);
        let ids = AttnIds { wq, wk, wv, wo };

        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &store, false);
        let x = tape.constant(Tensor::from_vec(&[2, 4], vec![
            1.0, 2.0, 3.0, 4.0, //
            5.0, 6.0, 7.0, 8.0,
        ]));
        let w = ids.bind(&binding);
        let out = multi_head_attention(&mut tape, x, x, &w, 2);
        let v = tape.value(out);
        let expect = [3.0, 4.0, 5.0, 6.0, 3.0, 4.0, 5.0, 6.0];
        for (got, want) in v.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding::<f64>(3, 8);
        let b = sinusoidal_embedding::<f64>(4, 8);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a.data(), b.data());

        let zero = sinusoidal_embedding::<f64>(0, 8);
        assert_eq!(zero.data()[0], 0.0);
        assert_eq!(zero.data()[1], 1.0);
    }

    #[test]
    fn block_gradients_flow_to_all_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let attn = AttnIds::register(&mut store, "attn", 4, Role::Trainable, &mut rng);
        let ffn = FfnIds::register(&mut store, "ffn", 4, 8, Role::Trainable, &mut rng);
        let mut tape = Tape::new();
        let binding = Binding::bind(&mut tape, &store, true);
        let x = tape.constant(crate::params::normal(&[3, 4], 1.0, &mut rng));
        let w = attn.bind(&binding);
        let y = encoder_block(&mut tape, x, &w, &ffn, &binding, 2);
        let loss = {
            let sq = tape.mul(y, y);
            tape.sum(sq)
        };
        let grads = tape.backward(loss);
        for id in store.trainable_ids() {
            // b1/b2 start at zero but still receive gradient signal
            assert!(grads.get(binding.var(id)).is_some(), "missing grad for {}", store.name(id));
        }
    }
}
