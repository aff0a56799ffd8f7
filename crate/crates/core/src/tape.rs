//! Reverse-mode autodiff on a flat tape.
//!
//! Every forward pass (training, sampling, the pure operation wrappers)
//! records onto a `Tape`; `backward` replays it in reverse. Nodes whose
//! ancestors are all constants skip closure construction entirely, so a
//! gradient-free forward pays only the arithmetic.

use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    parents: Vec<Var>,
    // Maps the output gradient to gradients w.r.t. `parents`, same order.
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by tape variable, produced by `Tape::backward`.
pub struct Grads<T> {
    by_var: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, vec![], None)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, vec![], None)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        needs_grad: bool,
        parents: Vec<Var>,
        back: Option<BackFn<T>>,
    ) -> Var {
        self.nodes.push(Node { value, needs_grad, parents, back });
        Var(self.nodes.len() - 1)
    }

    fn unary(
        &mut self,
        a: Var,
        value: Tensor<T>,
        back: impl FnOnce() -> BackFn<T>,
    ) -> Var {
        let needs = self.nodes[a.0].needs_grad;
        let back = if needs { Some(back()) } else { None };
        self.push(value, needs, vec![a], back)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: Tensor<T>,
        back: impl FnOnce() -> BackFn<T>,
    ) -> Var {
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let back = if needs { Some(back()) } else { None };
        self.push(value, needs, vec![a, b], back)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.binary(a, b, v, || Box::new(|g: &Tensor<T>| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.binary(a, b, v, || {
            Box::new(|g: &Tensor<T>| vec![g.clone(), g.map(|x| -x)])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = av.mul(&bv);
        self.binary(a, b, v, || {
            Box::new(move |g: &Tensor<T>| vec![g.mul(&bv), g.mul(&av)])
        })
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.unary(a, v, || Box::new(move |g: &Tensor<T>| vec![g.scale(c)]))
    }

    /// Multiply a tensor by a single-element variable (e.g. a learned gate).
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let av = self.value(a).clone();
        let sv = self.value(s).item();
        let v = av.scale(sv);
        self.binary(a, s, v, || {
            Box::new(move |g: &Tensor<T>| {
                let da = g.scale(sv);
                let ds = g.data().iter().zip(av.data()).fold(T::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                vec![da, Tensor::scalar(ds)]
            })
        })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, m: Tensor<T>) -> Var {
        assert_eq!(self.value(a).shape(), m.shape(), "mul_const shape mismatch");
        let v = self.value(a).mul(&m);
        self.unary(a, v, || Box::new(move |g: &Tensor<T>| vec![g.mul(&m)]))
    }

    /// Scale each row of (n,d) by a constant per-row factor (n,).
    pub fn mul_col_const(&mut self, a: Var, col: Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape().len(), 2);
        assert_eq!(col.len(), av.rows(), "mul_col_const: rows mismatch");
        let d = av.cols();
        let mut out = av.clone();
        for (r, chunk) in out.data_mut().chunks_exact_mut(d).enumerate() {
            let f = col.data()[r];
            for x in chunk {
                *x *= f;
            }
        }
        self.unary(a, out, || {
            Box::new(move |g: &Tensor<T>| {
                let d = g.cols();
                let mut dg = g.clone();
                for (r, chunk) in dg.data_mut().chunks_exact_mut(d).enumerate() {
                    let f = col.data()[r];
                    for x in chunk {
                        *x *= f;
                    }
                }
                vec![dg]
            })
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.tanh());
        let yc = y.clone();
        self.unary(a, y, || {
            Box::new(move |g: &Tensor<T>| vec![g.zip_map(&yc, |gi, yi| gi * (T::one() - yi * yi))])
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let xv = self.value(a).clone();
        let sig = |x: T| T::one() / (T::one() + (-x).exp());
        let y = xv.map(|x| x * sig(x));
        self.unary(a, y, || {
            Box::new(move |g: &Tensor<T>| {
                let dg = g.zip_map(&xv, |gi, x| {
                    let s = sig(x);
                    gi * (s * (T::one() + x * (T::one() - s)))
                });
                vec![dg]
            })
        })
    }

    // ---- linear algebra ----

    /// (m,k) . (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = gemm(&av, false, &bv, false);
        self.binary(a, b, v, || {
            Box::new(move |g: &Tensor<T>| {
                vec![gemm(g, false, &bv, true), gemm(&av, true, g, false)]
            })
        })
    }

    /// (m,k) . (n,k)^T -> (m,n)
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let v = gemm(&av, false, &bv, true);
        self.binary(a, b, v, || {
            Box::new(move |g: &Tensor<T>| {
                vec![gemm(g, false, &bv, false), gemm(g, true, &av, false)]
            })
        })
    }

    /// Broadcast-add a (d,) row vector to every row of (n,d).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(av.shape().len(), 2);
        assert_eq!(rv.len(), av.cols(), "add_row width mismatch");
        let d = av.cols();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(d) {
            for (x, &r) in chunk.iter_mut().zip(rv.data()) {
                *x += r;
            }
        }
        self.binary(a, row, out, || {
            Box::new(move |g: &Tensor<T>| {
                let d = g.cols();
                let mut dr = vec![T::zero(); d];
                for chunk in g.data().chunks_exact(d) {
                    for (acc, &gi) in dr.iter_mut().zip(chunk) {
                        *acc += gi;
                    }
                }
                vec![g.clone(), Tensor::from_vec(&[d], dr)]
            })
        })
    }

    // ---- row-structured ops ----

    /// Row-wise softmax over a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let y = out.clone();
        self.unary(a, out, || {
            Box::new(move |g: &Tensor<T>| {
                let d = y.cols();
                let mut dg = g.clone();
                for (grow, yrow) in dg.data_mut().chunks_exact_mut(d).zip(y.data().chunks_exact(d)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![dg]
            })
        })
    }

    /// Row-wise layer normalization without learned affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let d = av.cols();
        let dn = T::from_f64(d as f64);
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in out.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().fold(T::zero(), |acc, &x| acc + x) / dn;
            let var = row.iter().fold(T::zero(), |acc, &x| acc + (x - mean) * (x - mean)) / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
        }
        let y = out.clone();
        self.unary(a, out, || {
            Box::new(move |g: &Tensor<T>| {
                let d = y.cols();
                let dn = T::from_f64(d as f64);
                let mut dg = g.clone();
                for ((grow, yrow), &is) in dg
                    .data_mut()
                    .chunks_exact_mut(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(inv_std.iter())
                {
                    let gmean = grow.iter().fold(T::zero(), |acc, &x| acc + x) / dn;
                    let gydot = grow.iter().zip(yrow).fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi) / dn;
                    for (gi, &yi) in grow.iter_mut().zip(yrow) {
                        *gi = is * (*gi - gmean - yi * gydot);
                    }
                }
                vec![dg]
            })
        })
    }

    /// Stack two rank-2 tensors of equal width along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat_rows width mismatch");
        let (na, nb, d) = (av.rows(), bv.rows(), av.cols());
        let mut data = Vec::with_capacity((na + nb) * d);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = Tensor::from_vec(&[na + nb, d], data);
        self.binary(a, b, v, || {
            Box::new(move |g: &Tensor<T>| {
                let ga = Tensor::from_vec(&[na, d], g.data()[..na * d].to_vec());
                let gb = Tensor::from_vec(&[nb, d], g.data()[na * d..].to_vec());
                vec![ga, gb]
            })
        })
    }

    /// Columns [start, start+len) of a rank-2 tensor (head split).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = Vec::with_capacity(n * len);
        for row in av.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_vec(&[n, len], data);
        self.unary(a, v, || {
            Box::new(move |g: &Tensor<T>| {
                let mut full = Tensor::zeros(&[n, d]);
                for (grow, frow) in g.data().chunks_exact(len).zip(full.data_mut().chunks_exact_mut(d)) {
                    frow[start..start + len].copy_from_slice(grow);
                }
                vec![full]
            })
        })
    }

    /// Concatenate two rank-2 tensors along the column axis (head merge).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows(), bv.rows(), "concat_cols row mismatch");
        let (n, da, db) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (da + db));
        for (ra, rb) in av.data().chunks_exact(da).zip(bv.data().chunks_exact(db)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let v = Tensor::from_vec(&[n, da + db], data);
        self.binary(a, b, v, || {
            Box::new(move |g: &Tensor<T>| {
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for row in g.data().chunks_exact(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                vec![Tensor::from_vec(&[n, da], ga), Tensor::from_vec(&[n, db], gb)]
            })
        })
    }

    /// Rows [start, start+len) of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        assert!(start + len <= n, "slice_rows out of range");
        let v = Tensor::from_vec(&[len, d], av.data()[start * d..(start + len) * d].to_vec());
        self.unary(a, v, || {
            Box::new(move |g: &Tensor<T>| {
                let mut full = Tensor::zeros(&[n, d]);
                full.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                vec![full]
            })
        })
    }

    /// 2x2 mean pooling of tokens laid out on an (h,w) grid: (h*w,d) -> (h/2*w/2,d).
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let d = av.cols();
        assert_eq!(av.rows(), h * w, "avg_pool2 grid mismatch");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even grid");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = Tensor::zeros(&[oh * ow, d]);
        {
            let src = av.data();
            let dst = out.data_mut();
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (oy * ow + ox) * d;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + (2 * ox + dx)) * d;
                        for c in 0..d {
                            dst[o + c] += src[i + c] * quarter;
                        }
                    }
                }
            }
        }
        self.unary(a, out, || {
            Box::new(move |g: &Tensor<T>| {
                let quarter = T::from_f64(0.25);
                let mut dg = Tensor::zeros(&[h * w, d]);
                {
                    let gd = g.data();
                    let dd = dg.data_mut();
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let o = (oy * (w / 2) + ox) * d;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((2 * oy + dy) * w + (2 * ox + dx)) * d;
                                for c in 0..d {
                                    dd[i + c] += gd[o + c] * quarter;
                                }
                            }
                        }
                    }
                }
                vec![dg]
            })
        })
    }

    /// Nearest-neighbor 2x upsampling of grid tokens: (h*w,d) -> (2h*2w,d).
    pub fn upsample2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let av = self.value(a);
        let d = av.cols();
        assert_eq!(av.rows(), h * w, "upsample2 grid mismatch");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[oh * ow, d]);
        {
            let src = av.data();
            let dst = out.data_mut();
            for y in 0..oh {
                for x in 0..ow {
                    let i = ((y / 2) * w + x / 2) * d;
                    let o = (y * ow + x) * d;
                    dst[o..o + d].copy_from_slice(&src[i..i + d]);
                }
            }
        }
        self.unary(a, out, || {
            Box::new(move |g: &Tensor<T>| {
                let mut dg = Tensor::zeros(&[h * w, d]);
                {
                    let gd = g.data();
                    let dd = dg.data_mut();
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let i = ((y / 2) * w + x / 2) * d;
                            let o = (y * (2 * w) + x) * d;
                            for c in 0..d {
                                dd[i + c] += gd[o + c];
                            }
                        }
                    }
                }
                vec![dg]
            })
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).reshape(shape);
        let old: Vec<usize> = self.value(a).shape().to_vec();
        self.unary(a, v, || Box::new(move |g: &Tensor<T>| vec![g.reshape(&old)]))
    }

    // ---- reductions ----

    /// Sum of all elements, as a length-1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.value(a).shape().to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, || {
            Box::new(move |g: &Tensor<T>| vec![Tensor::full(&shape, g.item())])
        })
    }

    /// Mean of all elements, as a length-1 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Euclidean norm of the flattened tensor, as a length-1 tensor.
    ///
    /// The true norm has no derivative at the origin; backward uses the
    /// zero subgradient there so a gate sitting exactly at zero does not
    /// poison the rest of the gradient.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let norm = av.l2();
        self.unary(a, Tensor::scalar(norm), || {
            Box::new(move |g: &Tensor<T>| {
                let floor = T::from_f64(1e-300);
                let scale = if norm > floor { g.item() / norm } else { T::zero() };
                vec![av.scale(scale)]
            })
        })
    }

    /// Quotient of two single-element tensors.
    pub fn div_ss(&mut self, a: Var, b: Var) -> Var {
        let an = self.value(a).item();
        let bn = self.value(b).item();
        let v = Tensor::scalar(an / bn);
        self.binary(a, b, v, || {
            Box::new(move |g: &Tensor<T>| {
                let gi = g.item();
                vec![Tensor::scalar(gi / bn), Tensor::scalar(-gi * an / (bn * bn))]
            })
        })
    }

    /// max(a, c) for a single-element tensor; gradient passes through only
    /// when a wins.
    pub fn max_const(&mut self, a: Var, c: T) -> Var {
        let an = self.value(a).item();
        let v = Tensor::scalar(an.max(c));
        self.unary(a, v, || {
            Box::new(move |g: &Tensor<T>| {
                vec![Tensor::scalar(if an >= c { g.item() } else { T::zero() })]
            })
        })
    }

    // ---- backward ----

    /// Gradients of a single-element `loss` w.r.t. every reachable node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut by_var: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        by_var[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(back) = self.nodes[i].back.as_ref() else { continue };
            let Some(g) = by_var[i].clone() else { continue };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
            for (p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut by_var[p.0] {
                    Some(acc) => *acc = acc.add(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { by_var }
    }
}
