//! Dense row-major tensors generic over the working precision.
//!
//! Training runs at f32; gradient-oracle tests run the same code at f64.
//! Data is behind an `Arc` so clones are cheap; mutation copies on write.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid_input, Result};

/// Floating-point scalar the whole stack is generic over.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C += alpha * A(m,k) . B(k,n), row-major with explicit strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dims/strides.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elems]", self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    /// Rank-1 tensor of length 1 holding a single value.
    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        if Arc::get_mut(&mut self.data).is_none() {
            self.data = Arc::new((*self.data).clone());
        }
        Arc::get_mut(&mut self.data).expect("unique after copy-on-write")
    }

    /// Number of rows for a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    /// Number of columns for a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of len {}", self.len());
        self.data[0]
    }

    /// Same data, new shape (element count must match). Cheap: shares the buffer.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::from_vec(
            &self.shape,
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    /// Sum of all elements.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Matrix product for rank-2 tensors: (m,k) . (k,n) -> (m,n).
    pub fn matmul(&self, other: &Self) -> Self {
        gemm(self, false, other, false)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|x| U::from_f64(x.as_f64())).collect())
    }

    pub fn require_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(invalid_input(format!(
                "{what}: expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Little-endian f32 serialization of the flattened data.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 4);
        for &x in self.data.iter() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_le_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(invalid_input(format!(
                "expected {} bytes for shape {:?}, got {}",
                n * 4,
                shape,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

/// General matmul with optional transposes, built on strided gemm.
pub fn gemm<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    assert_eq!(a.shape().len(), 2, "gemm: a must be rank-2");
    assert_eq!(b.shape().len(), 2, "gemm: b must be rank-2");
    let (am, ak) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (bk, bn) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    assert_eq!(ak, bk, "gemm: inner dims {} vs {}", ak, bk);

    let mut out = vec![T::zero(); am * bn];
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    unsafe {
        T::gemm(
            am,
            ak,
            bn,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
    Tensor::from_vec(&[am, bn], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = Tensor::from_vec(&[3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
        // a . b^T both ways
        let c1 = gemm(&a, false, &b, true);
        let c2 = gemm(&at, true, &b, true);
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn f32_byte_round_trip() {
        let t = Tensor::from_vec(&[2, 2], vec![0.5_f32, -1.25, 3.0, 0.0]);
        let bytes = t.to_f32_le_bytes();
        let back = Tensor::<f32>::from_f32_le_bytes(&[2, 2], &bytes).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0_f64, 2.0, 3.0, 4.0]);
        let r = t.reshape(&[4]);
        assert_eq!(r.data(), t.data());
        assert_eq!(r.shape(), &[4]);
    }
}
