//! Scalar element abstraction and raw dense kernels.
//!
//! The engine is generic over `f32` and `f64`. Training runs in `f32`;
//! finite-difference verification instantiates the same ops at `f64` where
//! central differences are meaningful at tight tolerances. Full reductions
//! (sums, means, norms, softmax/layernorm statistics) accumulate in `f64`
//! for both element types; matmul accumulates in the element type.

use rayon::prelude::*;

/// Scalar element of a [`super::Tensor`].
pub trait Elem:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + serde::Serialize
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Name recorded in checkpoint headers.
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    /// Fused multiply-add where the target supports it.
    fn mul_add(self, a: Self, b: Self) -> Self;

    /// Sum with `f64` accumulation.
    fn sum_slice(xs: &[Self]) -> f64 {
        xs.iter().fold(0.0, |acc, &x| acc + x.to_f64())
    }

    /// Widen a stored `f32` tensor into this element type. The `f32`
    /// instantiation reuses the buffer.
    fn promote(t: &super::tensor::Tensor<f32>) -> super::tensor::Tensor<Self> {
        super::tensor::Tensor::new(
            t.rows(),
            t.cols(),
            t.data().iter().map(|&x| Self::from_f64(x as f64)).collect(),
        )
    }

    /// Narrow back to `f32` for storage and optimizer updates.
    fn demote(t: &super::tensor::Tensor<Self>) -> super::tensor::Tensor<f32> {
        super::tensor::Tensor::new(
            t.rows(),
            t.cols(),
            t.data().iter().map(|&x| x.to_f64() as f32).collect(),
        )
    }
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn sin(self) -> Self {
        f32::sin(self)
    }
    fn cos(self) -> Self {
        f32::cos(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    fn promote(t: &super::tensor::Tensor<f32>) -> super::tensor::Tensor<f32> {
        t.clone()
    }
    fn demote(t: &super::tensor::Tensor<f32>) -> super::tensor::Tensor<f32> {
        t.clone()
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
}

/// Parallelize a matmul only when the work amortizes thread dispatch.
const PAR_FLOP_THRESHOLD: usize = 1 << 21;

/// Output rows computed per pass over the shared operand. Each output
/// element keeps one fixed accumulation order, so results are identical
/// across block boundaries and thread counts.
const ROW_BLOCK: usize = 8;

/// Dot product with fixed-order lane accumulators (deterministic, vectorizes).
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [E::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ao = &a[i * 8..i * 8 + 8];
        let bo = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            lanes[l] = ao[l].mul_add(bo[l], lanes[l]);
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for i in chunks * 8..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

fn axpy<E: Elem>(alpha: E, x: &[E], y: &mut [E]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(xi, *yi);
    }
}

/// `C[m,n] = A[m,k] * B[k,n]`. Blocks of output rows share each pass over
/// `B`, cutting memory traffic roughly by the block factor.
pub fn matmul<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    matmul_into(a, b, m, k, n, &mut c);
    c
}

/// `C += A * B` accumulating into an existing buffer.
pub fn matmul_into<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    assert_eq!(c.len(), m * n);
    let block = |cb: &mut [E], i0: usize| {
        let rows = cb.len() / n;
        for kk in 0..k {
            let brow = &b[kk * n..kk * n + n];
            for r in 0..rows {
                let aik = a[(i0 + r) * k + kk];
                axpy(aik, brow, &mut cb[r * n..(r + 1) * n]);
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(bi, cb)| block(cb, bi * ROW_BLOCK));
    } else {
        for (bi, cb) in c.chunks_mut(ROW_BLOCK * n).enumerate() {
            block(cb, bi * ROW_BLOCK);
        }
    }
}

/// `C[m,n] = A[m,k] * B[n,k]^T`.
pub fn matmul_nt<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    matmul_nt_into(a, b, m, k, n, &mut c);
    c
}

/// `C += A * B^T` accumulating into an existing buffer.
pub fn matmul_nt_into<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    assert_eq!(c.len(), m * n);
    let block = |cb: &mut [E], i0: usize| {
        let rows = cb.len() / n;
        for j in 0..n {
            let bj = &b[j * k..j * k + k];
            for r in 0..rows {
                cb[r * n + j] = cb[r * n + j] + dot(&a[(i0 + r) * k..(i0 + r) * k + k], bj);
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(bi, cb)| block(cb, bi * ROW_BLOCK));
    } else {
        for (bi, cb) in c.chunks_mut(ROW_BLOCK * n).enumerate() {
            block(cb, bi * ROW_BLOCK);
        }
    }
}

/// `C[k,n] = A[m,k]^T * B[m,n]`.
pub fn matmul_tn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; k * n];
    matmul_tn_into(a, b, m, k, n, &mut c);
    c
}

/// `C += A^T * B` accumulating into an existing buffer.
pub fn matmul_tn_into<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    assert_eq!(c.len(), k * n);
    let block = |cb: &mut [E], ka0: usize| {
        let rows = cb.len() / n;
        for mm in 0..m {
            let brow = &b[mm * n..mm * n + n];
            for r in 0..rows {
                let alpha = a[mm * k + ka0 + r];
                axpy(alpha, brow, &mut cb[r * n..(r + 1) * n]);
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(bi, cb)| block(cb, bi * ROW_BLOCK));
    } else {
        for (bi, cb) in c.chunks_mut(ROW_BLOCK * n).enumerate() {
            block(cb, bi * ROW_BLOCK);
        }
    }
}
