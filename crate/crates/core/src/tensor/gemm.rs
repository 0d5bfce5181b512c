//! Matrix multiplication.
//!
//! Every output element accumulates its `k` products in ascending order
//! starting from zero, exactly like the textbook triple loop. The blocked
//! kernels only vectorize across output columns, so results are bit-identical
//! to the naive loop (no FMA contraction, no reassociation). On x86-64 with
//! AVX2 or AVX-512, `f32` products go through explicit SIMD kernels.

use super::{Scalar, Tensor};
use crate::error::{IdpError, Result};

const MR: usize = 4;
const NR: usize = 32;

/// The right-hand operand, stored as `k × n` or as its `n × k` transpose.
#[derive(Clone, Copy)]
enum Rhs<'a, T> {
    Rows(&'a [T]),
    Transposed(&'a [T]),
}

impl<T: Scalar> Rhs<'_, T> {
    /// Copies rows `k0..k0 + kc`, columns `j0..j0 + w` into an `kc × nr` panel, zero padded.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn pack(self, n: usize, k: usize, k0: usize, kc: usize, j0: usize, w: usize, nr: usize, dst: &mut [T]) {
        match self {
            Rhs::Rows(b) => {
                for p in 0..kc {
                    let row = &mut dst[p * nr..(p + 1) * nr];
                    row[..w].copy_from_slice(&b[(k0 + p) * n + j0..(k0 + p) * n + j0 + w]);
                    row[w..].fill(T::zero());
                }
            }
            Rhs::Transposed(bt) => {
                for jj in 0..nr {
                    if jj < w {
                        let src = &bt[(j0 + jj) * k + k0..(j0 + jj) * k + k0 + kc];
                        for (p, &v) in src.iter().enumerate() {
                            dst[p * nr + jj] = v;
                        }
                    } else {
                        for p in 0..kc {
                            dst[p * nr + jj] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major, `c` overwritten.
pub fn gemm<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    gemm_any(m, n, k, a, Rhs::Rows(b), c);
}

/// `c[m×n] = a[m×k] · btᵀ` for a row-major `bt[n×k]`; the same sums, in the
/// same order, as [`gemm`] on the explicit transpose.
pub fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], bt: &[T], c: &mut [T]) {
    assert_eq!(bt.len(), k * n, "gemm_nt: rhs length");
    gemm_any(m, n, k, a, Rhs::Transposed(bt), c);
}

fn gemm_any<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: Rhs<'_, T>, c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::zero());
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && is_x86_feature_detected!("avx2") {
        // SAFETY: T is f32, so the casts only relabel the element type; each
        // kernel runs only when its instruction set is present.
        unsafe {
            let cast = |s: &[T]| std::slice::from_raw_parts(s.as_ptr().cast::<f32>(), s.len());
            let b = match b {
                Rhs::Rows(v) => Rhs::Rows(cast(v)),
                Rhs::Transposed(v) => Rhs::Transposed(cast(v)),
            };
            let out = std::slice::from_raw_parts_mut(c.as_mut_ptr().cast::<f32>(), c.len());
            if is_x86_feature_detected!("avx512f") {
                avx512::sgemm(m, n, k, cast(a), b, out);
            } else {
                avx2::sgemm(m, n, k, cast(a), b, out);
            }
        }
        return;
    }
    let mut panel = vec![T::zero(); k * NR];
    for j0 in (0..n).step_by(NR) {
        let w = NR.min(n - j0);
        b.pack(n, k, 0, k, j0, w, NR, &mut panel);
        let mut i0 = 0;
        while i0 + MR <= m {
            let acc = kernel::<T, MR>(&a[i0 * k..(i0 + MR) * k], k, &panel);
            store(&acc, c, i0, j0, w, n);
            i0 += MR;
        }
        match m - i0 {
            0 => {}
            1 => store(&kernel::<T, 1>(&a[i0 * k..], k, &panel), c, i0, j0, w, n),
            2 => store(&kernel::<T, 2>(&a[i0 * k..], k, &panel), c, i0, j0, w, n),
            3 => store(&kernel::<T, 3>(&a[i0 * k..], k, &panel), c, i0, j0, w, n),
            _ => unreachable!(),
        }
    }
}

#[inline(always)]
fn kernel<T: Scalar, const R: usize>(a: &[T], k: usize, panel: &[T]) -> [[T; NR]; R] {
    let mut acc = [[T::zero(); NR]; R];
    let rows: [&[T]; R] = std::array::from_fn(|r| &a[r * k..(r + 1) * k]);
    for (p, bv) in panel.chunks_exact(NR).enumerate() {
        let bv: &[T; NR] = bv.try_into().unwrap();
        for r in 0..R {
            let av = rows[r][p];
            let row = &mut acc[r];
            for jj in 0..NR {
                row[jj] += av * bv[jj];
            }
        }
    }
    acc
}

#[inline(always)]
fn store<T: Scalar, const R: usize>(
    acc: &[[T; NR]; R],
    c: &mut [T],
    i0: usize,
    j0: usize,
    w: usize,
    n: usize,
) {
    for (r, row) in acc.iter().enumerate() {
        let base = (i0 + r) * n + j0;
        c[base..base + w].copy_from_slice(&row[..w]);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::Rhs;

    const NR: usize = 16;
    const MR: usize = 6;

    /// `R` rows of `c` over a `w`-column panel; two 8-lane accumulators per row.
    #[target_feature(enable = "avx2")]
    unsafe fn kernel<const R: usize>(a: *const f32, k: usize, panel: *const f32, c: *mut f32, ldc: usize, w: usize) {
        let mut lo = [_mm256_setzero_ps(); R];
        let mut hi = [_mm256_setzero_ps(); R];
        for p in 0..k {
            let b0 = _mm256_loadu_ps(panel.add(p * NR));
            let b1 = _mm256_loadu_ps(panel.add(p * NR + 8));
            for r in 0..R {
                let av = _mm256_set1_ps(*a.add(r * k + p));
                lo[r] = _mm256_add_ps(lo[r], _mm256_mul_ps(av, b0));
                hi[r] = _mm256_add_ps(hi[r], _mm256_mul_ps(av, b1));
            }
        }
        let mut buf = [0.0f32; NR];
        for r in 0..R {
            let dst = c.add(r * ldc);
            if w == NR {
                _mm256_storeu_ps(dst, lo[r]);
                _mm256_storeu_ps(dst.add(8), hi[r]);
            } else {
                _mm256_storeu_ps(buf.as_mut_ptr(), lo[r]);
                _mm256_storeu_ps(buf.as_mut_ptr().add(8), hi[r]);
                std::ptr::copy_nonoverlapping(buf.as_ptr(), dst, w);
            }
        }
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn sgemm(m: usize, n: usize, k: usize, a: &[f32], b: Rhs<'_, f32>, c: &mut [f32]) {
        let mut panel = vec![0.0f32; k * NR];
        let (ap, cp) = (a.as_ptr(), c.as_mut_ptr());
        for j0 in (0..n).step_by(NR) {
            let w = NR.min(n - j0);
            b.pack(n, k, 0, k, j0, w, NR, &mut panel);
            let pp = panel.as_ptr();
            let mut i0 = 0;
            while i0 + MR <= m {
                kernel::<MR>(ap.add(i0 * k), k, pp, cp.add(i0 * n + j0), n, w);
                i0 += MR;
            }
            let (ar, cr) = (ap.add(i0 * k), cp.add(i0 * n + j0));
            match m - i0 {
                0 => {}
                1 => kernel::<1>(ar, k, pp, cr, n, w),
                2 => kernel::<2>(ar, k, pp, cr, n, w),
                3 => kernel::<3>(ar, k, pp, cr, n, w),
                4 => kernel::<4>(ar, k, pp, cr, n, w),
                5 => kernel::<5>(ar, k, pp, cr, n, w),
                _ => unreachable!(),
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::Rhs;

    const NR: usize = 32;
    const MR: usize = 6;
    const KC: usize = 256;

    /// Like the AVX2 kernel, over one `kc`-long slice of the shared dimension.
    /// Later slices continue from the partial sums already stored in `c`.
    #[target_feature(enable = "avx512f")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn kernel<const R: usize>(a: *const f32, lda: usize, kc: usize, panel: *const f32, c: *mut f32, ldc: usize, w: usize, first: bool) {
        let mut lo = [_mm512_setzero_ps(); R];
        let mut hi = [_mm512_setzero_ps(); R];
        let mask: u32 = if w == NR { u32::MAX } else { (1u32 << w) - 1 };
        let (mlo, mhi) = (mask as u16, (mask >> 16) as u16);
        if !first {
            for r in 0..R {
                let src = c.add(r * ldc);
                lo[r] = _mm512_maskz_loadu_ps(mlo, src);
                hi[r] = _mm512_maskz_loadu_ps(mhi, src.add(16));
            }
        }
        for p in 0..kc {
            let b0 = _mm512_loadu_ps(panel.add(p * NR));
            let b1 = _mm512_loadu_ps(panel.add(p * NR + 16));
            for r in 0..R {
                let av = _mm512_set1_ps(*a.add(r * lda + p));
                lo[r] = _mm512_add_ps(lo[r], _mm512_mul_ps(av, b0));
                hi[r] = _mm512_add_ps(hi[r], _mm512_mul_ps(av, b1));
            }
        }
        for r in 0..R {
            let dst = c.add(r * ldc);
            _mm512_mask_storeu_ps(dst, mlo, lo[r]);
            _mm512_mask_storeu_ps(dst.add(16), mhi, hi[r]);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn sgemm(m: usize, n: usize, k: usize, a: &[f32], b: Rhs<'_, f32>, c: &mut [f32]) {
        let mut panel = vec![0.0f32; KC * NR];
        let (ap, cp) = (a.as_ptr(), c.as_mut_ptr());
        for k0 in (0..k).step_by(KC) {
            let kc = KC.min(k - k0);
            let first = k0 == 0;
            for j0 in (0..n).step_by(NR) {
                let w = NR.min(n - j0);
                b.pack(n, k, k0, kc, j0, w, NR, &mut panel);
                let pp = panel.as_ptr();
                let mut i0 = 0;
                while i0 + MR <= m {
                    kernel::<MR>(ap.add(i0 * k + k0), k, kc, pp, cp.add(i0 * n + j0), n, w, first);
                    i0 += MR;
                }
                let (ar, cr) = (ap.add(i0 * k + k0), cp.add(i0 * n + j0));
                match m - i0 {
                    0 => {}
                    1 => kernel::<1>(ar, k, kc, pp, cr, n, w, first),
                    2 => kernel::<2>(ar, k, kc, pp, cr, n, w, first),
                    3 => kernel::<3>(ar, k, kc, pp, cr, n, w, first),
                    4 => kernel::<4>(ar, k, kc, pp, cr, n, w, first),
                    5 => kernel::<5>(ar, k, kc, pp, cr, n, w, first),
                    _ => unreachable!(),
                }
            }
        }
    }
}

/// Row-major transpose of a `rows × cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    assert_eq!(src.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(IdpError::dims("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![T::zero(); m * n];
    gemm(m, n, k, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

/// Gradients of `c = a · b` given `dc`: returns `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(IdpError::dims("matmul_backward", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if dc.shape() != [m, n] {
        return Err(IdpError::dims("matmul_backward", dc.shape(), &[m, n]));
    }
    let bt = transpose(k, n, b.data());
    let mut da = vec![T::zero(); m * k];
    gemm(m, k, n, dc.data(), &bt, &mut da);
    let at = transpose(m, k, a.data());
    let mut db = vec![T::zero(); k * n];
    gemm(k, n, m, &at, dc.data(), &mut db);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn identity_cases() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let i2 = Tensor::<f64>::identity(2);
        assert_eq!(matmul(&a, &i2).unwrap().data(), &[1., 2., 3., 4.]);
        let col = Tensor::<f64>::from_f64(&[2, 1], &[5., 7.]).unwrap();
        assert_eq!(matmul(&i2, &col).unwrap().data(), &[5., 7.]);
        let ones = Tensor::<f64>::from_f64(&[2, 1], &[1., 1.]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3., 7.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_on_identity_returns_upstream() {
        let a = Tensor::<f64>::identity(2);
        let b = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let dc = Tensor::<f64>::from_f64(&[2, 2], &[0.5, -1., 2., 3.]).unwrap();
        let (_, db) = matmul_backward(&a, &b, &dc).unwrap();
        assert_eq!(db.data(), dc.data());
    }

    proptest! {
        #[test]
        fn blocked_kernel_is_bit_identical_to_naive(
            m in 1usize..15, n in 1usize..70, k in 1usize..600, seed in any::<u64>()
        ) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5 };
            let a: Vec<f32> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f32> = (0..k * n).map(|_| next()).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, &a, &b, &mut c);
            let r = naive(m, n, k, &a, &b);
            prop_assert!(c.iter().zip(&r).all(|(x, y)| x.to_bits() == y.to_bits()));

            let bt = transpose(k, n, &b);
            let mut c3 = vec![0.0; m * n];
            gemm_nt(m, n, k, &a, &bt, &mut c3);
            prop_assert!(c3.iter().zip(&r).all(|(x, y)| x.to_bits() == y.to_bits()));

            #[cfg(target_arch = "x86_64")]
            if is_x86_feature_detected!("avx2") {
                let mut c2 = vec![0.0; m * n];
                unsafe { avx2::sgemm(m, n, k, &a, Rhs::Rows(&b), &mut c2) };
                prop_assert!(c2.iter().zip(&r).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
