//! Scalar abstraction for embedding storage.
//!
//! Matrices, dictionaries and transplanted outputs are generic over the
//! stored element type (`f32` for on-disk compatibility, `f64` for synthetic
//! ground-truth work). All solver-internal arithmetic widens to `f64`
//! regardless of storage: correlation scans over 100k+ atoms and triangular
//! back-substitution are cancellation-prone at single precision.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type of an embedding matrix.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Copy + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Widen to the `f64` accumulator domain.
    fn widen(self) -> f64;

    /// Narrow an `f64` accumulator result back to storage precision.
    fn narrow(value: f64) -> Self;

    /// Convert from the on-disk `f32` representation (exact for both impls).
    fn from_storage(value: f32) -> Self;

    /// Convert to the on-disk `f32` representation (lossy for `f64`).
    fn to_storage(self) -> f32;
}

impl Scalar for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn narrow(value: f64) -> Self {
        value as f32
    }

    #[inline(always)]
    fn from_storage(value: f32) -> Self {
        value
    }

    #[inline(always)]
    fn to_storage(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }

    #[inline(always)]
    fn narrow(value: f64) -> Self {
        value
    }

    #[inline(always)]
    fn from_storage(value: f32) -> Self {
        value as f64
    }

    #[inline(always)]
    fn to_storage(self) -> f32 {
        self as f32
    }
}

/// Dot product of a stored-precision slice against an `f64` slice,
/// accumulated in `f64`.
///
/// The correlation scan spends almost all solver time here, so x86-64 gets
/// hand-dispatched AVX2 kernels. Every path computes the identical 32-lane
/// accumulation: lane `i` sums elements `32k + i`, lanes reduce in a fixed
/// pairwise tree, and the remainder accumulates sequentially. The lane
/// count gives the vector kernels multiple independent add chains, and the
/// plain IEEE multiply-then-add (no FMA contraction) keeps results
/// bit-identical across kernels, call sites, and the serial/batch solver
/// paths.
#[inline]
pub fn dot_widened<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        use std::any::TypeId;
        if is_x86_feature_detected!("avx2") {
            if TypeId::of::<T>() == TypeId::of::<f32>() {
                let a32 =
                    unsafe { std::slice::from_raw_parts(a.as_ptr().cast::<f32>(), a.len()) };
                return unsafe { simd::dot_f32_f64_avx2(a32, b) };
            }
            if TypeId::of::<T>() == TypeId::of::<f64>() {
                let a64 =
                    unsafe { std::slice::from_raw_parts(a.as_ptr().cast::<f64>(), a.len()) };
                return unsafe { simd::dot_f64_f64_avx2(a64, b) };
            }
        }
    }
    dot_widened_generic(a, b)
}

const LANES: usize = 32;

#[inline(always)]
fn dot_widened_generic<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut chunks_a = a.chunks_exact(LANES);
    let mut chunks_b = b.chunks_exact(LANES);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for i in 0..LANES {
            acc[i] += ca[i].widen() * cb[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x.widen() * y;
    }
    reduce_lanes(&acc) + tail
}

/// Fixed pairwise reduction tree over the 32 lane sums.
#[inline(always)]
fn reduce_lanes(acc: &[f64; LANES]) -> f64 {
    let mut level16 = [0.0f64; 16];
    for i in 0..16 {
        level16[i] = acc[2 * i] + acc[2 * i + 1];
    }
    let mut level8 = [0.0f64; 8];
    for i in 0..8 {
        level8[i] = level16[2 * i] + level16[2 * i + 1];
    }
    let mut level4 = [0.0f64; 4];
    for i in 0..4 {
        level4[i] = level8[2 * i] + level8[2 * i + 1];
    }
    (level4[0] + level4[1]) + (level4[2] + level4[3])
}

#[cfg(target_arch = "x86_64")]
mod simd {
    //! Vector kernels mirroring `dot_widened_generic` lane for lane.
    //! Multiplies and adds stay separate (no FMA contraction) so every
    //! kernel rounds exactly like the portable loop. Vector register `m`
    //! carries lanes `4m..4m+4`.

    use super::{reduce_lanes, LANES};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_f32_f64_avx2(a: &[f32], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let n = a.len();
        let chunks = n / LANES;
        let mut acc = [_mm256_setzero_pd(); 8];
        for c in 0..chunks {
            let pa = a.as_ptr().add(c * LANES);
            let pb = b.as_ptr().add(c * LANES);
            for m in 0..8 {
                let wide = _mm256_cvtps_pd(_mm_loadu_ps(pa.add(4 * m)));
                let prod = _mm256_mul_pd(wide, _mm256_loadu_pd(pb.add(4 * m)));
                acc[m] = _mm256_add_pd(acc[m], prod);
            }
        }
        let mut lanes = [0.0f64; LANES];
        for m in 0..8 {
            _mm256_storeu_pd(lanes.as_mut_ptr().add(4 * m), acc[m]);
        }
        let mut tail = 0.0;
        for i in chunks * LANES..n {
            tail += *a.get_unchecked(i) as f64 * *b.get_unchecked(i);
        }
        reduce_lanes(&lanes) + tail
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_f64_f64_avx2(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let n = a.len();
        let chunks = n / LANES;
        let mut acc = [_mm256_setzero_pd(); 8];
        for c in 0..chunks {
            let pa = a.as_ptr().add(c * LANES);
            let pb = b.as_ptr().add(c * LANES);
            for m in 0..8 {
                let prod = _mm256_mul_pd(_mm256_loadu_pd(pa.add(4 * m)), _mm256_loadu_pd(pb.add(4 * m)));
                acc[m] = _mm256_add_pd(acc[m], prod);
            }
        }
        let mut lanes = [0.0f64; LANES];
        for m in 0..8 {
            _mm256_storeu_pd(lanes.as_mut_ptr().add(4 * m), acc[m]);
        }
        let mut tail = 0.0;
        for i in chunks * LANES..n {
            tail += *a.get_unchecked(i) * *b.get_unchecked(i);
        }
        reduce_lanes(&lanes) + tail
    }
}

/// Dot product of two `f64` slices with the same accumulation order as
/// [`dot_widened`].
#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    dot_widened(a, b)
}

/// Dot product of two stored-precision slices, accumulated in `f64`.
#[inline]
pub fn dot_stored<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.widen() * y.widen();
    }
    acc
}

/// Euclidean norm of a stored-precision slice, accumulated in `f64`.
#[inline]
pub fn norm_widened<T: Scalar>(a: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for &x in a {
        let w = x.widen();
        acc += w * w;
    }
    acc.sqrt()
}

/// Euclidean norm of an `f64` slice.
#[inline]
pub fn norm_f64(a: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for &x in a {
        acc += x * x;
    }
    acc.sqrt()
}

/// `y += alpha * x` over `f64` slices.
#[inline]
pub fn axpy_f64(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
