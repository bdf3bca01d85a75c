//! GEMV kernels: `y <- beta*y + alpha*op(A)*x`.
//!
//! The argument set follows the standard CBLAS `?gemv` convention: `m x n`
//! is the shape of the stored matrix, `op(A)` is either `A` or `A^T`, and
//! `lda` is the stride between consecutive rows (row-major) or columns
//! (column-major). [`gemv_naive`] is the semantic reference; [`gemv_opt`]
//! and [`gemv_sketch`] are checked against it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{self, QuantError, QuantizedMatrix};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("invalid dimensions m={m} n={n}")]
    Dimensions { m: usize, n: usize },
    #[error("leading dimension {lda} smaller than required {min}")]
    LeadingDimension { lda: usize, min: usize },
    #[error("vector increment must be positive")]
    Increment,
    #[error("{operand} holds {actual} elements, at least {required} required")]
    Operand {
        operand: &'static str,
        required: usize,
        actual: usize,
    },
    #[error("quantized operand is {rows}x{cols}, call expects {m}x{n}")]
    QuantizedShape {
        rows: usize,
        cols: usize,
        m: usize,
        n: usize,
    },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    RowMajor,
    ColMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transpose {
    NoTrans,
    Trans,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemvParams<T> {
    pub layout: Layout,
    pub trans: Transpose,
    pub m: usize,
    pub n: usize,
    pub alpha: T,
    pub beta: T,
    pub lda: usize,
    pub incx: usize,
    pub incy: usize,
}

impl<T: Scalar> GemvParams<T> {
    /// Row-major, untransposed, `alpha = 1`, `beta = 0`, unit strides.
    pub fn row_major(m: usize, n: usize) -> Self {
        Self {
            layout: Layout::RowMajor,
            trans: Transpose::NoTrans,
            m,
            n,
            alpha: T::one(),
            beta: T::zero(),
            lda: n,
            incx: 1,
            incy: 1,
        }
    }

    pub fn with_scalars(mut self, alpha: T, beta: T) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    /// Length of `x` in elements (before applying `incx`).
    pub fn x_len(&self) -> usize {
        match self.trans {
            Transpose::NoTrans => self.n,
            Transpose::Trans => self.m,
        }
    }

    /// Length of `y` in elements (before applying `incy`).
    pub fn y_len(&self) -> usize {
        match self.trans {
            Transpose::NoTrans => self.m,
            Transpose::Trans => self.n,
        }
    }

    /// Strides of `op(A)(i, k)` in the flat matrix storage.
    fn op_strides(&self) -> (usize, usize) {
        match (self.layout, self.trans) {
            (Layout::RowMajor, Transpose::NoTrans) | (Layout::ColMajor, Transpose::Trans) => {
                (self.lda, 1)
            }
            (Layout::RowMajor, Transpose::Trans) | (Layout::ColMajor, Transpose::NoTrans) => {
                (1, self.lda)
            }
        }
    }

    pub fn validate(&self, a_len: usize, x_len: usize, y_len: usize) -> Result<(), KernelError> {
        if self.m == 0 || self.n == 0 {
            return Err(KernelError::Dimensions {
                m: self.m,
                n: self.n,
            });
        }
        let min_lda = match self.layout {
            Layout::RowMajor => self.n,
            Layout::ColMajor => self.m,
        };
        if self.lda < min_lda {
            return Err(KernelError::LeadingDimension {
                lda: self.lda,
                min: min_lda,
            });
        }
        if self.incx == 0 || self.incy == 0 {
            return Err(KernelError::Increment);
        }
        let (rs, cs) = self.op_strides();
        let need_a = (self.y_len() - 1) * rs + (self.x_len() - 1) * cs + 1;
        let need_x = (self.x_len() - 1) * self.incx + 1;
        let need_y = (self.y_len() - 1) * self.incy + 1;
        for (operand, required, actual) in [
            ("A", need_a, a_len),
            ("x", need_x, x_len),
            ("y", need_y, y_len),
        ] {
            if actual < required {
                return Err(KernelError::Operand {
                    operand,
                    required,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// Reference GEMV with a fixed left-to-right summation order.
pub fn gemv_naive<T: Scalar>(
    a: &[T],
    x: &[T],
    y: &mut [T],
    p: &GemvParams<T>,
) -> Result<(), KernelError> {
    p.validate(a.len(), x.len(), y.len())?;
    let (rs, cs) = p.op_strides();
    for i in 0..p.y_len() {
        let mut sum = T::zero();
        for k in 0..p.x_len() {
            sum += a[i * rs + k * cs] * x[k * p.incx];
        }
        let yi = &mut y[i * p.incy];
        *yi = p.beta * *yi + p.alpha * sum;
    }
    Ok(())
}

const LANES: usize = 8;
const ROW_BLOCK: usize = 64;
const COL_BLOCK: usize = 256;
const PARALLEL_MIN_WORK: usize = 1 << 16;

/// Dot product with `LANES` independent partial sums, reduced pairwise.
#[inline(always)]
fn dot_lanes<T: Scalar>(a: &[T], x: &[T]) -> T {
    let n = a.len().min(x.len());
    let body = n / LANES * LANES;
    let mut acc = [T::zero(); LANES];
    for (ca, cx) in a[..body]
        .chunks_exact(LANES)
        .zip(x[..body].chunks_exact(LANES))
    {
        for l in 0..LANES {
            acc[l] += ca[l] * cx[l];
        }
    }
    let mut tail = T::zero();
    for k in body..n {
        tail += a[k] * x[k];
    }
    reduce_lanes(acc) + tail
}

/// Bytes to prefetch ahead of each streamed matrix row.
const PREFETCH_BYTES: usize = 2048;

#[inline(always)]
fn prefetch<T>(p: *const T) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: prefetch is a hint and never faults, whatever the address.
    unsafe {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        _mm_prefetch(p as *const i8, _MM_HINT_T0);
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = p;
}

#[inline(always)]
fn reduce_lanes<T: Scalar>(mut acc: [T; LANES]) -> T {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0]
}

/// Four dot products sharing the loads of `x`; each row keeps the same
/// lane-wise summation order as [`dot_lanes`].
#[inline(always)]
fn dot4_lanes<T: Scalar>(rows: [&[T]; 4], x: &[T]) -> [T; 4] {
    let n = x.len();
    let body = n / LANES * LANES;
    let ahead = PREFETCH_BYTES / std::mem::size_of::<T>();
    let mut acc = [[T::zero(); LANES]; 4];
    let mut c = 0;
    while c < body {
        let xs = &x[c..c + LANES];
        for r in 0..4 {
            prefetch(rows[r].as_ptr().wrapping_add(c + ahead));
            let ra = &rows[r][c..c + LANES];
            for l in 0..LANES {
                acc[r][l] += ra[l] * xs[l];
            }
        }
        c += LANES;
    }
    let mut out = [T::zero(); 4];
    for r in 0..4 {
        let mut tail = T::zero();
        for k in body..n {
            tail += rows[r][k] * x[k];
        }
        out[r] = reduce_lanes(acc[r]) + tail;
    }
    out
}

/// Rows `row0..row0+out.len()` of `op(A)*x` where rows of `op(A)` are contiguous.
#[inline(always)]
fn rows_dot<T: Scalar>(a: &[T], lda: usize, x: &[T], row0: usize, out: &mut [T]) {
    let n = x.len();
    let row = |r: usize| &a[(row0 + r) * lda..(row0 + r) * lda + n];
    let mut groups = out.chunks_exact_mut(4);
    let mut r = 0;
    for g in &mut groups {
        g.copy_from_slice(&dot4_lanes([row(r), row(r + 1), row(r + 2), row(r + 3)], x));
        r += 4;
    }
    for o in groups.into_remainder() {
        *o = dot_lanes(row(r), x);
        r += 1;
    }
}

/// Rows `row0..row0+out.len()` of `op(A)*x` where columns of `op(A)` are contiguous.
/// Each output keeps a left-to-right sum over `k`.
#[inline(always)]
fn rows_axpy<T: Scalar>(a: &[T], lda: usize, x: &[T], row0: usize, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    let len = out.len();
    for (k, &xk) in x.iter().enumerate() {
        let col = &a[k * lda + row0..k * lda + row0 + len];
        for (o, &v) in out.iter_mut().zip(col) {
            *o += v * xk;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::*;
    use std::arch::x86_64::*;

    /// `f32` row dots with one 8-wide register per row. Lane `l` sums the
    /// elements `k = l (mod 8)` in order and the lanes are folded pairwise
    /// (4, 2, 1), exactly like [`dot_lanes`], so results are bit-identical.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn rows_dot_f32(
        a: &[f32],
        lda: usize,
        x: &[f32],
        row0: usize,
        out: &mut [f32],
    ) {
        let n = x.len();
        let body = n / LANES * LANES;
        let ahead = PREFETCH_BYTES / 4;
        let row = |r: usize| &a[(row0 + r) * lda..(row0 + r) * lda + n];
        let mut r = 0;
        while r < out.len() {
            let group = (out.len() - r).min(4);
            let rows = [
                row(r),
                row(r + (1 % group)),
                row(r + (2 % group)),
                row(r + (3 % group)),
            ];
            let mut acc = [_mm256_setzero_ps(); 4];
            let mut c = 0;
            while c < body {
                let xv = _mm256_loadu_ps(x.as_ptr().add(c));
                for g in 0..4 {
                    if c % (2 * LANES) == 0 {
                        _mm_prefetch(
                            rows[g].as_ptr().wrapping_add(c + ahead) as *const i8,
                            _MM_HINT_T0,
                        );
                    }
                    let av = _mm256_loadu_ps(rows[g].as_ptr().add(c));
                    acc[g] = _mm256_add_ps(acc[g], _mm256_mul_ps(av, xv));
                }
                c += LANES;
            }
            for g in 0..group {
                let s4 = _mm_add_ps(
                    _mm256_castps256_ps128(acc[g]),
                    _mm256_extractf128_ps(acc[g], 1),
                );
                let s2 = _mm_add_ps(s4, _mm_movehl_ps(s4, s4));
                let s1 = _mm_add_ss(s2, _mm_shuffle_ps(s2, s2, 1));
                let mut tail = 0.0f32;
                for k in body..n {
                    tail += rows[g][k] * x[k];
                }
                out[r + g] = _mm_cvtss_f32(s1) + tail;
            }
            r += group;
        }
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn rows_axpy_avx2<T: Scalar>(
        a: &[T],
        lda: usize,
        x: &[T],
        row0: usize,
        out: &mut [T],
    ) {
        rows_axpy(a, lda, x, row0, out)
    }

    pub(super) fn has_avx2() -> bool {
        use std::sync::OnceLock;
        static AVX2: OnceLock<bool> = OnceLock::new();
        *AVX2.get_or_init(|| std::arch::is_x86_feature_detected!("avx2"))
    }
}

// Instruction-set dispatch only changes register width; the operation order
// is fixed by the source, so results are identical on every path.
fn block_dot<T: Scalar>(a: &[T], lda: usize, x: &[T], row0: usize, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && simd::has_avx2() {
        // SAFETY: T is f32 (checked above), so the casts are identity
        // reinterpretations; the AVX2 feature was detected at runtime.
        unsafe {
            let cast = |s: &[T]| std::slice::from_raw_parts(s.as_ptr() as *const f32, s.len());
            let out = std::slice::from_raw_parts_mut(out.as_mut_ptr() as *mut f32, out.len());
            return simd::rows_dot_f32(cast(a), lda, cast(x), row0, out);
        }
    }
    rows_dot(a, lda, x, row0, out)
}

fn block_axpy<T: Scalar>(a: &[T], lda: usize, x: &[T], row0: usize, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if simd::has_avx2() {
        // SAFETY: the feature was detected at runtime.
        return unsafe { simd::rows_axpy_avx2(a, lda, x, row0, out) };
    }
    rows_axpy(a, lda, x, row0, out)
}

/// Blocked, vectorization-friendly GEMV. Output rows are split across
/// workers; each row's summation order is fixed, so results do not depend on
/// the number of threads.
pub fn gemv_opt<T: Scalar>(
    a: &[T],
    x: &[T],
    y: &mut [T],
    p: &GemvParams<T>,
) -> Result<(), KernelError> {
    p.validate(a.len(), x.len(), y.len())?;
    let (rs, cs) = p.op_strides();
    let rows = p.y_len();
    let cols = p.x_len();

    let xs: std::borrow::Cow<'_, [T]> = if p.incx == 1 {
        std::borrow::Cow::Borrowed(&x[..cols])
    } else {
        std::borrow::Cow::Owned((0..cols).map(|k| x[k * p.incx]).collect())
    };
    let contiguous_rows = cs == 1;
    let block = if contiguous_rows {
        ROW_BLOCK
    } else {
        COL_BLOCK
    };

    let mut prod = vec![T::zero(); rows];
    let work = |(b, out): (usize, &mut [T])| {
        let row0 = b * block;
        if contiguous_rows {
            block_dot(a, rs, &xs, row0, out)
        } else {
            block_axpy(a, p.lda, &xs, row0, out)
        }
    };
    if rows * cols >= PARALLEL_MIN_WORK {
        prod.par_chunks_mut(block).enumerate().for_each(work);
    } else {
        prod.chunks_mut(block).enumerate().for_each(work);
    }

    for (i, &s) in prod.iter().enumerate() {
        let yi = &mut y[i * p.incy];
        *yi = p.beta * *yi + p.alpha * s;
    }
    Ok(())
}

/// GEMV straight from the compressed form.
///
/// For each output row the packed indices are decoded into a reused scratch
/// row through the codebook, then dotted with `x` in the same order as
/// [`gemv_naive`]. Only row-major, untransposed calls whose shape matches the
/// matrix take this path; anything else is dequantized and handed to
/// [`gemv_naive`], so every layout keeps the reference summation order.
pub fn gemv_sketch(
    q: &QuantizedMatrix,
    x: &[f32],
    y: &mut [f32],
    p: &GemvParams<f32>,
) -> Result<(), KernelError> {
    let direct = p.layout == Layout::RowMajor
        && p.trans == Transpose::NoTrans
        && p.m == q.rows()
        && p.n == q.cols()
        && p.lda == q.cols();
    if !direct {
        let dense = quantizer::dequantize(q);
        return gemv_naive(dense.as_slice(), x, y, p);
    }
    p.validate(q.rows() * q.cols(), x.len(), y.len())?;

    let n = q.cols();
    let mut prod = vec![0.0f32; q.rows()];
    let decode_block = |(b, out): (usize, &mut [f32])| -> Result<(), KernelError> {
        let mut codes = vec![0u8; n];
        let mut row = vec![0.0f32; n];
        for (r, o) in out.iter_mut().enumerate() {
            q.decode_row(b * ROW_BLOCK + r, &mut codes, &mut row)?;
            let mut sum = 0.0f32;
            for (k, &w) in row.iter().enumerate() {
                sum += w * x[k * p.incx];
            }
            *o = sum;
        }
        Ok(())
    };
    if q.rows() * n >= PARALLEL_MIN_WORK {
        prod.par_chunks_mut(ROW_BLOCK)
            .enumerate()
            .try_for_each(decode_block)?;
    } else {
        prod.chunks_mut(ROW_BLOCK)
            .enumerate()
            .try_for_each(decode_block)?;
    }
    for (i, &s) in prod.iter().enumerate() {
        let yi = &mut y[i * p.incy];
        *yi = p.beta * *yi + p.alpha * s;
    }
    Ok(())
}

/// Deterministic output-error bounds for a GEMV on a quantized matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<T> {
    pub epsilon: T,
    pub x_l1_norm: T,
    /// `epsilon * ||x||_1`, bounds `||dy||_inf`.
    pub inf_bound: T,
    /// `sqrt(m) * epsilon * ||x||_1`, bounds `||dy||_2`.
    pub l2_bound: T,
    pub threshold_exceeded: bool,
}

/// Bounds the deviation of an `m`-row GEMV whose matrix entries are off by at
/// most `epsilon`. Values are rounded upward so they stay valid bounds.
pub fn error_bound<T: Scalar>(epsilon: T, x: &[T], m: usize) -> BoundReport<T> {
    let l1: f64 = x.iter().map(|v| v.to_f64_exact().abs()).sum();
    let inf = epsilon.to_f64_exact() * l1;
    let l2 = (m as f64).sqrt() * inf;
    BoundReport {
        epsilon,
        x_l1_norm: T::from_f64_upward(l1),
        inf_bound: T::from_f64_upward(inf),
        l2_bound: T::from_f64_upward(l2),
        threshold_exceeded: false,
    }
}

/// Evaluates the bound for the input at hand and flags it against `threshold`.
pub fn runtime_bound_check(q: &QuantizedMatrix, x: &[f32], threshold: f32) -> BoundReport<f32> {
    let mut report = error_bound(q.epsilon(), x, q.rows());
    report.threshold_exceeded = report.inf_bound > threshold;
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEpsilon {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub bit_width: u8,
    pub epsilon: f32,
}

/// Per-layer epsilon table, in model order.
pub fn epsilon_report<'a, I>(layers: I) -> Vec<LayerEpsilon>
where
    I: IntoIterator<Item = (&'a str, &'a QuantizedMatrix)>,
{
    layers
        .into_iter()
        .map(|(name, q)| LayerEpsilon {
            layer: name.to_string(),
            rows: q.rows(),
            cols: q.cols(),
            bit_width: q.bit_width(),
            epsilon: q.epsilon(),
        })
        .collect()
}
