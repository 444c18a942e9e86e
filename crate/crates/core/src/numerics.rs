//! Dense row-major matrices and the stable-softmax primitives that all
//! attention code is built on.
//!
//! Everything here is generic over the element type via [`Scalar`], so the
//! same code paths run in single precision (benchmarks) and double precision
//! (verification). All functions are pure and safe to call concurrently.

use crate::error::{Error, Result};

/// Floating-point element type for the whole build.
///
/// Implemented for `f32` and `f64`. Verification paths instantiate with
/// `f64`; benchmark paths default to `f32`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Human-readable precision name used in logs ("single" / "double").
    const PRECISION: &'static str;

    /// Size of one element in bytes, for the cost model.
    const BYTES: usize;

    /// Lossy conversion from `f64`; the canonical way seeded generators and
    /// constants enter the element type.
    fn from_f64_lossy(x: f64) -> Self;

    /// Blocked general matrix multiply: `c = alpha * a · b` (`beta = 0`),
    /// with explicit row/column strides per operand.
    ///
    /// Delegates to `matrixmultiply`'s packed kernels. Per output element the
    /// accumulation over `k` follows the library's fixed blocked ascending-k
    /// order, so results are bit-reproducible across runs on one machine and
    /// independent of how callers partition output rows.
    ///
    /// # Safety
    /// Pointers must cover `m x k`, `k x n`, and `m x n` elements under the
    /// given strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
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
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const PRECISION: &'static str = "single";
    const BYTES: usize = 4;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    #[inline]
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
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const PRECISION: &'static str = "double";
    const BYTES: usize = 8;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    #[inline]
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
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

/// Dense row-major matrix. Zero-row and zero-column matrices are legal and
/// represent empty query or key sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from row-major data; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::from_rows",
                detail: format!(
                    "data length {} != {} rows x {} cols",
                    data.len(),
                    rows,
                    cols
                ),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Matrix product `self · other`.
    ///
    /// Accumulation order per output element is the fixed blocked ascending-k
    /// order of [`Scalar::gemm`], giving bit-identical results across runs on
    /// the same machine.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "{}x{} cannot multiply {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        if self.rows == 0 || other.cols == 0 || self.cols == 0 {
            return Ok(out);
        }
        unsafe {
            T::gemm(
                self.rows,
                self.cols,
                other.cols,
                T::one(),
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                out.data.as_mut_ptr(),
                other.cols as isize,
                1,
            );
        }
        Ok(out)
    }
}

/// Row-wise stable softmax paired with each row's log-sum-exp.
///
/// For every row: `lse[i] = log sum_j exp(scores[i][j])`, computed by
/// subtracting the row maximum before exponentiation, and
/// `probs[i][j] = exp(scores[i][j] - lse[i])`. Each output row sums to 1.
pub fn row_softmax_with_lse<T: Scalar>(scores: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
    if scores.cols() == 0 {
        return Err(Error::EmptySoftmax);
    }
    let mut probs = scores.clone();
    let mut lse = vec![T::zero(); scores.rows()];
    softmax_rows_in_place(probs.data_mut(), scores.rows(), scores.cols(), &mut lse);
    Ok((probs, lse))
}

/// In-place softmax over `rows` rows of length `cols`, writing each row's
/// log-sum-exp into `lse`. Rows consisting entirely of `-inf` (fully masked)
/// become all-zero with `lse = -inf`.
///
/// This is the shared kernel behind [`row_softmax_with_lse`] and the
/// attention score paths; per-row work is independent, so callers may
/// partition rows across threads without changing results.
pub(crate) fn softmax_rows_in_place<T: Scalar>(
    data: &mut [T],
    rows: usize,
    cols: usize,
    lse: &mut [T],
) {
    debug_assert_eq!(data.len(), rows * cols);
    debug_assert_eq!(lse.len(), rows);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        if max == T::neg_infinity() {
            for x in row.iter_mut() {
                *x = T::zero();
            }
            lse[r] = T::neg_infinity();
            continue;
        }
        let mut sum = T::zero();
        for x in row.iter_mut() {
            let e = (*x - max).exp();
            *x = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x = *x * inv;
        }
        lse[r] = max + sum.ln();
    }
}

/// `log(exp(a) + exp(b))` via the max shift. `-inf` is the additive
/// identity, so empty-segment sentinels pass through unchanged.
#[inline]
pub fn log_add_exp_scalar<T: Scalar>(a: T, b: T) -> T {
    let m = if a > b { a } else { b };
    if m == T::neg_infinity() {
        return T::neg_infinity();
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Elementwise [`log_add_exp_scalar`] over two equal-length vectors.
pub fn log_add_exp<T: Scalar>(a: &[T], b: &[T]) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "log_add_exp",
            detail: format!("lengths {} and {} differ", a.len(), b.len()),
        });
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| log_add_exp_scalar(x, y))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Naive triple-loop product in f64, independent of the gemm path.
    fn matmul_oracle(a: &Matrix<f32>, b: &Matrix<f32>) -> Vec<f64> {
        let mut out = vec![0.0f64; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for k in 0..a.cols() {
                    acc += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-1.0f64..1.0) as f32)
            .collect();
        Matrix::from_rows(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let id = Matrix::identity(2);
        let c = id.matmul(&a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_one_by_one() {
        let a = Matrix::from_rows(1, 1, vec![2.0f32]).unwrap();
        let b = Matrix::from_rows(1, 1, vec![3.0f32]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = seeded_matrix(5, 4, 7);
        let b = seeded_matrix(4, 3, 8);
        let c = a.matmul(&b).unwrap();
        let expect = matmul_oracle(&a, &b);
        for (got, want) in c.data().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(*got as f64, *want, epsilon = 1e-6);
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn matmul_zero_rows_is_legal() {
        let a = Matrix::<f32>::zeros(0, 3);
        let b = Matrix::<f32>::zeros(3, 2);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.rows(), 0);
        assert_eq!(c.cols(), 2);
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_rows(1, 2, vec![0.0f64, 0.0]).unwrap();
        let (p, lse) = row_softmax_with_lse(&m).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(0, 1), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(lse[0], 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_singleton_row() {
        let m = Matrix::from_rows(1, 1, vec![3.25f64]).unwrap();
        let (p, lse) = row_softmax_with_lse(&m).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lse[0], 3.25, epsilon = 1e-12);
    }

    #[test]
    fn softmax_large_scores_do_not_overflow() {
        let m = Matrix::from_rows(1, 2, vec![1000.0f64, 1000.0]).unwrap();
        let (p, lse) = row_softmax_with_lse(&m).unwrap();
        assert_abs_diff_eq!(p.get(0, 0), 0.5, epsilon = 1e-12);
        // Exact shift identity: lse = 1000 + ln 2.
        assert_abs_diff_eq!(lse[0], 1000.0 + 2.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn softmax_empty_row_is_an_error() {
        let m = Matrix::<f64>::zeros(1, 0);
        assert!(matches!(row_softmax_with_lse(&m), Err(Error::EmptySoftmax)));
    }

    #[test]
    #[allow(clippy::approx_constant)] // 1.4142 is a fixed test input, not a stand-in for sqrt(2)
    fn log_add_exp_basics() {
        assert_abs_diff_eq!(
            log_add_exp_scalar(0.0f64, 0.0),
            2.0f64.ln(),
            epsilon = 1e-12
        );
        // Empty identity.
        assert_eq!(log_add_exp_scalar(1.5f64, f64::NEG_INFINITY), 1.5);
        assert_eq!(
            log_add_exp_scalar(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
        // Frozen from the direct double-precision evaluation of
        // log(e^1.4142 + 1).
        assert_abs_diff_eq!(
            log_add_exp_scalar(1.4142f64, 0.0),
            (1.4142f64.exp() + 1.0).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            log_add_exp_scalar(1.4142f64, 0.0),
            1.6318243739938245,
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_add_exp_length_mismatch() {
        assert!(log_add_exp(&[0.0f64], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..12) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let m = Matrix::from_rows(rows, cols, data).unwrap();
            let (p, lse) = row_softmax_with_lse(&m).unwrap();
            for (r, row_lse) in lse.iter().enumerate() {
                let sum: f64 = p.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                // exp(lse) recovers the unshifted denominator for bounded scores.
                let denom: f64 = m.row(r).iter().map(|x| x.exp()).sum();
                prop_assert!((row_lse.exp() - denom).abs() / denom < 1e-6);
            }
        }

        #[test]
        fn log_add_exp_commutative_and_associative(
            a in -30.0f64..30.0,
            b in -30.0f64..30.0,
            c in -30.0f64..30.0,
        ) {
            let ab = log_add_exp_scalar(a, b);
            let ba = log_add_exp_scalar(b, a);
            prop_assert!((ab - ba).abs() < 1e-12);
            let left = log_add_exp_scalar(log_add_exp_scalar(a, b), c);
            let right = log_add_exp_scalar(a, log_add_exp_scalar(b, c));
            prop_assert!((left - right).abs() < 1e-12);
        }

        // Entries are drawn from [-0.1, 0.1) so the 1e-6 absolute tolerance
        // has headroom over inherent f32 rounding at k = 64.
        #[test]
        fn matmul_matches_oracle_up_to_64(seed in 0u64..50, m in 1usize..=64, k in 1usize..=64, n in 1usize..=64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |rows: usize, cols: usize| {
                let data = (0..rows * cols)
                    .map(|_| rng.gen_range(-0.1f64..0.1) as f32)
                    .collect();
                Matrix::from_rows(rows, cols, data).unwrap()
            };
            let a = draw(m, k);
            let b = draw(k, n);
            let c = a.matmul(&b).unwrap();
            let expect = matmul_oracle(&a, &b);
            for (got, want) in c.data().iter().zip(expect.iter()) {
                prop_assert!((*got as f64 - *want).abs() < 1e-6);
            }
        }
    }
}
