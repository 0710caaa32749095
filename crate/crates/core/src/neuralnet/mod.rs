//! A small CPU convolutional network engine: convolution, max-pooling, fully
//! connected, ReLU, inverted dropout and a two-way softmax with cross-entropy
//! loss, trained by mini-batch SGD with momentum.
//!
//! Convolutions run as im2col followed by a GEMM. Every layer works on a batch
//! stored sample-major as `B × C × H × W`.

mod engine;
mod spec;
mod train;
mod weights;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

pub use engine::{forward, loss_and_gradients, Mode, Model};
pub use spec::{shape_len, Layer, LayerPlan, NetworkSpec, Shape};
pub use train::{train, train_with_progress, Dataset, InMemoryDataset, Precision, TrainConfig, TrainOutcome};
pub use weights::{Gradients, LayerParams, NetworkWeights, FORMAT_VERSION};

/// Floating-point element type the engine can run in.
pub trait Scalar: num_traits::Float + AddAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// True when no element is infinite or NaN.
    fn all_finite(values: &[Self]) -> bool;

    /// `C = alpha·A·B + beta·C` for strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn all_finite(values: &[f64]) -> bool {
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        values
            .chunks(512)
            .all(|c| !c.iter().fold(false, |bad, v| bad | (v.to_bits() & EXP == EXP)))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn all_finite(values: &[f32]) -> bool {
        const EXP: u32 = 0x7f80_0000;
        values
            .chunks(512)
            .all(|c| !c.iter().fold(false, |bad, v| bad | (v.to_bits() & EXP == EXP)))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` matrix.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c (m×n, row-major) = a (m×k) · b (k×n) + beta · c`.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut [T]) {
    assert!(a.covers(m, k) && b.covers(k, n) && (m == 0 || n == 0 || m * n <= c.len()));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every strided access inside the slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
