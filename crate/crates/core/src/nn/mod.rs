//! Minimal CPU network engine: convolution via im2col + GEMM, batch
//! normalization, residual blocks, linear layers and hand-written backward
//! passes. Activations use a channel-major `C x N x H x W` layout so that a
//! convolution's GEMM output is already the next layer's input.

mod layers;

pub use layers::{BasicBlock, BatchNorm2d, Conv2d, ConvBlock, Linear, MaxPool2d};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point element type of a network.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `C = alpha * A B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices.
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

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `C[m x n] = alpha * op(A) * op(B) + beta * C`.
///
/// `A` is stored `m x k` (or `k x m` when `trans_a`), `B` is `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: sizes are checked above; `c` is uniquely borrowed.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Channel-major activation `C x N x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature<F> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Feature<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![F::zero(); c * n * h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }
}

/// Row-major `rows x cols` matrix (one row per example).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Weight decay applies to weights only, not biases or normalization.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub velocity: Vec<F>,
    pub frozen: bool,
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: ParamKind, value: Vec<F>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name: name.into(),
            shape,
            kind,
            value,
            grad: vec![F::zero(); n],
            velocity: vec![F::zero(); n],
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Non-trainable state (normalization running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<F> {
    pub name: String,
    pub value: Vec<F>,
}

/// Anything owning parameters and buffers.
pub trait HasParams<F: Real> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;
    fn buffers(&self) -> Vec<&Buffer<F>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        Vec::new()
    }
}

/// A differentiable map between channel-major activations.
pub trait Layer<F: Real>: HasParams<F> {
    /// Training-mode forward pass; keeps whatever `backward` needs.
    fn forward_train(&mut self, x: Feature<F>) -> Feature<F>;
    /// Inference forward pass; never mutates.
    fn forward_eval(&self, x: &Feature<F>) -> Feature<F>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: Feature<F>) -> Feature<F>;
    /// Freezes batch-normalization layers (running statistics, fixed affine).
    fn set_norm_frozen(&mut self, _frozen: bool) {}
}

/// In-place ReLU returning the activation mask.
pub(crate) fn relu_in_place<F: Real>(data: &mut [F]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            let on = *v > F::zero();
            if !on {
                *v = F::zero();
            }
            on
        })
        .collect()
}

pub(crate) fn relu_backward<F: Real>(grad: &mut [F], mask: &[bool]) {
    for (g, &on) in grad.iter_mut().zip(mask) {
        if !on {
            *g = F::zero();
        }
    }
}

/// Global average pool to an `N x C` matrix.
pub(crate) fn global_avg_pool<F: Real>(x: &Feature<F>) -> Matrix<F> {
    let hw = x.h * x.w;
    let scale = F::one() / F::from_usize(hw).expect("size");
    let mut out = Matrix::zeros(x.n, x.c);
    for c in 0..x.c {
        for n in 0..x.n {
            let start = (c * x.n + n) * hw;
            let s: F = x.data[start..start + hw].iter().copied().sum();
            out.data[n * x.c + c] = s * scale;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<F: Real>(
    grad: &Matrix<F>,
    c: usize,
    n: usize,
    h: usize,
    w: usize,
) -> Feature<F> {
    let hw = h * w;
    let scale = F::one() / F::from_usize(hw).expect("size");
    let mut out = Feature::zeros(c, n, h, w);
    for ci in 0..c {
        for ni in 0..n {
            let g = grad.data[ni * c + ci] * scale;
            let start = (ci * n + ni) * hw;
            out.data[start..start + hw].iter_mut().for_each(|v| *v = g);
        }
    }
    out
}

/// Mean softmax cross-entropy; returns `(loss, d loss / d logits, correct)`.
pub(crate) fn softmax_cross_entropy<F: Real>(
    logits: &Matrix<F>,
    labels: &[usize],
) -> (F, Matrix<F>, usize) {
    assert_eq!(logits.rows, labels.len());
    let n = F::from_usize(logits.rows).expect("size");
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = F::zero();
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        loss += total.ln() - (row[label] - max);
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, F::neg_infinity()), |best, (j, &v)| {
                if v > best.1 {
                    (j, v)
                } else {
                    best
                }
            })
            .0;
        if argmax == label {
            correct += 1;
        }
        for (j, e) in exps.iter().enumerate() {
            let p = *e / total;
            let target = if j == label { F::one() } else { F::zero() };
            grad.data[i * logits.cols + j] = (p - target) / n;
        }
    }
    (loss / n, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(false, false, m, n, k, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let e: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
        // transposed operands
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(true, true, m, n, k, 1.0, &at, &bt, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Matrix {
            rows: 2,
            cols: 3,
            data: vec![0.0f64; 6],
        };
        let (loss, grad, _) = softmax_cross_entropy(&logits, &[0, 2]);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((grad.data[0] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
    }
}
