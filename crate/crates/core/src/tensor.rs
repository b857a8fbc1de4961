//! Dense row-major matrices and the numeric kernels shared by the training
//! graph and the incremental decoder.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;

/// Floating-point element type. Training runs in `f32`; the gradient checks
/// also run the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a @ b + beta * c` with explicit strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("float conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover the strided
                // m x k, k x n and m x n views; checked by the Matrix wrappers.
                unsafe {
                    $f(
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn push_row(&mut self, row: &[T]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }
}

/// `a @ b`
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut c = Matrix::zeros(a.rows, b.cols);
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        T::zero(),
        &mut c.data,
        c.cols as isize,
        1,
    );
    c
}

/// `acc += a @ b^T`
pub fn matmul_nt_acc<T: Real>(a: &Matrix<T>, b: &Matrix<T>, acc: &mut Matrix<T>) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(acc.shape(), (a.rows, b.rows));
    T::gemm(
        a.rows,
        a.cols,
        b.rows,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        T::one(),
        &mut acc.data,
        acc.cols as isize,
        1,
    );
}

/// `acc += a^T @ b`
pub fn matmul_tn_acc<T: Real>(a: &Matrix<T>, b: &Matrix<T>, acc: &mut Matrix<T>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(acc.shape(), (a.cols, b.cols));
    T::gemm(
        a.cols,
        a.rows,
        b.cols,
        T::one(),
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        T::one(),
        &mut acc.data,
        acc.cols as isize,
        1,
    );
}

/// `x @ w + b` with `b` a single row broadcast over all rows.
pub fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut y = matmul(x, w);
    add_row_inplace(&mut y, b);
    y
}

pub fn add_row_inplace<T: Real>(x: &mut Matrix<T>, b: &Matrix<T>) {
    assert_eq!(b.rows, 1);
    assert_eq!(b.cols, x.cols);
    for r in 0..x.rows {
        for (v, &bb) in x.row_mut(r).iter_mut().zip(&b.data) {
            *v = *v + bb;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalisation. Returns `(y, xhat, rstd)`; the last two are
/// what the backward pass needs.
pub fn layer_norm<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Vec<T>) {
    let n = x.cols;
    let nf = T::from_usize(n).unwrap();
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut y = Matrix::zeros(x.rows, n);
    let mut xhat = Matrix::zeros(x.rows, n);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        let xh = xhat.row_mut(r);
        for c in 0..n {
            xh[c] = (row[c] - mean) * rstd;
        }
        let yr = &mut y.data[r * n..(r + 1) * n];
        for c in 0..n {
            yr[c] = xhat.data[r * n + c] * gain.data[c] + bias.data[c];
        }
    }
    (y, xhat, rstds)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + three * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Numerically stable log-softmax of one row, written into `out`.
pub fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::neg_infinity());
        return;
    }
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub fn log_softmax<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let c = x.cols;
        log_softmax_row(x.row(r), &mut out.data[r * c..(r + 1) * c]);
    }
    out
}

/// Fixed sinusoidal positional encoding for position `pos`, written into `out`.
pub fn sinusoid_row<T: Real>(pos: usize, out: &mut [T]) {
    let d = out.len();
    for i in 0..d {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        out[i] = T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
}

/// Scaled dot-product attention for one query row over keys `keys[k0..k1]`
/// within one head's column slice. Writes the probabilities into `probs`
/// (length `k1 - k0`) and accumulates the weighted values into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Real>(
    q: &[T],
    keys: &Matrix<T>,
    values: &Matrix<T>,
    k0: usize,
    k1: usize,
    col0: usize,
    head_dim: usize,
    key_valid: Option<&[bool]>,
    probs: &mut [T],
    out: &mut [T],
) {
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut max = T::neg_infinity();
    for (j, k) in (k0..k1).enumerate() {
        if key_valid.is_some_and(|v| !v[k]) {
            probs[j] = T::neg_infinity();
            continue;
        }
        let krow = &keys.row(k)[col0..col0 + head_dim];
        let mut s = T::zero();
        for t in 0..head_dim {
            s = s + q[col0 + t] * krow[t];
        }
        s = s * scale;
        probs[j] = s;
        if s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        probs.iter_mut().for_each(|p| *p = T::zero());
        return;
    }
    let mut sum = T::zero();
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        sum = sum + *p;
    }
    for p in probs.iter_mut() {
        *p = *p / sum;
    }
    for (j, k) in (k0..k1).enumerate() {
        let p = probs[j];
        if p == T::zero() {
            continue;
        }
        let vrow = &values.row(k)[col0..col0 + head_dim];
        for t in 0..head_dim {
            out[col0 + t] = out[col0 + t] + p * vrow[t];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_accumulators() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut acc = Matrix::zeros(2, 2);
        matmul_nt_acc(&a, &a, &mut acc);
        assert_eq!(acc.data, vec![14.0, 32.0, 32.0, 77.0]);
        let mut acc = Matrix::zeros(3, 3);
        matmul_tn_acc(&a, &a, &mut acc);
        assert_eq!(acc.data[0], 17.0);
        assert_eq!(acc.data[4], 29.0);
    }

    #[test]
    fn log_softmax_normalises() {
        let x = Matrix::from_vec(1, 4, vec![0.3f64, -1.0, 2.0, 0.0]);
        let y = log_softmax(&x);
        let s: f64 = y.data.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
