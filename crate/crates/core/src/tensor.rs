//! Dense row-major matrices and the row-level kernels shared by the batched
//! tape forward pass and the incremental decoder.
//!
//! Every kernel computes each output row from its own input row with a fixed
//! accumulation order, so a row's result never depends on other rows. The
//! causality guarantees of the model rest on this.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols} needs {} values", rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row_vector(v: &[T]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// First element; convenient for 1×1 loss values.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len());
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect() }
    }
}

/// `out += x · w` for one row; `w` is `x.len() × out.len()`.
#[inline]
pub fn vecmat_acc<T: Scalar>(x: &[T], w: &Mat<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), w.rows());
    debug_assert_eq!(out.len(), w.cols());
    for (p, &xp) in x.iter().enumerate() {
        axpy(xp, w.row(p), out);
    }
}

const BR: usize = 4;
const BC: usize = 16;

/// `out += a · w` with `a` given as `m` rows of length `k` and `out` as `m`
/// rows of length `w.cols()`. Every output element sums its products in the
/// same order as [`vecmat_acc`], so both give identical results.
pub fn gemm_acc<T: Scalar>(a: &[T], m: usize, w: &Mat<T>, out: &mut [T]) {
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(out.len(), m * n);
    let wd = w.data();
    let mut i0 = 0;
    while i0 + BR <= m {
        let mut j0 = 0;
        while j0 + BC <= n {
            let mut acc = [[T::zero(); BC]; BR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + BC]);
            }
            for p in 0..k {
                let wrow: &[T; BC] = wd[p * n + j0..p * n + j0 + BC].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let x = a[(i0 + r) * k + p];
                    for j in 0..BC {
                        row[j] += x * wrow[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + BC].copy_from_slice(row);
            }
            j0 += BC;
        }
        if j0 < n {
            for r in i0..i0 + BR {
                let o = &mut out[r * n + j0..(r + 1) * n];
                for p in 0..k {
                    axpy(a[r * k + p], &wd[p * n + j0..(p + 1) * n], o);
                }
            }
        }
        i0 += BR;
    }
    for r in i0..m {
        vecmat_acc(&a[r * k..(r + 1) * k], w, &mut out[r * n..(r + 1) * n]);
    }
}

/// `y += a * x`.
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// One row of an affine map: `out = x · w (+ b)`.
#[inline]
pub fn linear_row<T: Scalar>(x: &[T], w: &Mat<T>, b: Option<&[T]>, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    vecmat_acc(x, w, out);
    if let Some(b) = b {
        for (o, &bi) in out.iter_mut().zip(b) {
            *o += bi;
        }
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dims");
    let mut out = Mat::zeros(a.rows(), b.cols());
    gemm_acc(a.data(), a.rows(), b, out.data_mut());
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_nt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols(), b.cols(), "matmul_nt inner dims");
    matmul(a, &b.transpose())
}

/// `out += aᵀ · b` where `a` is `k×m`, `b` is `k×n`, `out` is `m×n`.
pub fn matmul_tn_acc<T: Scalar>(a: &Mat<T>, b: &Mat<T>, out: &mut Mat<T>) {
    assert_eq!(a.rows(), b.rows(), "matmul_tn inner dims");
    assert_eq!(out.shape(), (a.cols(), b.cols()));
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    let mut i0 = 0;
    while i0 + BR <= m {
        let mut j0 = 0;
        while j0 + BC <= n {
            let mut acc = [[T::zero(); BC]; BR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&od[(i0 + r) * n + j0..(i0 + r) * n + j0 + BC]);
            }
            for p in 0..k {
                let brow: &[T; BC] = bd[p * n + j0..p * n + j0 + BC].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let x = ad[p * m + i0 + r];
                    for j in 0..BC {
                        row[j] += x * brow[j];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                od[(i0 + r) * n + j0..(i0 + r) * n + j0 + BC].copy_from_slice(row);
            }
            j0 += BC;
        }
        if j0 < n {
            for p in 0..k {
                for i in i0..i0 + BR {
                    axpy(ad[p * m + i], &bd[p * n + j0..(p + 1) * n], &mut od[i * n + j0..(i + 1) * n]);
                }
            }
        }
        i0 += BR;
    }
    for p in 0..k {
        for i in i0..m {
            axpy(ad[p * m + i], &bd[p * n..(p + 1) * n], &mut od[i * n..(i + 1) * n]);
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row layer-norm; returns `(mean, rstd)` and writes the normalized row
/// (before gain/bias) into `xhat`.
#[inline]
pub fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], xhat: &mut [T], out: &mut [T]) -> T {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let mut var = T::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; saturates cleanly at ±1.
#[inline]
fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + tanh_exp(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = tanh_exp(inner);
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Row-strided view of one attention head inside a `rows × d_model` buffer.
#[derive(Clone, Copy)]
pub struct HeadView<'a, T> {
    pub buf: &'a [T],
    pub stride: usize,
    pub offset: usize,
    pub head_dim: usize,
}

impl<'a, T> HeadView<'a, T> {
    #[inline]
    pub fn row(&self, j: usize) -> &'a [T] {
        let s = j * self.stride + self.offset;
        &self.buf[s..s + self.head_dim]
    }
}

/// Causal attention for query row `i` of one head: reads key/value rows
/// `0..=i` only, writes the probabilities into `probs[..=i]` and the weighted
/// value sum into `out`.
#[inline]
pub fn attend_row<T: Scalar>(
    q: &[T],
    i: usize,
    keys: HeadView<'_, T>,
    values: HeadView<'_, T>,
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    let mut max = T::neg_infinity();
    for j in 0..=i {
        let s = dot(q, keys.row(j)) * scale;
        probs[j] = s;
        if s > max {
            max = s;
        }
    }
    let mut sum = T::zero();
    for p in probs.iter_mut().take(i + 1) {
        *p = (*p - max).exp();
        sum += *p;
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for j in 0..=i {
        probs[j] /= sum;
        axpy(probs[j], values.row(j), out);
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Natural-log softmax of one row.
pub fn log_softmax_row<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

pub fn softmax_row<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        let bt = b.transpose();
        assert_eq!(matmul_nt(&a, &bt), c);
        let mut d = Mat::zeros(3, 3);
        matmul_tn_acc(&a, &a, &mut d);
        assert_eq!(d.get(0, 0), 17.0);
        assert_eq!(d.get(2, 1), 3.0 * 2.0 + 6.0 * 5.0);
    }

    #[test]
    fn argmax_lowest_tie() {
        assert_eq!(argmax(&[0.0f64, 1.0, 1.0, 0.5]), 1);
        assert_eq!(argmax(&[0.0f64; 8]), 0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let l = log_softmax_row(&[0.0f64; 8]);
        for v in l {
            assert!((v + 8f64.ln()).abs() < 1e-15);
        }
    }
}
